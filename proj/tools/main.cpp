// Command-line entry point: data generation, training runs, checkpoint
// evaluation and probing, corpus n-gram reports, and grid sweeps.
//
// Exit codes: 0 success, 2 bad flags or config, 3 I/O or data format,
// 4 numeric abort, 5 content-hash mismatch, 6 sweep child failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iclforge/binio.hpp"
#include "iclforge/errors.hpp"
#include "iclforge/experiment.hpp"
#include "iclforge/ngram.hpp"
#include "iclforge/probe.hpp"
#include "iclforge/trainloop.hpp"

namespace fs = std::filesystem;
using namespace iclforge;

namespace {

void write_text(const std::string& text, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("cannot write: " + path);
}

std::string read_text(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

std::string kind_name(StoreKind kind) {
    return kind == StoreKind::raster ? "raster" : "vector";
}

// ---- gen-data ----

struct GenDataArgs {
    std::string out;
    std::string import_dir;
    std::string kind = "gaussian";
    SyntheticSpec synth;
};

int cmd_gen_data(const GenDataArgs& a) {
    ExemplarStore store;
    if (!a.import_dir.empty()) {
        store = import_pgm_dir(a.import_dir);
    } else {
        SyntheticSpec spec = a.synth;
        if (a.kind == "gaussian" || a.kind == "vector") spec.kind = StoreKind::vector;
        else if (a.kind == "raster" || a.kind == "glyphs") spec.kind = StoreKind::raster;
        else throw ConfigError("--kind must be gaussian|vector|raster|glyphs, got " + a.kind);
        store = gen_synthetic_store(spec);
    }
    save_store(store, a.out);
    std::printf("classes=%zu exemplars=%zu kind=%s hash=%s path=%s\n", store.classes.size(),
                store.total_exemplars(), kind_name(store.kind).c_str(),
                hex64(store_hash(store)).c_str(), a.out.c_str());
    return 0;
}

// ---- train ----

struct TrainArgs {
    std::string config;
    std::string out_override;
    int threads = 0;
    bool resume = false;  // resume is automatic; flag documents intent
    bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
    ExperimentConfig cfg = load_experiment_config(a.config);
    if (a.quiet) cfg.quiet = true;
    const ExperimentData data = prepare_experiment(cfg);
    const RunSpec spec = make_run_spec(cfg, data, resolve_threads(a.threads), a.out_override);
    train_run(spec);
    std::printf("run_dir=%s store_hash=%s metrics=%s/metrics.csv\n", spec.run_dir.c_str(),
                hex64(spec.store_hash).c_str(), spec.run_dir.c_str());
    return 0;
}

// ---- eval / probe shared plumbing ----

std::uint64_t manifest_store_hash(const std::string& run_dir) {
    const std::string text = read_text(run_dir + "/manifest.txt");
    const std::string key = "store_hash=";
    const std::size_t at = text.find(key);
    if (at == std::string::npos)
        throw ConfigError("manifest in " + run_dir + " has no store_hash line");
    std::uint64_t hash = 0;
    for (std::size_t i = at + key.size(); i < text.size() && text[i] != '\n'; ++i) {
        const char c = text[i];
        const int digit = c >= '0' && c <= '9'   ? c - '0'
                          : c >= 'a' && c <= 'f' ? c - 'a' + 10
                                                 : -1;
        if (digit < 0) throw ConfigError("manifest in " + run_dir + " has a bad store_hash");
        hash = hash * 16 + static_cast<std::uint64_t>(digit);
    }
    return hash;
}

void check_store_hash(const std::string& run_dir, std::uint64_t have) {
    const std::uint64_t want = manifest_store_hash(run_dir);
    if (want != have)
        throw HashMismatchError("store hash " + hex64(have) + " does not match manifest " +
                                hex64(want) + " in " + run_dir);
}

std::vector<std::uint64_t> pick_seeds(const ExperimentConfig& cfg, std::uint64_t flag_seed) {
    if (flag_seed != 0) return {flag_seed};
    return cfg.train.seeds;
}

struct CkptEntry {
    long step = 0;
    std::string path;
};

std::vector<CkptEntry> list_checkpoints(const std::string& seed_dir) {
    std::vector<CkptEntry> out;
    if (!fs::is_directory(seed_dir)) throw IoError("no run directory: " + seed_dir);
    for (const auto& entry : fs::directory_iterator(seed_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("ckpt_", 0) != 0 || name.size() < 10 ||
            name.substr(name.size() - 4) != ".bin")
            continue;
        out.push_back({std::stol(name.substr(5, name.size() - 9)), entry.path().string()});
    }
    std::sort(out.begin(), out.end(),
              [](const CkptEntry& x, const CkptEntry& y) { return x.step < y.step; });
    if (out.empty()) throw IoError("no checkpoints under " + seed_dir);
    return out;
}

CkptEntry pick_checkpoint(const std::string& seed_dir, long step) {
    const auto all = list_checkpoints(seed_dir);
    if (step <= 0) return all.back();
    for (const CkptEntry& e : all)
        if (e.step == step) return e;
    throw IoError("no checkpoint at step " + std::to_string(step) + " under " + seed_dir);
}

// ---- eval ----

struct EvalArgs {
    std::string config;
    std::string run_dir;
    long ckpt = 0;  // 0 = latest
    std::uint64_t seed = 0;
    std::vector<std::string> tasks;  // suite descriptors; empty = config [eval]
    std::string suite_file;          // presampled EPS1 suite
    bool full_vocab = false;
    int threads = 0;
};

int cmd_eval(const EvalArgs& a) {
    const ExperimentConfig cfg = load_experiment_config(a.config);
    const ExemplarStore store = build_store(cfg);
    const std::uint64_t hash = store_hash(store);
    check_store_hash(a.run_dir, hash);
    const int threads = resolve_threads(a.threads);

    std::vector<EvalSuite> suites;
    if (!a.suite_file.empty()) {
        EvalSuite suite;
        suite.episodes = load_suite(a.suite_file, store);
        if (suite.episodes.empty()) throw ConfigError("suite file holds no episodes");
        suite.k_way = suite.episodes.front().kway;
        suite.split = fs::path(a.suite_file).stem().string();
        suites.push_back(std::move(suite));
    } else if (!a.tasks.empty()) {
        for (std::size_t i = 0; i < a.tasks.size(); ++i)
            suites.push_back(build_suite(store, parse_suite_spec(a.tasks[i]), cfg.eval_seed,
                                         static_cast<std::uint64_t>(i), cfg.train.model.pairs));
    } else {
        for (std::size_t i = 0; i < cfg.eval_suites.size(); ++i)
            suites.push_back(build_suite(store, cfg.eval_suites[i], cfg.eval_seed,
                                         static_cast<std::uint64_t>(i), cfg.train.model.pairs));
    }
    if (suites.empty()) throw ConfigError("nothing to evaluate: no --task, --suite or [eval] suites");

    for (std::uint64_t seed : pick_seeds(cfg, a.seed)) {
        const std::string seed_dir = a.run_dir + "/seed" + std::to_string(seed);
        const CkptEntry ckpt = pick_checkpoint(seed_dir, a.ckpt);
        const Checkpoint loaded = load_checkpoint(ckpt.path);
        const std::string csv_path = seed_dir + "/metrics.csv";
        MetricLog log = MetricLog::from_csv(read_text(csv_path));
        for (const EvalSuite& suite : suites) {
            const double acc =
                evaluate_suite(loaded.model, store, suite, a.full_vocab || cfg.train.icl_full_vocab,
                               threads);
            log.append(ckpt.step, seed, "post-" + suite.split, acc);
            std::printf("seed=%llu ckpt=%ld split=post-%s acc=%s\n",
                        static_cast<unsigned long long>(seed), ckpt.step, suite.split.c_str(),
                        format_float(acc).c_str());
        }
        write_text(log.to_csv(), csv_path);
    }
    return 0;
}

// ---- probe ----

struct ProbeArgs {
    std::string config;
    std::string run_dir;
    std::uint64_t seed = 0;
    std::string task;  // override [probe] suite descriptor
    int stride = 0;    // override [probe] stride
    int trace_episodes = -1;
    int threads = 0;
};

int cmd_probe(const ProbeArgs& a) {
    const ExperimentConfig cfg = load_experiment_config(a.config);
    const ExemplarStore store = build_store(cfg);
    check_store_hash(a.run_dir, store_hash(store));
    const int threads = resolve_threads(a.threads);

    SuiteSpec spec = cfg.probe_suite;
    if (!a.task.empty()) spec = parse_suite_spec(a.task);
    if (spec.episodes < 1)
        throw ConfigError("no probe suite: set [probe] suite or pass --task");
    const EvalSuite suite =
        build_suite(store, spec, cfg.probe_seed, 1000, cfg.train.model.pairs);
    const int stride = a.stride > 0 ? a.stride : cfg.probe_stride;
    const int trace_episodes = a.trace_episodes >= 0 ? a.trace_episodes : cfg.probe_trace_episodes;

    for (std::uint64_t seed : pick_seeds(cfg, a.seed)) {
        const std::string seed_dir = a.run_dir + "/seed" + std::to_string(seed);
        const auto all = list_checkpoints(seed_dir);
        std::vector<CkptEntry> picked;
        for (std::size_t i = 0; i < all.size(); i += static_cast<std::size_t>(stride))
            picked.push_back(all[i]);
        if (picked.back().step != all.back().step) picked.push_back(all.back());

        MetricLog log;
        std::vector<std::string> paths;
        for (const CkptEntry& e : picked) {
            const Checkpoint loaded = load_checkpoint(e.path);
            const ProbeSummary s = probe_suite(loaded.model, store, suite.episodes, threads);
            append_probe_rows(log, e.step, seed, s);
            paths.push_back(e.path);
        }
        const std::string probe_path = seed_dir + "/probe.csv";
        write_text(log.to_csv(), probe_path);

        const HeadScoreSeries series =
            prev_token_score_series(paths, store, suite.episodes, threads);
        std::string csv = "step,layer,head,label_image_score\n";
        for (std::size_t i = 0; i < series.steps.size(); ++i)
            for (int l = 0; l < series.layers; ++l)
                for (int h = 0; h < series.heads; ++h)
                    csv += std::to_string(series.steps[i]) + ',' + std::to_string(l) + ',' +
                           std::to_string(h) + ',' + format_float(series.label_image[i].at(l, h)) +
                           '\n';
        const std::string scores_path = seed_dir + "/scores.csv";
        write_text(csv, scores_path);

        if (trace_episodes > 0) {
            const Checkpoint last = load_checkpoint(picked.back().path);
            Workspace ws(last.model.config);
            const int m = std::min<int>(trace_episodes, static_cast<int>(suite.episodes.size()));
            for (int i = 0; i < m; ++i) {
                const AttentionTrace t = capture_trace(last.model, store, suite.episodes[static_cast<std::size_t>(i)], ws);
                export_trace(t, seed_dir + "/trace_step" + std::to_string(picked.back().step) +
                                    "_ep" + std::to_string(i));
            }
        }
        std::printf("seed=%llu checkpoints=%zu probe=%s scores=%s\n",
                    static_cast<unsigned long long>(seed), picked.size(), probe_path.c_str(),
                    scores_path.c_str());
    }
    return 0;
}

// ---- ngram ----

struct NgramArgs {
    std::string in;
    std::string format = "binary";
    int window = 2048;
    std::string ns = "1,2,3,5,10,15,20";
    bool sliding = false;
    std::string out = "-";
    int threads = 0;
};

int cmd_ngram(const NgramArgs& a) {
    TokenFormat fmt;
    if (a.format == "binary") fmt = TokenFormat::binary_u32_le;
    else if (a.format == "text") fmt = TokenFormat::decimal_text;
    else throw ConfigError("--format must be binary or text, got " + a.format);
    std::vector<int> ns;
    for (const std::string& piece : [&] {
             std::vector<std::string> out;
             std::size_t start = 0;
             while (start <= a.ns.size()) {
                 const std::size_t comma = a.ns.find(',', start);
                 out.push_back(a.ns.substr(
                     start, comma == std::string::npos ? std::string::npos : comma - start));
                 if (comma == std::string::npos) break;
                 start = comma + 1;
             }
             return out;
         }()) {
        try {
            ns.push_back(std::stoi(piece));
        } catch (const std::exception&) {
            throw ConfigError("--ns has a bad entry \"" + piece + "\"");
        }
    }
    const TokenStream stream = read_token_stream(a.in, fmt);
    const NGramReport report =
        ngram_report(stream, a.window, ns, a.sliding, resolve_threads(a.threads));
    const std::string csv = ngram_csv(report);
    if (a.out == "-") {
        std::fputs(csv.c_str(), stdout);
    } else {
        write_text(csv, a.out);
        std::printf("report=%s tokens=%zu\n", a.out.c_str(), stream.ids.size());
    }
    return 0;
}

// ---- sweep ----

struct SweepArgs {
    std::string config;
    int threads = 0;
    bool quiet = false;
};

int cmd_sweep(const SweepArgs& a) {
    ExperimentConfig base = load_experiment_config(a.config);
    if (a.quiet) base.quiet = true;
    const std::vector<SweepChild> children = sweep_children(base);
    const int threads = resolve_threads(a.threads);
    fs::create_directories(base.out_dir);

    std::string summary = "child,status,detail\n";
    std::string comparison = "child,axis,value,step,split,mean,std\n";
    int failures = 0;
    for (std::size_t ci = 0; ci < children.size(); ++ci) {
        const SweepChild& child = children[ci];
        std::string status = "ok", detail;
        try {
            const ExperimentData data = prepare_experiment(child.config);
            const RunSpec spec = make_run_spec(child.config, data, threads);
            train_run(spec);
            const std::string agg = read_text(spec.run_dir + "/aggregate.csv");
            const std::string prefix = std::to_string(child.config.train.total_steps) + ",";
            std::size_t pos = agg.find('\n');
            while (pos != std::string::npos && pos + 1 < agg.size()) {
                const std::size_t next = agg.find('\n', pos + 1);
                const std::string row = agg.substr(pos + 1, next == std::string::npos
                                                                ? std::string::npos
                                                                : next - pos - 1);
                if (row.rfind(prefix, 0) == 0)
                    comparison += child.name + ',' + base.sweep_axis + ',' +
                                  base.sweep_values[ci] + ',' + row + '\n';
                pos = next;
            }
        } catch (const std::exception& e) {
            status = "failed";
            detail = e.what();
            ++failures;
        }
        summary += child.name + ',' + status + ',' + detail + '\n';
        std::printf("child=%s status=%s\n", child.name.c_str(), status.c_str());
        if (status == "failed") std::fprintf(stderr, "child %s: %s\n", child.name.c_str(), detail.c_str());
    }
    write_text(summary, base.out_dir + "/sweep_summary.csv");
    write_text(comparison, base.out_dir + "/comparison.csv");
    std::printf("summary=%s/sweep_summary.csv comparison=%s/comparison.csv\n",
                base.out_dir.c_str(), base.out_dir.c_str());
    return failures > 0 ? 6 : 0;
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const HashMismatchError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 5;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 4;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        // config, recipe, eval, shape: user-fixable setup problems
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"episodic-sequence transformer lab: stores, training runs, probes, n-grams"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* cmd_gen = app.add_subcommand("gen-data", "generate or import an exemplar store");
    cmd_gen->add_option("--out", gen.out, "output store path")->required();
    auto* import_opt = cmd_gen->add_option("--import", gen.import_dir,
                                           "import a directory tree of P5 graymaps");
    cmd_gen->add_option("--kind", gen.kind, "gaussian|vector|raster|glyphs")->excludes(import_opt);
    cmd_gen->add_option("--classes", gen.synth.n_classes, "class count");
    cmd_gen->add_option("--per-class", gen.synth.per_class, "exemplars per class");
    cmd_gen->add_option("--dim", gen.synth.dim, "vector dimension");
    cmd_gen->add_option("--raster", gen.synth.raster, "raster side length");
    cmd_gen->add_option("--noise", gen.synth.noise, "within-class noise scale");
    cmd_gen->add_option("--seed", gen.synth.seed, "generator seed");

    TrainArgs train;
    auto* cmd_tr = app.add_subcommand("train", "run a training experiment from a config file");
    cmd_tr->add_option("--config", train.config, "experiment config file")->required();
    cmd_tr->add_option("--out", train.out_override, "override [output] dir");
    cmd_tr->add_option("--threads", train.threads, "worker threads (ICLFORGE_THREADS caps)");
    cmd_tr->add_flag("--resume", train.resume, "continue an interrupted run (also automatic)");
    cmd_tr->add_flag("--quiet", train.quiet, "suppress progress lines on stderr");

    EvalArgs ev;
    auto* cmd_ev = app.add_subcommand("eval", "evaluate a checkpoint on frozen suites");
    cmd_ev->add_option("--config", ev.config, "experiment config file")->required();
    cmd_ev->add_option("--run", ev.run_dir, "run directory")->required();
    cmd_ev->add_option("--ckpt", ev.ckpt, "checkpoint step (default: latest)");
    cmd_ev->add_option("--seed", ev.seed, "single seed (default: all config seeds)");
    cmd_ev->add_option("--task", ev.tasks, "suite descriptor KxN:episodes or iwl:episodes");
    cmd_ev->add_option("--suite", ev.suite_file, "presampled suite file");
    cmd_ev->add_flag("--full-vocab", ev.full_vocab, "unrestricted argmax on few-shot tasks");
    cmd_ev->add_option("--threads", ev.threads, "worker threads");

    ProbeArgs pr;
    auto* cmd_pr = app.add_subcommand("probe", "attention metrics over a run's checkpoints");
    cmd_pr->add_option("--config", pr.config, "experiment config file")->required();
    cmd_pr->add_option("--run", pr.run_dir, "run directory")->required();
    cmd_pr->add_option("--seed", pr.seed, "single seed (default: all config seeds)");
    cmd_pr->add_option("--task", pr.task, "probe suite descriptor override");
    cmd_pr->add_option("--stride", pr.stride, "probe every n-th checkpoint");
    cmd_pr->add_option("--trace-episodes", pr.trace_episodes,
                       "export attention traces for the first m episodes");
    cmd_pr->add_option("--threads", pr.threads, "worker threads");

    NgramArgs ng;
    auto* cmd_ng = app.add_subcommand("ngram", "n-gram repetition report over a token stream");
    cmd_ng->add_option("--in", ng.in, "token file")->required();
    cmd_ng->add_option("--format", ng.format, "binary (u32 little-endian) or text (decimal)");
    cmd_ng->add_option("--window", ng.window, "window size in tokens");
    cmd_ng->add_option("--ns", ng.ns, "comma-separated n-gram lengths");
    cmd_ng->add_flag("--sliding", ng.sliding, "slide the window by one token instead of blocking");
    cmd_ng->add_option("--out", ng.out, "output CSV path, - for stdout");
    cmd_ng->add_option("--threads", ng.threads, "worker threads");

    SweepArgs sw;
    auto* cmd_sw = app.add_subcommand("sweep", "one child run per [sweep] grid point");
    cmd_sw->add_option("--config", sw.config, "experiment config file with a [sweep] section")
        ->required();
    cmd_sw->add_option("--threads", sw.threads, "worker threads");
    cmd_sw->add_flag("--quiet", sw.quiet, "suppress progress lines on stderr");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (cmd_gen->parsed()) return guarded([&] { return cmd_gen_data(gen); });
    if (cmd_tr->parsed()) return guarded([&] { return cmd_train(train); });
    if (cmd_ev->parsed()) return guarded([&] { return cmd_eval(ev); });
    if (cmd_pr->parsed()) return guarded([&] { return cmd_probe(pr); });
    if (cmd_ng->parsed()) return guarded([&] { return cmd_ngram(ng); });
    if (cmd_sw->parsed()) return guarded([&] { return cmd_sweep(sw); });
    return 2;
}
