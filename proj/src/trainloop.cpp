#include "iclforge/trainloop.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>
#include <unordered_map>

#include "iclforge/adam.hpp"
#include "iclforge/binio.hpp"

namespace fs = std::filesystem;

namespace iclforge {

void TrainConfig::validate() const {
    if (total_steps < 1) throw ConfigError("total-steps must be positive");
    if (warmup_steps < 1) throw ConfigError("warmup-steps must be positive");
    if (warmup_steps > total_steps) throw ConfigError("warmup-steps exceeds total-steps");
    if (!(max_lr > 0.0)) throw ConfigError("max-lr must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip-norm must be positive");
    if (eval_every < 1) throw ConfigError("eval-every must be positive");
    if (seeds.empty()) throw ConfigError("at least one seed required");
    if (mix.batch_size < 1) throw ConfigError("batch-size must be positive");
    if (mix.p_bursty < 0.0 || mix.p_bursty > 1.0) throw ConfigError("p-bursty outside [0,1]");
    if (mix.p_label_swap < 0.0 || mix.p_label_swap > 1.0)
        throw ConfigError("p-label-swap outside [0,1]");
    model.validate();
    recipe.validate(model.pairs);
}

double lr_at(long step, const TrainConfig& cfg) {
    if (step <= 0) return 0.0;
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(cfg.warmup_steps);
    return cfg.max_lr * std::min(s / w, std::sqrt(w / s));
}

// ---- metric log ----

namespace {
std::string row_key(std::uint64_t seed, const std::string& split) {
    return std::to_string(seed) + "|" + split;
}
}  // namespace

void MetricLog::append(long step, std::uint64_t seed, const std::string& split, double value) {
    if (!rows.empty()) {
        // monotonicity is almost always violated at the tail, so scan back
        for (auto it = rows.rbegin(); it != rows.rend(); ++it)
            if (it->seed == seed && it->split == split) {
                if (it->step > step)
                    throw ConfigError("metric log: step " + std::to_string(step) + " for " +
                                      row_key(seed, split) + " regresses below " +
                                      std::to_string(it->step));
                break;
            }
    }
    rows.push_back({step, seed, split, value});
}

std::string MetricLog::to_csv() const {
    std::string out = "step,seed,split,value\n";
    for (const MetricRow& r : rows) {
        out += std::to_string(r.step);
        out += ',';
        out += std::to_string(r.seed);
        out += ',';
        out += r.split;
        out += ',';
        out += format_float(r.value);
        out += '\n';
    }
    return out;
}

namespace {

MetricRow parse_csv_row(const std::string& line, std::uint64_t line_no) {
    MetricRow row;
    std::size_t a = line.find(','), b = line.find(',', a + 1), c = line.find(',', b + 1);
    if (a == std::string::npos || b == std::string::npos || c == std::string::npos)
        throw FormatError("metric csv: expected 4 columns", line_no);
    const auto parse_long = [&](std::size_t from, std::size_t to, const char* what) {
        long v = 0;
        auto res = std::from_chars(line.data() + from, line.data() + to, v);
        if (res.ec != std::errc() || res.ptr != line.data() + to)
            throw FormatError(std::string("metric csv: bad ") + what, line_no);
        return v;
    };
    row.step = parse_long(0, a, "step");
    row.seed = static_cast<std::uint64_t>(parse_long(a + 1, b, "seed"));
    row.split = line.substr(b + 1, c - b - 1);
    if (row.split.empty()) throw FormatError("metric csv: empty split", line_no);
    double v = 0.0;
    auto res = std::from_chars(line.data() + c + 1, line.data() + line.size(), v);
    if (res.ec != std::errc() || res.ptr != line.data() + line.size())
        throw FormatError("metric csv: bad value", line_no);
    row.value = v;
    return row;
}

}  // namespace

MetricLog MetricLog::from_csv(const std::string& text) {
    MetricLog log;
    std::size_t pos = 0;
    std::uint64_t line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) throw FormatError("metric csv: unterminated line", line_no);
        const std::string line = text.substr(pos, end - pos);
        if (line_no == 0) {
            if (line != "step,seed,split,value")
                throw FormatError("metric csv: bad header", line_no);
        } else {
            const MetricRow row = parse_csv_row(line, line_no);
            log.append(row.step, row.seed, row.split, row.value);
        }
        pos = end + 1;
        ++line_no;
    }
    return log;
}

// ---- evaluation ----

void parallel_chunks(int n, int threads, const std::function<void(int, int, int)>& fn) {
    if (threads <= 1 || n <= 1) {
        fn(0, 0, n);
        return;
    }
    const int use = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(use));
    for (int c = 0; c < use; ++c) {
        const int begin = static_cast<int>(static_cast<long>(n) * c / use);
        const int end = static_cast<int>(static_cast<long>(n) * (c + 1) / use);
        pool.emplace_back(fn, c, begin, end);
    }
    for (auto& t : pool) t.join();
}

namespace {

int predict(const float* logits, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (logits[j] > logits[best]) best = j;
    return best;
}

}  // namespace

double evaluate_icl(const TransformerModel& m, const ExemplarStore& store,
                    const std::vector<Episode>& episodes, int k_way, bool full_vocab,
                    int threads) {
    if (episodes.empty()) throw EvalError("empty evaluation suite");
    if (k_way < 2 || k_way > m.config.label_vocab)
        throw EvalError("k-way " + std::to_string(k_way) + " outside [2, vocab]");
    for (const Episode& ep : episodes) {
        if (ep.variant != Variant::icl_eval || ep.kway != k_way)
            throw EvalError("suite episode is not " + std::to_string(k_way) + "-way icl format");
        if (ep.target < 0 || ep.target >= k_way)
            throw EvalError("icl target outside the remapped label range");
    }
    const int n = static_cast<int>(episodes.size());
    const int chunks = threads <= 1 ? 1 : std::min(threads, n);
    std::vector<long> hits(static_cast<std::size_t>(chunks), 0);
    parallel_chunks(n, threads, [&](int chunk, int begin, int end) {
        Workspace ws(m.config);
        FloatVec logits(static_cast<std::size_t>(m.config.label_vocab));
        long h = 0;
        for (int i = begin; i < end; ++i) {
            const Episode& ep = episodes[static_cast<std::size_t>(i)];
            query_logits(m, store, ep, ws, logits.data());
            const int pred = predict(logits.data(), full_vocab ? m.config.label_vocab : k_way);
            h += pred == ep.target;
        }
        hits[static_cast<std::size_t>(chunk)] = h;
    });
    long total = 0;
    for (long h : hits) total += h;
    return static_cast<double>(total) / static_cast<double>(n);
}

double evaluate_iwl(const TransformerModel& m, const ExemplarStore& store,
                    const std::vector<Episode>& episodes, int threads) {
    if (episodes.empty()) throw EvalError("empty evaluation suite");
    for (const Episode& ep : episodes) {
        if (ep.variant != Variant::iwl_eval)
            throw EvalError("suite episode is not iwl format");
        for (const ContextItem& it : ep.context)
            if (it.ref.class_id == ep.query_class)
                throw EvalError("iwl episode leaks the query class into its context");
        if (ep.target < 0 || ep.target >= m.config.label_vocab)
            throw EvalError("iwl target outside the label vocabulary");
    }
    const int n = static_cast<int>(episodes.size());
    const int chunks = threads <= 1 ? 1 : std::min(threads, n);
    std::vector<long> hits(static_cast<std::size_t>(chunks), 0);
    parallel_chunks(n, threads, [&](int chunk, int begin, int end) {
        Workspace ws(m.config);
        FloatVec logits(static_cast<std::size_t>(m.config.label_vocab));
        long h = 0;
        for (int i = begin; i < end; ++i) {
            query_logits(m, store, episodes[static_cast<std::size_t>(i)], ws, logits.data());
            h += predict(logits.data(), m.config.label_vocab) ==
                 episodes[static_cast<std::size_t>(i)].target;
        }
        hits[static_cast<std::size_t>(chunk)] = h;
    });
    long total = 0;
    for (long h : hits) total += h;
    return static_cast<double>(total) / static_cast<double>(n);
}

double evaluate_suite(const TransformerModel& m, const ExemplarStore& store, const EvalSuite& suite,
                      bool full_vocab, int threads) {
    return suite.k_way > 0 ? evaluate_icl(m, store, suite.episodes, suite.k_way, full_vocab, threads)
                           : evaluate_iwl(m, store, suite.episodes, threads);
}

// ---- training ----

namespace {

void zero_model(TransformerModel& g) {
    for (auto& r : param_refs(g)) r.tensor->zero();
}

void add_model(TransformerModel& into, const TransformerModel& from) {
    auto a = param_refs(into);
    auto b = param_refs(const_cast<TransformerModel&>(from));
    for (std::size_t i = 0; i < a.size(); ++i) {
        float* dst = a[i].tensor->ptr();
        const float* src = b[i].tensor->ptr();
        const std::size_t n = a[i].tensor->numel();
        for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
}

void scale_model(TransformerModel& g, float s) {
    for (auto& r : param_refs(g))
        for (float& v : r.tensor->data) v *= s;
}

}  // namespace

double train_step(TransformerModel& m, AdamState& opt, const ExemplarStore& store,
                  const TrainConfig& cfg, const std::vector<Episode>& batch, long step,
                  std::vector<TransformerModel>& grad_bufs, std::vector<Workspace>& ws,
                  std::uint64_t seed, int threads) {
    const int B = cfg.mix.batch_size;
    if (static_cast<int>(batch.size()) != B)
        throw ConfigError("batch size " + std::to_string(batch.size()) + " does not match config " +
                          std::to_string(B));
    if (static_cast<int>(grad_bufs.size()) < B || ws.empty())
        throw ConfigError("train_step needs one gradient buffer per episode and a workspace");

    std::vector<double> losses(static_cast<std::size_t>(B), 0.0);
    std::vector<std::string> fails(static_cast<std::size_t>(std::max(1, threads)));
    parallel_chunks(B, threads, [&](int chunk, int begin, int end) {
        Workspace& w = ws[static_cast<std::size_t>(chunk) % ws.size()];
        for (int i = begin; i < end; ++i) {
            zero_model(grad_bufs[static_cast<std::size_t>(i)]);
            try {
                losses[static_cast<std::size_t>(i)] = episode_loss_grad(
                    m, store, batch[static_cast<std::size_t>(i)], grad_bufs[static_cast<std::size_t>(i)], w);
            } catch (const NumericError& e) {
                fails[static_cast<std::size_t>(chunk)] =
                    std::string(e.what()) + " (step " + std::to_string(step) + ", seed " +
                    std::to_string(seed) + ", batch slot " + std::to_string(i) + ", query class " +
                    std::to_string(batch[static_cast<std::size_t>(i)].query_class) + ")";
                return;
            }
        }
    });
    for (const std::string& f : fails)
        if (!f.empty()) throw NumericError(f);

    // reduce per-episode buffers in slot order: the result is identical for
    // any thread count
    for (int i = 1; i < B; ++i) add_model(grad_bufs[0], grad_bufs[static_cast<std::size_t>(i)]);
    scale_model(grad_bufs[0], 1.0f / static_cast<float>(B));

    auto params = param_refs(m);
    auto grads = param_refs(grad_bufs[0]);
    std::vector<Tensor*> pv, gm;
    pv.reserve(params.size());
    gm.reserve(grads.size());
    for (auto& r : params) pv.push_back(r.tensor);
    for (auto& r : grads) gm.push_back(r.tensor);
    const std::vector<const Tensor*> gv(gm.begin(), gm.end());

    const double norm = global_grad_norm(gv);
    if (!std::isfinite(norm))
        throw NumericError("non-finite gradient norm (step " + std::to_string(step) + ", seed " +
                           std::to_string(seed) + ")");
    clip_global_norm(gm, cfg.clip_norm);
    adam_step(pv, gv, opt, static_cast<float>(lr_at(step, cfg)), AdamConfig{});

    double sum = 0.0;
    for (double l : losses) sum += l;
    return sum / static_cast<double>(B);
}

// ---- runs ----

namespace {

std::vector<long> eval_points(const TrainConfig& cfg) {
    std::vector<long> pts{0};
    for (long t = cfg.eval_every; t < cfg.total_steps; t += cfg.eval_every) pts.push_back(t);
    pts.push_back(cfg.total_steps);
    return pts;
}

void save_atomic(const TransformerModel& m, const AdamState* opt, long step, const fs::path& path) {
    const fs::path tmp = path.string() + ".tmp";
    save_checkpoint(m, opt, step, tmp.string());
    fs::rename(tmp, path);
}

void write_text_atomic(const std::string& text, const fs::path& path) {
    const fs::path tmp = path.string() + ".tmp";
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + tmp.string());
    out << text;
    out.close();
    if (!out) throw IoError("write failed: " + tmp.string());
    fs::rename(tmp, path);
}

std::string embedder_name(EmbedderKind k) {
    return k == EmbedderKind::conv_raster ? "raster" : "vector";
}

}  // namespace

std::string manifest_text(const RunSpec& spec) {
    const TrainConfig& c = spec.config;
    std::string s = "format=iclforge-run-v1\n";
    s += "store_hash=" + hex64(spec.store_hash) + "\n";
    s += "model.layers=" + std::to_string(c.model.layers) + "\n";
    s += "model.heads=" + std::to_string(c.model.heads) + "\n";
    s += "model.embed_dim=" + std::to_string(c.model.embed_dim) + "\n";
    s += "model.label_vocab=" + std::to_string(c.model.label_vocab) + "\n";
    s += "model.pairs=" + std::to_string(c.model.pairs) + "\n";
    s += "model.embedder=" + embedder_name(c.model.embedder) + "\n";
    s += "model.input_dim=" + std::to_string(c.model.input_dim) + "\n";
    s += "model.input_h=" + std::to_string(c.model.input_h) + "\n";
    s += "model.input_w=" + std::to_string(c.model.input_w) + "\n";
    s += "model.conv_channels=" + std::to_string(c.model.conv_channels[0]) + "," +
         std::to_string(c.model.conv_channels[1]) + "," + std::to_string(c.model.conv_channels[2]) +
         "\n";
    s += "model.init_std=" + format_float(c.model.init_std) + "\n";
    const AdamConfig adam;
    s += "adam.beta1=" + format_float(adam.beta1) + "\n";
    s += "adam.beta2=" + format_float(adam.beta2) + "\n";
    s += "adam.eps=" + format_float(adam.eps) + "\n";
    s += "train.total_steps=" + std::to_string(c.total_steps) + "\n";
    s += "train.warmup_steps=" + std::to_string(c.warmup_steps) + "\n";
    s += "train.max_lr=" + format_float(c.max_lr) + "\n";
    s += "train.clip_norm=" + format_float(c.clip_norm) + "\n";
    s += "train.batch_size=" + std::to_string(c.mix.batch_size) + "\n";
    s += "train.eval_every=" + std::to_string(c.eval_every) + "\n";
    s += "train.seeds=";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(c.seeds[i]);
    }
    s += "\n";
    s += "train.icl_full_vocab=" + std::to_string(c.icl_full_vocab ? 1 : 0) + "\n";
    s += "mix.p_bursty=" + format_float(c.mix.p_bursty) + "\n";
    s += "mix.p_label_swap=" + format_float(c.mix.p_label_swap) + "\n";
    s += std::string("recipe.variant=") +
         (c.recipe.variant == Variant::bursty ? "bursty" : "standard") + "\n";
    s += "recipe.query_class_reps=" + std::to_string(c.recipe.query_class_reps) + "\n";
    s += "recipe.distractor_format=" + c.recipe.distractor_format + "\n";
    s += "recipe.inst_copy=" + std::to_string(c.recipe.inst_copy ? 1 : 0) + "\n";
    s += "recipe.inst_copy_prob=" + format_float(c.recipe.inst_copy_prob) + "\n";
    s += "zipf.coefficient=" + format_float(c.zipf.coefficient) + "\n";
    for (const EvalSuite& suite : spec.suites) {
        s += "suite." + suite.split + ".kway=" + std::to_string(suite.k_way) + "\n";
        s += "suite." + suite.split + ".count=" + std::to_string(suite.episodes.size()) + "\n";
        s += "suite." + suite.split + ".hash=" +
             hex64(suite_hash(suite.episodes, spec.store_hash)) + "\n";
    }
    return s;
}

MetricLog train_seed(const RunSpec& spec, std::uint64_t seed) {
    const TrainConfig& cfg = spec.config;
    cfg.validate();
    if (!spec.store) throw ConfigError("run spec has no store");
    for (const EvalSuite& s : spec.suites)
        if (s.split.empty() || s.split.find(',') != std::string::npos)
            throw ConfigError("suite split names must be non-empty and comma-free");

    const fs::path dir = fs::path(spec.run_dir) / ("seed" + std::to_string(seed));
    fs::create_directories(dir);
    const fs::path csv_path = dir / "metrics.csv";
    const fs::path last_path = dir / "last.bin";

    TransformerModel model = init_model(cfg.model, seed);
    AdamState opt = AdamState::init(param_views(model));
    long start = 0;
    MetricLog log;

    if (fs::exists(last_path) && fs::exists(csv_path)) {
        Checkpoint ck = load_checkpoint(last_path.string());
        if (!(ck.model.config == cfg.model))
            throw ConfigError("checkpoint in " + dir.string() + " was written by a different model config");
        if (!ck.has_opt) throw FormatError("resume checkpoint lacks optimizer state", 0);
        const auto bytes = read_file_bytes(csv_path.string());
        MetricLog prior = MetricLog::from_csv(std::string(bytes.begin(), bytes.end()));
        model = std::move(ck.model);
        opt = std::move(ck.opt);
        start = ck.step;
        for (const MetricRow& r : prior.rows)
            if (r.step <= start) log.rows.push_back(r);
    }

    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw IoError("cannot open for write: " + csv_path.string());
    csv << log.to_csv();
    csv.flush();

    const std::vector<long> points = eval_points(cfg);
    std::vector<Workspace> ws;
    const int workers = std::max(1, spec.threads);
    ws.reserve(static_cast<std::size_t>(workers));
    for (int i = 0; i < workers; ++i) ws.emplace_back(cfg.model);
    std::vector<TransformerModel> grad_bufs;
    grad_bufs.reserve(static_cast<std::size_t>(cfg.mix.batch_size));
    for (int i = 0; i < cfg.mix.batch_size; ++i) grad_bufs.push_back(zeros_like(model));

    const auto emit = [&](long step, const std::string& split, double value) {
        log.append(step, seed, split, value);
        csv << std::to_string(step) << ',' << std::to_string(seed) << ',' << split << ','
            << format_float(value) << '\n';
        if (!csv) throw IoError("metric write failed: " + csv_path.string());
    };
    const auto eval_block = [&](long step) {
        for (const EvalSuite& suite : spec.suites)
            emit(step, suite.split,
                 evaluate_suite(model, *spec.store, suite, cfg.icl_full_vocab, spec.threads));
        save_atomic(model, nullptr, step, dir / ("ckpt_" + std::to_string(step) + ".bin"));
        save_atomic(model, &opt, step, last_path);
        csv.flush();
        if (!spec.quiet) {
            std::string line = "seed " + std::to_string(seed) + " step " + std::to_string(step);
            for (auto it = log.rows.end() - static_cast<long>(spec.suites.size());
                 it != log.rows.end(); ++it)
                line += "  " + it->split + " " + format_float(it->value);
            std::fprintf(stderr, "%s\n", line.c_str());
        }
    };

    if (start == 0 && log.rows.empty()) eval_block(0);
    for (long t = start + 1; t <= cfg.total_steps; ++t) {
        const std::vector<Episode> batch = sample_training_batch(
            *spec.store, cfg.mix, cfg.recipe, cfg.model.pairs, seed, t, spec.table);
        const double loss =
            train_step(model, opt, *spec.store, cfg, batch, t, grad_bufs, ws, seed, spec.threads);
        emit(t, "train-loss", loss);
        if (std::binary_search(points.begin(), points.end(), t)) eval_block(t);
    }
    csv.flush();
    return log;
}

MetricLog train_run(const RunSpec& spec) {
    spec.config.validate();
    if (!spec.store) throw ConfigError("run spec has no store");
    fs::create_directories(spec.run_dir);

    const fs::path manifest_path = fs::path(spec.run_dir) / "manifest.txt";
    const std::string manifest = manifest_text(spec);
    if (fs::exists(manifest_path)) {
        const auto bytes = read_file_bytes(manifest_path.string());
        if (std::string(bytes.begin(), bytes.end()) != manifest)
            throw ConfigError("run directory " + spec.run_dir +
                              " was created with a different configuration");
    } else {
        write_text_atomic(manifest, manifest_path);
    }

    MetricLog merged;
    std::vector<MetricLog> per_seed;
    for (std::uint64_t seed : spec.config.seeds) {
        per_seed.push_back(train_seed(spec, seed));
        for (const MetricRow& r : per_seed.back().rows) merged.rows.push_back(r);
    }
    write_text_atomic(merged.to_csv(), fs::path(spec.run_dir) / "metrics.csv");
    write_text_atomic(aggregate_csv(aggregate_runs(per_seed)), fs::path(spec.run_dir) / "aggregate.csv");
    return merged;
}

std::vector<AggregateRow> aggregate_runs(const std::vector<MetricLog>& logs) {
    if (logs.empty()) throw EvalError("aggregate of zero logs");
    // split -> per-log step/value series, splits kept in first-seen order
    std::vector<std::string> split_order;
    std::map<std::string, std::vector<std::vector<std::pair<long, double>>>> series;
    for (std::size_t i = 0; i < logs.size(); ++i)
        for (const MetricRow& r : logs[i].rows) {
            auto it = series.find(r.split);
            if (it == series.end()) {
                split_order.push_back(r.split);
                it = series.emplace(r.split, std::vector<std::vector<std::pair<long, double>>>(
                                                 logs.size())).first;
            }
            it->second[i].emplace_back(r.step, r.value);
        }

    std::vector<AggregateRow> out;
    for (const std::string& split : split_order) {
        const auto& per_log = series[split];
        for (std::size_t i = 1; i < per_log.size(); ++i) {
            if (per_log[i].size() != per_log[0].size())
                throw EvalError("aggregation: split " + split + " has " +
                                std::to_string(per_log[i].size()) + " steps in log " +
                                std::to_string(i) + " vs " + std::to_string(per_log[0].size()) +
                                " in log 0");
            for (std::size_t j = 0; j < per_log[i].size(); ++j)
                if (per_log[i][j].first != per_log[0][j].first)
                    throw EvalError("aggregation: split " + split + " step grids differ between log 0 and log " +
                                    std::to_string(i));
        }
        for (std::size_t j = 0; j < per_log[0].size(); ++j) {
            double mean = 0.0;
            for (const auto& lg : per_log) mean += lg[j].second;
            mean /= static_cast<double>(per_log.size());
            double var = 0.0;
            for (const auto& lg : per_log) {
                const double d = lg[j].second - mean;
                var += d * d;
            }
            var /= static_cast<double>(per_log.size());
            out.push_back({per_log[0][j].first, split, mean, std::sqrt(var)});
        }
    }
    return out;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
    std::string out = "step,split,mean,std\n";
    for (const AggregateRow& r : rows) {
        out += std::to_string(r.step);
        out += ',';
        out += r.split;
        out += ',';
        out += format_float(r.mean);
        out += ',';
        out += format_float(r.std_dev);
        out += '\n';
    }
    return out;
}

}  // namespace iclforge
