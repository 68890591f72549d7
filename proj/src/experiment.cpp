#include "iclforge/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>

#include "iclforge/binio.hpp"
#include "iclforge/errors.hpp"

namespace iclforge {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

[[noreturn]] void bad_line(long line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        const std::string piece = trim(s.substr(start, comma == std::string::npos
                                                            ? std::string::npos
                                                            : comma - start));
        if (!piece.empty()) out.push_back(piece);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

template <typename T>
T num_value(const IniEntry& e) {
    T v{};
    const std::string s = trim(e.value);
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        bad_line(e.line, "key \"" + e.key + "\" needs a number, got \"" + e.value + "\"");
    return v;
}

double double_value(const IniEntry& e) {
    const std::string s = trim(e.value);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size())
        bad_line(e.line, "key \"" + e.key + "\" needs a number, got \"" + e.value + "\"");
    return v;
}

bool bool_value(const IniEntry& e) {
    const std::string s = trim(e.value);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    bad_line(e.line, "key \"" + e.key + "\" needs true or false, got \"" + e.value + "\"");
}

std::vector<std::uint64_t> u64_list_value(const IniEntry& e) {
    std::vector<std::uint64_t> out;
    for (const std::string& piece : split_list(e.value)) {
        std::uint64_t v = 0;
        auto res = std::from_chars(piece.data(), piece.data() + piece.size(), v);
        if (res.ec != std::errc() || res.ptr != piece.data() + piece.size())
            bad_line(e.line, "key \"" + e.key + "\" has a bad entry \"" + piece + "\"");
        out.push_back(v);
    }
    if (out.empty()) bad_line(e.line, "key \"" + e.key + "\" needs at least one entry");
    return out;
}

[[noreturn]] void unknown_key(const std::string& section, const IniEntry& e) {
    bad_line(e.line, "unknown key \"" + section + "." + e.key + "\"");
}

StoreKind kind_value(const IniEntry& e) {
    const std::string s = trim(e.value);
    if (s == "vector" || s == "gaussian") return StoreKind::vector;
    if (s == "raster" || s == "glyphs") return StoreKind::raster;
    bad_line(e.line, "kind must be vector|gaussian|raster|glyphs, got \"" + e.value + "\"");
}

void read_store(const IniSection& sec, ExperimentConfig& cfg) {
    for (const IniEntry& e : sec.entries) {
        if (e.key == "path") cfg.store_path = trim(e.value);
        else if (e.key == "import-dir") cfg.import_dir = trim(e.value);
        else if (e.key == "kind") cfg.synth.kind = kind_value(e);
        else if (e.key == "classes") cfg.synth.n_classes = num_value<int>(e);
        else if (e.key == "per-class") cfg.synth.per_class = num_value<int>(e);
        else if (e.key == "dim") cfg.synth.dim = num_value<int>(e);
        else if (e.key == "raster") cfg.synth.raster = num_value<int>(e);
        else if (e.key == "noise") cfg.synth.noise = static_cast<float>(double_value(e));
        else if (e.key == "seed") cfg.synth.seed = num_value<std::uint64_t>(e);
        else if (e.key == "novel") cfg.novel = num_value<int>(e);
        else if (e.key == "per-train") cfg.per_train = num_value<int>(e);
        else if (e.key == "per-val") cfg.per_val = num_value<int>(e);
        else if (e.key == "holdout-seed") cfg.holdout_seed = num_value<std::uint64_t>(e);
        else if (e.key == "instance-labels") cfg.instance_labels = bool_value(e);
        else if (e.key == "sample-budget") cfg.sample_budget = num_value<long>(e);
        else unknown_key(sec.name, e);
    }
    if (!cfg.store_path.empty() && !cfg.import_dir.empty())
        bad_line(sec.line, "[store] sets both path and import-dir");
}

void read_model(const IniSection& sec, ExperimentConfig& cfg) {
    ModelConfig& m = cfg.train.model;
    for (const IniEntry& e : sec.entries) {
        if (e.key == "layers") m.layers = num_value<int>(e);
        else if (e.key == "heads") m.heads = num_value<int>(e);
        else if (e.key == "embed-dim") m.embed_dim = num_value<int>(e);
        else if (e.key == "pairs") m.pairs = num_value<int>(e);
        else if (e.key == "init-std") m.init_std = static_cast<float>(double_value(e));
        else if (e.key == "embedder") {
            const std::string s = trim(e.value);
            if (s == "linear") m.embedder = EmbedderKind::linear_vector;
            else if (s == "conv") m.embedder = EmbedderKind::conv_raster;
            else bad_line(e.line, "embedder must be linear or conv, got \"" + e.value + "\"");
            cfg.embedder_forced = true;
        } else {
            unknown_key(sec.name, e);
        }
    }
}

void read_recipe(const IniSection& sec, ExperimentConfig& cfg) {
    Recipe& r = cfg.train.recipe;
    for (const IniEntry& e : sec.entries) {
        if (e.key == "preset") r = recipe_preset(trim(e.value));
    }
    for (const IniEntry& e : sec.entries) {
        if (e.key == "preset") continue;
        if (e.key == "variant") {
            const std::string s = trim(e.value);
            if (s == "standard") r.variant = Variant::standard;
            else if (s == "bursty") r.variant = Variant::bursty;
            else bad_line(e.line, "variant must be standard or bursty, got \"" + e.value + "\"");
        } else if (e.key == "query-class-reps") {
            r.query_class_reps = num_value<int>(e);
        } else if (e.key == "distractor-format") {
            r.distractor_format = trim(e.value);
        } else if (e.key == "inst-copy") {
            r.inst_copy = bool_value(e);
        } else if (e.key == "inst-copy-prob") {
            r.inst_copy_prob = double_value(e);
        } else {
            unknown_key(sec.name, e);
        }
    }
}

void read_mix(const IniSection& sec, ExperimentConfig& cfg) {
    for (const IniEntry& e : sec.entries) {
        if (e.key == "p-bursty") cfg.train.mix.p_bursty = double_value(e);
        else if (e.key == "p-label-swap") cfg.train.mix.p_label_swap = double_value(e);
        else if (e.key == "batch-size") cfg.train.mix.batch_size = num_value<int>(e);
        else if (e.key == "zipf") cfg.train.zipf.coefficient = double_value(e);
        else unknown_key(sec.name, e);
    }
}

void read_train(const IniSection& sec, ExperimentConfig& cfg) {
    TrainConfig& t = cfg.train;
    for (const IniEntry& e : sec.entries) {
        if (e.key == "total-steps") t.total_steps = num_value<long>(e);
        else if (e.key == "warmup-steps") t.warmup_steps = num_value<long>(e);
        else if (e.key == "max-lr") t.max_lr = double_value(e);
        else if (e.key == "clip-norm") t.clip_norm = double_value(e);
        else if (e.key == "eval-every") t.eval_every = num_value<long>(e);
        else if (e.key == "seeds") t.seeds = u64_list_value(e);
        else if (e.key == "icl-full-vocab") t.icl_full_vocab = bool_value(e);
        else unknown_key(sec.name, e);
    }
}

SuiteSpec suite_value(const IniEntry& e, const std::string& text) {
    try {
        return parse_suite_spec(text);
    } catch (const ConfigError& err) {
        bad_line(e.line, err.what());
    }
}

void read_eval(const IniSection& sec, ExperimentConfig& cfg) {
    for (const IniEntry& e : sec.entries) {
        if (e.key == "suites") {
            cfg.eval_suites.clear();
            for (const std::string& piece : split_list(e.value))
                cfg.eval_suites.push_back(suite_value(e, piece));
            for (std::size_t i = 0; i < cfg.eval_suites.size(); ++i)
                for (std::size_t j = i + 1; j < cfg.eval_suites.size(); ++j)
                    if (cfg.eval_suites[i].name == cfg.eval_suites[j].name)
                        bad_line(e.line, "duplicate suite \"" + cfg.eval_suites[i].name + "\"");
        } else if (e.key == "seed") {
            cfg.eval_seed = num_value<std::uint64_t>(e);
        } else {
            unknown_key(sec.name, e);
        }
    }
}

void read_probe(const IniSection& sec, ExperimentConfig& cfg) {
    for (const IniEntry& e : sec.entries) {
        if (e.key == "suite") cfg.probe_suite = suite_value(e, trim(e.value));
        else if (e.key == "seed") cfg.probe_seed = num_value<std::uint64_t>(e);
        else if (e.key == "stride") cfg.probe_stride = num_value<int>(e);
        else if (e.key == "trace-episodes") cfg.probe_trace_episodes = num_value<int>(e);
        else unknown_key(sec.name, e);
    }
    if (cfg.probe_stride < 1) bad_line(sec.line, "[probe] stride must be at least 1");
}

void read_output(const IniSection& sec, ExperimentConfig& cfg) {
    for (const IniEntry& e : sec.entries) {
        if (e.key == "dir") cfg.out_dir = trim(e.value);
        else if (e.key == "quiet") cfg.quiet = bool_value(e);
        else unknown_key(sec.name, e);
    }
}

void read_sweep(const IniSection& sec, ExperimentConfig& cfg) {
    for (const IniEntry& e : sec.entries) {
        if (e.key == "axis") cfg.sweep_axis = trim(e.value);
        else if (e.key == "values") cfg.sweep_values = split_list(e.value);
        else unknown_key(sec.name, e);
    }
}

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '.' || c == '_' || c == '-';
        if (!ok) c = '_';
    }
    return out;
}

}  // namespace

IniFile IniFile::parse(const std::string& text) {
    IniFile file;
    long line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']') bad_line(line_no, "unterminated section header");
            const std::string name = trim(line.substr(1, line.size() - 2));
            if (name.empty()) bad_line(line_no, "empty section name");
            for (const IniSection& s : file.sections)
                if (s.name == name) bad_line(line_no, "duplicate section [" + name + "]");
            file.sections.push_back({name, line_no, {}});
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) bad_line(line_no, "expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) bad_line(line_no, "empty key");
        if (file.sections.empty()) bad_line(line_no, "key \"" + key + "\" outside any section");
        for (const IniEntry& e : file.sections.back().entries)
            if (e.key == key)
                bad_line(line_no, "duplicate key \"" + file.sections.back().name + "." + key + "\"");
        file.sections.back().entries.push_back({key, value, line_no});
    }
    return file;
}

SuiteSpec parse_suite_spec(const std::string& text) {
    const std::string s = trim(text);
    const std::size_t colon = s.find(':');
    if (colon == std::string::npos)
        throw ConfigError("suite \"" + s + "\" needs the form KxN:episodes or iwl:episodes");
    const std::string task = trim(s.substr(0, colon));
    const std::string count = trim(s.substr(colon + 1));
    SuiteSpec spec;
    auto res = std::from_chars(count.data(), count.data() + count.size(), spec.episodes);
    if (res.ec != std::errc() || res.ptr != count.data() + count.size() || spec.episodes < 1)
        throw ConfigError("suite \"" + s + "\" needs a positive episode count");
    if (task == "iwl") {
        spec.name = "iwl";
        return spec;
    }
    const std::size_t x = task.find('x');
    if (x == std::string::npos)
        throw ConfigError("suite \"" + s + "\" needs the form KxN:episodes or iwl:episodes");
    const std::string ks = task.substr(0, x);
    const std::string ns = task.substr(x + 1);
    auto kr = std::from_chars(ks.data(), ks.data() + ks.size(), spec.k_way);
    auto nr = std::from_chars(ns.data(), ns.data() + ns.size(), spec.n_shot);
    if (kr.ec != std::errc() || kr.ptr != ks.data() + ks.size() || nr.ec != std::errc() ||
        nr.ptr != ns.data() + ns.size() || spec.k_way < 2 || spec.n_shot < 1)
        throw ConfigError("suite \"" + s + "\" needs K >= 2 ways and N >= 1 shots");
    spec.name = "icl-" + std::to_string(spec.k_way) + "w" + std::to_string(spec.n_shot) + "s";
    return spec;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    const IniFile file = IniFile::parse(text);
    ExperimentConfig cfg;
    for (const IniSection& sec : file.sections) {
        if (sec.name == "store") read_store(sec, cfg);
        else if (sec.name == "model") read_model(sec, cfg);
        else if (sec.name == "recipe") read_recipe(sec, cfg);
        else if (sec.name == "mix") read_mix(sec, cfg);
        else if (sec.name == "train") read_train(sec, cfg);
        else if (sec.name == "eval") read_eval(sec, cfg);
        else if (sec.name == "probe") read_probe(sec, cfg);
        else if (sec.name == "output") read_output(sec, cfg);
        else if (sec.name == "sweep") read_sweep(sec, cfg);
        else bad_line(sec.line, "unknown section [" + sec.name + "]");
    }
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return parse_experiment_config(std::string(bytes.begin(), bytes.end()));
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

ExemplarStore build_store(const ExperimentConfig& cfg) {
    ExemplarStore base;
    if (!cfg.store_path.empty()) base = load_store(cfg.store_path);
    else if (!cfg.import_dir.empty()) base = import_pgm_dir(cfg.import_dir);
    else base = gen_synthetic_store(cfg.synth);
    ExemplarStore store =
        split_holdout(base, cfg.novel, cfg.per_train, cfg.per_val, cfg.holdout_seed);
    if (cfg.instance_labels) store = instance_relabel(store);
    if (cfg.sample_budget > 0) store = apply_sample_budget(store, cfg.train.zipf, cfg.sample_budget);
    return store;
}

EvalSuite build_suite(const ExemplarStore& store, const SuiteSpec& spec, std::uint64_t seed,
                      std::uint64_t task_index, int pairs) {
    EvalSuite suite;
    suite.split = spec.name;
    suite.k_way = spec.k_way;
    if (spec.k_way > 0) {
        const EvalTask task{spec.k_way, spec.n_shot};
        suite.episodes = presample_suite(spec.episodes, seed, task_index, [&](RngStream& rng) {
            return build_icl_eval(store, task, rng, pairs);
        });
    } else {
        suite.episodes = presample_suite(spec.episodes, seed, task_index, [&](RngStream& rng) {
            return build_iwl_eval(store, rng, pairs);
        });
    }
    return suite;
}

ExperimentData prepare_experiment(const ExperimentConfig& cfg) {
    ExperimentData data;
    data.store = build_store(cfg);
    data.hash = store_hash(data.store);
    if (cfg.train.zipf.coefficient > 0.0) {
        data.table = class_sampler(data.store, cfg.train.zipf);
        data.has_table = true;
    }
    for (std::size_t i = 0; i < cfg.eval_suites.size(); ++i)
        data.suites.push_back(build_suite(data.store, cfg.eval_suites[i], cfg.eval_seed,
                                          static_cast<std::uint64_t>(i), cfg.train.model.pairs));
    return data;
}

RunSpec make_run_spec(const ExperimentConfig& cfg, const ExperimentData& data, int threads,
                      const std::string& run_dir_override) {
    RunSpec spec;
    spec.config = cfg.train;
    ModelConfig& m = spec.config.model;
    m.label_vocab = data.store.label_count();
    if (!cfg.embedder_forced)
        m.embedder = data.store.kind == StoreKind::raster ? EmbedderKind::conv_raster
                                                          : EmbedderKind::linear_vector;
    if (m.embedder == EmbedderKind::linear_vector) {
        m.input_dim = data.store.dim;
        m.input_h = m.input_w = 0;
    } else {
        m.input_dim = 0;
        m.input_h = data.store.h;
        m.input_w = data.store.w;
    }
    spec.config.validate();
    spec.store = &data.store;
    spec.table = data.has_table ? &data.table : nullptr;
    spec.suites = data.suites;
    spec.run_dir = run_dir_override.empty() ? cfg.out_dir : run_dir_override;
    if (spec.run_dir.empty()) throw ConfigError("[output] dir is not set");
    spec.store_hash = data.hash;
    spec.threads = threads;
    spec.quiet = cfg.quiet;
    return spec;
}

ExperimentConfig apply_sweep_axis(const ExperimentConfig& base, const std::string& axis,
                                  const std::string& value) {
    ExperimentConfig cfg = base;
    cfg.sweep_axis.clear();
    cfg.sweep_values.clear();
    const IniEntry fake{axis, value, 0};
    if (axis == "class-count") {
        if (!cfg.store_path.empty() || !cfg.import_dir.empty())
            throw ConfigError("class-count sweep needs a synthetic store");
        const int train_classes = num_value<int>(fake);
        if (train_classes < 1) throw ConfigError("class-count value must be positive");
        cfg.synth.n_classes = train_classes + cfg.novel;
    } else if (axis == "swap-rate") {
        cfg.train.mix.p_label_swap = double_value(fake);
    } else if (axis == "recipe") {
        cfg.train.recipe = recipe_preset(trim(value));
        if (cfg.train.recipe.variant == Variant::standard) cfg.train.mix.p_bursty = 0.0;
    } else if (axis == "zipf") {
        cfg.train.zipf.coefficient = double_value(fake);
    } else {
        throw ConfigError("unknown sweep axis \"" + axis + "\"");
    }
    return cfg;
}

std::vector<SweepChild> sweep_children(const ExperimentConfig& base) {
    if (base.sweep_axis.empty()) throw ConfigError("[sweep] axis is not set");
    if (base.sweep_values.empty()) throw ConfigError("[sweep] values is empty");
    if (base.out_dir.empty()) throw ConfigError("[output] dir is not set");
    std::vector<SweepChild> children;
    for (const std::string& value : base.sweep_values) {
        SweepChild child;
        child.name = base.sweep_axis + "-" + sanitize(value);
        child.config = apply_sweep_axis(base, base.sweep_axis, value);
        child.config.out_dir = base.out_dir + "/" + child.name;
        children.push_back(std::move(child));
    }
    for (std::size_t i = 0; i < children.size(); ++i)
        for (std::size_t j = i + 1; j < children.size(); ++j)
            if (children[i].name == children[j].name)
                throw ConfigError("sweep values collide on \"" + children[i].name + "\"");
    return children;
}

int resolve_threads(int flag_value) {
    int env_cap = 0;
    if (const char* env = std::getenv("ICLFORGE_THREADS")) {
        const std::string s = env;
        auto res = std::from_chars(s.data(), s.data() + s.size(), env_cap);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size() || env_cap < 1)
            throw ConfigError("ICLFORGE_THREADS must be a positive integer, got \"" + s + "\"");
    }
    int threads = flag_value > 0 ? flag_value : (env_cap > 0 ? env_cap : 1);
    if (env_cap > 0) threads = std::min(threads, env_cap);
    return threads;
}

}  // namespace iclforge
