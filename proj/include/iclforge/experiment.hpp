#pragma once

// Experiment configuration files and their assembly into runnable pieces:
// a strict sectioned key=value format, store construction, frozen suite
// presampling, and sweep-axis expansion.

#include <cstdint>
#include <string>
#include <vector>

#include "iclforge/datastore.hpp"
#include "iclforge/trainloop.hpp"

namespace iclforge {

// Sectioned key=value text. '#' and ';' start comment lines; keys must sit
// under a [section]; duplicate sections or keys are refused. All violations
// throw ConfigError naming the line.
struct IniEntry {
    std::string key;
    std::string value;
    long line = 0;
};

struct IniSection {
    std::string name;
    long line = 0;
    std::vector<IniEntry> entries;
};

struct IniFile {
    std::vector<IniSection> sections;
    static IniFile parse(const std::string& text);
};

// One frozen evaluation suite to presample: k_way 0 means held-out
// classification over the full label vocabulary, otherwise a k-way n-shot
// few-shot task. Descriptor syntax: "KxN:episodes" or "iwl:episodes".
struct SuiteSpec {
    std::string name;
    int k_way = 0;
    int n_shot = 0;
    int episodes = 0;

    bool operator==(const SuiteSpec&) const = default;
};

SuiteSpec parse_suite_spec(const std::string& text);

struct ExperimentConfig {
    // [store] either a file to load, a directory of P5 graymaps to import,
    // or a synthetic spec; holdout and relabeling apply after.
    std::string store_path;
    std::string import_dir;
    SyntheticSpec synth;
    int novel = 0;
    int per_train = 0;
    int per_val = 0;
    std::uint64_t holdout_seed = 42;
    bool instance_labels = false;
    long sample_budget = 0;

    // [model] [recipe] [mix] [train]; model input/vocab fields are filled
    // from the store during assembly.
    TrainConfig train;
    bool embedder_forced = false;  // config pinned the embedder kind

    // [eval]
    std::vector<SuiteSpec> eval_suites;
    std::uint64_t eval_seed = 1000;

    // [probe] post-hoc checkpoint probing; episodes == 0 disables
    SuiteSpec probe_suite;
    std::uint64_t probe_seed = 2000;
    int probe_stride = 1;
    int probe_trace_episodes = 0;

    // [output]
    std::string out_dir;
    bool quiet = false;

    // [sweep]
    std::string sweep_axis;
    std::vector<std::string> sweep_values;
};

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

// load/import/generate, then holdout split, optional instance relabeling,
// optional zipf-aware sample budget.
ExemplarStore build_store(const ExperimentConfig& cfg);

// Everything a run needs, owned together so RunSpec pointers stay valid.
struct ExperimentData {
    ExemplarStore store;
    std::uint64_t hash = 0;
    ClassTable table;
    bool has_table = false;
    std::vector<EvalSuite> suites;
};

ExperimentData prepare_experiment(const ExperimentConfig& cfg);

// Fills model input/vocab fields from the store, validates, and wires the
// RunSpec at cfg.out_dir (or run_dir_override when non-empty).
RunSpec make_run_spec(const ExperimentConfig& cfg, const ExperimentData& data, int threads,
                      const std::string& run_dir_override = "");

// Presample one suite; task_index seeds its stream family.
EvalSuite build_suite(const ExemplarStore& store, const SuiteSpec& spec, std::uint64_t seed,
                      std::uint64_t task_index, int pairs);

// Sweep axes: class-count (synthetic class total), swap-rate, recipe
// (preset name; the standard preset also zeroes p_bursty), zipf.
ExperimentConfig apply_sweep_axis(const ExperimentConfig& base, const std::string& axis,
                                  const std::string& value);

struct SweepChild {
    std::string name;  // "<axis>-<value>"
    ExperimentConfig config;
};

// One child per [sweep] value, run dirs under <out_dir>/<name>.
std::vector<SweepChild> sweep_children(const ExperimentConfig& base);

// Worker thread count for this invocation: flag value if > 0, else the
// ICLFORGE_THREADS environment variable, else 1.
int resolve_threads(int flag_value);

}  // namespace iclforge
