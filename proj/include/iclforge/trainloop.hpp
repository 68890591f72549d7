#pragma once

// Deterministic training runs: warmup + square-root-decay schedule, clipped
// Adam steps over episode batches, frozen-suite evaluation, per-seed metric
// CSVs with checkpoint resume, and multi-seed aggregation.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "iclforge/model.hpp"
#include "iclforge/seqforge.hpp"

namespace iclforge {

struct TrainConfig {
    long total_steps = 30000;
    long warmup_steps = 15000;
    double max_lr = 6e-4;
    double clip_norm = 1.0;
    long eval_every = 1500;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    TrainingMix mix;  // carries batch_size
    Recipe recipe;
    ModelConfig model;
    ZipfSpec zipf;
    bool icl_full_vocab = false;  // diagnostic: unrestricted eval argmax

    void validate() const;
};

// max_lr * min(step/warmup, sqrt(warmup/step)); 0 at step 0, peak at warmup.
double lr_at(long step, const TrainConfig& cfg);

struct MetricRow {
    long step = 0;
    std::uint64_t seed = 0;
    std::string split;
    double value = 0.0;
    bool operator==(const MetricRow&) const = default;
};

struct MetricLog {
    std::vector<MetricRow> rows;

    // Enforces the append-only contract: step must be non-decreasing per
    // (seed, split) pair.
    void append(long step, std::uint64_t seed, const std::string& split, double value);
    std::string to_csv() const;  // header step,seed,split,value
    static MetricLog from_csv(const std::string& text);
};

// A frozen evaluation suite. k_way > 0 marks a remapped few-shot task
// (restricted argmax over labels {0..k-1}); k_way == 0 marks held-out
// classification scored over the full vocabulary.
struct EvalSuite {
    std::string split;
    int k_way = 0;
    std::vector<Episode> episodes;
};

// Runs fn(chunk_index, begin, end) over [0, n) split across threads; callers
// keep determinism by reducing per-chunk (or per-index) results in order.
void parallel_chunks(int n, int threads, const std::function<void(int, int, int)>& fn);

double evaluate_icl(const TransformerModel& m, const ExemplarStore& store,
                    const std::vector<Episode>& episodes, int k_way, bool full_vocab = false,
                    int threads = 1);
double evaluate_iwl(const TransformerModel& m, const ExemplarStore& store,
                    const std::vector<Episode>& episodes, int threads = 1);
double evaluate_suite(const TransformerModel& m, const ExemplarStore& store, const EvalSuite& suite,
                      bool full_vocab = false, int threads = 1);

// One optimizer update on a sampled batch at 1-based step number `step`.
// grad_bufs must hold batch_size gradient accumulators shaped like m; the
// per-episode buffers are reduced in slot order so the result is independent
// of the thread count. Returns the mean episode loss.
double train_step(TransformerModel& m, AdamState& opt, const ExemplarStore& store,
                  const TrainConfig& cfg, const std::vector<Episode>& batch, long step,
                  std::vector<TransformerModel>& grad_bufs, std::vector<Workspace>& ws,
                  std::uint64_t seed, int threads = 1);

struct RunSpec {
    TrainConfig config;
    const ExemplarStore* store = nullptr;
    const ClassTable* table = nullptr;  // class skew; null = uniform
    std::vector<EvalSuite> suites;      // evaluated in this order at each eval point
    std::string run_dir;
    std::uint64_t store_hash = 0;
    int threads = 1;
    bool quiet = false;
};

// Trains one seed under spec.run_dir/seed<seed>/: metrics.csv, params-only
// ckpt_<step>.bin at every eval point, and last.bin (params + optimizer) for
// resume. An existing last.bin resumes the run; completed seeds are not
// retrained. Returns this seed's rows.
MetricLog train_seed(const RunSpec& spec, std::uint64_t seed);

// All seeds in order, then the merged metrics.csv, aggregate.csv and
// manifest.txt under spec.run_dir.
MetricLog train_run(const RunSpec& spec);

struct AggregateRow {
    long step = 0;
    std::string split;
    double mean = 0.0;
    double std_dev = 0.0;  // population
};

// Per (split, step) mean and population std across seed logs. All logs must
// share the same step grid per split; offenders are named in the error.
std::vector<AggregateRow> aggregate_runs(const std::vector<MetricLog>& logs);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

// Resolved-config manifest text (config, store hash, suite hashes). Written
// once per run dir; a later run with a different manifest is refused.
std::string manifest_text(const RunSpec& spec);

}  // namespace iclforge
