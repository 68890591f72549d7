#pragma once

// Induction-head diagnostics: four attention progress metrics per
// (layer, head), checkpoint series for previous-token-head formation, and
// trace export for heatmap rendering.

#include <cstdint>
#include <string>
#include <vector>

#include "iclforge/model.hpp"
#include "iclforge/trainloop.hpp"

namespace iclforge {

// One value per (layer, head), row-major over layers.
struct HeadGrid {
    int layers = 0, heads = 0;
    std::vector<double> v;

    HeadGrid() = default;
    HeadGrid(int l, int h) : layers(l), heads(h), v(static_cast<std::size_t>(l) * h, 0.0) {}
    double at(int layer, int head) const {
        return v[static_cast<std::size_t>(layer) * heads + head];
    }
    double& at(int layer, int head) { return v[static_cast<std::size_t>(layer) * heads + head]; }
    double max() const;
};

// Per-trace metrics. Rows are selected by token role; attention entries are
// read from fixed offsets, so the same selectors work on probability traces
// and on pre-softmax score traces.
//
// label_image: mean over label rows p of w[p][p-1] (previous-token head).
// image_image_diag: mean over context sample rows p >= 2 of w[p][p-2]
//   (nearest preceding sample; the all-pairs reading of "image to image
//   attention" is metric_image_image_mass below).
HeadGrid metric_label_image(const AttentionTrace& t);
HeadGrid metric_image_image_diag(const AttentionTrace& t);
// Alternative reading: query-excluded sample rows, total mass on earlier
// sample columns instead of the single offset-2 entry.
HeadGrid metric_image_image_mass(const AttentionTrace& t);

// True when at least one context item shares the episode's query class.
bool has_query_class_context(const Episode& ep);

// Query-row mass on sample positions whose class matches the query class.
// Throws EvalError when the episode has no query-class context (undefined;
// suite averages skip such episodes).
HeadGrid metric_image_image_query(const AttentionTrace& t, const Episode& ep);

// Query-row mass on label positions carrying the episode target (post-swap).
HeadGrid metric_image_label(const AttentionTrace& t, const Episode& ep);

// Masked pre-softmax scores q.k/sqrt(dh) recomputed from the cached qkv
// activations; same layout as the probability trace, zeros above the
// diagonal.
AttentionTrace score_trace(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                           Workspace& ws);

// All four metrics averaged over a suite, one grid per metric. Episodes
// without query-class context are excluded from image_image_query only;
// EvalError if every episode is excluded. Per-episode grids are reduced in
// episode order, so results are independent of the thread count.
struct ProbeSummary {
    HeadGrid image_image_diag, label_image, image_image_query, image_label;
};
ProbeSummary probe_suite(const TransformerModel& m, const ExemplarStore& store,
                         const std::vector<Episode>& suite, int threads = 1,
                         bool pre_softmax = false);

// Merge a summary into a metric log under split names
// probe-<metric>-L<layer>H<head> (e.g. probe-label-image-L0H0).
void append_probe_rows(MetricLog& log, long step, std::uint64_t seed, const ProbeSummary& s);

// Suite-averaged label_image per (layer, head) across a series of
// checkpoints, ordered by checkpoint step. All checkpoints must share one
// ModelConfig (ConfigError otherwise, also for duplicate steps).
struct HeadScoreSeries {
    int layers = 0, heads = 0;
    std::vector<long> steps;
    std::vector<HeadGrid> label_image;  // one grid per step
};
HeadScoreSeries prev_token_score_series(const std::vector<std::string>& checkpoint_paths,
                                        const ExemplarStore& store,
                                        const std::vector<Episode>& suite, int threads = 1);

// <prefix>_L<l>H<h>.csv per head (T rows of T comma-separated weights) plus
// <prefix>_roles.csv (dims line, then one role name per token).
void export_trace(const AttentionTrace& t, const std::string& prefix);
AttentionTrace load_trace(const std::string& prefix);

}  // namespace iclforge
