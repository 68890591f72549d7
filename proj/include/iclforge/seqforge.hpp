#pragma once

// Episode construction: standard and bursty training sequences, exact-copy
// and label-swap transforms, mixed batches, and frozen evaluation suites.

#include <cstdint>
#include <string>
#include <vector>

#include "iclforge/datastore.hpp"
#include "iclforge/rng.hpp"

namespace iclforge {

struct ExemplarRef {
    std::uint32_t class_id = 0;
    std::uint32_t index = 0;
    bool operator==(const ExemplarRef&) const = default;
};

enum class Variant : std::uint8_t { standard = 0, bursty = 1, icl_eval = 2, iwl_eval = 3 };

struct ContextItem {
    ExemplarRef ref;
    int label = 0;
};

struct Episode {
    std::vector<ContextItem> context;  // length L
    ExemplarRef query;
    int target = 0;
    int original_target = 0;  // pre-swap label
    std::uint32_t query_class = 0;
    Variant variant = Variant::standard;
    int kway = 0;  // icl_eval only
    bool swapped = false;
    bool copied = false;
};

// One '-'-separated group of a context pattern like "3xQ-3xA-B-C":
// an optional repeat prefix and a class letter, 'Q' meaning the query class.
struct FormatGroup {
    char letter = 0;
    int count = 1;
};

// Parses the pattern and checks structure: exactly one Q group, distinct
// distractor letters, positive counts.
std::vector<FormatGroup> parse_context_format(const std::string& format);
int format_total(const std::vector<FormatGroup>& groups);
int format_query_reps(const std::vector<FormatGroup>& groups);

struct Recipe {
    Variant variant = Variant::bursty;
    int query_class_reps = 3;
    std::string distractor_format = "3xQ-3xA-B-C";
    bool inst_copy = false;
    double inst_copy_prob = 1.0;

    // Throws ConfigError unless the format matches the variant, the rep
    // count, and the context length.
    void validate(int pairs) const;
};

// Named presets accepted by config files.
Recipe recipe_preset(const std::string& name);

struct TrainingMix {
    double p_bursty = 0.9;
    double p_label_swap = 0.0;
    int batch_size = 16;
};

struct EvalTask {
    int k_way = 2;
    int n_shot = 4;
};

// All builders draw classes from `table` when provided, else uniformly over
// base classes. Each builder consumes only the stream passed to it, so
// identical (seed, stream) always yields an identical episode.

Episode build_standard(const ExemplarStore& store, RngStream& rng, int pairs,
                       const ClassTable* table = nullptr);
Episode build_bursty(const ExemplarStore& store, RngStream& rng, const Recipe& recipe, int pairs,
                     const ClassTable* table = nullptr);
Episode apply_inst_copy(const Episode& episode, RngStream& rng);
Episode apply_label_swap(const Episode& episode, const ExemplarStore& store, RngStream& rng,
                         double p);

std::vector<Episode> sample_training_batch(const ExemplarStore& store, const TrainingMix& mix,
                                           const Recipe& recipe, int pairs, std::uint64_t seed,
                                           long step, const ClassTable* table = nullptr);

Episode build_icl_eval(const ExemplarStore& store, const EvalTask& task, RngStream& rng, int pairs);
Episode build_iwl_eval(const ExemplarStore& store, RngStream& rng, int pairs);

// Frozen suites: count episodes built from streams derived from (seed, task_index).
template <typename Builder>
std::vector<Episode> presample_suite(int count, std::uint64_t seed, std::uint64_t task_index,
                                     Builder&& build) {
    std::vector<Episode> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        RngStream rng(seed, stream_ns::suite_episode(task_index, static_cast<std::uint64_t>(i)));
        out.push_back(build(rng));
    }
    return out;
}

// EPS1 suite files carry exemplar references plus the hash of the store they
// were sampled from; loading verifies the hash and every reference.
std::vector<char> serialize_suite(const std::vector<Episode>& suite, std::uint64_t store_hash);
std::vector<Episode> parse_suite(const char* data, std::size_t size, const ExemplarStore& store);
void save_suite(const std::vector<Episode>& suite, std::uint64_t store_hash,
                const std::string& path);
std::vector<Episode> load_suite(const std::string& path, const ExemplarStore& store);
std::uint64_t suite_hash(const std::vector<Episode>& suite, std::uint64_t store_hash);

}  // namespace iclforge
