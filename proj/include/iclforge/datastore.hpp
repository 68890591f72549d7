#pragma once

// Exemplar stores: synthetic generation, holdout splitting, class-frequency
// tables, instance relabeling, and the EXB1 binary format.

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "iclforge/errors.hpp"
#include "iclforge/rng.hpp"
#include "iclforge/tensor.hpp"

namespace iclforge {

enum class StoreKind : std::uint8_t { raster = 0, vector = 1 };

constexpr std::uint8_t kSplitTrain = 0;
constexpr std::uint8_t kSplitValidation = 1;

struct ClassRecord {
    std::uint32_t id = 0;
    bool novel = false;
    std::vector<std::uint8_t> splits;      // one tag per exemplar
    std::vector<std::uint8_t> raster_data; // count * h * w, raster kind
    FloatVec vec_data;                     // count * dim, vector kind

    int count() const { return static_cast<int>(splits.size()); }
    std::vector<int> train_indexes;
    std::vector<int> val_indexes;
};

struct ExemplarStore {
    StoreKind kind = StoreKind::vector;
    int h = 0, w = 0;  // raster
    int dim = 0;       // vector

    std::vector<ClassRecord> classes;

    // built by finalize()
    std::vector<std::uint32_t> base_ids;   // ascending; label = position here
    std::vector<std::uint32_t> novel_ids;  // ascending

    int payload_floats() const { return kind == StoreKind::raster ? h * w : dim; }
    std::size_t payload_bytes() const {
        return kind == StoreKind::raster ? static_cast<std::size_t>(h) * w
                                         : static_cast<std::size_t>(dim) * 4;
    }

    // Sorts classes by id, validates uniqueness and payload sizes, rebuilds
    // the base/novel indexes and per-class split index lists.
    void finalize();

    const ClassRecord& cls(std::uint32_t id) const;
    int class_index(std::uint32_t id) const;
    bool has_class(std::uint32_t id) const { return index_.count(id) != 0; }

    // Label of a base class: its rank among base class ids.
    int label_of(std::uint32_t class_id) const;
    int label_count() const { return static_cast<int>(base_ids.size()); }

    // Raw payload of one exemplar (bytes for raster, reinterpreted floats for vector).
    const std::uint8_t* raster_ptr(const ClassRecord& c, int ex) const;
    const float* vec_ptr(const ClassRecord& c, int ex) const;
    // Writes the exemplar as floats (raster bytes scaled to [0,1]).
    void write_floats(std::uint32_t class_id, int ex, float* out) const;
    // Byte-equality of two exemplars' payloads.
    bool same_payload(std::uint32_t ca, int ea, std::uint32_t cb, int eb) const;

    std::size_t total_exemplars() const;
    long total_train_exemplars() const;

private:
    std::unordered_map<std::uint32_t, int> index_;
};

struct SyntheticSpec {
    int n_classes = 1600;
    int per_class = 20;
    StoreKind kind = StoreKind::vector;
    int dim = 32;       // vector kind
    int raster = 28;    // raster kind (square)
    float noise = 0.1f;
    std::uint64_t seed = 7;
};

ExemplarStore gen_synthetic_store(const SyntheticSpec& spec);

// Designates n_novel classes (chosen by seeded shuffle) as novel and tags each
// class's exemplars with per_train train / per_val validation slots.
ExemplarStore split_holdout(const ExemplarStore& store, int n_novel, int per_train, int per_val,
                            std::uint64_t seed);

struct ZipfSpec {
    double coefficient = 0.0;
};

// Probability table over base classes; rank 1 = smallest class id.
struct ClassTable {
    std::vector<std::uint32_t> ids;
    std::vector<double> prob;
    std::vector<double> cdf;
    std::uint32_t sample(RngStream& rng) const;
};

ClassTable class_sampler(const ExemplarStore& store, const ZipfSpec& zipf);

// Every training exemplar of a base class becomes its own singleton class
// (ids continue above the current maximum); novel classes pass through.
ExemplarStore instance_relabel(const ExemplarStore& store);

// Trims per-class training exemplar counts so that class k keeps about
// p_zipf(k) * budget of them and the total equals min(budget, available).
// Rule: round each target, cap at availability, then balance by dropping from
// the highest ranks / refilling from the lowest.
ExemplarStore apply_sample_budget(const ExemplarStore& store, const ZipfSpec& zipf, long budget);

void save_store(const ExemplarStore& store, const std::string& path);
ExemplarStore load_store(const std::string& path);
std::vector<char> serialize_store(const ExemplarStore& store);
ExemplarStore parse_store(const char* data, std::size_t size);
std::uint64_t store_hash(const ExemplarStore& store);

// One subdirectory per class, each holding binary P5 graymaps of equal size.
ExemplarStore import_pgm_dir(const std::string& dir);

}  // namespace iclforge
