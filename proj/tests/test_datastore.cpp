#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "iclforge/binio.hpp"
#include "iclforge/datastore.hpp"

using namespace iclforge;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_vec_spec() {
    SyntheticSpec s;
    s.n_classes = 30;
    s.per_class = 6;
    s.kind = StoreKind::vector;
    s.dim = 16;
    s.noise = 0.1f;
    s.seed = 11;
    return s;
}

// Upper chi-square critical value via the Wilson-Hilferty cube approximation.
double chi2_crit(int df, double z) {
    const double d = static_cast<double>(df);
    const double t = 1.0 - 2.0 / (9.0 * d) + z * std::sqrt(2.0 / (9.0 * d));
    return d * t * t * t;
}
constexpr double kZ99 = 2.3263478740408408;

}  // namespace

TEST_CASE("synthetic store is deterministic per seed and distinct across seeds") {
    auto spec = small_vec_spec();
    auto a = serialize_store(gen_synthetic_store(spec));
    auto b = serialize_store(gen_synthetic_store(spec));
    CHECK(a == b);

    std::set<std::uint64_t> hashes;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SyntheticSpec s = spec;
        s.n_classes = 2;
        s.per_class = 1;
        s.seed = seed;
        hashes.insert(store_hash(gen_synthetic_store(s)));
    }
    CHECK(hashes.size() == 100);
}

TEST_CASE("zero noise collapses every class to one point") {
    auto spec = small_vec_spec();
    spec.noise = 0.0f;
    auto store = gen_synthetic_store(spec);
    for (const auto& c : store.classes)
        for (int e = 1; e < c.count(); ++e) CHECK(store.same_payload(c.id, 0, c.id, e));
}

TEST_CASE("within-class distances sit below between-class distances") {
    SyntheticSpec spec;
    spec.n_classes = 50;
    spec.per_class = 10;
    spec.dim = 32;
    spec.noise = 0.1f;
    spec.seed = 3;
    auto store = gen_synthetic_store(spec);
    RngStream rng(99, 0);
    auto dist = [&](std::uint32_t ca, int ea, std::uint32_t cb, int eb) {
        const float* a = store.vec_ptr(store.cls(ca), ea);
        const float* b = store.vec_ptr(store.cls(cb), eb);
        double s = 0.0;
        for (int i = 0; i < store.dim; ++i) {
            const double d = static_cast<double>(a[i]) - b[i];
            s += d * d;
        }
        return std::sqrt(s);
    };
    double within = 0.0, between = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const std::uint32_t c = static_cast<std::uint32_t>(rng.next_below(50));
        int e1 = static_cast<int>(rng.next_below(10));
        int e2 = static_cast<int>(rng.next_below(9));
        if (e2 >= e1) ++e2;
        within += dist(c, e1, c, e2);
        std::uint32_t c2 = static_cast<std::uint32_t>(rng.next_below(49));
        if (c2 >= c) ++c2;
        between += dist(c, e1, c2, static_cast<int>(rng.next_below(10)));
    }
    CHECK(within / n < between / n);
}

TEST_CASE("glyph stores render ink deterministically") {
    SyntheticSpec spec;
    spec.n_classes = 8;
    spec.per_class = 4;
    spec.kind = StoreKind::raster;
    spec.raster = 24;
    spec.noise = 0.1f;
    spec.seed = 5;
    auto a = gen_synthetic_store(spec);
    CHECK(serialize_store(a) == serialize_store(gen_synthetic_store(spec)));
    for (const auto& c : a.classes) {
        long ink = 0;
        for (std::uint8_t v : c.raster_data) ink += v > 0;
        CHECK(ink > 0);
    }
}

TEST_CASE("holdout split partitions classes and exemplars") {
    SyntheticSpec spec;
    spec.n_classes = 1623;
    spec.per_class = 20;
    spec.dim = 8;
    spec.seed = 2;
    auto store = split_holdout(gen_synthetic_store(spec), 23, 18, 2, 42);
    CHECK(store.base_ids.size() == 1600);
    CHECK(store.novel_ids.size() == 23);
    std::set<std::uint32_t> base(store.base_ids.begin(), store.base_ids.end());
    for (std::uint32_t id : store.novel_ids) CHECK(base.count(id) == 0);
    for (const auto& c : store.classes) {
        CHECK(c.train_indexes.size() == 18);
        CHECK(c.val_indexes.size() == 2);
        CHECK(c.train_indexes.size() + c.val_indexes.size() == static_cast<std::size_t>(c.count()));
    }
    // labels are the rank of the class id among base ids
    CHECK(store.label_of(store.base_ids[0]) == 0);
    CHECK(store.label_of(store.base_ids[1599]) == 1599);
    CHECK(store.label_count() == 1600);
}

TEST_CASE("holdout split is deterministic per seed and rejects bad requests") {
    auto base = gen_synthetic_store(small_vec_spec());
    auto a = split_holdout(base, 5, 4, 2, 9);
    auto b = split_holdout(base, 5, 4, 2, 9);
    CHECK(serialize_store(a) == serialize_store(b));
    auto c = split_holdout(base, 5, 4, 2, 10);
    CHECK(store_hash(a) != store_hash(c));
    CHECK_THROWS_AS(split_holdout(base, 30, 4, 2, 9), ConfigError);
    CHECK_THROWS_AS(split_holdout(base, 5, 7, 2, 9), ConfigError);
}

TEST_CASE("zipf table: degenerate and analytic cases") {
    auto store = split_holdout(gen_synthetic_store(small_vec_spec()), 5, 4, 2, 9);
    auto uniform = class_sampler(store, {0.0});
    CHECK(uniform.prob.size() == 25);
    for (double p : uniform.prob) CHECK(p == doctest::Approx(1.0 / 25).epsilon(1e-12));
    auto zipf = class_sampler(store, {1.0});
    CHECK(zipf.prob[0] / zipf.prob[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(zipf.prob[0] / zipf.prob[4] == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("zipf sampling matches the analytic distribution (chi-square at 0.01)") {
    SyntheticSpec spec = small_vec_spec();
    spec.n_classes = 100;
    spec.per_class = 4;
    auto store = split_holdout(gen_synthetic_store(spec), 0, 3, 1, 1);
    auto table = class_sampler(store, {1.0});
    RngStream rng(31337, 0);
    std::vector<long> counts(100, 0);
    const long n = 100000;
    for (long i = 0; i < n; ++i) counts[store.label_of(table.sample(rng))]++;
    double stat = 0.0;
    for (int k = 0; k < 100; ++k) {
        const double expect = table.prob[static_cast<std::size_t>(k)] * static_cast<double>(n);
        const double d = static_cast<double>(counts[static_cast<std::size_t>(k)]) - expect;
        stat += d * d / expect;
    }
    CHECK(stat < chi2_crit(99, kZ99));
}

TEST_CASE("instance relabeling makes a singleton class per training exemplar") {
    SyntheticSpec spec;
    spec.n_classes = 1623;
    spec.per_class = 20;
    spec.dim = 4;
    spec.seed = 13;
    auto store = split_holdout(gen_synthetic_store(spec), 23, 18, 2, 42);
    auto flat = instance_relabel(store);
    CHECK(flat.base_ids.size() == 1600 * 18);
    CHECK(flat.novel_ids.size() == 23);
    std::set<std::uint32_t> ids;
    for (const auto& c : flat.classes) {
        ids.insert(c.id);
        if (!c.novel) {
            CHECK(c.count() == 1);
            CHECK(c.splits[0] == kSplitTrain);
        }
    }
    CHECK(ids.size() == flat.classes.size());
}

TEST_CASE("sample budget trims to the paper's imbalanced shape") {
    SyntheticSpec spec;
    spec.n_classes = 463;
    spec.per_class = 20;
    spec.dim = 4;
    spec.seed = 17;
    auto store = split_holdout(gen_synthetic_store(spec), 0, 18, 2, 42);
    auto trimmed = apply_sample_budget(store, {1.0}, 3598);
    CHECK(trimmed.total_train_exemplars() == 3598);
    CHECK(trimmed.base_ids.size() <= 463);
    // per-class train counts never increase with rank
    long prev = 1 << 30;
    for (std::uint32_t id : trimmed.base_ids) {
        const long c = static_cast<long>(trimmed.cls(id).train_indexes.size());
        CHECK(c <= prev);
        prev = c;
    }
    // head classes keep their full training pool
    CHECK(trimmed.cls(trimmed.base_ids[0]).train_indexes.size() == 18);
}

TEST_CASE("EXB1 round-trips byte-identically and hashes stably") {
    auto store = split_holdout(gen_synthetic_store(small_vec_spec()), 5, 4, 2, 9);
    const std::string path = (fs::temp_directory_path() / "iclforge_store_test.exb1").string();
    save_store(store, path);
    auto loaded = load_store(path);
    CHECK(serialize_store(loaded) == serialize_store(store));
    CHECK(store_hash(loaded) == store_hash(store));
    fs::remove(path);
}

TEST_CASE("EXB1 size formula: 10 classes x 4 exemplars of 8x8 rasters") {
    SyntheticSpec spec;
    spec.n_classes = 10;
    spec.per_class = 4;
    spec.kind = StoreKind::raster;
    spec.raster = 8;
    spec.seed = 1;
    auto bytes = serialize_store(gen_synthetic_store(spec));
    // magic 4 + kind 1 + h 4 + w 4 + count 4, then per class 4+4+1
    // and per exemplar 1 + 64
    const std::size_t expect = 17 + 10 * (9 + 4 * (1 + 64));
    CHECK(expect == 2707);
    CHECK(bytes.size() == expect);
}

TEST_CASE("EXB1 rejects corruption with byte offsets") {
    auto store = gen_synthetic_store(small_vec_spec());
    auto bytes = serialize_store(store);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
        parse_store(bad_magic.data(), bad_magic.size());
        CHECK(false);
    } catch (const FormatError& e) {
        CHECK(e.offset == 0);
    }

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(parse_store(truncated.data(), truncated.size()), FormatError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(parse_store(trailing.data(), trailing.size()), FormatError);

    auto bad_kind = bytes;
    bad_kind[4] = 9;
    try {
        parse_store(bad_kind.data(), bad_kind.size());
        CHECK(false);
    } catch (const FormatError& e) {
        CHECK(e.offset == 4);
    }
}

TEST_CASE("P5 importer builds a raster store from class directories") {
    const fs::path root = fs::temp_directory_path() / "iclforge_pgm_test";
    fs::remove_all(root);
    for (int c = 0; c < 3; ++c) {
        fs::create_directories(root / ("class" + std::to_string(c)));
        for (int e = 0; e < 2; ++e) {
            std::ofstream f(root / ("class" + std::to_string(c)) /
                                ("ex" + std::to_string(e) + ".pgm"),
                            std::ios::binary);
            f << "P5\n# comment line\n4 4\n255\n";
            for (int i = 0; i < 16; ++i) f.put(static_cast<char>(c * 40 + e * 10 + i));
        }
    }
    auto store = import_pgm_dir(root.string());
    CHECK(store.kind == StoreKind::raster);
    CHECK(store.h == 4);
    CHECK(store.w == 4);
    CHECK(store.classes.size() == 3);
    for (const auto& c : store.classes) CHECK(c.count() == 2);
    CHECK(store.raster_ptr(store.cls(1), 1)[0] == 50);

    std::ofstream bad(root / "class0" / "bad.pgm", std::ios::binary);
    bad << "P5\n4 4\n70000\n";
    bad.close();
    CHECK_THROWS_AS(import_pgm_dir(root.string()), FormatError);
    fs::remove_all(root);
}
