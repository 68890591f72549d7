#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "iclforge/binio.hpp"
#include "iclforge/seqforge.hpp"

using namespace iclforge;
namespace fs = std::filesystem;

namespace {

ExemplarStore test_store(int classes = 40, int per_class = 8, int novel = 6,
                         std::uint64_t seed = 3) {
    SyntheticSpec spec;
    spec.n_classes = classes;
    spec.per_class = per_class;
    spec.dim = 8;
    spec.noise = 0.1f;
    spec.seed = seed;
    return split_holdout(gen_synthetic_store(spec), novel, per_class - 2, 2, 42);
}

std::map<std::uint32_t, int> class_histogram(const Episode& ep) {
    std::map<std::uint32_t, int> h;
    for (const auto& it : ep.context) h[it.ref.class_id]++;
    return h;
}

double chi2_crit(int df, double z) {
    const double d = static_cast<double>(df);
    const double t = 1.0 - 2.0 / (9.0 * d) + z * std::sqrt(2.0 / (9.0 * d));
    return d * t * t * t;
}
constexpr double kZ99 = 2.3263478740408408;

}  // namespace

TEST_CASE("context format parser handles the paper's patterns") {
    auto high = parse_context_format("3xQ-3xA-B-C");
    CHECK(high.size() == 4);
    CHECK(format_total(high) == 8);
    CHECK(format_query_reps(high) == 3);

    auto mid = parse_context_format("3xQ-A-B-C-D-E");
    CHECK(format_total(mid) == 8);
    CHECK(format_query_reps(mid) == 3);

    auto low = parse_context_format("Q-A-B-C-D-E-F-G");
    CHECK(format_total(low) == 8);
    CHECK(format_query_reps(low) == 1);

    CHECK_THROWS_AS(parse_context_format("3xA-3xB-C-D"), ConfigError);   // no Q
    CHECK_THROWS_AS(parse_context_format("Q-Q-A-B-C-D-E-F"), ConfigError);  // two Q groups
    CHECK_THROWS_AS(parse_context_format("3xQ-3xA-A-B"), ConfigError);   // repeated letter
    CHECK_THROWS_AS(parse_context_format("3xQ--B"), ConfigError);
    CHECK_THROWS_AS(parse_context_format("0xQ-A"), ConfigError);
    CHECK_THROWS_AS(parse_context_format("3xQ-3xz-B-C"), ConfigError);
}

TEST_CASE("recipe validation ties format, reps and context length together") {
    Recipe r = recipe_preset("bursty");
    r.validate(8);
    CHECK_THROWS_AS(r.validate(9), ConfigError);
    r.query_class_reps = 2;
    CHECK_THROWS_AS(r.validate(8), ConfigError);

    Recipe low = recipe_preset("bursty-low");
    CHECK(low.query_class_reps == 1);
    CHECK_FALSE(low.inst_copy);
    low.validate(8);

    Recipe lowc = recipe_preset("bursty-low-copy");
    CHECK(lowc.inst_copy);

    Recipe std_r = recipe_preset("standard");
    CHECK(std_r.variant == Variant::standard);
    std_r.validate(8);

    CHECK_THROWS_AS(recipe_preset("no-such-recipe"), ConfigError);
}

TEST_CASE("standard episodes touch L+1 distinct classes") {
    auto store = test_store();
    for (int i = 0; i < 50; ++i) {
        RngStream rng(7, static_cast<std::uint64_t>(i));
        Episode ep = build_standard(store, rng, 8);
        CHECK(ep.context.size() == 8);
        auto h = class_histogram(ep);
        CHECK(h.size() == 8);  // 8 distinct context classes
        for (const auto& [id, n] : h) {
            CHECK(n == 1);
            CHECK(id != ep.query_class);
        }
        CHECK(ep.target == store.label_of(ep.query_class));
        for (const auto& it : ep.context) {
            CHECK(it.label == store.label_of(it.ref.class_id));
            CHECK(store.cls(it.ref.class_id).splits[it.ref.index] == kSplitTrain);
        }
        CHECK(store.cls(ep.query_class).splits[ep.query.index] == kSplitTrain);
    }
}

TEST_CASE("standard episode query classes are uniform (chi-square at 0.01)") {
    auto store = test_store(32, 6, 2);  // 30 base classes
    std::map<int, long> counts;
    const long n = 100000;
    for (long i = 0; i < n; ++i) {
        RngStream rng(5, static_cast<std::uint64_t>(i));
        counts[store.label_of(build_standard(store, rng, 8).query_class)]++;
    }
    const double expect = static_cast<double>(n) / 30.0;
    double stat = 0.0;
    for (int k = 0; k < 30; ++k) {
        const double d = static_cast<double>(counts[k]) - expect;
        stat += d * d / expect;
    }
    CHECK(stat < chi2_crit(29, kZ99));
}

TEST_CASE("bursty episodes follow the 3xQ-3xA-B-C shape") {
    auto store = test_store();
    Recipe recipe = recipe_preset("bursty");
    for (int i = 0; i < 50; ++i) {
        RngStream rng(9, static_cast<std::uint64_t>(i));
        Episode ep = build_bursty(store, rng, recipe, 8);
        auto h = class_histogram(ep);
        CHECK(h.size() == 4);
        CHECK(h[ep.query_class] == 3);
        std::multiset<int> sizes;
        for (const auto& [id, cnt] : h)
            if (id != ep.query_class) sizes.insert(cnt);
        CHECK(sizes == std::multiset<int>{1, 1, 3});
        // the query exemplar never appears in context
        for (const auto& it : ep.context) CHECK_FALSE(it.ref == ep.query);
        // without instCopy all context exemplars are pairwise distinct
        for (std::size_t a = 0; a < ep.context.size(); ++a)
            for (std::size_t b = a + 1; b < ep.context.size(); ++b)
                CHECK_FALSE(ep.context[a].ref == ep.context[b].ref);
    }
}

TEST_CASE("bursty-low episodes carry exactly one query-class item") {
    auto store = test_store();
    Recipe recipe = recipe_preset("bursty-low");
    RngStream rng(2, 0);
    Episode ep = build_bursty(store, rng, recipe, 8);
    auto h = class_histogram(ep);
    CHECK(h.size() == 8);
    CHECK(h[ep.query_class] == 1);
}

TEST_CASE("bursty building rejects stores without enough exemplars") {
    auto store = test_store(40, 3, 6);  // 1 train exemplar per class after 1/2 split
    Recipe recipe = recipe_preset("bursty");
    RngStream rng(1, 0);
    CHECK_THROWS_AS(build_bursty(store, rng, recipe, 8), RecipeError);
}

TEST_CASE("instCopy replaces query-class items byte-for-byte") {
    auto store = test_store();
    Recipe recipe = recipe_preset("bursty");
    for (int i = 0; i < 30; ++i) {
        RngStream rng(13, static_cast<std::uint64_t>(i));
        Episode ep = build_bursty(store, rng, recipe, 8);
        Episode copied = apply_inst_copy(ep, rng);
        CHECK(copied.copied);
        int byte_equal = 0;
        for (std::size_t p = 0; p < copied.context.size(); ++p) {
            const auto& it = copied.context[p];
            if (store.same_payload(it.ref.class_id, static_cast<int>(it.ref.index),
                                   copied.query.class_id, static_cast<int>(copied.query.index)))
                ++byte_equal;
            if (it.ref.class_id != copied.query_class) {
                // distractors untouched
                CHECK(it.ref == ep.context[p].ref);
            } else {
                CHECK(it.ref == copied.query);
                CHECK(it.label == ep.context[p].label);
            }
        }
        CHECK(byte_equal == 3);

        // and without instCopy no context exemplar equals the query's bytes
        int eq_before = 0;
        for (const auto& it : ep.context)
            if (store.same_payload(it.ref.class_id, static_cast<int>(it.ref.index),
                                   ep.query.class_id, static_cast<int>(ep.query.index)))
                ++eq_before;
        CHECK(eq_before == 0);
    }

    RngStream rng(14, 0);
    Episode std_ep = build_standard(store, rng, 8);
    CHECK_THROWS_AS(apply_inst_copy(std_ep, rng), RecipeError);
}

TEST_CASE("label swap frequency, consistency and never-self") {
    auto store = test_store();
    Recipe recipe = recipe_preset("bursty");
    long swapped = 0;
    const long n = 10000;
    for (long i = 0; i < n; ++i) {
        RngStream rng(17, static_cast<std::uint64_t>(i));
        Episode ep = build_bursty(store, rng, recipe, 8);
        Episode sw = apply_label_swap(ep, store, rng, 0.2);
        if (!sw.swapped) {
            CHECK(sw.target == ep.target);
            continue;
        }
        ++swapped;
        CHECK(sw.target != sw.original_target);
        CHECK(sw.original_target == ep.target);
        for (const auto& it : sw.context)
            if (it.ref.class_id == sw.query_class) CHECK(it.label == sw.target);
    }
    const double freq = static_cast<double>(swapped) / static_cast<double>(n);
    CHECK(freq > 0.19);
    CHECK(freq < 0.21);

    // p = 0 is the identity
    RngStream rng(18, 0);
    Episode ep = build_bursty(store, rng, recipe, 8);
    Episode same = apply_label_swap(ep, store, rng, 0.0);
    CHECK_FALSE(same.swapped);
    CHECK(same.target == ep.target);
}

TEST_CASE("training batches mix bursty and standard at the recipe fraction") {
    auto store = test_store();
    TrainingMix mix;  // defaults: 0.9 bursty, batch 16
    Recipe recipe = recipe_preset("bursty-copy");
    long bursty = 0, total = 0, copied = 0;
    for (long step = 0; step < 10000; ++step) {
        auto batch = sample_training_batch(store, mix, recipe, 8, 77, step);
        REQUIRE(batch.size() == 16);
        for (const auto& ep : batch) {
            ++total;
            if (ep.variant == Variant::bursty) {
                ++bursty;
                if (ep.copied) ++copied;
            }
        }
    }
    const double frac = static_cast<double>(bursty) / static_cast<double>(total);
    CHECK(frac > 0.89);
    CHECK(frac < 0.91);
    CHECK(copied == bursty);  // inst-copy-prob 1.0
}

TEST_CASE("same (seed, step) reproduces the batch exactly") {
    auto store = test_store();
    TrainingMix mix;
    mix.p_label_swap = 0.2;
    Recipe recipe = recipe_preset("bursty");
    auto a = sample_training_batch(store, mix, recipe, 8, 123, 456);
    auto b = sample_training_batch(store, mix, recipe, 8, 123, 456);
    CHECK(serialize_suite(a, 0) == serialize_suite(b, 0));
    auto c = sample_training_batch(store, mix, recipe, 8, 123, 457);
    CHECK(serialize_suite(a, 0) != serialize_suite(c, 0));
}

TEST_CASE("icl eval episodes remap novel classes onto 0..k-1") {
    auto store = test_store();
    for (auto [k, n] : std::vector<std::pair<int, int>>{{2, 4}, {4, 2}}) {
        for (int i = 0; i < 40; ++i) {
            RngStream rng(21, static_cast<std::uint64_t>(i));
            Episode ep = build_icl_eval(store, {k, n}, rng, 8);
            CHECK(ep.kway == k);
            CHECK(ep.variant == Variant::icl_eval);
            auto h = class_histogram(ep);
            CHECK(static_cast<int>(h.size()) == k);
            std::set<int> labels;
            std::map<std::uint32_t, std::set<int>> per_class_labels;
            for (const auto& it : ep.context) {
                CHECK(store.cls(it.ref.class_id).novel);
                CHECK(it.label >= 0);
                CHECK(it.label < k);
                labels.insert(it.label);
                per_class_labels[it.ref.class_id].insert(it.label);
                CHECK_FALSE(it.ref == ep.query);
            }
            CHECK(static_cast<int>(labels.size()) == k);
            for (const auto& [id, ls] : per_class_labels) {
                CHECK(ls.size() == 1);
                CHECK(h[id] == n);
            }
            CHECK(ep.target >= 0);
            CHECK(ep.target < k);
            CHECK(store.cls(ep.query_class).novel);
            CHECK(h.count(ep.query_class) == 1);
        }
    }
}

TEST_CASE("3-way 3-shot works with 9 context pairs") {
    auto store = test_store();
    RngStream rng(22, 0);
    Episode ep = build_icl_eval(store, {3, 3}, rng, 9);
    CHECK(ep.context.size() == 9);
    CHECK(class_histogram(ep).size() == 3);
    CHECK_THROWS_AS(build_icl_eval(store, {3, 3}, rng, 8), EvalError);
}

TEST_CASE("iwl eval queries come from the validation split") {
    auto store = test_store();
    for (int i = 0; i < 40; ++i) {
        RngStream rng(23, static_cast<std::uint64_t>(i));
        Episode ep = build_iwl_eval(store, rng, 8);
        CHECK(ep.variant == Variant::iwl_eval);
        CHECK(class_histogram(ep).size() == 8);
        CHECK(class_histogram(ep).count(ep.query_class) == 0);
        CHECK_FALSE(store.cls(ep.query_class).novel);
        CHECK(store.cls(ep.query_class).splits[ep.query.index] == kSplitValidation);
        CHECK(ep.target == store.label_of(ep.query_class));
        for (const auto& it : ep.context)
            CHECK(store.cls(it.ref.class_id).splits[it.ref.index] == kSplitTrain);
    }
}

TEST_CASE("context order is exchangeable (chi-square over position subsets)") {
    auto store = test_store();
    Recipe recipe = recipe_preset("bursty");
    // positions of the 3 query-class items: all C(8,3)=56 subsets equally likely
    std::map<int, long> counts;
    const long n = 20000;
    for (long i = 0; i < n; ++i) {
        RngStream rng(29, static_cast<std::uint64_t>(i));
        Episode ep = build_bursty(store, rng, recipe, 8);
        int mask = 0;
        for (int p = 0; p < 8; ++p)
            if (ep.context[static_cast<std::size_t>(p)].ref.class_id == ep.query_class)
                mask |= 1 << p;
        counts[mask]++;
    }
    CHECK(counts.size() == 56);
    const double expect = static_cast<double>(n) / 56.0;
    double stat = 0.0;
    for (const auto& [mask, c] : counts) {
        const double d = static_cast<double>(c) - expect;
        stat += d * d / expect;
    }
    CHECK(stat < chi2_crit(55, kZ99));
}

TEST_CASE("suites freeze deterministically and round-trip through EPS1") {
    auto store = test_store();
    const std::uint64_t shash = store_hash(store);
    auto build = [&](RngStream& rng) { return build_icl_eval(store, {2, 4}, rng, 8); };
    auto suite = presample_suite(50, 99, 1, build);
    auto suite2 = presample_suite(50, 99, 1, build);
    CHECK(suite_hash(suite, shash) == suite_hash(suite2, shash));
    auto suite3 = presample_suite(50, 100, 1, build);
    CHECK(suite_hash(suite, shash) != suite_hash(suite3, shash));

    const std::string path = (fs::temp_directory_path() / "iclforge_suite_test.eps1").string();
    save_suite(suite, shash, path);
    auto loaded = load_suite(path, store);
    CHECK(serialize_suite(loaded, shash) == serialize_suite(suite, shash));

    // wrong store: hash mismatch
    auto other = test_store(40, 8, 6, 4);
    CHECK_THROWS_AS(load_suite(path, other), HashMismatchError);
    fs::remove(path);
}

TEST_CASE("suite parsing validates references and structure") {
    auto store = test_store();
    const std::uint64_t shash = store_hash(store);
    auto suite = presample_suite(3, 1, 0, [&](RngStream& rng) {
        return build_icl_eval(store, {2, 4}, rng, 8);
    });
    auto bytes = serialize_suite(suite, shash);

    auto bad_magic = bytes;
    bad_magic[1] = 'X';
    CHECK_THROWS_AS(parse_suite(bad_magic.data(), bad_magic.size(), store), FormatError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 2);
    CHECK_THROWS_AS(parse_suite(truncated.data(), truncated.size(), store), FormatError);

    // corrupt an exemplar index deep in the payload
    auto bad_ref = bytes;
    bad_ref[bad_ref.size() - 3] = static_cast<char>(0xff);
    CHECK_THROWS_AS(parse_suite(bad_ref.data(), bad_ref.size(), store), FormatError);
}
