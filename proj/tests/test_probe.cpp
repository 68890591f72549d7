#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "iclforge/binio.hpp"
#include "iclforge/probe.hpp"

using namespace iclforge;
namespace fs = std::filesystem;

namespace {

AttentionTrace make_trace(int layers, int heads, int pairs) {
    AttentionTrace t;
    t.layers = layers;
    t.heads = heads;
    t.tokens = 2 * pairs + 1;
    t.roles = token_roles(pairs);
    for (int i = 0; i < layers * heads; ++i) t.weights.emplace_back(std::vector<int>{t.tokens, t.tokens});
    return t;
}

void fill_uniform_causal(Tensor& w) {
    const int T = w.dim(0);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j <= i; ++j) w.at(i, j) = 1.0f / static_cast<float>(i + 1);
}

Episode two_pair_episode() {
    Episode ep;
    ep.context = {{{7, 0}, 2}, {{9, 1}, 5}};
    ep.query = {7, 2};
    ep.query_class = 7;
    ep.target = 2;
    ep.original_target = 2;
    return ep;
}

ExemplarStore gaussian_store(int classes, int dim, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.n_classes = classes;
    spec.per_class = 8;
    spec.dim = dim;
    spec.seed = seed;
    return split_holdout(gen_synthetic_store(spec), 4, 6, 2, 42);
}

ModelConfig probe_scale_config(const ExemplarStore& store, int pairs) {
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 2;
    mc.embed_dim = 16;
    mc.label_vocab = store.label_count();
    mc.pairs = pairs;
    mc.embedder = EmbedderKind::linear_vector;
    mc.input_dim = store.dim;
    return mc;
}

}  // namespace

TEST_CASE("label-image metric saturates at one and ignores non-label rows") {
    AttentionTrace t = make_trace(1, 1, 4);
    Tensor& w = t.weights[0];
    for (int p = 0; p < t.tokens; ++p) {
        if (t.roles[static_cast<std::size_t>(p)] == TokenRole::label)
            w.at(p, p - 1) = 1.0f;
        else
            w.at(p, 0) = 1.0f;  // arbitrary mass elsewhere must not matter
    }
    CHECK(metric_label_image(t).at(0, 0) == 1.0);

    // perturbing a non-label row leaves the metric untouched
    w.at(2, 0) = 0.25f;
    w.at(2, 2) = 0.75f;
    CHECK(metric_label_image(t).at(0, 0) == 1.0);
}

TEST_CASE("uniform causal attention matches the closed-form averages") {
    const int pairs = 8;
    AttentionTrace t = make_trace(1, 1, pairs);
    fill_uniform_causal(t.weights[0]);

    double li = 0.0;  // accumulate the float32 entries the trace actually holds
    for (int p = 1; p < 2 * pairs; p += 2) li += static_cast<double>(1.0f / static_cast<float>(p + 1));
    li /= pairs;
    // (1/2 + 1/4 + ... + 1/16)/8 = 0.169866...; label rows sit at odd positions
    CHECK(metric_label_image(t).at(0, 0) == doctest::Approx(li).epsilon(1e-12));
    CHECK(li == doctest::Approx(0.16989).epsilon(1e-3));

    double diag = 0.0;
    for (int p = 2; p < 2 * pairs; p += 2) diag += static_cast<double>(1.0f / static_cast<float>(p + 1));
    diag /= pairs - 1;
    CHECK(metric_image_image_diag(t).at(0, 0) == doctest::Approx(diag).epsilon(1e-12));
}

TEST_CASE("hand-built five-token trace reproduces manual values") {
    AttentionTrace t = make_trace(1, 1, 2);
    Tensor& w = t.weights[0];
    const float rows[5][5] = {{1, 0, 0, 0, 0},
                              {0.3f, 0.7f, 0, 0, 0},
                              {0.25f, 0.25f, 0.5f, 0, 0},
                              {0.1f, 0.2f, 0.3f, 0.4f, 0},
                              {0.15f, 0.2f, 0.25f, 0.1f, 0.3f}};
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) w.at(i, j) = rows[i][j];

    const Episode ep = two_pair_episode();
    CHECK(metric_label_image(t).at(0, 0) == doctest::Approx(0.3).epsilon(1e-7));
    CHECK(metric_image_image_diag(t).at(0, 0) == doctest::Approx(0.25).epsilon(1e-7));
    CHECK(metric_image_image_mass(t).at(0, 0) == doctest::Approx(0.25).epsilon(1e-7));
    CHECK(metric_image_image_query(t, ep).at(0, 0) == doctest::Approx(0.15).epsilon(1e-7));
    CHECK(metric_image_label(t, ep).at(0, 0) == doctest::Approx(0.2).epsilon(1e-7));
}

TEST_CASE("image-image-diag saturates at offset two and needs a second sample row") {
    AttentionTrace t = make_trace(1, 1, 3);
    Tensor& w = t.weights[0];
    for (int p = 0; p < t.tokens; ++p) {
        if (t.roles[static_cast<std::size_t>(p)] == TokenRole::sample && p >= 2)
            w.at(p, p - 2) = 1.0f;
        else
            w.at(p, 0) = 1.0f;
    }
    CHECK(metric_image_image_diag(t).at(0, 0) == 1.0);

    // a single context pair leaves no sample row with a preceding sample
    AttentionTrace tiny = make_trace(1, 1, 1);
    fill_uniform_causal(tiny.weights[0]);
    CHECK_THROWS_AS(metric_image_image_diag(tiny), EvalError);
}

TEST_CASE("query-row metrics follow analytic sums on uniform rows") {
    const int pairs = 8;
    AttentionTrace t = make_trace(1, 1, pairs);
    fill_uniform_causal(t.weights[0]);

    // three context items of the query class, three labels equal to the target
    Episode ep;
    for (int i = 0; i < pairs; ++i)
        ep.context.push_back({{static_cast<std::uint32_t>(100 + i), 0}, 10 + i});
    ep.query_class = 55;
    ep.target = 3;
    for (int i : {1, 4, 6}) {
        ep.context[static_cast<std::size_t>(i)].ref.class_id = 55;
        ep.context[static_cast<std::size_t>(i)].label = 3;
    }
    ep.query = {55, 1};

    CHECK(metric_image_image_query(t, ep).at(0, 0) == doctest::Approx(3.0 / 17.0).epsilon(1e-7));
    CHECK(metric_image_label(t, ep).at(0, 0) == doctest::Approx(3.0 / 17.0).epsilon(1e-7));

    // all query-row mass on the single same-class sample
    AttentionTrace sat = make_trace(1, 1, pairs);
    Episode one = ep;
    for (int i : {4, 6}) {
        one.context[static_cast<std::size_t>(i)].ref.class_id = 100 + i;
        one.context[static_cast<std::size_t>(i)].label = 10 + i;
    }
    sat.weights[0].at(2 * pairs, 2 * 1) = 1.0f;
    CHECK(metric_image_image_query(sat, one).at(0, 0) == 1.0);

    // no query-class context makes the metric undefined
    Episode standard = ep;
    for (auto& c : standard.context) c.ref.class_id = 99;
    CHECK(!has_query_class_context(standard));
    CHECK_THROWS_AS(metric_image_image_query(t, standard), EvalError);

    // mismatched episode length is rejected
    Episode short_ep = two_pair_episode();
    CHECK_THROWS_AS(metric_image_image_query(t, short_ep), ShapeError);
}

TEST_CASE("suite metrics stay in range and ignore thread count and order") {
    ExemplarStore store = gaussian_store(12, 8, 21);
    ModelConfig mc = probe_scale_config(store, 4);
    TransformerModel m = init_model(mc, 3);

    auto suite = presample_suite(24, 11, 0, [&](RngStream& rng) {
        return build_icl_eval(store, EvalTask{2, 2}, rng, mc.pairs);
    });

    const ProbeSummary s1 = probe_suite(m, store, suite, 1);
    for (const HeadGrid* g :
         {&s1.image_image_diag, &s1.label_image, &s1.image_image_query, &s1.image_label})
        for (double x : g->v) {
            CHECK(x >= 0.0);
            CHECK(x <= 1.0);
        }

    const ProbeSummary s3 = probe_suite(m, store, suite, 3);
    CHECK(s1.image_image_diag.v == s3.image_image_diag.v);
    CHECK(s1.label_image.v == s3.label_image.v);
    CHECK(s1.image_image_query.v == s3.image_image_query.v);
    CHECK(s1.image_label.v == s3.image_label.v);

    std::vector<Episode> rotated(suite.begin() + 7, suite.end());
    rotated.insert(rotated.end(), suite.begin(), suite.begin() + 7);
    const ProbeSummary sr = probe_suite(m, store, rotated, 2);
    for (std::size_t j = 0; j < s1.label_image.v.size(); ++j) {
        CHECK(sr.label_image.v[j] == doctest::Approx(s1.label_image.v[j]).epsilon(1e-9));
        CHECK(sr.image_image_query.v[j] ==
              doctest::Approx(s1.image_image_query.v[j]).epsilon(1e-9));
    }

    // a suite of standard-format episodes never defines image-image-query
    auto iwl = presample_suite(6, 11, 1, [&](RngStream& rng) {
        return build_iwl_eval(store, rng, mc.pairs);
    });
    CHECK_THROWS_AS(probe_suite(m, store, iwl, 1), EvalError);
}

TEST_CASE("pre-softmax scores agree with the probability trace through softmax") {
    ExemplarStore store = gaussian_store(10, 8, 5);
    ModelConfig mc = probe_scale_config(store, 3);
    TransformerModel m = init_model(mc, 9);
    Workspace ws(mc);
    RngStream rng(4, 17);
    const Episode ep = build_icl_eval(store, EvalTask{3, 1}, rng, mc.pairs);

    const AttentionTrace prob = capture_trace(m, store, ep, ws);
    const AttentionTrace sc = score_trace(m, store, ep, ws);
    REQUIRE(sc.tokens == prob.tokens);
    for (int l = 0; l < sc.layers; ++l)
        for (int h = 0; h < sc.heads; ++h) {
            const Tensor& s = sc.at(l, h);
            const Tensor& p = prob.at(l, h);
            for (int i = 0; i < sc.tokens; ++i) {
                for (int j = i + 1; j < sc.tokens; ++j) CHECK(s.at(i, j) == 0.0f);
                double mx = -1e30;
                for (int j = 0; j <= i; ++j) mx = std::max(mx, static_cast<double>(s.at(i, j)));
                double z = 0.0;
                for (int j = 0; j <= i; ++j) z += std::exp(static_cast<double>(s.at(i, j)) - mx);
                for (int j = 0; j <= i; ++j)
                    CHECK(std::exp(static_cast<double>(s.at(i, j)) - mx) / z ==
                          doctest::Approx(static_cast<double>(p.at(i, j))).epsilon(1e-5));
            }
        }

    // the flag variant runs end to end and differs from the probability path
    auto suite = presample_suite(4, 2, 0, [&](RngStream& r) {
        return build_icl_eval(store, EvalTask{3, 1}, r, mc.pairs);
    });
    const ProbeSummary a = probe_suite(m, store, suite, 1, false);
    const ProbeSummary b = probe_suite(m, store, suite, 1, true);
    CHECK(a.label_image.v != b.label_image.v);
}

TEST_CASE("trace export round-trips and draws the expected band") {
    AttentionTrace t = make_trace(2, 1, 2);
    fill_uniform_causal(t.weights[0]);
    Tensor& w = t.weights[1];
    for (int p = 0; p < t.tokens; ++p) {
        if (t.roles[static_cast<std::size_t>(p)] == TokenRole::label)
            w.at(p, p - 1) = 1.0f;
        else
            w.at(p, 0) = 1.0f;
    }

    const fs::path dir = fs::temp_directory_path() / "iclforge_trace";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string prefix = (dir / "ep0").string();
    export_trace(t, prefix);

    for (int l = 0; l < 2; ++l) CHECK(fs::exists(prefix + "_L" + std::to_string(l) + "H0.csv"));
    CHECK(fs::exists(prefix + "_roles.csv"));

    const AttentionTrace back = load_trace(prefix);
    CHECK(back.layers == t.layers);
    CHECK(back.heads == t.heads);
    CHECK(back.tokens == t.tokens);
    CHECK(back.roles == t.roles);
    for (std::size_t i = 0; i < t.weights.size(); ++i)
        CHECK(back.weights[i].data == t.weights[i].data);
    CHECK(metric_label_image(back).at(1, 0) == metric_label_image(t).at(1, 0));

    // the saturated head's label rows peak exactly one column left of the diagonal
    const Tensor& m = back.weights[1];
    for (int p = 1; p < t.tokens; p += 2) {
        int best = 0;
        for (int j = 1; j < t.tokens; ++j)
            if (m.at(p, j) > m.at(p, best)) best = j;
        CHECK(best == p - 1);
    }

    // matrix files carry one row per token
    const auto bytes = read_file_bytes(prefix + "_L0H0.csv");
    CHECK(std::count(bytes.begin(), bytes.end(), '\n') == t.tokens);

    CHECK_THROWS_AS(load_trace((dir / "missing").string()), IoError);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint series is step-ordered, constant for a frozen model") {
    ExemplarStore store = gaussian_store(10, 8, 31);
    ModelConfig mc = probe_scale_config(store, 8);
    TransformerModel m = init_model(mc, 13);

    const fs::path dir = fs::temp_directory_path() / "iclforge_series";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string p0 = (dir / "ckpt_0.bin").string();
    const std::string p1 = (dir / "ckpt_100.bin").string();
    save_checkpoint(m, nullptr, 0, p0);
    save_checkpoint(m, nullptr, 100, p1);

    auto suite = presample_suite(12, 8, 0, [&](RngStream& rng) {
        return build_icl_eval(store, EvalTask{2, 4}, rng, mc.pairs);
    });

    // paths out of order; the series must come back sorted by step
    const HeadScoreSeries series = prev_token_score_series({p1, p0}, store, suite, 2);
    REQUIRE(series.steps == std::vector<long>{0, 100});
    REQUIRE(series.label_image.size() == 2);
    CHECK(series.label_image[0].v == series.label_image[1].v);

    // an untrained model attends near-uniformly, so the label-image score
    // sits near the uniform baseline
    double baseline = 0.0;
    for (int p = 1; p < 2 * mc.pairs; p += 2) baseline += 1.0 / static_cast<double>(p + 1);
    baseline /= mc.pairs;
    for (int l = 0; l < series.layers; ++l)
        for (int h = 0; h < series.heads; ++h)
            CHECK(std::abs(series.label_image[0].at(l, h) - baseline) < 0.05);

    // config drift and duplicate steps are rejected
    ModelConfig other = mc;
    other.embed_dim = 32;
    const std::string px = (dir / "ckpt_other.bin").string();
    save_checkpoint(init_model(other, 1), nullptr, 200, px);
    CHECK_THROWS_AS(prev_token_score_series({p0, px}, store, suite, 1), ConfigError);
    CHECK_THROWS_AS(prev_token_score_series({p0, p0}, store, suite, 1), ConfigError);

    fs::remove_all(dir);
}

TEST_CASE("probe rows land in the metric log under per-head split names") {
    ProbeSummary s;
    s.image_image_diag = HeadGrid(2, 1);
    s.label_image = HeadGrid(2, 1);
    s.image_image_query = HeadGrid(2, 1);
    s.image_label = HeadGrid(2, 1);
    s.label_image.at(1, 0) = 0.75;
    s.image_label.at(0, 0) = 0.25;

    MetricLog log;
    append_probe_rows(log, 3000, 7, s);
    REQUIRE(log.rows.size() == 8);
    bool saw_li = false, saw_il = false;
    for (const MetricRow& r : log.rows) {
        CHECK(r.step == 3000);
        CHECK(r.seed == 7);
        CHECK(r.split.rfind("probe-", 0) == 0);
        if (r.split == "probe-label-image-L1H0") {
            CHECK(r.value == 0.75);
            saw_li = true;
        }
        if (r.split == "probe-image-label-L0H0") {
            CHECK(r.value == 0.25);
            saw_il = true;
        }
    }
    CHECK(saw_li);
    CHECK(saw_il);

    // appending at a later step keeps the log accepting rows
    append_probe_rows(log, 4500, 7, s);
    CHECK(log.rows.size() == 16);
}
