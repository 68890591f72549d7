#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "iclforge/binio.hpp"
#include "iclforge/trainloop.hpp"

using namespace iclforge;
namespace fs = std::filesystem;

namespace {

TrainConfig paper_schedule() {
    TrainConfig cfg;
    cfg.total_steps = 100000;
    cfg.warmup_steps = 15000;
    cfg.max_lr = 6e-4;
    return cfg;
}

ExemplarStore small_split_store(int classes, int dim, int novel, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.n_classes = classes;
    spec.per_class = 10;
    spec.dim = dim;
    spec.seed = seed;
    ExemplarStore store = gen_synthetic_store(spec);
    return split_holdout(store, novel, 8, 2, 42);
}

TrainConfig tiny_run_config(const ExemplarStore& store) {
    TrainConfig cfg;
    cfg.total_steps = 60;
    cfg.warmup_steps = 20;
    cfg.eval_every = 20;
    cfg.seeds = {1, 2};
    cfg.mix.batch_size = 4;
    cfg.mix.p_bursty = 0.0;
    cfg.recipe = recipe_preset("standard");
    cfg.model.layers = 2;
    cfg.model.heads = 1;
    cfg.model.embed_dim = 8;
    cfg.model.label_vocab = store.label_count();
    cfg.model.pairs = 2;
    cfg.model.embedder = EmbedderKind::linear_vector;
    cfg.model.input_dim = store.dim;
    return cfg;
}

RunSpec tiny_run_spec(const TrainConfig& cfg, const ExemplarStore& store, std::uint64_t store_hash,
                      const std::string& dir) {
    RunSpec spec;
    spec.config = cfg;
    spec.store = &store;
    spec.run_dir = dir;
    spec.store_hash = store_hash;
    spec.quiet = true;
    spec.suites.push_back(
        {"icl-2w1s", 2, presample_suite(40, 7, 0, [&](RngStream& rng) {
             return build_icl_eval(store, EvalTask{2, 1}, rng, cfg.model.pairs);
         })});
    spec.suites.push_back({"iwl-acc", 0, presample_suite(40, 7, 1, [&](RngStream& rng) {
                               return build_iwl_eval(store, rng, cfg.model.pairs);
                           })});
    return spec;
}

std::string read_text(const fs::path& p) {
    auto bytes = read_file_bytes(p.string());
    return std::string(bytes.begin(), bytes.end());
}

std::string fresh_dir(const char* name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p.string();
}

}  // namespace

TEST_CASE("learning rate warms up linearly then decays as a square root") {
    TrainConfig cfg = paper_schedule();
    CHECK(lr_at(0, cfg) == 0.0);
    CHECK(lr_at(15000, cfg) == doctest::Approx(6e-4).epsilon(1e-12));
    CHECK(lr_at(60000, cfg) == doctest::Approx(3e-4).epsilon(1e-12));
    CHECK(lr_at(7500, cfg) == doctest::Approx(3e-4).epsilon(1e-12));

    // continuous at the warmup boundary, strictly decreasing after it
    CHECK(std::abs(lr_at(14999, cfg) - lr_at(15001, cfg)) < 1e-7);
    double prev = lr_at(15000, cfg);
    for (long s = 16000; s <= 40000; s += 1000) {
        CHECK(lr_at(s, cfg) < prev);
        prev = lr_at(s, cfg);
    }
}

TEST_CASE("train config validation") {
    ExemplarStore store = small_split_store(12, 6, 4, 3);
    TrainConfig cfg = tiny_run_config(store);
    CHECK_NOTHROW(cfg.validate());
    TrainConfig bad = cfg;
    bad.warmup_steps = bad.total_steps + 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.max_lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.seeds.clear();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.mix.p_bursty = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("metric log round-trips and enforces the append contract") {
    MetricLog log;
    log.append(0, 1, "icl-2w4s", 0.5);
    log.append(0, 1, "iwl-acc", 0.25);
    log.append(1, 1, "train-loss", 7.3779);
    log.append(1500, 1, "icl-2w4s", 0.52);
    log.append(0, 2, "icl-2w4s", 0.49);

    const std::string csv = log.to_csv();
    CHECK(csv.substr(0, 22) == "step,seed,split,value\n");
    MetricLog back = MetricLog::from_csv(csv);
    CHECK(back.rows == log.rows);
    CHECK(back.to_csv() == csv);

    CHECK_THROWS_AS(log.append(100, 1, "icl-2w4s", 0.5), ConfigError);
    CHECK_NOTHROW(log.append(1500, 1, "icl-2w4s", 0.5));  // equal steps allowed

    CHECK_THROWS_AS(MetricLog::from_csv("bad,header\n"), FormatError);
    CHECK_THROWS_AS(MetricLog::from_csv("step,seed,split,value\n1,2\n"), FormatError);
    CHECK_THROWS_AS(MetricLog::from_csv("step,seed,split,value\nx,1,a,0.5\n"), FormatError);
    CHECK_THROWS_AS(MetricLog::from_csv("step,seed,split,value\n1,1,a,0.5"), FormatError);
}

TEST_CASE("restricted argmax ignores logits outside the remapped labels") {
    ExemplarStore store = small_split_store(24, 8, 6, 5);
    ModelConfig mc;
    mc.layers = 2;
    mc.heads = 1;
    mc.embed_dim = 8;
    mc.label_vocab = store.label_count();
    mc.pairs = 4;
    mc.embedder = EmbedderKind::linear_vector;
    mc.input_dim = store.dim;
    TransformerModel m = init_model(mc, 11);

    auto suite = presample_suite(60, 9, 0, [&](RngStream& rng) {
        return build_icl_eval(store, EvalTask{2, 2}, rng, mc.pairs);
    });
    const double acc = evaluate_icl(m, store, suite, 2);

    TransformerModel biased = m;
    for (int j = 2; j < mc.label_vocab; ++j) biased.head_b.at(j) += 10.0f;
    CHECK(evaluate_icl(biased, store, suite, 2) == acc);
    // the full-vocab diagnostic now steers every prediction to a label >= k
    CHECK(evaluate_icl(biased, store, suite, 2, true) == 0.0);

    CHECK_THROWS_AS(evaluate_icl(m, store, suite, 3), EvalError);
    CHECK_THROWS_AS(evaluate_iwl(m, store, suite), EvalError);
}

TEST_CASE("iwl evaluation rejects context leaking the query class") {
    ExemplarStore store = small_split_store(12, 6, 4, 3);
    ModelConfig mc = tiny_run_config(store).model;
    TransformerModel m = init_model(mc, 1);
    auto suite = presample_suite(20, 5, 1, [&](RngStream& rng) {
        return build_iwl_eval(store, rng, mc.pairs);
    });
    CHECK_NOTHROW(evaluate_iwl(m, store, suite));
    suite[3].context[0].ref.class_id = suite[3].query_class;
    CHECK_THROWS_AS(evaluate_iwl(m, store, suite), EvalError);
}

TEST_CASE("first training step loss is near the log-vocab expectation") {
    ExemplarStore store = small_split_store(40, 16, 8, 7);
    TrainConfig cfg = tiny_run_config(store);
    cfg.model.embed_dim = 16;
    cfg.model.input_dim = 16;
    cfg.model.label_vocab = store.label_count();
    cfg.mix.batch_size = 16;

    TransformerModel m = init_model(cfg.model, 1);
    AdamState opt = AdamState::init(param_views(m));
    std::vector<TransformerModel> bufs;
    for (int i = 0; i < 16; ++i) bufs.push_back(zeros_like(m));
    std::vector<Workspace> ws;
    ws.emplace_back(cfg.model);

    auto batch = sample_training_batch(store, cfg.mix, cfg.recipe, cfg.model.pairs, 1, 1);
    const double loss = train_step(m, opt, store, cfg, batch, 1, bufs, ws, 1);
    const double want = std::log(static_cast<double>(cfg.model.label_vocab));
    CHECK(loss > 0.9 * want);
    CHECK(loss < 1.1 * want);
    CHECK(opt.step == 1);
}

TEST_CASE("training steps are deterministic and thread-count invariant") {
    ExemplarStore store = small_split_store(12, 6, 4, 3);
    TrainConfig cfg = tiny_run_config(store);

    auto run_losses = [&](int threads) {
        TransformerModel m = init_model(cfg.model, 5);
        AdamState opt = AdamState::init(param_views(m));
        std::vector<TransformerModel> bufs;
        for (int i = 0; i < cfg.mix.batch_size; ++i) bufs.push_back(zeros_like(m));
        std::vector<Workspace> ws;
        for (int i = 0; i < std::max(1, threads); ++i) ws.emplace_back(cfg.model);
        std::vector<double> losses;
        for (long t = 1; t <= 8; ++t) {
            auto batch = sample_training_batch(store, cfg.mix, cfg.recipe, cfg.model.pairs, 5, t);
            losses.push_back(train_step(m, opt, store, cfg, batch, t, bufs, ws, 5, threads));
        }
        // fold the final parameters into the signature as well
        auto refs = param_refs(m);
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (auto& r : refs) h = fnv1a64(r.tensor->ptr(), r.tensor->numel() * 4, h);
        losses.push_back(static_cast<double>(h % 1000003));
        return losses;
    };

    const auto a = run_losses(1);
    const auto b = run_losses(1);
    const auto c = run_losses(3);
    CHECK(a == b);
    CHECK(a == c);
}

TEST_CASE("a two-class toy run memorizes its training classes") {
    SyntheticSpec sp;
    sp.n_classes = 2;
    sp.per_class = 20;
    sp.dim = 8;
    sp.seed = 13;
    ExemplarStore store = split_holdout(gen_synthetic_store(sp), 0, 16, 4, 42);

    TrainConfig cfg;
    cfg.total_steps = 2000;
    cfg.warmup_steps = 100;
    cfg.max_lr = 3e-3;
    cfg.eval_every = 500;
    cfg.seeds = {1};
    cfg.mix.batch_size = 8;
    cfg.mix.p_bursty = 0.0;
    cfg.recipe = recipe_preset("standard");
    cfg.model.layers = 2;
    cfg.model.heads = 1;
    cfg.model.embed_dim = 16;
    cfg.model.label_vocab = store.label_count();
    cfg.model.pairs = 1;
    cfg.model.embedder = EmbedderKind::linear_vector;
    cfg.model.input_dim = store.dim;

    auto suite = presample_suite(100, 3, 1, [&](RngStream& rng) {
        return build_iwl_eval(store, rng, cfg.model.pairs);
    });

    TransformerModel m = init_model(cfg.model, 1);
    AdamState opt = AdamState::init(param_views(m));
    std::vector<TransformerModel> bufs;
    for (int i = 0; i < cfg.mix.batch_size; ++i) bufs.push_back(zeros_like(m));
    std::vector<Workspace> ws;
    ws.emplace_back(cfg.model);

    double best = 0.0;
    for (long t = 1; t <= cfg.total_steps && best < 1.0; ++t) {
        auto batch = sample_training_batch(store, cfg.mix, cfg.recipe, cfg.model.pairs, 1, t);
        train_step(m, opt, store, cfg, batch, t, bufs, ws, 1);
        if (t % 200 == 0) best = std::max(best, evaluate_iwl(m, store, suite));
    }
    CHECK(best == 1.0);
}

TEST_CASE("aggregate matches hand arithmetic and flags misaligned grids") {
    MetricLog a, b;
    a.append(0, 1, "icl-2w4s", 0.4);
    a.append(10, 1, "icl-2w4s", 0.8);
    b.append(0, 2, "icl-2w4s", 0.6);
    b.append(10, 2, "icl-2w4s", 0.9);
    auto rows = aggregate_runs({a, b});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].step == 0);
    CHECK(rows[0].mean == doctest::Approx(0.5));
    CHECK(rows[0].std_dev == doctest::Approx(0.1));
    CHECK(rows[1].mean == doctest::Approx(0.85));

    auto single = aggregate_runs({a});
    CHECK(single[0].mean == 0.4);
    CHECK(single[0].std_dev == 0.0);

    MetricLog c;
    c.append(0, 3, "icl-2w4s", 0.5);
    CHECK_THROWS_AS(aggregate_runs({a, c}), EvalError);

    // recompute oracle over three synthetic logs
    MetricLog l1, l2, l3;
    RngStream rng(77, 1);
    std::vector<double> v1, v2, v3;
    for (long s = 0; s <= 40; s += 10) {
        v1.push_back(rng.next_unit());
        v2.push_back(rng.next_unit());
        v3.push_back(rng.next_unit());
        l1.append(s, 1, "train-loss", v1.back());
        l2.append(s, 2, "train-loss", v2.back());
        l3.append(s, 3, "train-loss", v3.back());
    }
    auto agg = aggregate_runs({l1, l2, l3});
    for (std::size_t i = 0; i < agg.size(); ++i) {
        const double mean = (v1[i] + v2[i] + v3[i]) / 3.0;
        const double var = ((v1[i] - mean) * (v1[i] - mean) + (v2[i] - mean) * (v2[i] - mean) +
                            (v3[i] - mean) * (v3[i] - mean)) /
                           3.0;
        CHECK(agg[i].mean == doctest::Approx(mean).epsilon(1e-12));
        CHECK(agg[i].std_dev == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
    }

    const std::string csv = aggregate_csv(agg);
    CHECK(csv.substr(0, 20) == "step,split,mean,std\n");
}

TEST_CASE("train_run writes deterministic artifacts") {
    ExemplarStore store = small_split_store(12, 6, 4, 3);
    TrainConfig cfg = tiny_run_config(store);
    const std::uint64_t store_hash = 0x1234abcdull;

    const std::string dir_a = fresh_dir("iclforge_run_a");
    RunSpec spec = tiny_run_spec(cfg, store, store_hash, dir_a);
    MetricLog log = train_run(spec);

    CHECK(fs::exists(fs::path(dir_a) / "manifest.txt"));
    CHECK(fs::exists(fs::path(dir_a) / "metrics.csv"));
    CHECK(fs::exists(fs::path(dir_a) / "aggregate.csv"));
    for (long s : {0L, 20L, 40L, 60L}) {
        CHECK(fs::exists(fs::path(dir_a) / "seed1" / ("ckpt_" + std::to_string(s) + ".bin")));
        CHECK(fs::exists(fs::path(dir_a) / "seed2" / ("ckpt_" + std::to_string(s) + ".bin")));
    }

    // merged csv equals the per-seed files concatenated in seed order
    const std::string merged = read_text(fs::path(dir_a) / "metrics.csv");
    CHECK(merged == log.to_csv());

    // identical spec into a fresh directory reproduces every byte
    const std::string dir_b = fresh_dir("iclforge_run_b");
    RunSpec spec_b = tiny_run_spec(cfg, store, store_hash, dir_b);
    train_run(spec_b);
    CHECK(read_text(fs::path(dir_b) / "metrics.csv") == merged);
    CHECK(read_text(fs::path(dir_b) / "seed1" / "metrics.csv") ==
          read_text(fs::path(dir_a) / "seed1" / "metrics.csv"));
    CHECK(read_text(fs::path(dir_b) / "aggregate.csv") ==
          read_text(fs::path(dir_a) / "aggregate.csv"));

    // rerunning a completed directory reuses it without changing a byte
    MetricLog again = train_run(spec);
    CHECK(again.to_csv() == merged);

    // same directory with a different config is refused
    RunSpec drifted = spec;
    drifted.config.max_lr = 5e-4;
    CHECK_THROWS_AS(train_run(drifted), ConfigError);

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("resume continues byte-identically") {
    ExemplarStore store = small_split_store(12, 6, 4, 3);
    TrainConfig cfg = tiny_run_config(store);
    cfg.seeds = {1};

    const std::string dir_full = fresh_dir("iclforge_resume_full");
    RunSpec spec_full = tiny_run_spec(cfg, store, 1, dir_full);
    train_seed(spec_full, 1);

    // train to an intermediate checkpoint, then continue under the full budget
    TrainConfig cut = cfg;
    cut.total_steps = 40;
    const std::string dir_cut = fresh_dir("iclforge_resume_cut");
    RunSpec spec_cut = tiny_run_spec(cut, store, 1, dir_cut);
    train_seed(spec_cut, 1);
    RunSpec spec_cont = tiny_run_spec(cfg, store, 1, dir_cut);
    train_seed(spec_cont, 1);

    CHECK(read_text(fs::path(dir_cut) / "seed1" / "metrics.csv") ==
          read_text(fs::path(dir_full) / "seed1" / "metrics.csv"));
    CHECK(read_file_bytes((fs::path(dir_cut) / "seed1" / "ckpt_60.bin").string()) ==
          read_file_bytes((fs::path(dir_full) / "seed1" / "ckpt_60.bin").string()));
    CHECK(read_file_bytes((fs::path(dir_cut) / "seed1" / "last.bin").string()) ==
          read_file_bytes((fs::path(dir_full) / "seed1" / "last.bin").string()));

    fs::remove_all(dir_full);
    fs::remove_all(dir_cut);
}
