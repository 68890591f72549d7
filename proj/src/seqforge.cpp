#include "iclforge/seqforge.hpp"

#include <algorithm>
#include <set>

#include "iclforge/binio.hpp"

namespace iclforge {

std::vector<FormatGroup> parse_context_format(const std::string& format) {
    if (format.empty()) throw ConfigError("empty context format");
    std::vector<FormatGroup> groups;
    std::size_t pos = 0;
    while (pos <= format.size()) {
        std::size_t dash = format.find('-', pos);
        if (dash == std::string::npos) dash = format.size();
        const std::string tok = format.substr(pos, dash - pos);
        if (tok.empty()) throw ConfigError("empty group in context format \"" + format + "\"");
        FormatGroup g;
        std::size_t letter_at = 0;
        if (tok.size() > 1) {
            const std::size_t x = tok.find('x');
            if (x == std::string::npos || x == 0 || x + 2 != tok.size())
                throw ConfigError("bad group \"" + tok + "\" in context format");
            g.count = 0;
            for (std::size_t i = 0; i < x; ++i) {
                if (tok[i] < '0' || tok[i] > '9')
                    throw ConfigError("bad repeat count in group \"" + tok + "\"");
                g.count = g.count * 10 + (tok[i] - '0');
            }
            if (g.count < 1) throw ConfigError("zero repeat count in group \"" + tok + "\"");
            letter_at = x + 1;
        }
        g.letter = tok[letter_at];
        if (g.letter != 'Q' && (g.letter < 'A' || g.letter > 'P'))
            throw ConfigError("class letter must be Q or A..P, got \"" + tok + "\"");
        groups.push_back(g);
        pos = dash + 1;
        if (dash == format.size()) break;
    }
    int q_groups = 0;
    std::set<char> letters;
    for (const auto& g : groups) {
        if (g.letter == 'Q') {
            ++q_groups;
        } else if (!letters.insert(g.letter).second) {
            throw ConfigError(std::string("distractor letter '") + g.letter + "' repeats");
        }
    }
    if (q_groups != 1) throw ConfigError("context format needs exactly one Q group");
    return groups;
}

int format_total(const std::vector<FormatGroup>& groups) {
    int t = 0;
    for (const auto& g : groups) t += g.count;
    return t;
}

int format_query_reps(const std::vector<FormatGroup>& groups) {
    for (const auto& g : groups)
        if (g.letter == 'Q') return g.count;
    return 0;
}

void Recipe::validate(int pairs) const {
    if (variant == Variant::standard) {
        if (query_class_reps != 0)
            throw ConfigError("standard recipe must have query-class-reps = 0");
        if (inst_copy) throw ConfigError("standard recipe cannot use inst-copy");
        return;
    }
    if (variant != Variant::bursty) throw ConfigError("recipe variant must be standard or bursty");
    auto groups = parse_context_format(distractor_format);
    if (format_total(groups) != pairs)
        throw ConfigError("context format \"" + distractor_format + "\" fills " +
                          std::to_string(format_total(groups)) + " slots, sequence has " +
                          std::to_string(pairs));
    if (format_query_reps(groups) != query_class_reps)
        throw ConfigError("context format \"" + distractor_format + "\" has " +
                          std::to_string(format_query_reps(groups)) +
                          " query slots, recipe says " + std::to_string(query_class_reps));
    if (inst_copy_prob < 0.0 || inst_copy_prob > 1.0)
        throw ConfigError("inst-copy-prob must be in [0,1]");
}

Recipe recipe_preset(const std::string& name) {
    Recipe r;
    if (name == "standard") {
        r.variant = Variant::standard;
        r.query_class_reps = 0;
        r.distractor_format.clear();
        return r;
    }
    if (name == "bursty") return r;
    if (name == "bursty-copy") {
        r.inst_copy = true;
        return r;
    }
    if (name == "bursty-mid") {
        r.distractor_format = "3xQ-A-B-C-D-E";
        return r;
    }
    if (name == "bursty-low" || name == "bursty-low-copy") {
        r.query_class_reps = 1;
        r.distractor_format = "Q-A-B-C-D-E-F-G";
        r.inst_copy = name == "bursty-low-copy";
        return r;
    }
    throw ConfigError("unknown recipe preset \"" + name + "\"");
}

namespace {

constexpr int kMaxDraws = 100000;

std::uint32_t draw_class(const ExemplarStore& store, RngStream& rng, const ClassTable* table) {
    if (table) return table->sample(rng);
    return store.base_ids[static_cast<std::size_t>(rng.next_below(store.base_ids.size()))];
}

// Draws a base class with at least `min_train` training exemplars, distinct
// from everything in `used`.
std::uint32_t draw_class_where(const ExemplarStore& store, RngStream& rng, const ClassTable* table,
                               const std::vector<std::uint32_t>& used, int min_train) {
    for (int attempt = 0; attempt < kMaxDraws; ++attempt) {
        const std::uint32_t id = draw_class(store, rng, table);
        if (std::find(used.begin(), used.end(), id) != used.end()) continue;
        if (static_cast<int>(store.cls(id).train_indexes.size()) < min_train) continue;
        return id;
    }
    throw RecipeError("no base class with " + std::to_string(min_train) +
                      " training exemplars available after " + std::to_string(kMaxDraws) +
                      " draws");
}

// n distinct training exemplar indexes of one class.
std::vector<int> draw_train_exemplars(const ClassRecord& c, RngStream& rng, int n) {
    const int avail = static_cast<int>(c.train_indexes.size());
    if (avail < n)
        throw RecipeError("class " + std::to_string(c.id) + " has " + std::to_string(avail) +
                          " training exemplars, need " + std::to_string(n));
    std::vector<int> pool = c.train_indexes;
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(rng.next_below(pool.size()));
        out.push_back(pool[j]);
        pool[j] = pool.back();
        pool.pop_back();
    }
    return out;
}

void shuffle_context(Episode& ep, RngStream& rng) {
    rng.shuffle(ep.context.data(), ep.context.size());
}

}  // namespace

Episode build_standard(const ExemplarStore& store, RngStream& rng, int pairs,
                       const ClassTable* table) {
    if (static_cast<int>(store.base_ids.size()) < pairs + 1)
        throw RecipeError("standard episode needs " + std::to_string(pairs + 1) +
                          " base classes, store has " + std::to_string(store.base_ids.size()));
    Episode ep;
    ep.variant = Variant::standard;
    std::vector<std::uint32_t> used;
    used.reserve(static_cast<std::size_t>(pairs) + 1);
    for (int i = 0; i < pairs; ++i) {
        const std::uint32_t id = draw_class_where(store, rng, table, used, 1);
        used.push_back(id);
        const int ex = draw_train_exemplars(store.cls(id), rng, 1)[0];
        ep.context.push_back({{id, static_cast<std::uint32_t>(ex)}, store.label_of(id)});
    }
    const std::uint32_t qid = draw_class_where(store, rng, table, used, 1);
    ep.query_class = qid;
    ep.query = {qid, static_cast<std::uint32_t>(draw_train_exemplars(store.cls(qid), rng, 1)[0])};
    ep.target = ep.original_target = store.label_of(qid);
    shuffle_context(ep, rng);
    return ep;
}

Episode build_bursty(const ExemplarStore& store, RngStream& rng, const Recipe& recipe, int pairs,
                     const ClassTable* table) {
    recipe.validate(pairs);
    if (recipe.variant != Variant::bursty) throw ConfigError("build_bursty needs a bursty recipe");
    const auto groups = parse_context_format(recipe.distractor_format);
    const int reps = recipe.query_class_reps;

    Episode ep;
    ep.variant = Variant::bursty;
    std::vector<std::uint32_t> used;
    // query class first: needs reps context exemplars plus a distinct query
    const std::uint32_t qid = draw_class_where(store, rng, table, used, reps + 1);
    used.push_back(qid);
    auto qex = draw_train_exemplars(store.cls(qid), rng, reps + 1);
    ep.query_class = qid;
    ep.query = {qid, static_cast<std::uint32_t>(qex.back())};
    ep.target = ep.original_target = store.label_of(qid);

    int q_used = 0;
    for (const auto& g : groups) {
        if (g.letter == 'Q') {
            for (int i = 0; i < g.count; ++i)
                ep.context.push_back(
                    {{qid, static_cast<std::uint32_t>(qex[static_cast<std::size_t>(q_used++)])},
                     store.label_of(qid)});
        } else {
            const std::uint32_t id = draw_class_where(store, rng, table, used, g.count);
            used.push_back(id);
            auto ex = draw_train_exemplars(store.cls(id), rng, g.count);
            for (int i = 0; i < g.count; ++i)
                ep.context.push_back(
                    {{id, static_cast<std::uint32_t>(ex[static_cast<std::size_t>(i)])},
                     store.label_of(id)});
        }
    }
    shuffle_context(ep, rng);
    return ep;
}

Episode apply_inst_copy(const Episode& episode, RngStream&) {
    if (episode.variant != Variant::bursty)
        throw RecipeError("inst-copy applies only to bursty episodes");
    Episode out = episode;
    int replaced = 0;
    for (auto& item : out.context)
        if (item.ref.class_id == out.query_class) {
            item.ref = out.query;
            ++replaced;
        }
    if (replaced == 0) throw RecipeError("inst-copy found no query-class context items");
    out.copied = true;
    return out;
}

Episode apply_label_swap(const Episode& episode, const ExemplarStore& store, RngStream& rng,
                         double p) {
    if (p < 0.0 || p > 1.0) throw ConfigError("label-swap probability must be in [0,1]");
    Episode out = episode;
    if (rng.next_unit() >= p) return out;
    const int n_labels = store.label_count();
    if (n_labels < 2) throw RecipeError("label swap needs at least 2 base classes");
    int swapped = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n_labels - 1)));
    if (swapped >= out.original_target) ++swapped;
    for (auto& item : out.context)
        if (item.ref.class_id == out.query_class) item.label = swapped;
    out.target = swapped;
    out.swapped = true;
    return out;
}

std::vector<Episode> sample_training_batch(const ExemplarStore& store, const TrainingMix& mix,
                                           const Recipe& recipe, int pairs, std::uint64_t seed,
                                           long step, const ClassTable* table) {
    if (mix.p_bursty < 0.0 || mix.p_bursty > 1.0 || mix.p_label_swap < 0.0 ||
        mix.p_label_swap > 1.0)
        throw ConfigError("mix probabilities must be in [0,1]");
    if (mix.batch_size < 1) throw ConfigError("batch size must be positive");
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(mix.batch_size));
    for (int slot = 0; slot < mix.batch_size; ++slot) {
        RngStream rng(seed, stream_ns::batch_slot(step, slot));
        Episode ep;
        const double u = rng.next_unit();
        const bool bursty = recipe.variant == Variant::bursty && u < mix.p_bursty;
        if (bursty) {
            ep = build_bursty(store, rng, recipe, pairs, table);
            if (recipe.inst_copy && rng.next_unit() < recipe.inst_copy_prob)
                ep = apply_inst_copy(ep, rng);
        } else {
            ep = build_standard(store, rng, pairs, table);
        }
        ep = apply_label_swap(ep, store, rng, mix.p_label_swap);
        batch.push_back(std::move(ep));
    }
    return batch;
}

Episode build_icl_eval(const ExemplarStore& store, const EvalTask& task, RngStream& rng,
                       int pairs) {
    const int k = task.k_way, n = task.n_shot;
    if (k < 2 || n < 1) throw EvalError("eval task needs k >= 2, n >= 1");
    if (k * n != pairs)
        throw EvalError("k*n = " + std::to_string(k * n) + " does not fill " +
                        std::to_string(pairs) + " context slots");
    if (static_cast<int>(store.novel_ids.size()) < k)
        throw EvalError("store has " + std::to_string(store.novel_ids.size()) +
                        " novel classes, task needs " + std::to_string(k));

    // k distinct novel classes with at least n exemplars each
    std::vector<std::uint32_t> chosen;
    for (int attempt = 0; attempt < kMaxDraws && static_cast<int>(chosen.size()) < k; ++attempt) {
        const std::uint32_t id =
            store.novel_ids[static_cast<std::size_t>(rng.next_below(store.novel_ids.size()))];
        if (std::find(chosen.begin(), chosen.end(), id) != chosen.end()) continue;
        if (store.cls(id).count() < n) continue;
        chosen.push_back(id);
    }
    if (static_cast<int>(chosen.size()) < k)
        throw EvalError("not enough novel classes with " + std::to_string(n) + " exemplars");

    // the query class needs one exemplar beyond its n context shots
    std::vector<int> can_query;
    for (int j = 0; j < k; ++j)
        if (store.cls(chosen[static_cast<std::size_t>(j)]).count() >= n + 1) can_query.push_back(j);
    if (can_query.empty()) throw EvalError("no chosen novel class has n+1 exemplars for the query");
    const int qj = can_query[static_cast<std::size_t>(rng.next_below(can_query.size()))];

    // bijective remap of the k classes onto labels 0..k-1
    std::vector<int> remap(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) remap[static_cast<std::size_t>(j)] = j;
    rng.shuffle(remap.data(), remap.size());

    Episode ep;
    ep.variant = Variant::icl_eval;
    ep.kway = k;
    for (int j = 0; j < k; ++j) {
        const ClassRecord& c = store.cls(chosen[static_cast<std::size_t>(j)]);
        const int want = j == qj ? n + 1 : n;
        // novel classes are never trained on; draw over the whole class
        std::vector<int> pool(static_cast<std::size_t>(c.count()));
        for (int e = 0; e < c.count(); ++e) pool[static_cast<std::size_t>(e)] = e;
        std::vector<int> picks;
        for (int i = 0; i < want; ++i) {
            const std::size_t at = static_cast<std::size_t>(rng.next_below(pool.size()));
            picks.push_back(pool[at]);
            pool[at] = pool.back();
            pool.pop_back();
        }
        for (int i = 0; i < n; ++i)
            ep.context.push_back({{c.id, static_cast<std::uint32_t>(picks[static_cast<std::size_t>(i)])},
                                  remap[static_cast<std::size_t>(j)]});
        if (j == qj) {
            ep.query = {c.id, static_cast<std::uint32_t>(picks.back())};
            ep.query_class = c.id;
            ep.target = ep.original_target = remap[static_cast<std::size_t>(j)];
        }
    }
    shuffle_context(ep, rng);
    return ep;
}

Episode build_iwl_eval(const ExemplarStore& store, RngStream& rng, int pairs) {
    if (static_cast<int>(store.base_ids.size()) < pairs + 1)
        throw EvalError("IWL eval needs " + std::to_string(pairs + 1) + " base classes");
    Episode ep;
    ep.variant = Variant::iwl_eval;
    std::vector<std::uint32_t> used;
    for (int i = 0; i < pairs; ++i) {
        const std::uint32_t id = draw_class_where(store, rng, nullptr, used, 1);
        used.push_back(id);
        const int ex = draw_train_exemplars(store.cls(id), rng, 1)[0];
        ep.context.push_back({{id, static_cast<std::uint32_t>(ex)}, store.label_of(id)});
    }
    // query from the validation split of a further class
    std::uint32_t qid = 0;
    bool found = false;
    for (int attempt = 0; attempt < kMaxDraws && !found; ++attempt) {
        const std::uint32_t id = draw_class(store, rng, nullptr);
        if (std::find(used.begin(), used.end(), id) != used.end()) continue;
        if (store.cls(id).val_indexes.empty()) continue;
        qid = id;
        found = true;
    }
    if (!found) throw EvalError("no base class with validation exemplars for IWL query");
    const ClassRecord& qc = store.cls(qid);
    const int ex = qc.val_indexes[static_cast<std::size_t>(rng.next_below(qc.val_indexes.size()))];
    ep.query_class = qid;
    ep.query = {qid, static_cast<std::uint32_t>(ex)};
    ep.target = ep.original_target = store.label_of(qid);
    shuffle_context(ep, rng);
    return ep;
}

// ---- EPS1 suite format ----

std::vector<char> serialize_suite(const std::vector<Episode>& suite, std::uint64_t store_hash) {
    ByteWriter w;
    w.bytes("EPS1", 4);
    w.u8(1);  // version
    w.u64(store_hash);
    w.u32(static_cast<std::uint32_t>(suite.size()));
    const std::uint16_t pairs = suite.empty() ? 0 : static_cast<std::uint16_t>(suite[0].context.size());
    w.u16(pairs);
    for (const Episode& ep : suite) {
        if (ep.context.size() != static_cast<std::size_t>(pairs))
            throw EvalError("suite episodes disagree on context length");
        w.u8(static_cast<std::uint8_t>(ep.variant));
        w.u8(static_cast<std::uint8_t>((ep.swapped ? 1 : 0) | (ep.copied ? 2 : 0)));
        w.u8(static_cast<std::uint8_t>(ep.kway));
        w.u32(ep.query_class);
        w.u32(ep.query.class_id);
        w.u32(ep.query.index);
        w.u16(static_cast<std::uint16_t>(ep.target));
        w.u16(static_cast<std::uint16_t>(ep.original_target));
        for (const ContextItem& it : ep.context) {
            w.u32(it.ref.class_id);
            w.u32(it.ref.index);
            w.u16(static_cast<std::uint16_t>(it.label));
        }
    }
    return w.data();
}

std::vector<Episode> parse_suite(const char* data, std::size_t size, const ExemplarStore& store) {
    ByteReader r(data, size);
    r.expect_magic("EPS1");
    const std::uint8_t version = r.u8();
    if (version != 1) throw FormatError("unsupported suite version", r.offset() - 1);
    const std::uint64_t recorded = r.u64();
    const std::uint64_t actual = store_hash(store);
    if (recorded != actual)
        throw HashMismatchError("suite was sampled from store " + hex64(recorded) +
                                ", given store is " + hex64(actual));
    const std::uint32_t count = r.u32();
    const int pairs = r.u16();
    auto check_ref = [&](const ExemplarRef& ref, std::uint64_t at) {
        if (!store.has_class(ref.class_id))
            throw FormatError("suite references unknown class " + std::to_string(ref.class_id), at);
        if (ref.index >= static_cast<std::uint32_t>(store.cls(ref.class_id).count()))
            throw FormatError("suite references exemplar " + std::to_string(ref.index) +
                                  " beyond class " + std::to_string(ref.class_id),
                              at);
    };
    std::vector<Episode> suite;
    suite.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Episode ep;
        const std::uint8_t variant = r.u8();
        if (variant > 3) throw FormatError("bad episode variant", r.offset() - 1);
        ep.variant = static_cast<Variant>(variant);
        const std::uint8_t flags = r.u8();
        ep.swapped = flags & 1;
        ep.copied = flags & 2;
        ep.kway = r.u8();
        ep.query_class = r.u32();
        const std::uint64_t qat = r.offset();
        ep.query.class_id = r.u32();
        ep.query.index = r.u32();
        check_ref(ep.query, qat);
        ep.target = r.u16();
        ep.original_target = r.u16();
        for (int p = 0; p < pairs; ++p) {
            ContextItem it;
            const std::uint64_t at = r.offset();
            it.ref.class_id = r.u32();
            it.ref.index = r.u32();
            check_ref(it.ref, at);
            it.label = r.u16();
            ep.context.push_back(it);
        }
        suite.push_back(std::move(ep));
    }
    r.expect_done();
    return suite;
}

void save_suite(const std::vector<Episode>& suite, std::uint64_t store_hash,
                const std::string& path) {
    auto bytes = serialize_suite(suite, store_hash);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

std::vector<Episode> load_suite(const std::string& path, const ExemplarStore& store) {
    auto bytes = read_file_bytes(path);
    return parse_suite(bytes.data(), bytes.size(), store);
}

std::uint64_t suite_hash(const std::vector<Episode>& suite, std::uint64_t store_hash) {
    auto bytes = serialize_suite(suite, store_hash);
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace iclforge
