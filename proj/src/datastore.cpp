#include "iclforge/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "iclforge/binio.hpp"

namespace iclforge {

void ExemplarStore::finalize() {
    if (kind == StoreKind::raster) {
        if (h < 2 || w < 2) throw ConfigError("raster store needs h,w >= 2");
    } else {
        if (dim < 2) throw ConfigError("vector store needs dim >= 2");
    }
    std::sort(classes.begin(), classes.end(),
              [](const ClassRecord& a, const ClassRecord& b) { return a.id < b.id; });
    index_.clear();
    base_ids.clear();
    novel_ids.clear();
    for (int i = 0; i < static_cast<int>(classes.size()); ++i) {
        ClassRecord& c = classes[static_cast<std::size_t>(i)];
        if (!index_.emplace(c.id, i).second)
            throw ConfigError("duplicate class id " + std::to_string(c.id));
        const std::size_t n = c.splits.size();
        if (kind == StoreKind::raster) {
            if (c.raster_data.size() != n * static_cast<std::size_t>(h) * w)
                throw ConfigError("class " + std::to_string(c.id) + ": raster payload size mismatch");
        } else {
            if (c.vec_data.size() != n * static_cast<std::size_t>(dim))
                throw ConfigError("class " + std::to_string(c.id) + ": vector payload size mismatch");
        }
        c.train_indexes.clear();
        c.val_indexes.clear();
        for (int e = 0; e < c.count(); ++e) {
            if (c.splits[static_cast<std::size_t>(e)] == kSplitTrain)
                c.train_indexes.push_back(e);
            else
                c.val_indexes.push_back(e);
        }
        (c.novel ? novel_ids : base_ids).push_back(c.id);
    }
}

const ClassRecord& ExemplarStore::cls(std::uint32_t id) const {
    return classes[static_cast<std::size_t>(class_index(id))];
}

int ExemplarStore::class_index(std::uint32_t id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ConfigError("unknown class id " + std::to_string(id));
    return it->second;
}

int ExemplarStore::label_of(std::uint32_t class_id) const {
    auto it = std::lower_bound(base_ids.begin(), base_ids.end(), class_id);
    if (it == base_ids.end() || *it != class_id)
        throw ConfigError("class " + std::to_string(class_id) + " is not a base class");
    return static_cast<int>(it - base_ids.begin());
}

const std::uint8_t* ExemplarStore::raster_ptr(const ClassRecord& c, int ex) const {
    return c.raster_data.data() + static_cast<std::size_t>(ex) * h * w;
}

const float* ExemplarStore::vec_ptr(const ClassRecord& c, int ex) const {
    return c.vec_data.data() + static_cast<std::size_t>(ex) * dim;
}

void ExemplarStore::write_floats(std::uint32_t class_id, int ex, float* out) const {
    const ClassRecord& c = cls(class_id);
    if (ex < 0 || ex >= c.count())
        throw ConfigError("exemplar index " + std::to_string(ex) + " out of range for class " +
                          std::to_string(class_id));
    if (kind == StoreKind::raster) {
        const std::uint8_t* p = raster_ptr(c, ex);
        const int n = h * w;
        for (int i = 0; i < n; ++i) out[i] = static_cast<float>(p[i]) * (1.0f / 255.0f);
    } else {
        std::memcpy(out, vec_ptr(c, ex), static_cast<std::size_t>(dim) * 4);
    }
}

bool ExemplarStore::same_payload(std::uint32_t ca, int ea, std::uint32_t cb, int eb) const {
    const ClassRecord& a = cls(ca);
    const ClassRecord& b = cls(cb);
    if (kind == StoreKind::raster)
        return std::memcmp(raster_ptr(a, ea), raster_ptr(b, eb), static_cast<std::size_t>(h) * w) == 0;
    return std::memcmp(vec_ptr(a, ea), vec_ptr(b, eb), static_cast<std::size_t>(dim) * 4) == 0;
}

std::size_t ExemplarStore::total_exemplars() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.splits.size();
    return n;
}

long ExemplarStore::total_train_exemplars() const {
    long n = 0;
    for (const auto& c : classes)
        if (!c.novel) n += static_cast<long>(c.train_indexes.size());
    return n;
}

// ---- synthetic generation ----

namespace {

void render_segment(std::vector<std::uint8_t>& img, int r, double x0, double y0, double x1,
                    double y1) {
    // walk the segment at sub-pixel resolution and stamp ink
    const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
    const int steps = std::max(2, static_cast<int>(len * r * 2));
    for (int s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        const int px = static_cast<int>((x0 + (x1 - x0) * t) * (r - 1) + 0.5);
        const int py = static_cast<int>((y0 + (y1 - y0) * t) * (r - 1) + 0.5);
        if (px >= 0 && px < r && py >= 0 && py < r) img[static_cast<std::size_t>(py) * r + px] = 255;
    }
}

struct GlyphPattern {
    // strokes as polylines in unit coordinates
    std::vector<std::vector<std::pair<double, double>>> strokes;
};

GlyphPattern draw_pattern(RngStream& rng) {
    GlyphPattern g;
    const int n_strokes = 2 + static_cast<int>(rng.next_below(3));
    for (int s = 0; s < n_strokes; ++s) {
        std::vector<std::pair<double, double>> pts;
        double x = 0.15 + 0.7 * rng.next_unit();
        double y = 0.15 + 0.7 * rng.next_unit();
        pts.emplace_back(x, y);
        const int n_seg = 1 + static_cast<int>(rng.next_below(3));
        for (int k = 0; k < n_seg; ++k) {
            x = std::clamp(x + 0.5 * (rng.next_unit() - 0.5), 0.05, 0.95);
            y = std::clamp(y + 0.5 * (rng.next_unit() - 0.5), 0.05, 0.95);
            pts.emplace_back(x, y);
        }
        g.strokes.push_back(std::move(pts));
    }
    return g;
}

}  // namespace

ExemplarStore gen_synthetic_store(const SyntheticSpec& spec) {
    if (spec.n_classes < 2) throw ConfigError("synthetic store needs at least 2 classes");
    if (spec.per_class < 1) throw ConfigError("synthetic store needs at least 1 exemplar per class");
    if (spec.noise < 0.0f) throw ConfigError("noise scale must be non-negative");
    ExemplarStore store;
    store.kind = spec.kind;
    if (spec.kind == StoreKind::vector) {
        if (spec.dim < 2) throw ConfigError("vector-dim must be at least 2");
        store.dim = spec.dim;
    } else {
        if (spec.raster < 8) throw ConfigError("raster size must be at least 8");
        store.h = store.w = spec.raster;
    }
    store.classes.reserve(static_cast<std::size_t>(spec.n_classes));
    for (int c = 0; c < spec.n_classes; ++c) {
        RngStream rng(spec.seed, stream_ns::kStoreGen | static_cast<std::uint64_t>(c));
        ClassRecord rec;
        rec.id = static_cast<std::uint32_t>(c);
        rec.splits.assign(static_cast<std::size_t>(spec.per_class), kSplitTrain);
        if (spec.kind == StoreKind::vector) {
            FloatVec proto(static_cast<std::size_t>(spec.dim));
            double norm = 0.0;
            for (float& v : proto) {
                v = static_cast<float>(rng.next_gaussian());
                norm += static_cast<double>(v) * v;
            }
            const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm, 1e-12)));
            for (float& v : proto) v *= inv;
            rec.vec_data.resize(static_cast<std::size_t>(spec.per_class) * spec.dim);
            for (int e = 0; e < spec.per_class; ++e) {
                float* out = rec.vec_data.data() + static_cast<std::size_t>(e) * spec.dim;
                for (int i = 0; i < spec.dim; ++i)
                    out[i] = proto[static_cast<std::size_t>(i)] +
                             spec.noise * static_cast<float>(rng.next_gaussian());
            }
        } else {
            GlyphPattern pattern = draw_pattern(rng);
            const int r = spec.raster;
            rec.raster_data.resize(static_cast<std::size_t>(spec.per_class) * r * r, 0);
            for (int e = 0; e < spec.per_class; ++e) {
                std::vector<std::uint8_t> img(static_cast<std::size_t>(r) * r, 0);
                const double jx = spec.noise * 0.3 * rng.next_gaussian();
                const double jy = spec.noise * 0.3 * rng.next_gaussian();
                for (const auto& stroke : pattern.strokes)
                    for (std::size_t k = 0; k + 1 < stroke.size(); ++k) {
                        const double wob = spec.noise * 0.15;
                        render_segment(img, r, stroke[k].first + jx + wob * rng.next_gaussian(),
                                       stroke[k].second + jy + wob * rng.next_gaussian(),
                                       stroke[k + 1].first + jx + wob * rng.next_gaussian(),
                                       stroke[k + 1].second + jy + wob * rng.next_gaussian());
                    }
                std::memcpy(rec.raster_data.data() + static_cast<std::size_t>(e) * r * r, img.data(),
                            img.size());
            }
        }
        store.classes.push_back(std::move(rec));
    }
    store.finalize();
    return store;
}

ExemplarStore split_holdout(const ExemplarStore& store, int n_novel, int per_train, int per_val,
                            std::uint64_t seed) {
    const int n_classes = static_cast<int>(store.classes.size());
    if (n_novel < 0 || n_novel >= n_classes)
        throw ConfigError("n_novel must be in [0, class count)");
    if (per_train < 1 || per_val < 0) throw ConfigError("bad per-class split");
    ExemplarStore out = store;
    std::vector<int> order(static_cast<std::size_t>(n_classes));
    for (int i = 0; i < n_classes; ++i) order[static_cast<std::size_t>(i)] = i;
    RngStream pick(seed, stream_ns::kStoreSplit);
    pick.shuffle(order.data(), order.size());
    std::vector<bool> novel(static_cast<std::size_t>(n_classes), false);
    for (int i = 0; i < n_novel; ++i) novel[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

    for (int i = 0; i < n_classes; ++i) {
        ClassRecord& c = out.classes[static_cast<std::size_t>(i)];
        c.novel = novel[static_cast<std::size_t>(i)];
        if (c.count() != per_train + per_val)
            throw ConfigError("class " + std::to_string(c.id) + " has " + std::to_string(c.count()) +
                              " exemplars, split needs " + std::to_string(per_train + per_val));
        std::vector<int> exo(static_cast<std::size_t>(c.count()));
        for (int e = 0; e < c.count(); ++e) exo[static_cast<std::size_t>(e)] = e;
        RngStream erng(seed, stream_ns::kStoreSplit | (static_cast<std::uint64_t>(c.id) + 1));
        erng.shuffle(exo.data(), exo.size());
        for (int e = 0; e < c.count(); ++e)
            c.splits[static_cast<std::size_t>(exo[static_cast<std::size_t>(e)])] =
                e < per_train ? kSplitTrain : kSplitValidation;
    }
    out.finalize();
    return out;
}

std::uint32_t ClassTable::sample(RngStream& rng) const {
    const double u = rng.next_unit();
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t i = static_cast<std::size_t>(it - cdf.begin());
    if (i >= ids.size()) i = ids.size() - 1;
    return ids[i];
}

ClassTable class_sampler(const ExemplarStore& store, const ZipfSpec& zipf) {
    if (zipf.coefficient < 0.0) throw ConfigError("zipf coefficient must be non-negative");
    if (store.base_ids.empty()) throw ConfigError("store has no base classes");
    ClassTable t;
    t.ids = store.base_ids;
    t.prob.resize(t.ids.size());
    double z = 0.0;
    for (std::size_t k = 0; k < t.ids.size(); ++k) {
        t.prob[k] = std::pow(static_cast<double>(k + 1), -zipf.coefficient);
        z += t.prob[k];
    }
    t.cdf.resize(t.ids.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < t.ids.size(); ++k) {
        t.prob[k] /= z;
        acc += t.prob[k];
        t.cdf[k] = acc;
    }
    t.cdf.back() = 1.0;
    return t;
}

ExemplarStore instance_relabel(const ExemplarStore& store) {
    ExemplarStore out;
    out.kind = store.kind;
    out.h = store.h;
    out.w = store.w;
    out.dim = store.dim;
    std::uint32_t next_id = 0;
    for (const auto& c : store.classes) next_id = std::max(next_id, c.id + 1);
    const std::size_t payload_f = static_cast<std::size_t>(store.kind == StoreKind::vector ? store.dim : 0);
    const std::size_t payload_b = store.kind == StoreKind::raster
                                      ? static_cast<std::size_t>(store.h) * store.w
                                      : 0;
    for (const auto& c : store.classes) {
        if (c.novel) {
            out.classes.push_back(c);
            continue;
        }
        for (int e : c.train_indexes) {
            ClassRecord rec;
            rec.id = next_id++;
            rec.novel = false;
            rec.splits.assign(1, kSplitTrain);
            if (store.kind == StoreKind::raster)
                rec.raster_data.assign(store.raster_ptr(c, e), store.raster_ptr(c, e) + payload_b);
            else
                rec.vec_data.assign(store.vec_ptr(c, e), store.vec_ptr(c, e) + payload_f);
            out.classes.push_back(std::move(rec));
        }
    }
    out.finalize();
    return out;
}

ExemplarStore apply_sample_budget(const ExemplarStore& store, const ZipfSpec& zipf, long budget) {
    if (budget < 1) throw ConfigError("sample budget must be positive");
    ClassTable table = class_sampler(store, zipf);
    const std::size_t n = table.ids.size();
    std::vector<long> avail(n), want(n);
    long avail_total = 0;
    for (std::size_t k = 0; k < n; ++k) {
        avail[k] = static_cast<long>(store.cls(table.ids[k]).train_indexes.size());
        avail_total += avail[k];
        want[k] = std::min(avail[k], std::lround(table.prob[k] * static_cast<double>(budget)));
    }
    const long target = std::min(budget, avail_total);
    long total = 0;
    for (long w : want) total += w;
    // drop from the tail (highest rank first) until at target
    for (std::size_t k = n; total > target && k-- > 0;)
        while (want[k] > 0 && total > target) {
            --want[k];
            --total;
        }
    // refill from the head (lowest rank first)
    for (std::size_t k = 0; total < target && k < n; ++k)
        while (want[k] < avail[k] && total < target) {
            ++want[k];
            ++total;
        }

    ExemplarStore out;
    out.kind = store.kind;
    out.h = store.h;
    out.w = store.w;
    out.dim = store.dim;
    const std::size_t fper = static_cast<std::size_t>(store.dim);
    const std::size_t bper = static_cast<std::size_t>(store.h) * store.w;
    for (const auto& c : store.classes) {
        if (c.novel) {
            out.classes.push_back(c);
            continue;
        }
        const std::size_t rank = static_cast<std::size_t>(store.label_of(c.id));
        ClassRecord rec;
        rec.id = c.id;
        rec.novel = false;
        // keep the first want[rank] train exemplars plus every validation exemplar
        long keep = want[rank];
        for (int e = 0; e < c.count(); ++e) {
            const bool is_train = c.splits[static_cast<std::size_t>(e)] == kSplitTrain;
            if (is_train) {
                if (keep <= 0) continue;
                --keep;
            }
            rec.splits.push_back(c.splits[static_cast<std::size_t>(e)]);
            if (store.kind == StoreKind::raster)
                rec.raster_data.insert(rec.raster_data.end(), store.raster_ptr(c, e),
                                       store.raster_ptr(c, e) + bper);
            else
                rec.vec_data.insert(rec.vec_data.end(), store.vec_ptr(c, e),
                                    store.vec_ptr(c, e) + fper);
        }
        if (rec.count() > 0) out.classes.push_back(std::move(rec));
    }
    out.finalize();
    return out;
}

// ---- EXB1 format ----

std::vector<char> serialize_store(const ExemplarStore& store) {
    ByteWriter w;
    w.bytes("EXB1", 4);
    w.u8(static_cast<std::uint8_t>(store.kind));
    if (store.kind == StoreKind::raster) {
        w.u32(static_cast<std::uint32_t>(store.h));
        w.u32(static_cast<std::uint32_t>(store.w));
    } else {
        w.u32(static_cast<std::uint32_t>(store.dim));
    }
    w.u32(static_cast<std::uint32_t>(store.classes.size()));
    for (const auto& c : store.classes) {
        w.u32(c.id);
        w.u32(static_cast<std::uint32_t>(c.count()));
        w.u8(c.novel ? 1 : 0);
        for (int e = 0; e < c.count(); ++e) {
            w.u8(c.splits[static_cast<std::size_t>(e)]);
            if (store.kind == StoreKind::raster)
                w.bytes(store.raster_ptr(c, e), static_cast<std::size_t>(store.h) * store.w);
            else
                w.f32_array(store.vec_ptr(c, e), static_cast<std::size_t>(store.dim));
        }
    }
    return w.data();
}

ExemplarStore parse_store(const char* data, std::size_t size) {
    ByteReader r(data, size);
    r.expect_magic("EXB1");
    const std::uint8_t kind_byte = r.u8();
    if (kind_byte > 1) throw FormatError("bad store kind byte", r.offset() - 1);
    ExemplarStore store;
    store.kind = static_cast<StoreKind>(kind_byte);
    if (store.kind == StoreKind::raster) {
        store.h = static_cast<int>(r.u32());
        store.w = static_cast<int>(r.u32());
    } else {
        store.dim = static_cast<int>(r.u32());
    }
    const std::uint32_t n_classes = r.u32();
    store.classes.reserve(n_classes);
    for (std::uint32_t ci = 0; ci < n_classes; ++ci) {
        ClassRecord c;
        c.id = r.u32();
        const std::uint32_t count = r.u32();
        const std::uint64_t novel_at = r.offset();
        const std::uint8_t novel_byte = r.u8();
        if (novel_byte > 1) throw FormatError("bad novel flag", novel_at);
        c.novel = novel_byte == 1;
        c.splits.reserve(count);
        for (std::uint32_t e = 0; e < count; ++e) {
            const std::uint64_t split_at = r.offset();
            const std::uint8_t split = r.u8();
            if (split > 1) throw FormatError("bad split tag", split_at);
            c.splits.push_back(split);
            if (store.kind == StoreKind::raster) {
                const std::size_t nb = static_cast<std::size_t>(store.h) * store.w;
                const char* p = r.take(nb);
                c.raster_data.insert(c.raster_data.end(), reinterpret_cast<const std::uint8_t*>(p),
                                     reinterpret_cast<const std::uint8_t*>(p) + nb);
            } else {
                const std::size_t old = c.vec_data.size();
                c.vec_data.resize(old + static_cast<std::size_t>(store.dim));
                r.f32_array(c.vec_data.data() + old, static_cast<std::size_t>(store.dim));
            }
        }
        store.classes.push_back(std::move(c));
    }
    r.expect_done();
    store.finalize();
    return store;
}

void save_store(const ExemplarStore& store, const std::string& path) {
    auto bytes = serialize_store(store);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path);
}

ExemplarStore load_store(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return parse_store(bytes.data(), bytes.size());
}

std::uint64_t store_hash(const ExemplarStore& store) {
    auto bytes = serialize_store(store);
    return fnv1a64(bytes.data(), bytes.size());
}

// ---- P5 importer ----

namespace {

std::vector<std::uint8_t> parse_p5(const std::vector<char>& bytes, int& width, int& height,
                                   const std::string& name) {
    ByteReader r(bytes.data(), bytes.size());
    const char* m = r.take(2);
    if (m[0] != 'P' || m[1] != '5') throw FormatError(name + ": not a P5 graymap", 0);
    auto next_token = [&]() -> long {
        // skip whitespace and '#' comments, then read a decimal integer
        for (;;) {
            const std::uint64_t at = r.offset();
            const char c = r.take(1)[0];
            if (c == '#') {
                while (r.take(1)[0] != '\n') {
                }
                continue;
            }
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
            if (c < '0' || c > '9') throw FormatError(name + ": expected integer", at);
            long v = c - '0';
            for (;;) {
                const char d = r.take(1)[0];
                if (d >= '0' && d <= '9') {
                    v = v * 10 + (d - '0');
                    continue;
                }
                if (d == ' ' || d == '\t' || d == '\n' || d == '\r') return v;
                throw FormatError(name + ": bad integer", r.offset() - 1);
            }
        }
    };
    const long w = next_token();
    const long h = next_token();
    const long maxval = next_token();
    if (w < 1 || h < 1) throw FormatError(name + ": bad dimensions", r.offset());
    if (maxval < 1 || maxval > 255)
        throw FormatError(name + ": only 8-bit graymaps supported", r.offset());
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    const char* p = r.take(n);
    r.expect_done();
    width = static_cast<int>(w);
    height = static_cast<int>(h);
    return std::vector<std::uint8_t>(reinterpret_cast<const std::uint8_t*>(p),
                                     reinterpret_cast<const std::uint8_t*>(p) + n);
}

}  // namespace

ExemplarStore import_pgm_dir(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() < 2) throw IoError("import needs at least 2 class subdirectories");

    ExemplarStore store;
    store.kind = StoreKind::raster;
    std::uint32_t next_id = 0;
    for (const auto& cdir : class_dirs) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(cdir))
            if (entry.is_regular_file()) files.push_back(entry.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) continue;
        ClassRecord rec;
        rec.id = next_id++;
        for (const auto& f : files) {
            int w = 0, h = 0;
            auto img = parse_p5(read_file_bytes(f.string()), w, h, f.filename().string());
            if (store.h == 0) {
                store.h = h;
                store.w = w;
            } else if (store.h != h || store.w != w) {
                throw ConfigError(f.filename().string() + ": raster is " + std::to_string(w) + "x" +
                                  std::to_string(h) + ", store is " + std::to_string(store.w) + "x" +
                                  std::to_string(store.h));
            }
            rec.splits.push_back(kSplitTrain);
            rec.raster_data.insert(rec.raster_data.end(), img.begin(), img.end());
        }
        store.classes.push_back(std::move(rec));
    }
    store.finalize();
    return store;
}

}  // namespace iclforge
