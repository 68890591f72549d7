#include "iclforge/probe.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>

#include "iclforge/binio.hpp"

namespace iclforge {

double HeadGrid::max() const {
    double best = 0.0;
    for (double x : v) best = std::max(best, x);
    return best;
}

namespace {

void require_role_map(const AttentionTrace& t) {
    if (t.roles.size() != static_cast<std::size_t>(t.tokens) || t.tokens < 3)
        throw ShapeError("attention trace lacks a usable role map");
    if (t.weights.size() != static_cast<std::size_t>(t.layers) * t.heads)
        throw ShapeError("attention trace weight count does not match layers*heads");
}

void require_episode_match(const AttentionTrace& t, const Episode& ep) {
    if (static_cast<int>(ep.context.size()) * 2 + 1 != t.tokens)
        throw ShapeError("episode length does not match trace tokens");
}

// Mean of w[p][p-offset] over rows selected by `pick`.
HeadGrid offset_mean(const AttentionTrace& t, int offset,
                     const std::function<bool(int)>& pick, const char* what) {
    require_role_map(t);
    int rows = 0;
    for (int p = offset; p < t.tokens; ++p) rows += pick(p);
    if (rows == 0) throw EvalError(std::string(what) + ": no qualifying rows in this geometry");
    HeadGrid g(t.layers, t.heads);
    for (int l = 0; l < t.layers; ++l)
        for (int h = 0; h < t.heads; ++h) {
            const Tensor& w = t.at(l, h);
            double s = 0.0;
            for (int p = offset; p < t.tokens; ++p)
                if (pick(p)) s += static_cast<double>(w.at(p, p - offset));
            g.at(l, h) = s / rows;
        }
    return g;
}

// Query-row mass over the columns selected by `pick`.
HeadGrid query_row_mass(const AttentionTrace& t, const std::function<bool(int)>& pick) {
    require_role_map(t);
    HeadGrid g(t.layers, t.heads);
    const int q = t.tokens - 1;
    for (int l = 0; l < t.layers; ++l)
        for (int h = 0; h < t.heads; ++h) {
            const Tensor& w = t.at(l, h);
            double s = 0.0;
            for (int c = 0; c < q; ++c)
                if (pick(c)) s += static_cast<double>(w.at(q, c));
            g.at(l, h) = s;
        }
    return g;
}

}  // namespace

HeadGrid metric_label_image(const AttentionTrace& t) {
    return offset_mean(
        t, 1, [&](int p) { return t.roles[static_cast<std::size_t>(p)] == TokenRole::label; },
        "label-image");
}

HeadGrid metric_image_image_diag(const AttentionTrace& t) {
    return offset_mean(
        t, 2, [&](int p) { return t.roles[static_cast<std::size_t>(p)] == TokenRole::sample; },
        "image-image-diag");
}

HeadGrid metric_image_image_mass(const AttentionTrace& t) {
    require_role_map(t);
    int rows = 0;
    for (int p = 2; p < t.tokens; ++p)
        rows += t.roles[static_cast<std::size_t>(p)] == TokenRole::sample;
    if (rows == 0) throw EvalError("image-image-mass: no qualifying rows in this geometry");
    HeadGrid g(t.layers, t.heads);
    for (int l = 0; l < t.layers; ++l)
        for (int h = 0; h < t.heads; ++h) {
            const Tensor& w = t.at(l, h);
            double s = 0.0;
            for (int p = 2; p < t.tokens; ++p) {
                if (t.roles[static_cast<std::size_t>(p)] != TokenRole::sample) continue;
                for (int c = 0; c < p; ++c)
                    if (t.roles[static_cast<std::size_t>(c)] == TokenRole::sample)
                        s += static_cast<double>(w.at(p, c));
            }
            g.at(l, h) = s / rows;
        }
    return g;
}

bool has_query_class_context(const Episode& ep) {
    for (const ContextItem& c : ep.context)
        if (c.ref.class_id == ep.query_class) return true;
    return false;
}

HeadGrid metric_image_image_query(const AttentionTrace& t, const Episode& ep) {
    require_episode_match(t, ep);
    if (!has_query_class_context(ep))
        throw EvalError("image-image-query undefined: no query-class context item");
    return query_row_mass(t, [&](int c) {
        return c % 2 == 0 && ep.context[static_cast<std::size_t>(c / 2)].ref.class_id == ep.query_class;
    });
}

HeadGrid metric_image_label(const AttentionTrace& t, const Episode& ep) {
    require_episode_match(t, ep);
    return query_row_mass(t, [&](int c) {
        return c % 2 == 1 && ep.context[static_cast<std::size_t>(c / 2)].label == ep.target;
    });
}

AttentionTrace score_trace(const TransformerModel& m, const ExemplarStore& store, const Episode& ep,
                           Workspace& ws) {
    AttentionTrace t = capture_trace(m, store, ep, ws);
    const int d = m.config.embed_dim;
    const int dh = d / m.config.heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int l = 0; l < t.layers; ++l) {
        const Tensor& qkv = ws.layers[static_cast<std::size_t>(l)].qkv;
        for (int h = 0; h < t.heads; ++h) {
            Tensor& w = t.weights[static_cast<std::size_t>(l) * t.heads + h];
            w.zero();
            for (int i = 0; i < t.tokens; ++i) {
                const float* qi = qkv.row(i) + h * dh;
                for (int j = 0; j <= i; ++j) {
                    const float* kj = qkv.row(j) + d + h * dh;
                    float s = 0.0f;
                    for (int p = 0; p < dh; ++p) s += qi[p] * kj[p];
                    w.at(i, j) = s * scale;
                }
            }
        }
    }
    return t;
}

ProbeSummary probe_suite(const TransformerModel& m, const ExemplarStore& store,
                         const std::vector<Episode>& suite, int threads, bool pre_softmax) {
    if (suite.empty()) throw EvalError("probe_suite: empty suite");
    const int n = static_cast<int>(suite.size());

    struct EpisodeGrids {
        HeadGrid diag, li, iiq, il;
        bool query_valid = false;
    };
    std::vector<EpisodeGrids> per_ep(static_cast<std::size_t>(n));
    std::vector<std::string> fails(static_cast<std::size_t>(std::max(1, threads)));
    parallel_chunks(n, threads, [&](int chunk, int begin, int end) {
        Workspace ws(m.config);
        for (int i = begin; i < end; ++i) {
            const Episode& ep = suite[static_cast<std::size_t>(i)];
            EpisodeGrids& out = per_ep[static_cast<std::size_t>(i)];
            try {
                const AttentionTrace t =
                    pre_softmax ? score_trace(m, store, ep, ws) : capture_trace(m, store, ep, ws);
                out.diag = metric_image_image_diag(t);
                out.li = metric_label_image(t);
                out.il = metric_image_label(t, ep);
                if (has_query_class_context(ep)) {
                    out.iiq = metric_image_image_query(t, ep);
                    out.query_valid = true;
                }
            } catch (const std::runtime_error& e) {
                fails[static_cast<std::size_t>(chunk)] =
                    std::string(e.what()) + " (suite episode " + std::to_string(i) + ")";
                return;
            }
        }
    });
    for (const std::string& f : fails)
        if (!f.empty()) throw EvalError(f);

    ProbeSummary s;
    s.image_image_diag = HeadGrid(m.config.layers, m.config.heads);
    s.label_image = HeadGrid(m.config.layers, m.config.heads);
    s.image_image_query = HeadGrid(m.config.layers, m.config.heads);
    s.image_label = HeadGrid(m.config.layers, m.config.heads);
    long valid = 0;
    for (const EpisodeGrids& g : per_ep) {
        for (std::size_t j = 0; j < s.image_image_diag.v.size(); ++j) {
            s.image_image_diag.v[j] += g.diag.v[j];
            s.label_image.v[j] += g.li.v[j];
            s.image_label.v[j] += g.il.v[j];
        }
        if (g.query_valid) {
            for (std::size_t j = 0; j < s.image_image_query.v.size(); ++j)
                s.image_image_query.v[j] += g.iiq.v[j];
            ++valid;
        }
    }
    if (valid == 0) throw EvalError("image-image-query: no episode has query-class context");
    for (double& x : s.image_image_diag.v) x /= n;
    for (double& x : s.label_image.v) x /= n;
    for (double& x : s.image_label.v) x /= n;
    for (double& x : s.image_image_query.v) x /= static_cast<double>(valid);
    return s;
}

void append_probe_rows(MetricLog& log, long step, std::uint64_t seed, const ProbeSummary& s) {
    const struct {
        const char* name;
        const HeadGrid* g;
    } metrics[] = {{"image-image-diag", &s.image_image_diag},
                   {"label-image", &s.label_image},
                   {"image-image-query", &s.image_image_query},
                   {"image-label", &s.image_label}};
    for (const auto& m : metrics)
        for (int l = 0; l < m.g->layers; ++l)
            for (int h = 0; h < m.g->heads; ++h)
                log.append(step, seed,
                           "probe-" + std::string(m.name) + "-L" + std::to_string(l) + "H" +
                               std::to_string(h),
                           m.g->at(l, h));
}

HeadScoreSeries prev_token_score_series(const std::vector<std::string>& checkpoint_paths,
                                        const ExemplarStore& store,
                                        const std::vector<Episode>& suite, int threads) {
    if (checkpoint_paths.empty()) throw ConfigError("prev_token_score_series: no checkpoints");
    if (suite.empty()) throw EvalError("prev_token_score_series: empty suite");

    struct Loaded {
        long step;
        TransformerModel model;
    };
    std::vector<Loaded> cks;
    cks.reserve(checkpoint_paths.size());
    for (const std::string& path : checkpoint_paths) {
        Checkpoint ck = load_checkpoint(path);
        if (!cks.empty() && !(ck.model.config == cks.front().model.config))
            throw ConfigError("checkpoint " + path + " has a different model config");
        cks.push_back({ck.step, std::move(ck.model)});
    }
    std::sort(cks.begin(), cks.end(), [](const Loaded& a, const Loaded& b) { return a.step < b.step; });
    for (std::size_t i = 1; i < cks.size(); ++i)
        if (cks[i].step == cks[i - 1].step)
            throw ConfigError("duplicate checkpoint step " + std::to_string(cks[i].step));

    HeadScoreSeries series;
    series.layers = cks.front().model.config.layers;
    series.heads = cks.front().model.config.heads;
    for (const Loaded& ck : cks) {
        const int n = static_cast<int>(suite.size());
        std::vector<HeadGrid> per_ep(static_cast<std::size_t>(n));
        parallel_chunks(n, threads, [&](int, int begin, int end) {
            Workspace ws(ck.model.config);
            for (int i = begin; i < end; ++i)
                per_ep[static_cast<std::size_t>(i)] = metric_label_image(
                    capture_trace(ck.model, store, suite[static_cast<std::size_t>(i)], ws));
        });
        HeadGrid mean(series.layers, series.heads);
        for (const HeadGrid& g : per_ep)
            for (std::size_t j = 0; j < mean.v.size(); ++j) mean.v[j] += g.v[j];
        for (double& x : mean.v) x /= n;
        series.steps.push_back(ck.step);
        series.label_image.push_back(std::move(mean));
    }
    return series;
}

namespace {

const char* role_name(TokenRole r) {
    switch (r) {
        case TokenRole::sample: return "sample";
        case TokenRole::label: return "label";
        case TokenRole::query: return "query";
    }
    throw FormatError("unknown token role", 0);
}

TokenRole role_from(const std::string& s, std::uint64_t line_no) {
    if (s == "sample") return TokenRole::sample;
    if (s == "label") return TokenRole::label;
    if (s == "query") return TokenRole::query;
    throw FormatError("unknown role name: " + s, line_no);
}

std::string matrix_path(const std::string& prefix, int l, int h) {
    return prefix + "_L" + std::to_string(l) + "H" + std::to_string(h) + ".csv";
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out << text;
    out.close();
    if (!out) throw IoError("write failed: " + path);
}

std::vector<std::string> read_lines(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        std::size_t end = pos;
        while (end < bytes.size() && bytes[end] != '\n') ++end;
        lines.emplace_back(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                           bytes.begin() + static_cast<std::ptrdiff_t>(end));
        pos = end + 1;
    }
    return lines;
}

}  // namespace

void export_trace(const AttentionTrace& t, const std::string& prefix) {
    require_role_map(t);
    std::string roles = "layers,heads,tokens\n" + std::to_string(t.layers) + "," +
                        std::to_string(t.heads) + "," + std::to_string(t.tokens) + "\n";
    for (TokenRole r : t.roles) roles += std::string(role_name(r)) + "\n";
    write_file(prefix + "_roles.csv", roles);

    for (int l = 0; l < t.layers; ++l)
        for (int h = 0; h < t.heads; ++h) {
            const Tensor& w = t.at(l, h);
            std::string text;
            for (int i = 0; i < t.tokens; ++i) {
                for (int j = 0; j < t.tokens; ++j) {
                    if (j) text += ",";
                    text += format_float(w.at(i, j));
                }
                text += "\n";
            }
            write_file(matrix_path(prefix, l, h), text);
        }
}

AttentionTrace load_trace(const std::string& prefix) {
    const std::string roles_path = prefix + "_roles.csv";
    const auto lines = read_lines(roles_path);
    if (lines.size() < 3 || lines[0] != "layers,heads,tokens")
        throw FormatError(roles_path + ": bad role sidecar header", 1);
    int dims[3] = {0, 0, 0};
    {
        std::size_t pos = 0;
        const std::string& l = lines[1];
        for (int fld = 0; fld < 3; ++fld) {
            std::size_t end = fld == 2 ? l.size() : l.find(',', pos);
            if (end == std::string::npos) throw FormatError(roles_path + ": bad dims line", 2);
            auto res = std::from_chars(l.data() + pos, l.data() + end, dims[fld]);
            if (res.ec != std::errc() || res.ptr != l.data() + end || dims[fld] < 1)
                throw FormatError(roles_path + ": bad dims line", 2);
            pos = end + 1;
        }
    }
    AttentionTrace t;
    t.layers = dims[0];
    t.heads = dims[1];
    t.tokens = dims[2];
    if (lines.size() != static_cast<std::size_t>(t.tokens) + 2)
        throw FormatError(roles_path + ": expected " + std::to_string(t.tokens) + " role rows",
                          lines.size());
    for (int i = 0; i < t.tokens; ++i)
        t.roles.push_back(
            role_from(lines[static_cast<std::size_t>(i) + 2], static_cast<std::uint64_t>(i) + 3));

    for (int l = 0; l < t.layers; ++l)
        for (int h = 0; h < t.heads; ++h) {
            const std::string path = matrix_path(prefix, l, h);
            const auto rows = read_lines(path);
            if (rows.size() != static_cast<std::size_t>(t.tokens))
                throw FormatError(path + ": expected " + std::to_string(t.tokens) + " rows",
                                  rows.size());
            Tensor w({t.tokens, t.tokens});
            for (int i = 0; i < t.tokens; ++i) {
                const std::string& line = rows[static_cast<std::size_t>(i)];
                std::size_t pos = 0;
                for (int j = 0; j < t.tokens; ++j) {
                    std::size_t end = j == t.tokens - 1 ? line.size() : line.find(',', pos);
                    if (end == std::string::npos)
                        throw FormatError(path + ": row is short",
                                          static_cast<std::uint64_t>(i) + 1);
                    float v = 0.0f;
                    auto res = std::from_chars(line.data() + pos, line.data() + end, v);
                    if (res.ec != std::errc() || res.ptr != line.data() + end)
                        throw FormatError(path + ": bad value in col " + std::to_string(j + 1),
                                          static_cast<std::uint64_t>(i) + 1);
                    w.at(i, j) = v;
                    pos = end + 1;
                }
            }
            t.weights.push_back(std::move(w));
        }
    return t;
}

}  // namespace iclforge
