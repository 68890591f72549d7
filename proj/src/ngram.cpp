#include "iclforge/ngram.hpp"

#include <algorithm>
#include <charconv>
#include <climits>
#include <cstring>

#include "iclforge/binio.hpp"
#include "iclforge/errors.hpp"
#include "iclforge/trainloop.hpp"

namespace iclforge {

namespace {

bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

std::vector<std::uint32_t> decode_binary(const std::vector<char>& bytes) {
    const std::size_t rem = bytes.size() % 4;
    if (rem != 0) throw FormatError("trailing partial 32-bit word", bytes.size() - rem);
    std::vector<std::uint32_t> ids(bytes.size() / 4);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::size_t o = i * 4;
        ids[i] = static_cast<std::uint32_t>(p[o]) | (static_cast<std::uint32_t>(p[o + 1]) << 8) |
                 (static_cast<std::uint32_t>(p[o + 2]) << 16) |
                 (static_cast<std::uint32_t>(p[o + 3]) << 24);
    }
    return ids;
}

std::vector<std::uint32_t> decode_text(const std::vector<char>& bytes) {
    std::vector<std::uint32_t> ids;
    const char* begin = bytes.data();
    const char* end = begin + bytes.size();
    const char* cur = begin;
    while (cur != end) {
        if (is_space(*cur)) {
            ++cur;
            continue;
        }
        std::uint32_t v = 0;
        auto res = std::from_chars(cur, end, v);
        const auto offset = static_cast<std::uint64_t>(cur - begin);
        if (res.ec == std::errc::result_out_of_range)
            throw FormatError("token does not fit in 32 bits", offset);
        if (res.ec != std::errc()) throw FormatError("invalid token character", offset);
        if (res.ptr != end && !is_space(*res.ptr))
            throw FormatError("invalid token character", static_cast<std::uint64_t>(res.ptr - begin));
        ids.push_back(v);
        cur = res.ptr;
    }
    return ids;
}

// First-occurrence table for one window. Open addressing keyed by a rolling
// polynomial hash; a hash hit is confirmed by comparing the actual token
// span, so 64-bit collisions cost a probe step instead of a wrong count.
struct WindowCounter {
    std::vector<std::uint64_t> hashes;
    std::vector<std::int32_t> first;
    std::vector<std::uint32_t> stamp;
    std::uint32_t epoch = 0;
    std::size_t mask = 0;

    void reserve(int positions) {
        std::size_t want = 1;
        while (want < static_cast<std::size_t>(positions) * 2) want <<= 1;
        if (want != hashes.size()) {
            hashes.assign(want, 0);
            first.assign(want, 0);
            stamp.assign(want, 0);
            epoch = 0;
            mask = want - 1;
        }
    }

    // repetitions = occurrences beyond the first = positions - distinct
    long long count(const std::uint32_t* w, int window, int n) {
        const int positions = window - n + 1;
        ++epoch;
        if (epoch == 0) {
            std::fill(stamp.begin(), stamp.end(), 0u);
            epoch = 1;
        }
        const std::uint64_t base = 0x9e3779b97f4a7c15ull;
        std::uint64_t pow_top = 1;
        for (int i = 0; i + 1 < n; ++i) pow_top *= base;
        std::uint64_t h = 0;
        for (int i = 0; i < n; ++i) h = h * base + w[i];
        long long distinct = 0;
        for (int p = 0; p < positions; ++p) {
            std::uint64_t mixed = h;
            mixed ^= mixed >> 33;
            mixed *= 0xff51afd7ed558ccdull;
            mixed ^= mixed >> 29;
            std::size_t slot = mixed & mask;
            for (;;) {
                if (stamp[slot] != epoch) {
                    stamp[slot] = epoch;
                    hashes[slot] = h;
                    first[slot] = p;
                    ++distinct;
                    break;
                }
                if (hashes[slot] == h &&
                    std::memcmp(w + first[slot], w + p, sizeof(std::uint32_t) * static_cast<std::size_t>(n)) == 0)
                    break;
                slot = (slot + 1) & mask;
            }
            if (p + 1 < positions) h = (h - w[p] * pow_top) * base + w[p + n];
        }
        return positions - distinct;
    }
};

long long checked_windows(const TokenStream& stream, int window, int n, bool sliding) {
    if (n < 1) throw ConfigError("n must be at least 1, got " + std::to_string(n));
    if (window < n)
        throw ConfigError("window " + std::to_string(window) + " is smaller than n " + std::to_string(n));
    const auto len = static_cast<long long>(stream.ids.size());
    if (len < window)
        throw ConfigError("stream has " + std::to_string(len) + " tokens, window needs " +
                          std::to_string(window));
    const long long windows = window_count(len, window, sliding);
    if (windows > INT_MAX) throw ConfigError("too many windows: " + std::to_string(windows));
    return windows;
}

}  // namespace

TokenStream decode_token_stream(const std::vector<char>& bytes, TokenFormat format,
                                const std::string& source) {
    TokenStream stream;
    stream.source = source;
    stream.ids = format == TokenFormat::binary_u32_le ? decode_binary(bytes) : decode_text(bytes);
    return stream;
}

TokenStream read_token_stream(const std::string& path, TokenFormat format) {
    return decode_token_stream(read_file_bytes(path), format, path);
}

long long window_count(long long stream_len, int window, bool sliding) {
    if (stream_len < window) return 0;
    return sliding ? stream_len - window + 1 : stream_len / window;
}

double window_repetitions(const TokenStream& stream, int window, int n, bool sliding, int threads) {
    const long long windows = checked_windows(stream, window, n, sliding);
    const int nw = static_cast<int>(windows);
    const int use = (threads <= 1 || nw <= 1) ? 1 : std::min(threads, nw);
    std::vector<WindowCounter> counters(static_cast<std::size_t>(use));
    for (auto& c : counters) c.reserve(window - n + 1);
    std::vector<long long> partial(static_cast<std::size_t>(use), 0);
    const std::uint32_t* ids = stream.ids.data();
    parallel_chunks(nw, threads, [&](int chunk, int begin, int end) {
        long long sum = 0;
        auto& counter = counters[static_cast<std::size_t>(chunk)];
        for (int wi = begin; wi < end; ++wi) {
            const long long start = sliding ? wi : static_cast<long long>(wi) * window;
            sum += counter.count(ids + start, window, n);
        }
        partial[static_cast<std::size_t>(chunk)] = sum;
    });
    long long total = 0;
    for (long long s : partial) total += s;
    return static_cast<double>(total) / static_cast<double>(windows);
}

NGramReport ngram_report(const TokenStream& stream, int window, const std::vector<int>& ns,
                         bool sliding, int threads) {
    if (ns.empty()) throw ConfigError("report needs at least one n-gram length");
    NGramReport report;
    for (int n : ns) {
        NGramRow row;
        row.n = n;
        row.window = window;
        row.avg_repetitions = window_repetitions(stream, window, n, sliding, threads);
        row.windows_counted = window_count(static_cast<long long>(stream.ids.size()), window, sliding);
        report.rows.push_back(row);
    }
    return report;
}

std::string ngram_csv(const NGramReport& report) {
    std::string out = "n,window,avg_repetitions,windows_counted\n";
    for (const auto& r : report.rows) {
        out += std::to_string(r.n);
        out += ',';
        out += std::to_string(r.window);
        out += ',';
        out += format_float(r.avg_repetitions);
        out += ',';
        out += std::to_string(r.windows_counted);
        out += '\n';
    }
    return out;
}

}  // namespace iclforge
