#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace iclforge {

// Corpus-side repetition statistics: how often n-grams recur inside fixed
// token windows of a pre-tokenized stream. Tokenization happens upstream;
// this module only consumes id sequences.

enum class TokenFormat {
    binary_u32_le,  // headerless little-endian 32-bit words
    decimal_text,   // whitespace-separated decimal ids
};

struct TokenStream {
    std::vector<std::uint32_t> ids;
    std::string source;
};

// Decode from an in-memory buffer. Binary buffers must be a multiple of 4
// bytes; text buffers must hold only decimal u32 tokens and whitespace.
// Violations raise FormatError carrying the byte offset of the defect.
TokenStream decode_token_stream(const std::vector<char>& bytes, TokenFormat format,
                                const std::string& source);

TokenStream read_token_stream(const std::string& path, TokenFormat format);

// Average repetitions per window. A window contributes, for every distinct
// n-gram it contains, its occurrence count beyond the first; occurrences may
// overlap. Windows are consecutive non-overlapping blocks (tail remainder
// dropped) unless sliding is set, in which case every start offset counts.
// window < n or stream shorter than window raises ConfigError.
double window_repetitions(const TokenStream& stream, int window, int n,
                          bool sliding = false, int threads = 1);

long long window_count(long long stream_len, int window, bool sliding);

struct NGramRow {
    int n = 0;
    int window = 0;
    double avg_repetitions = 0.0;
    long long windows_counted = 0;

    bool operator==(const NGramRow&) const = default;
};

struct NGramReport {
    std::vector<NGramRow> rows;
};

NGramReport ngram_report(const TokenStream& stream, int window = 2048,
                         const std::vector<int>& ns = {1, 2, 3, 5, 10, 15, 20},
                         bool sliding = false, int threads = 1);

// CSV with header n,window,avg_repetitions,windows_counted.
std::string ngram_csv(const NGramReport& report);

}  // namespace iclforge
