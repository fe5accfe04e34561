#pragma once

#include <string>
#include <vector>

namespace latentlab::tok {

// Fixed vocabulary layout for the synthetic grid task. 64 ids total; the
// model never sees strings, these are only for data generation and reports.
constexpr int PAD = 0;
constexpr int BOS = 1;
constexpr int EOS = 2;
constexpr int TRIGGER = 3;   // requests the auxiliary visual block
constexpr int DELIM = 4;     // everything after it (until EOS) is the answer
constexpr int W_INSPECT = 5;
constexpr int W_CELL = 6;
constexpr int ROW0 = 8;      // ROW0..ROW0+7
constexpr int COL0 = 16;     // COL0..COL0+7
constexpr int GLYPH0 = 24;   // GLYPH0..GLYPH0+15
constexpr int GLYPH_SLOTS = 16;
constexpr int VOCAB = 64;

inline int row_token(int r) { return ROW0 + r; }
inline int col_token(int c) { return COL0 + c; }
inline int glyph_token(int g) { return GLYPH0 + g; }

inline std::vector<int> question_tokens(int r, int c) {
    return {BOS, row_token(r), col_token(c)};
}
// phase-1 reasoning text, ends with the trigger
inline std::vector<int> phase1_tokens(int r, int c) {
    return {W_INSPECT, W_CELL, row_token(r), col_token(c), TRIGGER};
}
// phase-2 answer text; restates the queried cell before the glyph so the
// answer is conditioned on an explicit, recent statement of where to look
inline std::vector<int> phase2_tokens(int r, int c, int glyph) {
    return {DELIM, row_token(r), col_token(c), glyph_token(glyph), EOS};
}

std::string token_name(int id);
std::string decode(const std::vector<int> &ids);

}  // namespace latentlab::tok
