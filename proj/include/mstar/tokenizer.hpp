// Character-level tokenizer over a fixed 96-symbol alphabet: printable ASCII
// 32..126 (ids 0..94) plus a summary token (id 95). The text stream fed to
// the encoder is [instruction chars][SUM][query chars]; the query embedding
// is read at the SUM position.
#pragma once

#include <string>
#include <vector>

namespace mstar {

enum class QueryStyle { word, phrase, combined, semantic };

const char* style_name(QueryStyle s);
QueryStyle style_from_name(const std::string& name);  // throws on unknown style

// Phrase and combined queries run through the aggregation branch; word and
// semantic queries score slots directly.
inline bool multiword_style(QueryStyle s) {
  return s == QueryStyle::phrase || s == QueryStyle::combined;
}

namespace tokenizer {

constexpr int kVocabSize = 96;
constexpr int kSumId = 95;

// Instruction prefix for a style; empty when instructions are disabled.
std::string instruction_for(QueryStyle s, bool instructions_on = true);

// Token ids of [instruction][SUM][query]. sum_pos receives the index of the
// SUM token within the stream. Throws on empty query or out-of-alphabet chars.
std::vector<int> encode(const std::string& instruction, const std::string& query, int* sum_pos);

}  // namespace tokenizer
}  // namespace mstar
