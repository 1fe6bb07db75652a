#include "mstar/tokenizer.hpp"

#include <stdexcept>

namespace mstar {

const char* style_name(QueryStyle s) {
  switch (s) {
    case QueryStyle::word:
      return "word";
    case QueryStyle::phrase:
      return "phrase";
    case QueryStyle::combined:
      return "combined";
    case QueryStyle::semantic:
      return "semantic";
  }
  throw std::logic_error("style_name: bad enum value");
}

QueryStyle style_from_name(const std::string& name) {
  if (name == "word") return QueryStyle::word;
  if (name == "phrase") return QueryStyle::phrase;
  if (name == "combined") return QueryStyle::combined;
  if (name == "semantic") return QueryStyle::semantic;
  throw std::invalid_argument("unknown query style: " + name);
}

namespace tokenizer {

std::string instruction_for(QueryStyle s, bool instructions_on) {
  if (!instructions_on) return "";
  return std::string(style_name(s)) + ":";
}

namespace {

int char_id(char c, const std::string& where) {
  const unsigned char u = static_cast<unsigned char>(c);
  if (u < 32 || u > 126)
    throw std::invalid_argument("tokenizer: character outside alphabet in " + where);
  return u - 32;
}

}  // namespace

std::vector<int> encode(const std::string& instruction, const std::string& query, int* sum_pos) {
  if (query.empty()) throw std::invalid_argument("tokenizer: empty query string");
  std::vector<int> ids;
  ids.reserve(instruction.size() + 1 + query.size());
  for (char c : instruction) ids.push_back(char_id(c, "instruction"));
  if (sum_pos) *sum_pos = static_cast<int>(ids.size());
  ids.push_back(kSumId);
  for (char c : query) ids.push_back(char_id(c, "query"));
  return ids;
}

}  // namespace tokenizer
}  // namespace mstar
