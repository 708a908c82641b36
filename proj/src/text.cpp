#include "aloha/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>

#include "aloha/common.hpp"

namespace aloha::text {

namespace {
bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }
}  // namespace

std::vector<std::string> tokenize(std::string_view text, std::size_t cap, bool lowercase) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (out.size() >= cap) break;
    if (is_word_byte(c)) {
      cur += lowercase && c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
    } else {
      flush();
    }
  }
  if (out.size() < cap) flush();
  return out;
}

double cosine(const SparseVector& a, const SparseVector& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i].first < b[j].first) {
      ++i;
    } else if (b[j].first < a[i].first) {
      ++j;
    } else {
      s += a[i++].second * b[j++].second;
    }
  }
  return s;
}

TfIdf::TfIdf(const std::vector<std::string>& documents) : num_docs_(documents.size()) {
  for (const auto& doc : documents) {
    auto toks = tokenize(doc);
    std::set<std::string> uniq(toks.begin(), toks.end());
    for (const auto& t : uniq) ++df_[t];
  }
}

double TfIdf::idf(const std::string& term) const {
  auto it = df_.find(term);
  const double df = it == df_.end() ? 0.0 : static_cast<double>(it->second);
  return std::log((1.0 + static_cast<double>(num_docs_)) / (1.0 + df)) + 1.0;
}

SparseVector TfIdf::vectorize(std::string_view text) const {
  std::map<std::string, int> tf;
  for (auto& t : tokenize(text)) ++tf[t];
  SparseVector v;
  v.reserve(tf.size());
  double sq = 0.0;
  for (const auto& [term, count] : tf) {
    const double w = count * idf(term);
    v.emplace_back(fnv1a(term), w);
    sq += w * w;
  }
  std::sort(v.begin(), v.end());
  if (sq > 0.0) {
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& e : v) e.second *= inv;
  }
  return v;
}

double TfIdf::similarity(std::string_view a, std::string_view b) const {
  return cosine(vectorize(a), vectorize(b));
}

}  // namespace aloha::text
