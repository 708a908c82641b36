#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace aloha::text {

/// Lowercases ASCII and splits on runs of non-alphanumeric bytes, keeping at
/// most `cap` tokens. Bytes >= 0x80 count as word characters so UTF-8 words
/// stay whole.
std::vector<std::string> tokenize(std::string_view text, std::size_t cap = static_cast<std::size_t>(-1),
                                  bool lowercase = true);

/// Sparse L2-normalised tf-idf vector keyed by term hash, sorted by key.
using SparseVector = std::vector<std::pair<std::uint64_t, double>>;

double cosine(const SparseVector& a, const SparseVector& b);

/// Document frequencies over a fixed collection.
/// idf(t) = ln((1 + N) / (1 + df(t))) + 1, tf = raw count.
class TfIdf {
 public:
  TfIdf() = default;
  explicit TfIdf(const std::vector<std::string>& documents);

  SparseVector vectorize(std::string_view text) const;
  double similarity(std::string_view a, std::string_view b) const;
  double idf(const std::string& term) const;
  std::size_t num_documents() const { return num_docs_; }

 private:
  std::size_t num_docs_ = 0;
  std::unordered_map<std::string, std::size_t> df_;
};

}  // namespace aloha::text
