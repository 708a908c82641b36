#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "aloha/corpus.hpp"
#include "aloha/csm.hpp"

namespace aloha::ccm {

struct CommunityConfig {
  double first_level_fraction = 0.10;
  int second_level_k = 30;
  int min_frequency = 10;

  void validate() const;
};

struct Community {
  CharacterId target = 0;
  /// Most similar characters to the target, best first.
  std::vector<CharacterId> first_level;
  /// Number of second-level lists each character appears in (zero counts omitted).
  std::map<CharacterId, int> second_level_counts;
  std::set<CharacterId> positive;
  std::set<CharacterId> negative;

  int count_of(CharacterId c) const;
  bool operator==(const Community&) const = default;
};

/// Size of the first level for `others` candidate characters.
std::size_t first_level_size(std::size_t others, double fraction);

/// Two-level connection representation around `target`.
/// Second-level rankings run in parallel under OpenMP.
Community build_community(const csm::LatentFactors& f, CharacterId target, const CommunityConfig& config,
                          const std::vector<CharacterId>& dialogue_characters);

namespace reference {
/// Single-threaded version that ranks with character_similarity directly.
Community build_community(const csm::LatentFactors& f, CharacterId target, const CommunityConfig& config,
                          const std::vector<CharacterId>& dialogue_characters);
}  // namespace reference

std::string community_report(const Community& c, const Corpus& corpus, const CommunityConfig& config);

/// `role \t character_id \t name \t count` lines: FL in rank order, then POS, then NEG.
std::string export_community(const Community& c, const Corpus& corpus);
/// Inverse of export_community (counts are recovered for FL and POS members only).
Community import_community(const std::string& text, CharacterId target);

}  // namespace aloha::ccm
