#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "aloha/ccm.hpp"
#include "aloha/corpus.hpp"
#include "aloha/csm.hpp"
#include "aloha/text.hpp"

namespace aloha::obs {

inline constexpr std::size_t kSlots = 8;
inline constexpr std::string_view kNone = "none";
inline constexpr std::size_t kImportantPool = 40;

/// Ranker input: eight HLA slots and the context line.
struct Observation {
  std::array<std::string, kSlots> hla_slots;
  std::string context_text;

  bool guided() const;  ///< true when any slot is not `none`
  bool operator==(const Observation&) const = default;
};

enum class ObsMode { hla_og, no_hla_og };

struct CandidateSet {
  Observation obs;
  std::vector<std::string> candidates;
  int gt_index = 0;
  /// Speaker of the ground truth.
  CharacterId target = 0;
  /// Speaker of each candidate.
  std::vector<CharacterId> provenance;
  /// Corpus line of each candidate (not serialized).
  std::vector<LineId> line_ids;

  void validate() const;
};

enum class SamplingMode { uniform_character, negative_character };

struct SamplingConfig {
  int n_distractors = 19;
  SamplingMode mode = SamplingMode::uniform_character;
  int similarity_pool_k = 200;
  std::uint64_t seed = 0;

  void validate() const;
};

/// The character's own HLAs by descending CSM score (ties by id), at most k.
std::vector<std::string> top_important_hlas(const csm::LatentFactors& f, const Corpus& corpus, CharacterId character,
                                            std::size_t k = kImportantPool);

/// hla_og draws eight of the top-40 HLAs without replacement (padding with
/// `none` when fewer exist); no_hla_og fills every slot with `none`.
Observation build_obs(const Corpus& corpus, CharacterId character, std::string context_text, ObsMode mode,
                      const csm::LatentFactors& f, std::uint64_t seed);

/// `hla: <name>` per slot, then the context line, joined by newlines.
std::string render_obs(const Observation& obs);
Observation parse_obs(std::string_view rendered);

/// Dialogue lines allowed to appear as candidates, grouped by speaker.
class LinePool {
 public:
  LinePool(const Corpus& corpus, std::vector<LineId> lines);
  static LinePool all(const Corpus& corpus);
  static LinePool of_shows(const Corpus& corpus, const std::vector<ShowId>& shows);

  const std::vector<LineId>& lines() const { return lines_; }
  const std::vector<CharacterId>& characters() const { return characters_; }
  const std::vector<LineId>& lines_of(CharacterId c) const;

 private:
  std::vector<LineId> lines_;
  std::vector<CharacterId> characters_;
  std::vector<std::vector<LineId>> by_character_;
};

/// Distractors drawn character-first: a uniform speaker other than the ground
/// truth's, then a uniform line of theirs.
CandidateSet sample_uniform(const Corpus& corpus, const LinePool& pool, LineId gt, const Observation& obs,
                            const SamplingConfig& cfg);

/// Distractors drawn uniformly from the `similarity_pool_k` negative-set lines
/// closest to the ground truth by tf-idf cosine.
CandidateSet sample_negative(const Corpus& corpus, const LinePool& pool, const ccm::Community& community, LineId gt,
                             const Observation& obs, const SamplingConfig& cfg, const text::TfIdf& tfidf);

/// One tab-separated record per set:
/// escaped OBS, candidates..., gt_index, target id, comma-separated provenance.
std::string write_candidate_sets(const std::vector<CandidateSet>& sets);
std::vector<CandidateSet> read_candidate_sets(const std::string& text);

}  // namespace aloha::obs
