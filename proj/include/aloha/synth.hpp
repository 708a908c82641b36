#pragma once

#include <cstdint>
#include <string>

namespace aloha::synth {

/// Knobs for the synthetic corpus. Characters are split evenly across
/// `groups`; each group owns a block of HLAs and a set of style tokens that
/// salt every response its members speak. Topics are shared by everyone, so
/// most candidate sets hold several context-correct lines in other styles.
struct SynthConfig {
  int characters = 40;
  int groups = 4;
  int shows = 10;
  int lines_per_character = 30;
  int topics = 4;
  int group_hlas = 10;
  int hlas_from_group = 7;
  int noise_hlas = 30;
  int hlas_from_noise = 3;
  int style_tokens = 6;
  int style_per_line = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthCorpus {
  std::string hla_text;
  std::string dialogue_text;
};

SynthCorpus generate(const SynthConfig& config);

/// Group of the character with the given 1-based external id.
int group_of(const SynthConfig& config, std::int64_t external_id);

}  // namespace aloha::synth
