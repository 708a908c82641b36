#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace aloha {

using CharacterId = int;
using HlaId = int;
using ShowId = int;
using LineId = int;

/// A character with its attribute set. `hla_ids` is sorted ascending and unique.
struct Character {
  CharacterId id = 0;
  std::int64_t external_id = 0;
  std::string name;
  ShowId show_id = 0;
  std::vector<HlaId> hla_ids;
};

struct DialogueLine {
  LineId id = 0;
  CharacterId character_id = 0;
  ShowId show_id = 0;
  std::string text;
};

/// A (context, response) exchange. The context speaker is recorded by its
/// external id only; it need not be a character with attributes.
struct DialoguePair {
  std::int64_t context_external_id = 0;
  std::string context_text;
  DialogueLine response;
};

/// Immutable, cross-referenced HLA-Chat style data set.
///
/// Dense ids: characters are numbered in ascending external-id order, HLAs
/// and shows in ascending name order, dialogue lines in file order.
class Corpus {
 public:
  Corpus() = default;

  /// Validates and indexes. Throws ReferenceError on dangling ids.
  Corpus(std::vector<std::string> hla_names, std::vector<std::string> show_names,
         std::vector<Character> characters, std::vector<DialoguePair> pairs);

  const std::vector<std::string>& hla_names() const { return hla_names_; }
  const std::vector<std::string>& show_names() const { return show_names_; }
  const std::vector<Character>& characters() const { return characters_; }
  const std::vector<DialoguePair>& pairs() const { return pairs_; }

  std::size_t num_characters() const { return characters_.size(); }
  std::size_t num_hlas() const { return hla_names_.size(); }

  const Character& character(CharacterId id) const;
  const DialoguePair& pair(LineId id) const { return pairs_.at(static_cast<std::size_t>(id)); }

  /// Response line ids spoken by `id`, ascending.
  const std::vector<LineId>& lines_of(CharacterId id) const;

  /// Characters that speak at least one response line, ascending.
  const std::vector<CharacterId>& dialogue_characters() const { return dialogue_characters_; }

  /// Shows that contain at least one dialogue line, ascending.
  std::vector<ShowId> dialogue_shows() const;

  std::optional<CharacterId> find_external(std::int64_t external_id) const;
  std::optional<HlaId> find_hla(const std::string& name) const;

 private:
  std::vector<std::string> hla_names_;
  std::vector<std::string> show_names_;
  std::vector<Character> characters_;
  std::vector<DialoguePair> pairs_;
  std::vector<std::vector<LineId>> lines_by_character_;
  std::vector<CharacterId> dialogue_characters_;
  std::map<std::int64_t, CharacterId> by_external_;
  std::map<std::string, HlaId> hla_by_name_;
};

Corpus load_corpus(const std::string& hla_path, const std::string& dialogue_path);
Corpus parse_corpus(const std::string& hla_text, const std::string& dialogue_text,
                    const std::string& hla_name = "<hla>", const std::string& dialogue_name = "<dialogue>");

/// Canonical serialization; parse_corpus(write_*) reproduces the corpus.
std::string write_hla_file(const Corpus& corpus);
std::string write_dialogue_file(const Corpus& corpus);
void write_corpus(const Corpus& corpus, const std::string& hla_path, const std::string& dialogue_path);

/// Keeps characters with at least `min_hla` attributes and drops their dialogue.
Corpus filter_min_hla(const Corpus& corpus, std::size_t min_hla);

/// Show-level fold assignment. Only shows with dialogue take part.
struct FoldPlan {
  int n_folds = 5;
  std::uint64_t seed = 0;
  std::map<ShowId, int> assignment;

  std::vector<ShowId> shows_in(int fold) const;
  int fold_of(ShowId show) const;
};

FoldPlan make_folds(const Corpus& corpus, int n_folds, std::uint64_t seed);

struct StatsReport {
  std::size_t characters = 0;
  std::size_t hlas = 0;
  std::size_t character_hla_pairs = 0;
  double mean_hlas_per_character = 0.0;
  bool mean_defined = false;
  std::size_t dialogue_lines = 0;
  std::size_t dialogue_characters = 0;
  std::size_t shows = 0;
  std::size_t dialogue_shows = 0;

  std::string to_string() const;
};

StatsReport corpus_stats(const Corpus& corpus);

}  // namespace aloha
