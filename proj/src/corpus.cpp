#include "aloha/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "aloha/common.hpp"

namespace aloha {

Corpus::Corpus(std::vector<std::string> hla_names, std::vector<std::string> show_names,
               std::vector<Character> characters, std::vector<DialoguePair> pairs)
    : hla_names_(std::move(hla_names)),
      show_names_(std::move(show_names)),
      characters_(std::move(characters)),
      pairs_(std::move(pairs)) {
  const int m = static_cast<int>(hla_names_.size());
  for (int i = 0; i < m; ++i) {
    if (hla_names_[i].empty()) throw Error("empty HLA name at id " + std::to_string(i));
    if (!hla_by_name_.emplace(hla_names_[i], i).second) throw Error("duplicate HLA name '" + hla_names_[i] + "'");
  }
  const int shows = static_cast<int>(show_names_.size());
  for (std::size_t c = 0; c < characters_.size(); ++c) {
    auto& ch = characters_[c];
    if (ch.id != static_cast<CharacterId>(c)) throw Error("character ids must be dense");
    if (ch.show_id < 0 || ch.show_id >= shows) throw ReferenceError("character " + std::to_string(ch.external_id) + " has unknown show");
    std::sort(ch.hla_ids.begin(), ch.hla_ids.end());
    ch.hla_ids.erase(std::unique(ch.hla_ids.begin(), ch.hla_ids.end()), ch.hla_ids.end());
    for (HlaId h : ch.hla_ids) {
      if (h < 0 || h >= m) throw ReferenceError("character " + std::to_string(ch.external_id) + " references unknown HLA id " + std::to_string(h));
    }
    if (!by_external_.emplace(ch.external_id, ch.id).second) {
      throw Error("duplicate character id " + std::to_string(ch.external_id));
    }
  }
  lines_by_character_.assign(characters_.size(), {});
  for (std::size_t l = 0; l < pairs_.size(); ++l) {
    auto& line = pairs_[l].response;
    if (line.id != static_cast<LineId>(l)) throw Error("line ids must be dense");
    if (line.character_id < 0 || line.character_id >= static_cast<CharacterId>(characters_.size())) {
      throw ReferenceError("dialogue line " + std::to_string(l) + " references unknown character id " +
                           std::to_string(line.character_id));
    }
    if (line.show_id != characters_[line.character_id].show_id) {
      throw ReferenceError("dialogue line " + std::to_string(l) + " show does not match its character's show");
    }
    if (line.text.empty() || pairs_[l].context_text.empty()) throw Error("dialogue line " + std::to_string(l) + " has empty text");
    lines_by_character_[line.character_id].push_back(line.id);
  }
  for (std::size_t c = 0; c < characters_.size(); ++c) {
    if (!lines_by_character_[c].empty()) dialogue_characters_.push_back(static_cast<CharacterId>(c));
  }
}

const Character& Corpus::character(CharacterId id) const {
  if (id < 0 || id >= static_cast<CharacterId>(characters_.size())) {
    throw NotFoundError("unknown character id " + std::to_string(id));
  }
  return characters_[id];
}

const std::vector<LineId>& Corpus::lines_of(CharacterId id) const {
  character(id);
  return lines_by_character_[id];
}

std::vector<ShowId> Corpus::dialogue_shows() const {
  std::set<ShowId> shows;
  for (const auto& p : pairs_) shows.insert(p.response.show_id);
  return {shows.begin(), shows.end()};
}

std::optional<CharacterId> Corpus::find_external(std::int64_t external_id) const {
  auto it = by_external_.find(external_id);
  if (it == by_external_.end()) return std::nullopt;
  return it->second;
}

std::optional<HlaId> Corpus::find_hla(const std::string& name) const {
  auto it = hla_by_name_.find(name);
  if (it == hla_by_name_.end()) return std::nullopt;
  return it->second;
}

namespace {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::string field_text(const std::string& raw) { return trim(unescape_field(raw)); }

struct RawCharacter {
  std::int64_t external_id;
  std::string name;
  std::string show;
  std::vector<std::string> hlas;
};

struct RawPair {
  std::size_t line_no;
  std::string show;
  std::int64_t context_id;
  std::string context;
  std::int64_t response_id;
  std::string response;
};

}  // namespace

Corpus parse_corpus(const std::string& hla_text, const std::string& dialogue_text, const std::string& hla_name,
                    const std::string& dialogue_name) {
  std::vector<RawCharacter> raw;
  std::set<std::int64_t> seen;
  std::set<std::string> hla_set;
  std::set<std::string> show_set;

  auto lines = split_lines(hla_text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (trim(lines[ln]).empty()) continue;
    auto fields = split_escaped(lines[ln], '\t');
    if (fields.size() != 4) {
      throw ParseError(hla_name, ln + 1, "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    }
    RawCharacter rc;
    try {
      rc.external_id = parse_int(trim(fields[0]));
    } catch (const Error& e) {
      throw ParseError(hla_name, ln + 1, e.what());
    }
    rc.name = field_text(fields[1]);
    rc.show = field_text(fields[2]);
    if (rc.name.empty()) throw ParseError(hla_name, ln + 1, "empty character name");
    if (rc.show.empty()) throw ParseError(hla_name, ln + 1, "empty show name");
    if (!seen.insert(rc.external_id).second) {
      throw ParseError(hla_name, ln + 1, "duplicate character id " + std::to_string(rc.external_id));
    }
    std::set<std::string> own;
    for (const auto& piece : split_escaped(fields[3], '|')) {
      auto name = field_text(piece);
      if (name.empty()) continue;
      if (own.insert(name).second) rc.hlas.push_back(name);
    }
    hla_set.insert(rc.hlas.begin(), rc.hlas.end());
    show_set.insert(rc.show);
    raw.push_back(std::move(rc));
  }

  std::vector<std::string> hla_names(hla_set.begin(), hla_set.end());
  std::vector<std::string> show_names(show_set.begin(), show_set.end());
  auto index_of = [](const std::vector<std::string>& sorted, const std::string& key) {
    return static_cast<int>(std::lower_bound(sorted.begin(), sorted.end(), key) - sorted.begin());
  };

  std::sort(raw.begin(), raw.end(), [](const auto& a, const auto& b) { return a.external_id < b.external_id; });
  std::vector<Character> characters;
  std::map<std::int64_t, CharacterId> by_external;
  for (const auto& rc : raw) {
    Character ch;
    ch.id = static_cast<CharacterId>(characters.size());
    ch.external_id = rc.external_id;
    ch.name = rc.name;
    ch.show_id = index_of(show_names, rc.show);
    for (const auto& h : rc.hlas) ch.hla_ids.push_back(index_of(hla_names, h));
    by_external[ch.external_id] = ch.id;
    characters.push_back(std::move(ch));
  }

  std::vector<DialoguePair> pairs;
  auto dlines = split_lines(dialogue_text);
  for (std::size_t ln = 0; ln < dlines.size(); ++ln) {
    if (trim(dlines[ln]).empty()) continue;
    auto fields = split_escaped(dlines[ln], '\t');
    if (fields.size() != 5) {
      throw ParseError(dialogue_name, ln + 1, "expected 5 tab-separated fields, got " + std::to_string(fields.size()));
    }
    RawPair rp;
    rp.line_no = ln + 1;
    rp.show = field_text(fields[0]);
    try {
      rp.context_id = parse_int(trim(fields[1]));
      rp.response_id = parse_int(trim(fields[3]));
    } catch (const Error& e) {
      throw ParseError(dialogue_name, ln + 1, e.what());
    }
    rp.context = field_text(fields[2]);
    rp.response = field_text(fields[4]);
    if (rp.context.empty()) throw ParseError(dialogue_name, ln + 1, "empty context text");
    if (rp.response.empty()) throw ParseError(dialogue_name, ln + 1, "empty response text");

    auto it = by_external.find(rp.response_id);
    if (it == by_external.end()) {
      throw ReferenceError(dialogue_name + ":" + std::to_string(ln + 1) + ": unknown character id " +
                           std::to_string(rp.response_id));
    }
    const auto& speaker = characters[it->second];
    if (show_names[speaker.show_id] != rp.show) {
      throw ReferenceError(dialogue_name + ":" + std::to_string(ln + 1) + ": character " +
                           std::to_string(rp.response_id) + " belongs to show '" + show_names[speaker.show_id] +
                           "', not '" + rp.show + "'");
    }
    if (speaker.hla_ids.empty()) {
      throw ReferenceError(dialogue_name + ":" + std::to_string(ln + 1) + ": character " +
                           std::to_string(rp.response_id) + " has dialogue but no HLAs");
    }
    DialoguePair p;
    p.context_external_id = rp.context_id;
    p.context_text = std::move(rp.context);
    p.response.id = static_cast<LineId>(pairs.size());
    p.response.character_id = speaker.id;
    p.response.show_id = speaker.show_id;
    p.response.text = std::move(rp.response);
    pairs.push_back(std::move(p));
  }

  return Corpus(std::move(hla_names), std::move(show_names), std::move(characters), std::move(pairs));
}

Corpus load_corpus(const std::string& hla_path, const std::string& dialogue_path) {
  return parse_corpus(read_file(hla_path), read_file(dialogue_path), hla_path, dialogue_path);
}

std::string write_hla_file(const Corpus& corpus) {
  std::string out;
  for (const auto& ch : corpus.characters()) {
    out += std::to_string(ch.external_id);
    out += '\t';
    out += escape_field(ch.name);
    out += '\t';
    out += escape_field(corpus.show_names()[ch.show_id]);
    out += '\t';
    for (std::size_t k = 0; k < ch.hla_ids.size(); ++k) {
      if (k) out += '|';
      out += escape_field(corpus.hla_names()[ch.hla_ids[k]]);
    }
    out += '\n';
  }
  return out;
}

std::string write_dialogue_file(const Corpus& corpus) {
  std::string out;
  for (const auto& p : corpus.pairs()) {
    const auto& ch = corpus.character(p.response.character_id);
    out += escape_field(corpus.show_names()[p.response.show_id]);
    out += '\t';
    out += std::to_string(p.context_external_id);
    out += '\t';
    out += escape_field(p.context_text);
    out += '\t';
    out += std::to_string(ch.external_id);
    out += '\t';
    out += escape_field(p.response.text);
    out += '\n';
  }
  return out;
}

void write_corpus(const Corpus& corpus, const std::string& hla_path, const std::string& dialogue_path) {
  write_file(hla_path, write_hla_file(corpus));
  write_file(dialogue_path, write_dialogue_file(corpus));
}

Corpus filter_min_hla(const Corpus& corpus, std::size_t min_hla) {
  std::vector<CharacterId> remap(corpus.num_characters(), -1);
  std::vector<Character> kept;
  for (const auto& ch : corpus.characters()) {
    if (ch.hla_ids.size() < min_hla) continue;
    Character c = ch;
    c.id = static_cast<CharacterId>(kept.size());
    remap[ch.id] = c.id;
    kept.push_back(std::move(c));
  }
  std::vector<DialoguePair> pairs;
  for (const auto& p : corpus.pairs()) {
    CharacterId to = remap[p.response.character_id];
    if (to < 0) continue;
    DialoguePair q = p;
    q.response.character_id = to;
    q.response.id = static_cast<LineId>(pairs.size());
    pairs.push_back(std::move(q));
  }
  return Corpus(corpus.hla_names(), corpus.show_names(), std::move(kept), std::move(pairs));
}

std::vector<ShowId> FoldPlan::shows_in(int fold) const {
  std::vector<ShowId> out;
  for (const auto& [show, f] : assignment) {
    if (f == fold) out.push_back(show);
  }
  return out;
}

int FoldPlan::fold_of(ShowId show) const {
  auto it = assignment.find(show);
  if (it == assignment.end()) throw NotFoundError("show " + std::to_string(show) + " has no fold");
  return it->second;
}

FoldPlan make_folds(const Corpus& corpus, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw Error("n_folds must be at least 2");
  auto shows = corpus.dialogue_shows();
  if (shows.size() < static_cast<std::size_t>(n_folds)) {
    throw Error("cannot split " + std::to_string(shows.size()) + " shows into " + std::to_string(n_folds) + " folds");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(shows.begin(), shows.end(), rng);

  FoldPlan plan;
  plan.n_folds = n_folds;
  plan.seed = seed;
  const std::size_t base = shows.size() / n_folds;
  const std::size_t extra = shows.size() % n_folds;
  std::size_t pos = 0;
  for (int f = 0; f < n_folds; ++f) {
    std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
    for (std::size_t k = 0; k < size; ++k) plan.assignment[shows[pos++]] = f;
  }
  return plan;
}

StatsReport corpus_stats(const Corpus& corpus) {
  StatsReport s;
  s.characters = corpus.num_characters();
  s.hlas = corpus.num_hlas();
  for (const auto& ch : corpus.characters()) s.character_hla_pairs += ch.hla_ids.size();
  s.mean_defined = s.characters > 0;
  s.mean_hlas_per_character = s.mean_defined ? static_cast<double>(s.character_hla_pairs) / s.characters : 0.0;
  s.dialogue_lines = corpus.pairs().size();
  s.dialogue_characters = corpus.dialogue_characters().size();
  s.shows = corpus.show_names().size();
  s.dialogue_shows = corpus.dialogue_shows().size();
  return s;
}

std::string StatsReport::to_string() const {
  std::ostringstream out;
  out << "characters\t" << characters << '\n'
      << "hlas\t" << hlas << '\n'
      << "character_hla_pairs\t" << character_hla_pairs << '\n'
      << "mean_hlas_per_character\t" << (mean_defined ? format_double(mean_hlas_per_character) : "0 (undefined)")
      << '\n'
      << "dialogue_lines\t" << dialogue_lines << '\n'
      << "dialogue_characters\t" << dialogue_characters << '\n'
      << "shows\t" << shows << '\n'
      << "dialogue_shows\t" << dialogue_shows << '\n';
  return out.str();
}

}  // namespace aloha
