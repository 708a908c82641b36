#include "aloha/obs.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "aloha/common.hpp"

namespace aloha::obs {

bool Observation::guided() const {
  return std::any_of(hla_slots.begin(), hla_slots.end(), [](const std::string& s) { return s != kNone; });
}

void CandidateSet::validate() const {
  if (candidates.empty()) throw Error("candidate set is empty");
  if (gt_index < 0 || static_cast<std::size_t>(gt_index) >= candidates.size()) throw Error("gt_index out of range");
  if (provenance.size() != candidates.size()) throw Error("provenance does not match candidates");
  for (const auto& c : candidates) {
    if (c.empty()) throw Error("empty candidate text");
  }
}

void SamplingConfig::validate() const {
  if (n_distractors < 0) throw Error("n_distractors must be non-negative");
  if (similarity_pool_k < n_distractors) throw Error("similarity_pool_k must be at least n_distractors");
}

std::vector<std::string> top_important_hlas(const csm::LatentFactors& f, const Corpus& corpus, CharacterId character,
                                            std::size_t k) {
  const auto& ch = corpus.character(character);
  if (ch.hla_ids.empty()) throw Error("character " + ch.name + " has no HLAs");
  std::vector<std::pair<double, HlaId>> scored;
  for (HlaId h : ch.hla_ids) scored.emplace_back(-f.score(character, h), h);
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (std::size_t j = 0; j < std::min(k, scored.size()); ++j) out.push_back(corpus.hla_names()[scored[j].second]);
  return out;
}

Observation build_obs(const Corpus& corpus, CharacterId character, std::string context_text, ObsMode mode,
                      const csm::LatentFactors& f, std::uint64_t seed) {
  Observation obs;
  obs.context_text = std::move(context_text);
  obs.hla_slots.fill(std::string(kNone));
  if (mode == ObsMode::no_hla_og) return obs;

  auto top = top_important_hlas(f, corpus, character, kImportantPool);
  std::mt19937_64 rng(seed);
  std::shuffle(top.begin(), top.end(), rng);
  for (std::size_t s = 0; s < std::min(kSlots, top.size()); ++s) obs.hla_slots[s] = top[s];
  return obs;
}

std::string render_obs(const Observation& obs) {
  std::string out;
  for (const auto& slot : obs.hla_slots) {
    out += "hla: ";
    out += slot;
    out += '\n';
  }
  out += obs.context_text;
  return out;
}

Observation parse_obs(std::string_view rendered) {
  Observation obs;
  std::size_t pos = 0;
  for (auto& slot : obs.hla_slots) {
    auto nl = rendered.find('\n', pos);
    if (nl == std::string_view::npos) throw Error("rendered observation has fewer than 8 slots");
    auto line = rendered.substr(pos, nl - pos);
    if (line.substr(0, 5) != "hla: ") throw Error("malformed observation slot");
    slot = std::string(line.substr(5));
    pos = nl + 1;
  }
  obs.context_text = std::string(rendered.substr(pos));
  return obs;
}

LinePool::LinePool(const Corpus& corpus, std::vector<LineId> lines) : lines_(std::move(lines)) {
  std::sort(lines_.begin(), lines_.end());
  lines_.erase(std::unique(lines_.begin(), lines_.end()), lines_.end());
  by_character_.assign(corpus.num_characters(), {});
  for (LineId l : lines_) by_character_[corpus.pair(l).response.character_id].push_back(l);
  for (std::size_t c = 0; c < by_character_.size(); ++c) {
    if (!by_character_[c].empty()) characters_.push_back(static_cast<CharacterId>(c));
  }
}

LinePool LinePool::all(const Corpus& corpus) {
  std::vector<LineId> lines(corpus.pairs().size());
  std::iota(lines.begin(), lines.end(), 0);
  return LinePool(corpus, std::move(lines));
}

LinePool LinePool::of_shows(const Corpus& corpus, const std::vector<ShowId>& shows) {
  std::vector<LineId> lines;
  for (const auto& p : corpus.pairs()) {
    if (std::find(shows.begin(), shows.end(), p.response.show_id) != shows.end()) lines.push_back(p.response.id);
  }
  return LinePool(corpus, std::move(lines));
}

const std::vector<LineId>& LinePool::lines_of(CharacterId c) const {
  static const std::vector<LineId> empty;
  if (c < 0 || static_cast<std::size_t>(c) >= by_character_.size()) return empty;
  return by_character_[c];
}

namespace {

CandidateSet assemble(const Corpus& corpus, LineId gt, const Observation& obs, const std::vector<LineId>& distractors,
                      std::mt19937_64& rng) {
  std::uniform_int_distribution<int> where(0, static_cast<int>(distractors.size()));
  const int gt_index = where(rng);
  CandidateSet set;
  set.obs = obs;
  set.gt_index = gt_index;
  set.target = corpus.pair(gt).response.character_id;
  std::vector<LineId> order = distractors;
  order.insert(order.begin() + gt_index, gt);
  for (LineId l : order) {
    const auto& line = corpus.pair(l).response;
    set.candidates.push_back(line.text);
    set.provenance.push_back(line.character_id);
    set.line_ids.push_back(l);
  }
  return set;
}

}  // namespace

CandidateSet sample_uniform(const Corpus& corpus, const LinePool& pool, LineId gt, const Observation& obs,
                            const SamplingConfig& cfg) {
  cfg.validate();
  const auto& gt_line = corpus.pair(gt).response;
  std::vector<CharacterId> speakers;
  std::size_t available = 0;
  for (CharacterId c : pool.characters()) {
    if (c == gt_line.character_id) continue;
    speakers.push_back(c);
    for (LineId l : pool.lines_of(c)) available += corpus.pair(l).response.text != gt_line.text ? 1 : 0;
  }
  const auto need = static_cast<std::size_t>(cfg.n_distractors);
  if (available < need) {
    throw Error("insufficient corpus: " + std::to_string(available) + " eligible distractor lines, need " +
                std::to_string(need));
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<LineId> picked;
  std::vector<char> used(corpus.pairs().size(), 0);
  const std::size_t max_attempts = 1000 + 100 * need;
  for (std::size_t attempts = 0; picked.size() < need; ++attempts) {
    if (attempts >= max_attempts) throw Error("insufficient corpus: could not draw distinct distractors");
    std::uniform_int_distribution<std::size_t> pick_speaker(0, speakers.size() - 1);
    const auto& lines = pool.lines_of(speakers[pick_speaker(rng)]);
    std::uniform_int_distribution<std::size_t> pick_line(0, lines.size() - 1);
    const LineId l = lines[pick_line(rng)];
    if (used[l] || corpus.pair(l).response.text == gt_line.text) continue;
    used[l] = 1;
    picked.push_back(l);
  }
  return assemble(corpus, gt, obs, picked, rng);
}

CandidateSet sample_negative(const Corpus& corpus, const LinePool& pool, const ccm::Community& community, LineId gt,
                             const Observation& obs, const SamplingConfig& cfg, const text::TfIdf& tfidf) {
  cfg.validate();
  const auto& gt_line = corpus.pair(gt).response;
  const auto gt_vec = tfidf.vectorize(gt_line.text);
  std::vector<std::pair<double, LineId>> ranked;
  for (CharacterId c : community.negative) {
    if (c == gt_line.character_id || c == community.target) continue;
    for (LineId l : pool.lines_of(c)) {
      const auto& text = corpus.pair(l).response.text;
      if (text == gt_line.text) continue;
      ranked.emplace_back(-text::cosine(gt_vec, tfidf.vectorize(text)), l);
    }
  }
  const auto need = static_cast<std::size_t>(cfg.n_distractors);
  if (ranked.size() < need) {
    throw Error("negative-set pool has " + std::to_string(ranked.size()) + " lines, need " + std::to_string(need));
  }
  const auto keep = std::min(ranked.size(), static_cast<std::size_t>(cfg.similarity_pool_k));
  std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end());
  ranked.resize(keep);

  std::mt19937_64 rng(cfg.seed);
  std::shuffle(ranked.begin(), ranked.end(), rng);
  std::vector<LineId> picked;
  for (std::size_t j = 0; j < need; ++j) picked.push_back(ranked[j].second);
  return assemble(corpus, gt, obs, picked, rng);
}

std::string write_candidate_sets(const std::vector<CandidateSet>& sets) {
  std::string out;
  for (const auto& s : sets) {
    s.validate();
    out += escape_field(render_obs(s.obs));
    for (const auto& c : s.candidates) {
      out += '\t';
      out += escape_field(c);
    }
    out += '\t' + std::to_string(s.gt_index) + '\t' + std::to_string(s.target) + '\t';
    for (std::size_t j = 0; j < s.provenance.size(); ++j) {
      if (j) out += ',';
      out += std::to_string(s.provenance[j]);
    }
    out += '\n';
  }
  return out;
}

std::vector<CandidateSet> read_candidate_sets(const std::string& text) {
  std::vector<CandidateSet> sets;
  std::istringstream in(text);
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    auto fields = split_escaped(line, '\t');
    if (fields.size() < 5) throw ParseError("<candidates>", ln, "too few fields");
    CandidateSet s;
    try {
      s.obs = parse_obs(unescape_field(fields[0]));
      const std::size_t n = fields.size() - 4;
      for (std::size_t j = 0; j < n; ++j) s.candidates.push_back(unescape_field(fields[1 + j]));
      s.gt_index = static_cast<int>(parse_int(fields[n + 1]));
      s.target = static_cast<CharacterId>(parse_int(fields[n + 2]));
      for (const auto& p : split_escaped(fields[n + 3], ',')) s.provenance.push_back(static_cast<CharacterId>(parse_int(p)));
      s.validate();
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError("<candidates>", ln, e.what());
    }
    sets.push_back(std::move(s));
  }
  return sets;
}

}  // namespace aloha::obs
