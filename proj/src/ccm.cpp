#include "aloha/ccm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "aloha/common.hpp"

namespace aloha::ccm {

void CommunityConfig::validate() const {
  if (!(first_level_fraction > 0.0 && first_level_fraction <= 1.0)) {
    throw Error("first_level_fraction must lie in (0, 1]");
  }
  if (second_level_k < 1) throw Error("second_level_k must be at least 1");
  if (min_frequency < 1) throw Error("min_frequency must be at least 1");
}

int Community::count_of(CharacterId c) const {
  auto it = second_level_counts.find(c);
  return it == second_level_counts.end() ? 0 : it->second;
}

std::size_t first_level_size(std::size_t others, double fraction) {
  // The epsilon absorbs representation error such as 0.1 * 45820.
  const double raw = fraction * static_cast<double>(others);
  return std::min(others, static_cast<std::size_t>(std::ceil(raw - 1e-9)));
}

namespace {

void check_inputs(const csm::LatentFactors& f, CharacterId target, const CommunityConfig& config,
                  const std::vector<CharacterId>& dialogue_characters) {
  config.validate();
  const auto n = static_cast<CharacterId>(f.X.rows());
  if (target < 0 || target >= n) throw NotFoundError("target " + std::to_string(target) + " out of range");
  if (dialogue_characters.empty()) throw Error("no dialogue characters to form the negative set");
  for (CharacterId c : dialogue_characters) {
    if (c < 0 || c >= n) throw NotFoundError("dialogue character " + std::to_string(c) + " out of range");
  }
}

// Best `k` of `candidates` by (similarity desc, id asc).
std::vector<CharacterId> top_k(std::vector<std::pair<double, CharacterId>>& candidates, std::size_t k) {
  k = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end());
  std::vector<CharacterId> out(k);
  for (std::size_t j = 0; j < k; ++j) out[j] = candidates[j].second;
  return out;
}

Community assemble(CharacterId target, std::vector<CharacterId> first_level,
                   const std::vector<std::vector<CharacterId>>& second_level, const CommunityConfig& config,
                   const std::vector<CharacterId>& dialogue_characters) {
  Community c;
  c.target = target;
  c.first_level = std::move(first_level);
  for (const auto& list : second_level) {
    for (CharacterId member : list) ++c.second_level_counts[member];
  }
  for (const auto& [member, count] : c.second_level_counts) {
    if (count >= config.min_frequency) c.positive.insert(member);
  }
  for (CharacterId d : dialogue_characters) {
    if (d != target && !c.positive.count(d)) c.negative.insert(d);
  }
  return c;
}

}  // namespace

Community build_community(const csm::LatentFactors& f, CharacterId target, const CommunityConfig& config,
                          const std::vector<CharacterId>& dialogue_characters) {
  check_inputs(f, target, config, dialogue_characters);
  const int n = static_cast<int>(f.X.rows());
  const auto d = static_cast<std::size_t>(f.X.cols());
  auto row = [&](int u) { return std::span<const double>(f.X.data() + static_cast<std::size_t>(u) * d, d); };

  std::vector<double> norm(static_cast<std::size_t>(n));
  for (int u = 0; u < n; ++u) {
    const double sq = csm::dot(row(u), row(u));
    if (sq == 0.0) throw Error("character " + std::to_string(u) + " has a zero factor row");
    norm[u] = std::sqrt(sq);
  }
  // Same operation order as csm::character_similarity so rankings agree bitwise.
  auto sim = [&](int a, int b) { return csm::dot(row(a), row(b)) / (norm[a] * norm[b]); };

  std::vector<std::pair<double, CharacterId>> cand;
  for (int u = 0; u < n; ++u) {
    if (u != target) cand.emplace_back(-sim(target, u), u);
  }
  auto first = top_k(cand, first_level_size(cand.size(), config.first_level_fraction));

  std::vector<std::vector<CharacterId>> second(first.size());
  const int fl = static_cast<int>(first.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (int j = 0; j < fl; ++j) {
    const CharacterId s = first[j];
    std::vector<std::pair<double, CharacterId>> local;
    local.reserve(static_cast<std::size_t>(n));
    for (int u = 0; u < n; ++u) {
      if (u != s && u != target) local.emplace_back(-sim(s, u), u);
    }
    second[j] = top_k(local, static_cast<std::size_t>(config.second_level_k));
  }
  return assemble(target, std::move(first), second, config, dialogue_characters);
}

namespace reference {

Community build_community(const csm::LatentFactors& f, CharacterId target, const CommunityConfig& config,
                          const std::vector<CharacterId>& dialogue_characters) {
  check_inputs(f, target, config, dialogue_characters);
  const int n = static_cast<int>(f.X.rows());
  auto ranked = [&](CharacterId anchor) {
    std::vector<std::pair<double, CharacterId>> cand;
    for (int u = 0; u < n; ++u) {
      if (u != anchor && u != target) cand.emplace_back(-csm::character_similarity(f, anchor, u), u);
    }
    std::sort(cand.begin(), cand.end());
    return cand;
  };
  auto around_target = ranked(target);
  auto first = top_k(around_target, first_level_size(around_target.size(), config.first_level_fraction));
  std::vector<std::vector<CharacterId>> second;
  for (CharacterId s : first) {
    auto list = ranked(s);
    second.push_back(top_k(list, static_cast<std::size_t>(config.second_level_k)));
  }
  return assemble(target, std::move(first), second, config, dialogue_characters);
}

}  // namespace reference

std::string community_report(const Community& c, const Corpus& corpus, const CommunityConfig& config) {
  std::ostringstream out;
  out << "community of " << corpus.character(c.target).name << " (id " << c.target << ")\n";
  out << "settings: first level " << format_double(config.first_level_fraction * 100.0) << "% / second level top "
      << config.second_level_k << " / minimum frequency " << config.min_frequency << '\n';
  out << "first level size: " << c.first_level.size() << '\n';
  if (c.positive.empty()) {
    out << "positive community empty (no character reached minimum frequency " << config.min_frequency << ")\n";
  } else {
    out << "positive community: " << c.positive.size() << " members\n";
    std::vector<CharacterId> members(c.positive.begin(), c.positive.end());
    std::stable_sort(members.begin(), members.end(),
                     [&](CharacterId a, CharacterId b) { return c.count_of(a) > c.count_of(b); });
    for (CharacterId m : members) {
      out << "  " << m << '\t' << corpus.character(m).name << '\t' << c.count_of(m) << '\n';
    }
  }
  out << "negative set size: " << c.negative.size() << '\n';
  return out.str();
}

std::string export_community(const Community& c, const Corpus& corpus) {
  std::string out;
  auto line = [&](const char* role, CharacterId id) {
    out += role;
    out += '\t';
    out += std::to_string(id);
    out += '\t';
    out += escape_field(corpus.character(id).name);
    out += '\t';
    out += std::to_string(c.count_of(id));
    out += '\n';
  };
  for (CharacterId m : c.first_level) line("FL", m);
  for (CharacterId m : c.positive) line("POS", m);
  for (CharacterId m : c.negative) line("NEG", m);
  return out;
}

Community import_community(const std::string& text, CharacterId target) {
  Community c;
  c.target = target;
  std::istringstream in(text);
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    auto parts = split_escaped(line, '\t');
    if (parts.size() != 4) throw ParseError("<community>", ln, "expected 4 fields");
    const auto id = static_cast<CharacterId>(parse_int(parts[1]));
    const auto count = static_cast<int>(parse_int(parts[3]));
    if (count > 0) c.second_level_counts[id] = count;
    if (parts[0] == "FL") {
      c.first_level.push_back(id);
    } else if (parts[0] == "POS") {
      c.positive.insert(id);
    } else if (parts[0] == "NEG") {
      c.negative.insert(id);
    } else {
      throw ParseError("<community>", ln, "unknown role '" + parts[0] + "'");
    }
  }
  return c;
}

}  // namespace aloha::ccm
