#include "aloha/synth.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <numeric>
#include <random>
#include <vector>

#include "aloha/common.hpp"

namespace aloha::synth {

namespace {

const std::array<std::vector<std::string>, 6> kTopics = {{
    {"rain", "cloud", "storm", "umbrella"},
    {"bread", "soup", "cake", "kettle"},
    {"office", "boss", "meeting", "deadline"},
    {"train", "ticket", "station", "luggage"},
    {"guitar", "concert", "drum", "melody"},
    {"garden", "tulip", "shovel", "hedge"},
}};

const std::array<std::vector<std::string>, 4> kStyles = {{
    {"indeed", "splendid", "rather", "marvelous", "jolly", "quite"},
    {"dude", "totally", "whatever", "gonna", "chill", "awesome"},
    {"ugh", "hmph", "nope", "bah", "grumble", "meh"},
    {"ahoy", "matey", "aye", "yonder", "arr", "ye"},
}};

const std::vector<std::string> kFiller = {"well", "so", "the", "it", "is", "that", "you", "we",
                                          "really", "just", "maybe", "now", "then", "about", "think"};

std::string topic_word(int topic, int k) {
  if (topic < static_cast<int>(kTopics.size())) return kTopics[topic][k % kTopics[topic].size()];
  return "topic" + std::to_string(topic) + "word" + std::to_string(k % 4);
}

std::string style_word(int group, int k) {
  if (group < static_cast<int>(kStyles.size()) && k < static_cast<int>(kStyles[group].size())) {
    return kStyles[group][k];
  }
  return "style" + std::to_string(group) + "x" + std::to_string(k);
}

std::string padded(const char* prefix, int v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02d", prefix, v);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (groups < 1 || characters < groups) throw Error("need at least one character per group");
  if (shows < 1 || characters % shows != 0) throw Error("characters must divide evenly into shows");
  if (characters / shows < 2) throw Error("each show needs at least two characters");
  if (lines_per_character < 1 || topics < 1) throw Error("need at least one line and one topic");
  if (hlas_from_group < 1 || hlas_from_group > group_hlas) throw Error("hlas_from_group out of range");
  if (hlas_from_noise < 0 || hlas_from_noise > noise_hlas) throw Error("hlas_from_noise out of range");
  if (style_per_line < 0 || style_per_line > style_tokens) throw Error("style_per_line out of range");
}

int group_of(const SynthConfig& config, std::int64_t external_id) {
  return static_cast<int>((external_id - 1) % config.groups);
}

SynthCorpus generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const int per_show = cfg.characters / cfg.shows;
  SynthCorpus out;

  std::vector<std::string> noise(static_cast<std::size_t>(cfg.noise_hlas));
  for (int i = 0; i < cfg.noise_hlas; ++i) noise[i] = padded("TropeMisc", i);

  for (int k = 0; k < cfg.characters; ++k) {
    const int g = k % cfg.groups;
    std::vector<std::string> hlas;
    std::vector<int> idx(static_cast<std::size_t>(cfg.group_hlas));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int j = 0; j < cfg.hlas_from_group; ++j) {
      hlas.push_back(padded(("TropeGroup" + std::to_string(g) + "x").c_str(), idx[j]));
    }
    std::vector<int> nidx(static_cast<std::size_t>(cfg.noise_hlas));
    std::iota(nidx.begin(), nidx.end(), 0);
    std::shuffle(nidx.begin(), nidx.end(), rng);
    for (int j = 0; j < cfg.hlas_from_noise; ++j) hlas.push_back(noise[nidx[j]]);
    std::string joined;
    for (const auto& h : hlas) joined += (joined.empty() ? "" : "|") + h;
    out.hla_text += std::to_string(k + 1) + '\t' + padded("Character", k) + '\t' + padded("Show", k / per_show) + '\t' +
                    joined + '\n';
  }

  std::uniform_int_distribution<int> topic_dist(0, cfg.topics - 1);
  std::uniform_int_distribution<int> word_dist(0, 3);
  std::uniform_int_distribution<std::size_t> filler_dist(0, kFiller.size() - 1);
  std::uniform_int_distribution<int> filler_count(1, 3);
  std::uniform_int_distribution<int> partner_dist(0, per_show - 2);
  for (int k = 0; k < cfg.characters; ++k) {
    const int g = k % cfg.groups;
    const int show = k / per_show;
    for (int j = 0; j < cfg.lines_per_character; ++j) {
      int partner = show * per_show + partner_dist(rng);
      if (partner >= k) ++partner;
      const int topic = topic_dist(rng);

      std::vector<std::string> ctx;
      for (int f = filler_count(rng); f > 0; --f) ctx.push_back(kFiller[filler_dist(rng)]);
      ctx.push_back(topic_word(topic, word_dist(rng)));
      std::shuffle(ctx.begin(), ctx.end(), rng);

      std::vector<std::string> resp;
      resp.push_back(topic_word(topic, word_dist(rng)));
      resp.push_back(topic_word(topic, word_dist(rng)));
      std::vector<int> styles(static_cast<std::size_t>(cfg.style_tokens));
      std::iota(styles.begin(), styles.end(), 0);
      std::shuffle(styles.begin(), styles.end(), rng);
      for (int s = 0; s < cfg.style_per_line; ++s) resp.push_back(style_word(g, styles[s]));
      for (int f = filler_count(rng); f > 0; --f) resp.push_back(kFiller[filler_dist(rng)]);
      std::shuffle(resp.begin(), resp.end(), rng);

      auto join = [](const std::vector<std::string>& words) {
        std::string s;
        for (const auto& w : words) s += (s.empty() ? "" : " ") + w;
        return s;
      };
      out.dialogue_text += padded("Show", show) + '\t' + std::to_string(partner + 1) + '\t' + join(ctx) + "?\t" +
                           std::to_string(k + 1) + '\t' + join(resp) + ".\n";
    }
  }
  return out;
}

}  // namespace aloha::synth
