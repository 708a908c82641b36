#pragma once

#include <map>
#include <string>
#include <vector>

#include "aloha/corpus.hpp"
#include "aloha/obs.hpp"
#include "aloha/ranker.hpp"

namespace aloha::metrics {

struct RankSample {
  int gt_rank = 1;
  int n_candidates = 20;
  std::string chosen_text;
  std::string gt_text;
};

double hits_at(const std::vector<RankSample>& samples, int n, int N = 20);
double mean_rank(const std::vector<RankSample>& samples);
double mrr(const std::vector<RankSample>& samples);

/// Word-set F1 between a chosen response and the ground truth.
double f1_word(const std::string& chosen, const std::string& gt);

/// Single-order sentence BLEU: brevity penalty times clipped n-gram precision.
double bleu_n(const std::string& chosen, const std::string& gt, int n);
/// Arithmetic mean of BLEU-1..BLEU-4.
double bleu_avg(const std::string& chosen, const std::string& gt);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};
TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
/// Two-sided p-value of Student's t with `df` degrees of freedom.
double student_t_two_sided(double t, double df);

struct MetricSet {
  double hits1 = 0, hits5 = 0, hits10 = 0;
  double mean_rank = 0, mrr = 0, f1 = 0, bleu = 0;
  std::size_t count = 0;
};

MetricSet aggregate(const std::vector<RankSample>& samples);

struct EvalReport {
  MetricSet overall;
  std::map<CharacterId, MetricSet> per_character;
  std::vector<RankSample> samples;

  /// Aligned text table.
  std::string table(const Corpus* corpus = nullptr) const;
  /// `metric \t scope \t value` lines.
  std::string lines() const;
};

EvalReport evaluate(const ranker::Scorer& scorer, const std::vector<obs::CandidateSet>& sets);

}  // namespace aloha::metrics
