#include "aloha/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "aloha/common.hpp"
#include "aloha/text.hpp"

namespace aloha::metrics {

namespace {
void require_samples(const std::vector<RankSample>& s) {
  if (s.empty()) throw Error("no samples to evaluate");
}
}  // namespace

double hits_at(const std::vector<RankSample>& samples, int n, int N) {
  require_samples(samples);
  std::size_t hit = 0;
  for (const auto& s : samples) {
    if (s.n_candidates != N) throw Error("sample has " + std::to_string(s.n_candidates) + " candidates, expected " + std::to_string(N));
    if (s.gt_rank <= n) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

double mean_rank(const std::vector<RankSample>& samples) {
  require_samples(samples);
  double total = 0.0;
  for (const auto& s : samples) total += s.gt_rank;
  return total / static_cast<double>(samples.size());
}

double mrr(const std::vector<RankSample>& samples) {
  require_samples(samples);
  double total = 0.0;
  for (const auto& s : samples) total += 1.0 / s.gt_rank;
  return total / static_cast<double>(samples.size());
}

double f1_word(const std::string& chosen, const std::string& gt) {
  auto c = text::tokenize(chosen);
  auto g = text::tokenize(gt);
  std::set<std::string> cs(c.begin(), c.end()), gs(g.begin(), g.end());
  if (cs.empty() && gs.empty()) return 1.0;
  if (cs.empty() || gs.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& w : cs) common += gs.count(w);
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(cs.size());
  const double r = static_cast<double>(common) / static_cast<double>(gs.size());
  return 2.0 * p * r / (p + r);
}

double bleu_n(const std::string& chosen, const std::string& gt, int n) {
  if (n < 1) throw Error("BLEU order must be positive");
  const auto c = text::tokenize(chosen);
  const auto r = text::tokenize(gt);
  if (c.size() < static_cast<std::size_t>(n)) return 0.0;

  auto grams = [n](const std::vector<std::string>& toks) {
    std::map<std::vector<std::string>, int> counts;
    for (std::size_t k = 0; k + n <= toks.size(); ++k) ++counts[{toks.begin() + k, toks.begin() + k + n}];
    return counts;
  };
  const auto cg = grams(c);
  const auto rg = grams(r);
  int clipped = 0;
  for (const auto& [g, count] : cg) {
    auto it = rg.find(g);
    if (it != rg.end()) clipped += std::min(count, it->second);
  }
  const double precision = static_cast<double>(clipped) / static_cast<double>(c.size() - n + 1);
  const double bp = c.size() > r.size() ? 1.0 : std::exp(1.0 - static_cast<double>(r.size()) / c.size());
  return bp * precision;
}

double bleu_avg(const std::string& chosen, const std::string& gt) {
  double total = 0.0;
  for (int n = 1; n <= 4; ++n) total += bleu_n(chosen, gt, n);
  return total / 4.0;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("pearson: length mismatch");
  if (a.size() < 2) throw Error("pearson: need at least two points");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    sab += (a[k] - ma) * (b[k] - mb);
    saa += (a[k] - ma) * (a[k] - ma);
    sbb += (b[k] - mb) * (b[k] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw Error("pearson: zero variance");
  return sab / std::sqrt(saa * sbb);
}

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

TTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error("paired t-test: length mismatch");
  if (a.size() < 2) throw Error("paired t-test: need at least two pairs");
  const double n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  double mean = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    d[k] = a[k] - b[k];
    mean += d[k];
  }
  mean /= n;
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  if (ss == 0.0) throw Error("paired t-test: differences have zero variance");
  const double sd = std::sqrt(ss / (n - 1.0));
  TTest r;
  r.df = static_cast<int>(a.size()) - 1;
  r.t = mean / (sd / std::sqrt(n));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

MetricSet aggregate(const std::vector<RankSample>& samples) {
  require_samples(samples);
  MetricSet m;
  m.count = samples.size();
  const int N = samples.front().n_candidates;
  m.hits1 = hits_at(samples, 1, N);
  m.hits5 = hits_at(samples, 5, N);
  m.hits10 = hits_at(samples, 10, N);
  m.mean_rank = mean_rank(samples);
  m.mrr = mrr(samples);
  for (const auto& s : samples) {
    m.f1 += f1_word(s.chosen_text, s.gt_text);
    m.bleu += bleu_avg(s.chosen_text, s.gt_text);
  }
  m.f1 /= static_cast<double>(samples.size());
  m.bleu /= static_cast<double>(samples.size());
  return m;
}

EvalReport evaluate(const ranker::Scorer& scorer, const std::vector<obs::CandidateSet>& sets) {
  if (sets.empty()) throw Error("no candidate sets to evaluate");
  EvalReport report;
  report.samples.resize(sets.size());
  const int n = static_cast<int>(sets.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (int k = 0; k < n; ++k) {
    const auto& set = sets[k];
    const auto r = ranker::rank(scorer, set);
    report.samples[k] = {r.gt_rank, static_cast<int>(set.candidates.size()), set.candidates[r.order.front()],
                         set.candidates[set.gt_index]};
  }
  report.overall = aggregate(report.samples);
  std::map<CharacterId, std::vector<RankSample>> grouped;
  for (std::size_t k = 0; k < sets.size(); ++k) grouped[sets[k].target].push_back(report.samples[k]);
  for (const auto& [c, samples] : grouped) report.per_character[c] = aggregate(samples);
  return report;
}

namespace {

void row(std::ostringstream& out, const std::string& scope, const MetricSet& m) {
  out << std::left << std::setw(24) << scope << std::right << std::fixed << std::setprecision(4) << std::setw(9)
      << m.hits1 << std::setw(9) << m.hits5 << std::setw(9) << m.hits10 << std::setw(10) << m.mean_rank
      << std::setw(9) << m.mrr << std::setw(9) << m.f1 << std::setw(9) << m.bleu << std::setw(8) << m.count << '\n';
}

void lines_for(std::string& out, const std::string& scope, const MetricSet& m) {
  auto add = [&](const char* name, double v) { out += std::string(name) + '\t' + scope + '\t' + format_double(v) + '\n'; };
  add("hits@1", m.hits1);
  add("hits@5", m.hits5);
  add("hits@10", m.hits10);
  add("mean_rank", m.mean_rank);
  add("mrr", m.mrr);
  add("f1", m.f1);
  add("bleu", m.bleu);
  add("count", static_cast<double>(m.count));
}

}  // namespace

std::string EvalReport::table(const Corpus* corpus) const {
  std::ostringstream out;
  out << std::left << std::setw(24) << "scope" << std::right << std::setw(9) << "hits@1" << std::setw(9) << "hits@5"
      << std::setw(9) << "hits@10" << std::setw(10) << "mean_rank" << std::setw(9) << "mrr" << std::setw(9) << "f1"
      << std::setw(9) << "bleu" << std::setw(8) << "n" << '\n';
  row(out, "overall", overall);
  for (const auto& [c, m] : per_character) {
    std::string scope = "character " + std::to_string(c);
    if (corpus) scope = corpus->character(c).name;
    row(out, scope, m);
  }
  return out.str();
}

std::string EvalReport::lines() const {
  std::string out;
  lines_for(out, "overall", overall);
  for (const auto& [c, m] : per_character) lines_for(out, "character:" + std::to_string(c), m);
  return out;
}

}  // namespace aloha::metrics
