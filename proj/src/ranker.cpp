#include "aloha/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "aloha/common.hpp"

namespace aloha::ranker {

BiEncoderModel::BiEncoderModel(ModelConfig config) : config_(config) {
  if (config_.vocab_buckets == 0) throw Error("vocab_buckets must be positive");
  if (config_.dim < 1) throw Error("dim must be positive");
  if (config_.tokenizer.obs_cap < 1 || config_.tokenizer.cand_cap < 1) throw Error("token caps must be positive");
  const int d = config_.dim;
  if (config_.identity_projection) {
    context_proj_ = Projection::Identity(d, d);
    candidate_proj_ = Projection::Identity(d, d);
  } else {
    context_proj_ = Projection::Zero(d, d);
    candidate_proj_ = Projection::Zero(d, d);
  }
}

BiEncoderModel BiEncoderModel::zeros(ModelConfig config) {
  config.init_scale = 0.0;
  config.identity_projection = false;
  return BiEncoderModel(config);
}

std::uint32_t BiEncoderModel::bucket(std::string_view token) const {
  return static_cast<std::uint32_t>(fnv1a(token) % config_.vocab_buckets);
}

std::vector<std::uint32_t> BiEncoderModel::buckets(std::string_view text, Side side) const {
  const auto cap = side == Side::context ? config_.tokenizer.obs_cap : config_.tokenizer.cand_cap;
  std::vector<std::uint32_t> out;
  for (const auto& t : config_.tokenizer(text, cap)) out.push_back(bucket(t));
  return out;
}

void BiEncoderModel::embedding_row(std::uint32_t b, std::span<double> out) const {
  if (auto it = rows_.find(b); it != rows_.end()) {
    std::copy(it->second.begin(), it->second.end(), out.begin());
    return;
  }
  const std::uint64_t base = derive_seed(config_.seed, b);
  for (int k = 0; k < config_.dim; ++k) {
    const double unit = static_cast<double>(splitmix64(base + static_cast<std::uint64_t>(k)) >> 11) * 0x1.0p-53;
    out[k] = config_.init_scale * (2.0 * unit - 1.0);
  }
}

std::span<double> BiEncoderModel::mutable_row(std::uint32_t b) {
  auto it = rows_.find(b);
  if (it == rows_.end()) {
    std::vector<double> row(static_cast<std::size_t>(config_.dim));
    embedding_row(b, row);
    it = rows_.emplace(b, std::move(row)).first;
  }
  return it->second;
}

namespace {

Eigen::VectorXd mean_embedding(const BiEncoderModel& m, const std::vector<std::uint32_t>& buckets) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(m.dim());
  if (buckets.empty()) return mu;
  Eigen::VectorXd row(m.dim());
  for (auto b : buckets) {
    m.embedding_row(b, {row.data(), static_cast<std::size_t>(row.size())});
    mu += row;
  }
  return mu / static_cast<double>(buckets.size());
}

}  // namespace

Eigen::VectorXd BiEncoderModel::encode(const std::vector<std::uint32_t>& buckets, Side side) const {
  return projection(side).transpose() * mean_embedding(*this, buckets);
}

Eigen::VectorXd BiEncoderModel::encode_text(std::string_view text, Side side) const {
  return encode(buckets(text, side), side);
}

double BiEncoderModel::score(std::string_view obs_text, std::string_view candidate_text) const {
  return encode_text(obs_text, Side::context).dot(encode_text(candidate_text, Side::candidate));
}

std::string BiEncoderModel::serialize() const {
  std::ostringstream out;
  const auto& t = config_.tokenizer;
  out << "aloha-biencoder v1\n"
      << config_.vocab_buckets << ' ' << config_.dim << ' ' << config_.seed << ' ' << format_double(config_.init_scale)
      << ' ' << (config_.identity_projection ? 1 : 0) << ' ' << t.obs_cap << ' ' << t.cand_cap << ' '
      << (t.lowercase ? 1 : 0) << ' ' << steps << '\n';
  auto dump = [&](const Projection& P) {
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      for (Eigen::Index c = 0; c < P.cols(); ++c) out << (c ? "," : "") << format_double(P(r, c));
      out << '\n';
    }
  };
  dump(context_proj_);
  dump(candidate_proj_);
  std::vector<std::uint32_t> keys;
  for (const auto& kv : rows_) keys.push_back(kv.first);
  std::sort(keys.begin(), keys.end());
  out << keys.size() << '\n';
  for (auto k : keys) {
    out << k;
    for (double v : rows_.at(k)) out << ' ' << format_double(v);
    out << '\n';
  }
  return out.str();
}

BiEncoderModel BiEncoderModel::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "aloha-biencoder v1") throw Error("not a bi-encoder model file");
  ModelConfig cfg;
  std::string scale;
  int identity = 0, lower = 0;
  std::uint64_t steps = 0;
  if (!std::getline(in, line)) throw Error("truncated model file");
  std::istringstream hdr(line);
  hdr >> cfg.vocab_buckets >> cfg.dim >> cfg.seed >> scale >> identity >> cfg.tokenizer.obs_cap >>
      cfg.tokenizer.cand_cap >> lower >> steps;
  if (!hdr) throw Error("bad model header");
  cfg.init_scale = parse_double(scale);
  cfg.identity_projection = identity != 0;
  cfg.tokenizer.lowercase = lower != 0;
  BiEncoderModel m(cfg);
  m.steps = steps;
  auto load = [&](Projection& P) {
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      if (!std::getline(in, line)) throw Error("truncated model file");
      auto parts = split_escaped(line, ',');
      if (static_cast<Eigen::Index>(parts.size()) != P.cols()) throw Error("bad projection row");
      for (Eigen::Index c = 0; c < P.cols(); ++c) P(r, c) = parse_double(parts[c]);
    }
  };
  load(m.context_proj_);
  load(m.candidate_proj_);
  if (!std::getline(in, line)) throw Error("truncated model file");
  const auto count = static_cast<std::size_t>(parse_int(line));
  for (std::size_t j = 0; j < count; ++j) {
    if (!std::getline(in, line)) throw Error("truncated model file");
    auto parts = split_escaped(line, ' ');
    if (static_cast<int>(parts.size()) != cfg.dim + 1) throw Error("bad embedding row");
    std::vector<double> row(static_cast<std::size_t>(cfg.dim));
    for (int k = 0; k < cfg.dim; ++k) row[k] = parse_double(parts[k + 1]);
    m.rows_.emplace(static_cast<std::uint32_t>(parse_int(parts[0])), std::move(row));
  }
  return m;
}

std::vector<double> BiEncoderScorer::scores(const std::string& obs_text, const std::vector<std::string>& candidates) const {
  const Eigen::VectorXd c = model_.encode_text(obs_text, Side::context);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& cand : candidates) out.push_back(c.dot(model_.encode_text(cand, Side::candidate)));
  return out;
}

std::vector<double> TfidfScorer::scores(const std::string& obs_text, const std::vector<std::string>& candidates) const {
  const auto q = tfidf_.vectorize(obs_text);
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& cand : candidates) out.push_back(text::cosine(q, tfidf_.vectorize(cand)));
  return out;
}

text::TfIdf corpus_tfidf(const Corpus& corpus) {
  std::vector<std::string> docs;
  docs.reserve(corpus.pairs().size() * 2);
  for (const auto& p : corpus.pairs()) {
    docs.push_back(p.context_text);
    docs.push_back(p.response.text);
  }
  return text::TfIdf(docs);
}

TfidfScorer tfidf_scorer(const Corpus& corpus) { return TfidfScorer(corpus_tfidf(corpus)); }

Ranking rank(const Scorer& scorer, const obs::CandidateSet& set) {
  Ranking r;
  r.scores = scorer.scores(obs::render_obs(set.obs), set.candidates);
  r.order.resize(set.candidates.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) { return r.scores[a] > r.scores[b]; });
  for (std::size_t k = 0; k < r.order.size(); ++k) {
    if (r.order[k] == set.gt_index) r.gt_rank = static_cast<int>(k) + 1;
  }
  return r;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error("epochs must be at least 1");
  if (batch_size < 1) throw Error("batch_size must be at least 1");
  if (!(learning_rate > 0)) throw Error("learning_rate must be positive");
}

namespace {

struct Encoded {
  std::vector<std::uint32_t> buckets;
  Eigen::VectorXd mean;
  Eigen::VectorXd vec;
};

Encoded encode_side(const BiEncoderModel& m, std::string_view text, Side side) {
  Encoded e;
  e.buckets = m.buckets(text, side);
  e.mean = mean_embedding(m, e.buckets);
  e.vec = m.projection(side).transpose() * e.mean;
  return e;
}

double forward(const BiEncoderModel& m, const obs::CandidateSet& set, Encoded& ctx, std::vector<Encoded>& cands,
               Eigen::VectorXd& probs) {
  ctx = encode_side(m, obs::render_obs(set.obs), Side::context);
  const auto n = static_cast<Eigen::Index>(set.candidates.size());
  cands.resize(static_cast<std::size_t>(n));
  Eigen::VectorXd s(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    cands[j] = encode_side(m, set.candidates[j], Side::candidate);
    s[j] = ctx.vec.dot(cands[j].vec);
  }
  const double top = s.maxCoeff();
  probs = (s.array() - top).exp();
  const double z = probs.sum();
  probs /= z;
  return top + std::log(z) - s[set.gt_index];
}

void add_row_grad(Gradient& g, std::uint32_t b, const Eigen::VectorXd& v) {
  auto it = g.rows.find(b);
  if (it == g.rows.end()) {
    g.rows.emplace(b, v);
  } else {
    it->second += v;
  }
}

}  // namespace

double set_loss(const BiEncoderModel& model, const obs::CandidateSet& set) {
  Encoded ctx;
  std::vector<Encoded> cands;
  Eigen::VectorXd probs;
  return forward(model, set, ctx, cands, probs);
}

double set_loss_and_gradient(const BiEncoderModel& model, const obs::CandidateSet& set, Gradient& g) {
  Encoded ctx;
  std::vector<Encoded> cands;
  Eigen::VectorXd probs;
  const double loss = forward(model, set, ctx, cands, probs);
  const int d = model.dim();
  g.rows.clear();
  g.context_proj = Eigen::MatrixXd::Zero(d, d);
  g.candidate_proj = Eigen::MatrixXd::Zero(d, d);

  Eigen::VectorXd dctx = Eigen::VectorXd::Zero(d);
  const auto& Wc = model.projection(Side::context);
  const auto& Wr = model.projection(Side::candidate);
  for (std::size_t j = 0; j < cands.size(); ++j) {
    const double gj = probs[static_cast<Eigen::Index>(j)] - (static_cast<int>(j) == set.gt_index ? 1.0 : 0.0);
    dctx += gj * cands[j].vec;
    if (cands[j].buckets.empty()) continue;
    const Eigen::VectorXd dcand = gj * ctx.vec;
    g.candidate_proj.noalias() += cands[j].mean * dcand.transpose();
    const Eigen::VectorXd dmean = Wr * dcand / static_cast<double>(cands[j].buckets.size());
    for (auto b : cands[j].buckets) add_row_grad(g, b, dmean);
  }
  if (!ctx.buckets.empty()) {
    g.context_proj.noalias() += ctx.mean * dctx.transpose();
    const Eigen::VectorXd dmean = Wc * dctx / static_cast<double>(ctx.buckets.size());
    for (auto b : ctx.buckets) add_row_grad(g, b, dmean);
  }
  return loss;
}

namespace {

void validate_stage(const BiEncoderModel& model, const std::vector<obs::CandidateSet>& sets, Stage stage) {
  for (std::size_t k = 0; k < sets.size(); ++k) {
    sets[k].validate();
    const bool guided = sets[k].obs.guided();
    if (stage == Stage::uniform && guided) {
      throw Error("uniform stage expects unguided observations; set " + std::to_string(k) + " carries HLAs");
    }
    if (stage == Stage::lsrm_finetune && !guided) {
      throw Error("fine-tune stage expects HLA-guided observations; set " + std::to_string(k) + " has none");
    }
  }
  if (stage == Stage::lsrm_finetune && model.steps == 0) {
    throw Error("fine-tune stage needs a trained starting model");
  }
}

double mean_loss(const BiEncoderModel& model, const std::vector<obs::CandidateSet>& sets) {
  std::vector<double> losses(sets.size());
  const int n = static_cast<int>(sets.size());
#pragma omp parallel for schedule(dynamic, 4)
  for (int k = 0; k < n; ++k) losses[k] = set_loss(model, sets[k]);
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(sets.size());
}

struct Adam {
  struct Moments {
    Eigen::VectorXd m, v;
  };
  Eigen::MatrixXd mc, vc, mr, vr;
  std::unordered_map<std::uint32_t, Moments> rows;
  std::uint64_t t = 0;
};

void adam_step(BiEncoderModel& model, const Gradient& g, Adam& opt, const TrainConfig& cfg) {
  ++opt.t;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double lr_t = cfg.learning_rate * std::sqrt(1.0 - std::pow(b2, static_cast<double>(opt.t))) /
                      (1.0 - std::pow(b1, static_cast<double>(opt.t)));
  auto dense = [&](Eigen::MatrixXd& theta, const Eigen::MatrixXd& grad, Eigen::MatrixXd& m, Eigen::MatrixXd& v) {
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    theta.array() -= lr_t * m.array() / (v.array().sqrt() + cfg.adam_eps);
  };
  dense(model.projection(Side::context), g.context_proj, opt.mc, opt.vc);
  dense(model.projection(Side::candidate), g.candidate_proj, opt.mr, opt.vr);
  for (const auto& [b, grad] : g.rows) {
    auto& mom = opt.rows[b];
    if (mom.m.size() == 0) {
      mom.m = Eigen::VectorXd::Zero(grad.size());
      mom.v = Eigen::VectorXd::Zero(grad.size());
    }
    mom.m = b1 * mom.m + (1.0 - b1) * grad;
    mom.v = b2 * mom.v + (1.0 - b2) * grad.cwiseProduct(grad);
    auto row = model.mutable_row(b);
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      row[k] -= lr_t * mom.m[k] / (std::sqrt(mom.v[k]) + cfg.adam_eps);
    }
  }
  ++model.steps;
}

}  // namespace

TrainResult train(BiEncoderModel& model, const std::vector<obs::CandidateSet>& sets, const TrainConfig& cfg) {
  cfg.validate();
  if (sets.empty()) throw Error("no training sets");
  validate_stage(model, sets, cfg.stage);

  const int d = model.dim();
  Adam opt;
  opt.mc = opt.vc = opt.mr = opt.vr = Eigen::MatrixXd::Zero(d, d);

  TrainResult result;
  result.loss_curve.push_back(mean_loss(model, sets));
  std::vector<std::size_t> order(sets.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const int bs = static_cast<int>(end - start);
      if (bs == 0) throw Error("empty batch");
      std::vector<Gradient> grads(static_cast<std::size_t>(bs));
      std::vector<double> losses(static_cast<std::size_t>(bs));
#pragma omp parallel for schedule(dynamic, 1)
      for (int k = 0; k < bs; ++k) losses[k] = set_loss_and_gradient(model, sets[order[start + k]], grads[k]);

      Gradient total;
      total.context_proj = Eigen::MatrixXd::Zero(d, d);
      total.candidate_proj = Eigen::MatrixXd::Zero(d, d);
      for (int k = 0; k < bs; ++k) {
        if (!std::isfinite(losses[k])) {
          throw DivergenceError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
        }
        total.context_proj += grads[k].context_proj;
        total.candidate_proj += grads[k].candidate_proj;
        for (const auto& [b, v] : grads[k].rows) add_row_grad(total, b, v);
      }
      const double inv = 1.0 / bs;
      total.context_proj *= inv;
      total.candidate_proj *= inv;
      for (auto& [b, v] : total.rows) v *= inv;
      adam_step(model, total, opt, cfg);
    }
    const double epoch_loss = mean_loss(model, sets);
    if (!std::isfinite(epoch_loss)) throw DivergenceError("non-finite loss after epoch " + std::to_string(epoch));
    result.loss_curve.push_back(epoch_loss);
  }
  return result;
}

std::string format_loss_curve(const std::vector<double>& curve) {
  std::string out;
  for (std::size_t e = 0; e < curve.size(); ++e) out += std::to_string(e) + '\t' + format_double(curve[e]) + '\n';
  return out;
}

double& param(BiEncoderModel& model, const ParamRef& p) {
  switch (p.kind) {
    case ParamRef::Kind::embedding: return model.mutable_row(p.bucket)[static_cast<std::size_t>(p.col)];
    case ParamRef::Kind::context_proj: return model.projection(Side::context)(p.row, p.col);
    case ParamRef::Kind::candidate_proj: return model.projection(Side::candidate)(p.row, p.col);
  }
  throw Error("bad parameter kind");
}

double analytic_gradient(const Gradient& g, const ParamRef& p) {
  switch (p.kind) {
    case ParamRef::Kind::embedding: {
      auto it = g.rows.find(p.bucket);
      return it == g.rows.end() ? 0.0 : it->second[p.col];
    }
    case ParamRef::Kind::context_proj: return g.context_proj(p.row, p.col);
    case ParamRef::Kind::candidate_proj: return g.candidate_proj(p.row, p.col);
  }
  throw Error("bad parameter kind");
}

double finite_difference(const BiEncoderModel& model, const obs::CandidateSet& set, const ParamRef& p, double eps) {
  BiEncoderModel probe = model;
  double& x = param(probe, p);
  const double original = x;
  x = original + eps;
  const double up = set_loss(probe, set);
  x = original - eps;
  const double down = set_loss(probe, set);
  x = original;
  return (up - down) / (2.0 * eps);
}

GradientCheck gradient_check(const BiEncoderModel& model, const obs::CandidateSet& set, double eps,
                             std::size_t samples, std::uint64_t seed) {
  Gradient g;
  set_loss_and_gradient(model, set, g);

  std::vector<ParamRef> params;
  std::vector<std::uint32_t> touched;
  for (auto b : model.buckets(obs::render_obs(set.obs), Side::context)) touched.push_back(b);
  for (const auto& c : set.candidates) {
    for (auto b : model.buckets(c, Side::candidate)) touched.push_back(b);
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
  const int d = model.dim();
  for (auto b : touched) {
    for (int k = 0; k < d; ++k) params.push_back({ParamRef::Kind::embedding, b, 0, k});
  }
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < d; ++c) {
      params.push_back({ParamRef::Kind::context_proj, 0, r, c});
      params.push_back({ParamRef::Kind::candidate_proj, 0, r, c});
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(params.begin(), params.end(), rng);
  if (params.size() > samples) params.resize(samples);

  BiEncoderModel probe = model;
  GradientCheck result;
  for (const auto& p : params) {
    const double numeric = finite_difference(probe, set, p, eps);
    const double analytic = analytic_gradient(g, p);
    const double denom = std::max(std::abs(numeric) + std::abs(analytic), 1e-8);
    result.max_relative_error = std::max(result.max_relative_error, std::abs(numeric - analytic) / denom);
    ++result.parameters_checked;
  }
  return result;
}

std::string to_string(Stage stage) { return stage == Stage::uniform ? "uniform" : "lsrm_finetune"; }

Stage parse_stage(const std::string& s) {
  if (s == "uniform") return Stage::uniform;
  if (s == "lsrm_finetune" || s == "finetune") return Stage::lsrm_finetune;
  throw Error("unknown stage '" + s + "'");
}

}  // namespace aloha::ranker
