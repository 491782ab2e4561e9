#include "calsuffix/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "calsuffix/error.hpp"
#include "numeric.hpp"

namespace calsuffix {

namespace {

std::size_t suffix_length(const SuffixInput& suffix) {
  if (const auto* ids = std::get_if<TokenIds>(&suffix)) return ids->size();
  if (const auto* soft = std::get_if<Matrix>(&suffix)) return static_cast<std::size_t>(soft->rows());
  return 0;
}

}  // namespace

ScoringSequence context_sequence(const ModelBackend& backend, std::span<const TokenId> prompt_ids,
                                 const SuffixInput& suffix, std::span<const TokenId> prefix_ids,
                                 std::span<const TokenId> surface_ids) {
  const auto bos = backend.vocab().specials().bos;
  const std::size_t fixed = (bos ? 1 : 0) + suffix_length(suffix) + prefix_ids.size() + surface_ids.size();
  const std::size_t limit = backend.context_limit();
  std::size_t drop = 0;
  if (fixed + prompt_ids.size() > limit) {
    if (fixed > limit) throw LengthExceeded(fixed, limit);
    drop = fixed + prompt_ids.size() - limit;
  }

  ScoringSequence out;
  out.truncated = drop;
  TokenIds head;
  head.reserve(limit);
  if (bos) head.push_back(*bos);
  head.insert(head.end(), prompt_ids.begin() + static_cast<std::ptrdiff_t>(drop), prompt_ids.end());

  TokenIds tail(prefix_ids.begin(), prefix_ids.end());
  tail.insert(tail.end(), surface_ids.begin(), surface_ids.end());

  if (const auto* soft = std::get_if<Matrix>(&suffix)) {
    out.seq.head = std::move(head);
    out.seq.span = *soft;
    out.seq.tail = std::move(tail);
  } else {
    if (const auto* ids = std::get_if<TokenIds>(&suffix)) head.insert(head.end(), ids->begin(), ids->end());
    head.insert(head.end(), tail.begin(), tail.end());
    out.seq.head = std::move(head);
  }
  const std::size_t L = out.seq.length();
  for (std::size_t i = 0; i < surface_ids.size(); ++i) out.positions.push_back(L - surface_ids.size() + i);
  return out;
}

ScoringSequence null_sequence(const ModelBackend& backend, std::span<const TokenId> prefix_ids,
                              std::span<const TokenId> surface_ids) {
  return context_sequence(backend, {}, std::monostate{}, prefix_ids, surface_ids);
}

double masked_ce(const ModelBackend& backend, const MixedSequence& seq, std::span<const std::size_t> positions) {
  const Matrix lp = backend.forward_logprobs(seq);
  double ce = 0.0;
  for (std::size_t t : positions) {
    const auto id = seq.token(t);
    if (!id || t == 0) throw std::invalid_argument("label position must be a hard token at t >= 1");
    ce -= lp(static_cast<Eigen::Index>(t - 1), *id);
  }
  return ce;
}

double softmin_aggregate(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("softmin of an empty set");
  std::vector<double> neg(values.size());
  std::transform(values.begin(), values.end(), neg.begin(), [](double a) { return -a; });
  return -detail::logsumexp(neg);
}

std::vector<double> softmin_weights(std::span<const double> values) {
  const double agg = softmin_aggregate(values);
  std::vector<double> w(values.size());
  std::transform(values.begin(), values.end(), w.begin(), [&](double a) { return std::exp(agg - a); });
  return w;
}

TaskScorer::TaskScorer(const ModelBackend& backend, const TaskSpec& task, Calibration calibration)
    : backend_(&backend),
      task_(&task),
      calibration_(calibration),
      prefix_ids_(backend.vocab().tokenize(task.answer_prefix)),
      surfaces_(task.surface_map(backend.vocab())) {
  null_ce_.resize(surfaces_.num_labels());
  for (std::size_t y = 0; y < surfaces_.num_labels(); ++y) {
    for (const auto& ids : surfaces_.surface_ids[y]) {
      const auto s = null_sequence(backend, prefix_ids_, ids);
      null_ce_[y].push_back(masked_ce(backend, s.seq, s.positions));
    }
  }
}

double TaskScorer::ce_ctx(std::span<const TokenId> prompt, const SuffixInput& suffix, std::size_t label,
                          std::size_t surface) const {
  const auto s = context_sequence(*backend_, prompt, suffix, prefix_ids_, surfaces_.surface_ids[label][surface]);
  return masked_ce(*backend_, s.seq, s.positions);
}

double TaskScorer::calce(std::span<const TokenId> prompt, const SuffixInput& suffix, std::size_t label) const {
  const auto n = surfaces_.surface_ids[label].size();
  std::vector<double> diffs(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double null = calibration_ == Calibration::kCalibrated ? null_ce_[label][s] : 0.0;
    diffs[s] = ce_ctx(prompt, suffix, label, s) - null;
  }
  return softmin_aggregate(diffs);
}

TaskScorer::ValueAndGrad TaskScorer::calce_with_grad(std::span<const TokenId> prompt, const Matrix& soft,
                                                     std::size_t label) const {
  const auto& surface_ids = surfaces_.surface_ids[label];
  const auto n = surface_ids.size();
  std::vector<double> diffs(n);
  std::vector<Matrix> grads(n);
  const SuffixInput suffix = soft;
  for (std::size_t s = 0; s < n; ++s) {
    const auto seq = context_sequence(*backend_, prompt, suffix, prefix_ids_, surface_ids[s]);
    const Matrix w = masked_ce_weights(seq.seq, seq.positions, backend_->vocab().size());
    auto g = backend_->backward_span(seq.seq, w);
    const double ce = (w.array() * g.logprobs.array()).sum();
    const double null = calibration_ == Calibration::kCalibrated ? null_ce_[label][s] : 0.0;
    diffs[s] = ce - null;
    grads[s] = std::move(g.span);
  }
  ValueAndGrad out;
  out.value = softmin_aggregate(diffs);
  const auto weights = softmin_weights(diffs);
  out.span = Matrix::Zero(soft.rows(), soft.cols());
  for (std::size_t s = 0; s < n; ++s) out.span += weights[s] * grads[s];
  return out;
}

std::vector<ScoredLabel> TaskScorer::cal_logp(std::span<const TokenId> prompt, const SuffixInput& suffix) const {
  std::vector<ScoredLabel> out(surfaces_.num_labels());
  for (std::size_t y = 0; y < out.size(); ++y) {
    auto& sc = out[y];
    sc.label = y;
    const auto n = surfaces_.surface_ids[y].size();
    std::vector<double> diffs(n), neg_ctx(n), neg_null(n);
    for (std::size_t s = 0; s < n; ++s) {
      sc.ce_ctx.push_back(ce_ctx(prompt, suffix, y, s));
      sc.ce_null.push_back(null_ce_[y][s]);
      diffs[s] = sc.ce_ctx[s] - (calibration_ == Calibration::kCalibrated ? sc.ce_null[s] : 0.0);
      neg_ctx[s] = -sc.ce_ctx[s];
      neg_null[s] = -sc.ce_null[s];
    }
    sc.calce = softmin_aggregate(diffs);
    sc.ell_ctx = detail::logsumexp(neg_ctx);
    sc.ell_null = detail::logsumexp(neg_null);
    sc.ell_cal = sc.ell_ctx - sc.ell_null;
  }
  return out;
}

std::size_t TaskScorer::truncation(std::span<const TokenId> prompt, const SuffixInput& suffix) const {
  std::size_t longest = 0;
  for (const auto& per_label : surfaces_.surface_ids) {
    for (const auto& ids : per_label) longest = std::max(longest, ids.size());
  }
  const auto bos = backend_->vocab().specials().bos ? 1u : 0u;
  const std::size_t total = bos + prompt.size() + suffix_length(suffix) + prefix_ids_.size() + longest;
  const std::size_t limit = backend_->context_limit();
  return total > limit ? std::min(prompt.size(), total - limit) : 0;
}

std::size_t predict_label(std::span<const ScoredLabel> scores, PredictionRule rule) {
  if (scores.empty()) throw std::invalid_argument("no labels to predict from");
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double v = rule == PredictionRule::kCalibrated ? scores[i].ell_cal : scores[i].ell_ctx;
    if (v > best_score) {
      best_score = v;
      best = i;
    }
  }
  return scores[best].label;
}

double ce_ctx(const ModelBackend& backend, const WrappedPrompt& wrapped, const SuffixInput& suffix,
              const TaskSpec& spec, std::size_t label, std::size_t surface) {
  return TaskScorer(backend, spec).ce_ctx(wrapped.ids, suffix, label, surface);
}

double ce_null(const ModelBackend& backend, const TaskSpec& spec, std::size_t label, std::size_t surface) {
  return TaskScorer(backend, spec).ce_null(label, surface);
}

double calce(const ModelBackend& backend, const WrappedPrompt& wrapped, const SuffixInput& suffix,
             const TaskSpec& spec, std::size_t label) {
  return TaskScorer(backend, spec).calce(wrapped.ids, suffix, label);
}

std::vector<ScoredLabel> cal_logp(const ModelBackend& backend, const WrappedPrompt& wrapped,
                                  const SuffixInput& suffix, const TaskSpec& spec) {
  return TaskScorer(backend, spec).cal_logp(wrapped.ids, suffix);
}

std::size_t predict_label(const ModelBackend& backend, const WrappedPrompt& wrapped, const SuffixInput& suffix,
                          const TaskSpec& spec, PredictionRule rule) {
  const auto scores = cal_logp(backend, wrapped, suffix, spec);
  return predict_label(scores, rule);
}

}  // namespace calsuffix
