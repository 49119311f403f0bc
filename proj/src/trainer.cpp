#include "rilke/trainer.hpp"

#include <cmath>
#include <random>

#include "rilke/detail/edit_objective.hpp"
#include "rilke/kernels.hpp"
#include "rilke/rng.hpp"

namespace rilke {

void RobustConfig::validate() const {
  require(sigma >= 0 && std::isfinite(sigma), ErrorKind::config, "sigma must be >= 0");
  require(lambda_robu >= 0 && std::isfinite(lambda_robu), ErrorKind::config, "lambda_robu must be >= 0");
  require(samples >= 1, ErrorKind::config, "samples per step must be >= 1");
  require(max_steps >= 0, ErrorKind::config, "max steps must be >= 0");
  require(lr > 0 && std::isfinite(lr), ErrorKind::config, "learning rate must be > 0");
  require(target_loss >= 0, ErrorKind::config, "target loss must be >= 0");
}

EditExample encode_example(const Tokenizer& tok, const std::string& prompt, const std::string& target) {
  EditExample ex{tok.encode(prompt), tok.encode(target)};
  require(!ex.prompt.empty(), ErrorKind::input, "empty prompt");
  require(!ex.target.empty(), ErrorKind::input, "empty target");
  ex.target.push_back(Tokenizer::kEos);
  return ex;
}

std::vector<EditExample> encode_items(const Tokenizer& tok, const std::vector<KnowledgeItem>& items) {
  std::vector<EditExample> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(encode_example(tok, item.prompt, item.target));
  return out;
}

namespace {

std::vector<int> joined_inputs(std::span<const int> x, std::span<const int> y) {
  require(!x.empty() && !y.empty(), ErrorKind::input, "prompt and target must be non-empty");
  std::vector<int> seq(x.begin(), x.end());
  seq.insert(seq.end(), y.begin(), y.end() - 1);
  return seq;
}

void check_length(const BaseModel& model, std::span<const int> x, std::span<const int> y) {
  require(x.size() + y.size() <= static_cast<std::size_t>(model.config().max_len), ErrorKind::input,
          "prompt plus target (" + std::to_string(x.size() + y.size()) +
              " tokens) exceeds the maximum sequence length");
}

}  // namespace

static std::size_t scope_position(Scope scope, std::span<const int> x) {
  return scope == Scope::prompt_final ? x.size() - 1 : kAllPositions;
}

double lm_loss(const BaseModel& model, const InterventionModule& m, std::span<const int> x,
               std::span<const int> y, Scope scope) {
  check_length(model, x, y);
  const auto seq = joined_inputs(x, y);
  const Intervention hook = as_intervention(m, scope_position(scope, x));
  const Matrix logits = forward_logits(model, seq, &hook);
  double loss = 0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const ProbVector p = softmax(logits.row(x.size() - 1 + k));
    loss -= std::log(std::max<double>(p[static_cast<std::size_t>(y[k])], kKlFloor));
  }
  return loss;
}

std::vector<float> draw_perturbation(std::size_t d, double sigma, std::uint64_t seed, int sample) {
  std::vector<float> eps(d, 0.0f);
  if (sigma == 0) return eps;
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(sample)));
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& e : eps) e = static_cast<float>(normal(rng));
  return eps;
}

double robust_loss(const BaseModel& model, const InterventionModule& m, std::span<const int> x,
                   std::span<const int> y, double sigma, std::uint64_t seed, int samples, Scope scope) {
  require(sigma >= 0, ErrorKind::config, "sigma must be >= 0");
  require(samples >= 1, ErrorKind::config, "samples must be >= 1");
  check_length(model, x, y);
  const auto seq = joined_inputs(x, y);
  const Intervention clean_hook = as_intervention(m, scope_position(scope, x));
  const Matrix clean = forward_logits(model, seq, &clean_hook);
  const std::size_t last = x.size() - 1;
  double total = 0;
  for (int s = 0; s < samples; ++s) {
    const auto eps = draw_perturbation(m.width(), sigma, seed, s);
    const Intervention hook{m.layer, [&](std::span<float> state, std::size_t pos) {
                              if (pos == last)
                                for (std::size_t j = 0; j < state.size(); ++j) state[j] += eps[j];
                              if (scope == Scope::all_positions || pos == last) m.apply_inplace(state);
                            }};
    const Matrix perturbed = forward_logits(model, seq, &hook);
    double kl = 0;
    for (std::size_t k = 0; k < y.size(); ++k)
      kl += kl_divergence(softmax(clean.row(last + k)), softmax(perturbed.row(last + k)));
    total += kl / static_cast<double>(y.size());
  }
  return total / samples;
}

double calibrate_sigma(const BaseModel& model, int layer, const std::vector<EditExample>& examples,
                       double scale) {
  require(!examples.empty(), ErrorKind::input, "calibrate_sigma needs examples");
  double sum = 0;
  for (const auto& ex : examples) sum += norm(hidden_at(model, ex.prompt, layer).vector);
  return scale * sum / static_cast<double>(examples.size());
}

namespace {

struct Adam {
  std::vector<double> m, v;
  int t = 0;

  void step(std::span<float> params, std::span<const float> grad, double lr, std::size_t offset) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1 - std::pow(b1, t), c2 = 1 - std::pow(b2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i];
      double& mi = m[offset + i];
      double& vi = v[offset + i];
      mi = b1 * mi + (1 - b1) * g;
      vi = b2 * vi + (1 - b2) * g * g;
      params[i] -= static_cast<float>(lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
};

}  // namespace

TrainResult train_edit(const BaseModel& model, int layer, std::size_t rank,
                       const std::vector<EditExample>& examples, const RobustConfig& cfg,
                       std::uint64_t seed, std::string id) {
  cfg.validate();
  require(!examples.empty(), ErrorKind::input, "train_edit needs at least one item");
  require(layer >= 1 && layer <= model.config().layers, ErrorKind::config,
          "layer " + std::to_string(layer) + " out of range");
  const auto d = static_cast<std::size_t>(model.config().width);

  TrainResult out{new_module(layer, d, rank, seed, std::move(id)), {}};
  InterventionModule& m = out.module;

  std::vector<detail::EditItem<float>> items;
  double target = 0;
  for (const auto& ex : examples) {
    check_length(model, ex.prompt, ex.target);
    items.push_back(detail::make_edit_item(model, layer, ex.prompt, ex.target));
    target += cfg.target_loss * static_cast<double>(ex.target.size());
  }

  const bool robust = cfg.lambda_robu > 0 && cfg.sigma > 0;
  const std::uint64_t step_seed = derive_seed(seed, "robust-step");
  Adam adam;
  const std::size_t rd = rank * d;
  adam.m.assign(2 * rd + rank, 0.0);
  adam.v.assign(2 * rd + rank, 0.0);

  std::vector<std::vector<std::vector<float>>> eps;
  for (int step = 0;; ++step) {
    eps.assign(robust ? items.size() : 0, {});
    for (std::size_t i = 0; i < eps.size(); ++i)
      for (int s = 0; s < cfg.samples; ++s)
        eps[i].push_back(draw_perturbation(
            d, cfg.sigma, derive_seed(step_seed, static_cast<std::uint64_t>(step) * items.size() + i), s));

    detail::ModuleGrad<float> grad(m);
    const bool last = step >= cfg.max_steps;
    const auto value = detail::evaluate_objective(model, m, items, eps, robust ? cfg.lambda_robu : 0.0,
                                                  cfg.site == PerturbSite::all_prompt,
                                                  cfg.scope == Scope::prompt_final,
                                                  last ? nullptr : &grad);
    require(std::isfinite(value.total), ErrorKind::training, "edit objective became non-finite");
    out.report.lm_loss = value.lm;
    out.report.robust_loss = std::max(0.0, value.robust);
    if (value.lm <= target || last) break;

    ++adam.t;
    adam.step(m.R.flat(), grad.R.flat(), cfg.lr, 0);
    adam.step(m.A.flat(), grad.A.flat(), cfg.lr, rd);
    adam.step(m.b.flat(), grad.b.flat(), cfg.lr, 2 * rd);
    m.R = orthonormalize_rows(m.R);
    const double residual = orthonormality_residual(m.R);
    require(residual <= 1e-5, ErrorKind::training,
            "orthonormality residual " + std::to_string(residual) + " after step " + std::to_string(step));
    out.report.residuals.push_back(residual);
    out.report.steps = step + 1;
  }
  out.report.failed = out.report.lm_loss > 10 * target;
  return out;
}

}  // namespace rilke
