#pragma once

// Loss and analytic gradient of the edit objective with respect to one
// intervention's parameters. The frozen states below the edited layer are
// computed once per item; only the blocks above it are replayed per step.

#include <cmath>
#include <vector>

#include "rilke/detail/transformer.hpp"
#include "rilke/intervention.hpp"

namespace rilke::detail {

template <typename T>
struct EditItem {
  std::vector<int> inputs;   // prompt ++ target, minus the final token
  std::vector<int> targets;  // target tokens
  std::size_t prompt_len = 0;
  Mat<T> states;  // frozen layer-l states of `inputs`
};

template <typename T>
struct ModuleGrad {
  Mat<T> R, A, b;

  explicit ModuleGrad(const BasicIntervention<T>& m)
      : R(m.rank(), m.width()), A(m.rank(), m.width()), b(1, m.rank()) {}
};

struct ObjectiveValue {
  double lm = 0;      // summed over items and target positions
  double robust = 0;  // summed over items, averaged over samples and positions
  double total = 0;
};

template <typename T>
EditItem<T> make_edit_item(const BasicModel<T>& model, int layer, const std::vector<int>& prompt,
                           const std::vector<int>& target) {
  require(!prompt.empty() && !target.empty(), ErrorKind::input, "edit item needs prompt and target");
  EditItem<T> item;
  item.prompt_len = prompt.size();
  item.targets = target;
  item.inputs = prompt;
  item.inputs.insert(item.inputs.end(), target.begin(), target.end() - 1);
  require(item.inputs.size() + 1 <= static_cast<std::size_t>(model.config().max_len),
          ErrorKind::input, "prompt plus target exceeds the maximum sequence length");
  for (int t : item.inputs) require(t >= 0 && t < model.config().vocab, ErrorKind::input, "token out of range");
  for (int t : target) require(t >= 0 && t < model.config().vocab, ErrorKind::input, "token out of range");
  item.states = embed(model, std::span<const int>(item.inputs));
  run_blocks(model, item.states, 0, layer, nullptr);
  return item;
}

// Rows [lo, hi) are edited; the rest pass through.
struct RowRange {
  std::size_t lo = 0, hi = 0;
};

// Z = H + (H A^T + 1 b^T - H R^T) R, S is the n x r shift coefficient matrix.
template <typename T>
void apply_rows(const BasicIntervention<T>& m, const Mat<T>& h, RowRange rows, Mat<T>& z, Mat<T>& s) {
  s = Mat<T>(h.rows(), m.rank());
  z = Mat<T>(h.rows(), h.cols());
  s.map() = h.map() * (m.A.map() - m.R.map()).transpose();
  s.map().rowwise() += m.b.map().row(0);
  for (std::size_t i = 0; i < h.rows(); ++i)
    if (i < rows.lo || i >= rows.hi) s.map().row(static_cast<Eigen::Index>(i)).setZero();
  z.map() = h.map() + s.map() * m.R.map();
}

template <typename T>
void apply_rows_backward(const BasicIntervention<T>& m, const Mat<T>& h, RowRange rows, const Mat<T>& s,
                         const Mat<T>& g, ModuleGrad<T>& grad) {
  RowMajor<T> ds = g.map() * m.R.map().transpose();
  for (std::size_t i = 0; i < h.rows(); ++i)
    if (i < rows.lo || i >= rows.hi) ds.row(static_cast<Eigen::Index>(i)).setZero();
  grad.R.map() += s.map().transpose() * g.map() - ds.transpose() * h.map();
  grad.A.map() += ds.transpose() * h.map();
  grad.b.map().row(0) += ds.colwise().sum();
}

template <typename T>
void log_softmax_row(std::span<const T> z, std::vector<double>& out) {
  double mx = z[0];
  for (T v : z) mx = std::max(mx, static_cast<double>(v));
  double sum = 0;
  for (T v : z) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  out.resize(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<double>(z[i]) - lse;
}

// perturbations[i][s] is the d-vector added to item i's prompt-final state (or
// to every prompt state when perturb_all_prompt) in sample s. Pass lambda = 0
// to skip the robust branch entirely.
template <typename T>
ObjectiveValue evaluate_objective(const BasicModel<T>& model, const BasicIntervention<T>& m,
                                  const std::vector<EditItem<T>>& items,
                                  const std::vector<std::vector<std::vector<T>>>& perturbations,
                                  double lambda, bool perturb_all_prompt, bool prompt_final_only,
                                  ModuleGrad<T>* grad) {
  ObjectiveValue value;
  const int layer = m.layer;
  std::vector<double> logp, logq;
  for (std::size_t it = 0; it < items.size(); ++it) {
    const auto& item = items[it];
    const std::size_t first = item.prompt_len - 1;
    const std::size_t ny = item.targets.size();
    const std::size_t vocab = static_cast<std::size_t>(model.config().vocab);

    const RowRange rows = prompt_final_only ? RowRange{first, first + 1} : RowRange{0, item.states.rows()};
    Mat<T> z, s;
    apply_rows(m, item.states, rows, z, s);
    Tape<T> tape;
    const Mat<T> logits = run_from(model, z, layer, grad ? &tape : nullptr);
    Mat<T> dlogits(logits.rows(), logits.cols());

    std::vector<std::vector<double>> clean_logp(ny);
    for (std::size_t k = 0; k < ny; ++k) {
      log_softmax_row(logits.row(first + k), clean_logp[k]);
      value.lm -= clean_logp[k][static_cast<std::size_t>(item.targets[k])];
      if (grad) {
        auto row = dlogits.row(first + k);
        for (std::size_t j = 0; j < vocab; ++j) row[j] = static_cast<T>(std::exp(clean_logp[k][j]));
        row[static_cast<std::size_t>(item.targets[k])] -= T(1);
      }
    }

    const bool robust = lambda > 0 && it < perturbations.size() && !perturbations[it].empty();
    if (robust) {
      const auto& samples = perturbations[it];
      const double weight = 1.0 / (static_cast<double>(samples.size()) * static_cast<double>(ny));
      double item_kl = 0;
      for (const auto& eps : samples) {
        Mat<T> hp = item.states;
        const std::size_t lo = perturb_all_prompt ? 0 : first;
        for (std::size_t p = lo; p <= first; ++p)
          for (std::size_t j = 0; j < hp.cols(); ++j) hp(p, j) += eps[j];
        Mat<T> zp, sp;
        apply_rows(m, hp, rows, zp, sp);
        Tape<T> ptape;
        const Mat<T> plogits = run_from(model, zp, layer, grad ? &ptape : nullptr);
        Mat<T> dplogits(plogits.rows(), plogits.cols());
        for (std::size_t k = 0; k < ny; ++k) {
          log_softmax_row(plogits.row(first + k), logq);
          const auto& lp = clean_logp[k];
          double kl = 0;
          for (std::size_t j = 0; j < vocab; ++j) kl += std::exp(lp[j]) * (lp[j] - logq[j]);
          item_kl += weight * kl;
          if (grad) {
            auto crow = dlogits.row(first + k);
            auto prow = dplogits.row(first + k);
            const double scale = lambda * weight;
            for (std::size_t j = 0; j < vocab; ++j) {
              const double p = std::exp(lp[j]), q = std::exp(logq[j]);
              crow[j] += static_cast<T>(scale * p * (lp[j] - logq[j] - kl));
              prow[j] += static_cast<T>(scale * (q - p));
            }
          }
        }
        if (grad) {
          const Mat<T> dz = backward(model, ptape, dplogits, static_cast<Weights<T>*>(nullptr));
          apply_rows_backward(m, hp, rows, sp, dz, *grad);
        }
      }
      value.robust += item_kl;
    }
    if (grad) {
      const Mat<T> dz = backward(model, tape, dlogits, static_cast<Weights<T>*>(nullptr));
      apply_rows_backward(m, item.states, rows, s, dz, *grad);
    }
  }
  value.total = value.lm + lambda * value.robust;
  return value;
}

}  // namespace rilke::detail
