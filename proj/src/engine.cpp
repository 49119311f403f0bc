#include "rilke/engine.hpp"

#include "rilke/detail/transformer.hpp"
#include "rilke/error.hpp"

namespace rilke {

namespace {

int argmax_last(const Matrix& logits) {
  auto last = logits.row(logits.rows() - 1);
  std::size_t best = 0;
  for (std::size_t i = 1; i < last.size(); ++i)
    if (last[i] > last[best]) best = i;
  return static_cast<int>(best);
}

}  // namespace

RouteDecision Engine::route(std::span<const int> prompt) const {
  require(!prompt.empty(), ErrorKind::input, "route: empty prompt");
  if (store_.index().empty()) return {};
  return store_.index().route(hidden_at(model_, prompt, store_.layer()).vector);
}

Answer Engine::generate(std::span<const int> prompt, int max_new, int eos) const {
  require(!prompt.empty(), ErrorKind::input, "generate: empty prompt");
  validate_tokens(model_.config(), prompt);
  Answer out;
  if (max_new <= 0 || prompt.size() >= static_cast<std::size_t>(model_.config().max_len)) {
    out.route = route(prompt);
    return out;
  }

  // First step: run to layer l once, route on the last state, then finish the
  // same pass with or without the module.
  const int layer = store_.layer();
  Matrix x = detail::embed(model_, prompt);
  detail::run_blocks(model_, x, 0, layer, nullptr);
  const InterventionModule* module = nullptr;
  if (!store_.index().empty()) {
    auto key = x.row(x.rows() - 1);
    out.route = store_.index().route(std::vector<float>(key.begin(), key.end()));
    if (out.route.matched) module = &store_.module(out.route.module_id);
  }
  const std::size_t only =
      store_.scope() == Scope::prompt_final ? prompt.size() - 1 : kAllPositions;
  if (module != nullptr)
    for (std::size_t p = 0; p < x.rows(); ++p)
      if (only == kAllPositions || p == only) module->apply_inplace(x.row(p));
  detail::run_blocks(model_, x, layer, model_.config().layers, nullptr);
  int tok = argmax_last(detail::run_head(model_, x, nullptr));
  if (tok == eos) return out;
  out.tokens.push_back(tok);

  std::vector<int> seq(prompt.begin(), prompt.end());
  seq.push_back(tok);
  Intervention hook;
  if (module != nullptr) hook = as_intervention(*module, only);
  for (int step = 1; step < max_new; ++step) {
    if (seq.size() >= static_cast<std::size_t>(model_.config().max_len)) break;
    tok = argmax_last(forward_logits(model_, seq, module != nullptr ? &hook : nullptr));
    if (tok == eos) break;
    out.tokens.push_back(tok);
    seq.push_back(tok);
  }
  return out;
}

}  // namespace rilke
