#pragma once

#include <span>
#include <vector>

#include "rilke/model.hpp"
#include "rilke/router.hpp"
#include "rilke/store.hpp"
#include "rilke/tokenizer.hpp"

namespace rilke {

struct Answer {
  RouteDecision route;
  std::vector<int> tokens;
};

// Routed greedy generation: the prompt's layer-l key picks a module through
// the store's index, and the module rewrites layer l for the whole answer.
// When the gate does not fire the output is the base model's, bit for bit.
class Engine {
 public:
  Engine(const BaseModel& model, const EditStore& store) : model_(model), store_(store) {}

  RouteDecision route(std::span<const int> prompt) const;
  Answer generate(std::span<const int> prompt, int max_new, int eos = Tokenizer::kEos) const;

 private:
  const BaseModel& model_;
  const EditStore& store_;
};

}  // namespace rilke
