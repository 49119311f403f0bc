#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rilke/corpus.hpp"
#include "rilke/intervention.hpp"
#include "rilke/model.hpp"
#include "rilke/tokenizer.hpp"

namespace rilke {

enum class PerturbSite { prompt_final, all_prompt };

struct RobustConfig {
  double sigma = 0.0;  // absolute std-dev of the state perturbation
  double lambda_robu = 0.1;
  int samples = 1;
  double lr = 1e-2;
  int max_steps = 200;
  double target_loss = 0.01;  // per target token
  std::uint64_t seed = 0;
  PerturbSite site = PerturbSite::prompt_final;
  Scope scope = Scope::all_positions;

  void validate() const;
};

struct TrainReport {
  double lm_loss = 0;
  double robust_loss = 0;
  int steps = 0;
  std::vector<double> residuals;  // ||R R^T - I||_F after each step
  bool failed = false;            // max steps hit with loss above 10x target
};

struct TrainResult {
  InterventionModule module;
  TrainReport report;
};

// A tokenized edit: prompt ids and target ids (the target ends with <eos>).
struct EditExample {
  std::vector<int> prompt;
  std::vector<int> target;
};

EditExample encode_example(const Tokenizer& tok, const std::string& prompt, const std::string& target);
std::vector<EditExample> encode_items(const Tokenizer& tok, const std::vector<KnowledgeItem>& items);

// Teacher-forced NLL of y given x, summed over target positions, with the
// module applied at every position of its layer (or only at the prompt-final
// one).
double lm_loss(const BaseModel& model, const InterventionModule& m, std::span<const int> x,
               std::span<const int> y, Scope scope = Scope::all_positions);

// KL(clean || perturbed) averaged over target positions and over `samples`
// seeded draws of the prompt-final perturbation.
double robust_loss(const BaseModel& model, const InterventionModule& m, std::span<const int> x,
                   std::span<const int> y, double sigma, std::uint64_t seed, int samples = 1,
                   Scope scope = Scope::all_positions);

// The perturbation drawn for sample `sample` under `seed`.
std::vector<float> draw_perturbation(std::size_t d, double sigma, std::uint64_t seed, int sample);

// Minimizes sum over examples of lm_loss + lambda * robust_loss over the
// module parameters; R is re-orthonormalized after every Adam step.
TrainResult train_edit(const BaseModel& model, int layer, std::size_t rank,
                       const std::vector<EditExample>& examples, const RobustConfig& cfg,
                       std::uint64_t seed, std::string id = {});

// 0.05 x mean key norm (prompt-final layer-l state) over the prompts.
double calibrate_sigma(const BaseModel& model, int layer, const std::vector<EditExample>& examples,
                       double scale = 0.05);

}  // namespace rilke
