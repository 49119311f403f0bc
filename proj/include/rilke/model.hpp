#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rilke/kernels.hpp"
#include "rilke/matrix.hpp"
#include "rilke/tokenizer.hpp"

namespace rilke {

struct ModelConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int ffn = 256;
  int vocab = 0;
  int max_len = 64;
  std::uint64_t seed = 0;

  int head_width() const { return width / heads; }
  void validate() const;  // throws config error
};

template <typename T>
struct BlockWeights {
  BasicMatrix<T> norm1;  // 1 x d
  BasicMatrix<T> wq, wk, wv, wo;  // d x d, stored out x in
  BasicMatrix<T> norm2;  // 1 x d
  BasicMatrix<T> w1;     // ffn x d
  BasicMatrix<T> w2;     // d x ffn
};

template <typename T>
struct Weights {
  BasicMatrix<T> tok_emb;  // vocab x d
  std::vector<BlockWeights<T>> blocks;
  BasicMatrix<T> final_norm;  // 1 x d
  BasicMatrix<T> unembed;     // vocab x d

  // Zero-filled weights with the shapes implied by `config`.
  static Weights zeros(const ModelConfig& config);

  // Visits every tensor with a stable name, in a fixed order.
  template <typename F>
  void for_each(F&& fn) {
    fn(std::string("tok_emb"), tok_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      fn(p + "norm1", blocks[i].norm1);
      fn(p + "wq", blocks[i].wq);
      fn(p + "wk", blocks[i].wk);
      fn(p + "wv", blocks[i].wv);
      fn(p + "wo", blocks[i].wo);
      fn(p + "norm2", blocks[i].norm2);
      fn(p + "w1", blocks[i].w1);
      fn(p + "w2", blocks[i].w2);
    }
    fn(std::string("final_norm"), final_norm);
    fn(std::string("unembed"), unembed);
  }
  template <typename F>
  void for_each(F&& fn) const {
    const_cast<Weights*>(this)->for_each(
        [&](const std::string& name, BasicMatrix<T>& m) { fn(name, std::as_const(m)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicMatrix<T>& m) { n += m.size(); });
    return n;
  }
};

// Rotary embedding tables, [max_len x head_width/2].
template <typename T>
struct RopeTable {
  BasicMatrix<T> cos, sin;
  static RopeTable build(int max_len, int head_width);
};

// A decoder-only transformer (pre-norm, RMSNorm, rotary attention, GELU MLP).
// After freezing the weights are shared immutably; copies are cheap.
template <typename T>
class BasicModel {
 public:
  BasicModel() = default;
  BasicModel(ModelConfig config, Weights<T> weights, bool frozen, double final_loss = 0.0);
  BasicModel(ModelConfig config, std::shared_ptr<const Weights<T>> weights, bool frozen,
             double final_loss = 0.0);

  const ModelConfig& config() const { return config_; }
  const Weights<T>& weights() const { return *weights_; }
  const RopeTable<T>& rope() const { return *rope_; }
  bool frozen() const { return frozen_; }
  double final_loss() const { return final_loss_; }

  template <typename U>
  BasicModel<U> cast() const;

 private:
  ModelConfig config_;
  std::shared_ptr<const Weights<T>> weights_;
  std::shared_ptr<const RopeTable<T>> rope_;
  bool frozen_ = false;
  double final_loss_ = 0.0;
};

using BaseModel = BasicModel<float>;
using BaseModelD = BasicModel<double>;

// Layer-l state at one position; layer is 1-based (output of block l).
struct HiddenState {
  int layer = 0;
  std::size_t position = 0;
  std::vector<float> vector;
};

// Rewrites the layer-`layer` state of each position before block layer+1 runs.
struct Intervention {
  int layer = 0;
  std::function<void(std::span<float> state, std::size_t position)> apply;
};

struct ForwardResult {
  std::vector<ProbVector> probs;  // one per position
  std::vector<Matrix> hidden;     // hidden[l-1] is n x d, l = 1..L
};

BaseModel init_model(const ModelConfig& config);

struct PretrainOptions {
  int steps = 1500;
  float lr = 3e-3f;
  int batch = 16;
  float warmup_fraction = 0.05f;
  float clip_norm = 1.0f;
  std::uint64_t seed = 0;
};

// Teacher-forced next-token training over every position; returns a frozen
// model whose final_loss() is the mean per-token loss over the corpus.
BaseModel pretrain(const BaseModel& model, const std::vector<std::vector<int>>& corpus,
                   const PretrainOptions& options);

// Mean per-token cross-entropy of the corpus.
double corpus_loss(const BaseModel& model, const std::vector<std::vector<int>>& corpus);

ForwardResult forward(const BaseModel& model, std::span<const int> tokens,
                      const Intervention* intervention = nullptr);

// Logits only (n x vocab); the fast path used by generation.
Matrix forward_logits(const BaseModel& model, std::span<const int> tokens,
                      const Intervention* intervention = nullptr);

// States after block `layer` for every position (n x d), uninterfered.
Matrix hidden_states(const BaseModel& model, std::span<const int> tokens, int layer);

HiddenState hidden_at(const BaseModel& model, std::span<const int> tokens, int layer);

// Greedy decoding, lowest id on ties; stops after emitting `eos` (not
// returned) or after max_new tokens. Pass eos < 0 to disable stopping.
std::vector<int> generate(const BaseModel& model, std::span<const int> prompt,
                          const Intervention* intervention, int max_new, int eos);

// FNV-1a over every weight blob; equal digests mean identical weights.
std::uint64_t weights_digest(const BaseModel& model);

struct Checkpoint {
  BaseModel model;
  Tokenizer tokenizer;
};

// Directory layout: manifest.json (config, vocabulary, blob names, final
// loss) plus one matrix blob per weight tensor.
void save_checkpoint(const std::filesystem::path& dir, const BaseModel& model,
                     const Tokenizer& tokenizer);

Checkpoint load_checkpoint(const std::filesystem::path& dir);

void validate_tokens(const ModelConfig& config, std::span<const int> tokens);

}  // namespace rilke
