#include "rilke/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"

#include "rilke/detail/transformer.hpp"
#include "rilke/rng.hpp"

namespace rilke {

using detail::Mat;

void ModelConfig::validate() const {
  require(layers >= 2, ErrorKind::config, "model needs at least 2 layers");
  require(width > 0 && heads > 0, ErrorKind::config, "width and heads must be positive");
  require(width % heads == 0, ErrorKind::config,
          "width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  require(head_width() % 2 == 0, ErrorKind::config, "head width must be even for rotary embedding");
  require(ffn > 0, ErrorKind::config, "ffn width must be positive");
  require(vocab >= 2, ErrorKind::config, "vocabulary must hold the reserved tokens");
  require(max_len >= 2, ErrorKind::config, "max sequence length must be at least 2");
}

template <typename T>
Weights<T> Weights<T>::zeros(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.width);
  const auto f = static_cast<std::size_t>(c.ffn);
  const auto v = static_cast<std::size_t>(c.vocab);
  Weights w;
  w.tok_emb = Mat<T>(v, d);
  w.blocks.resize(static_cast<std::size_t>(c.layers));
  for (auto& b : w.blocks) {
    b.norm1 = Mat<T>(1, d);
    b.wq = Mat<T>(d, d);
    b.wk = Mat<T>(d, d);
    b.wv = Mat<T>(d, d);
    b.wo = Mat<T>(d, d);
    b.norm2 = Mat<T>(1, d);
    b.w1 = Mat<T>(f, d);
    b.w2 = Mat<T>(d, f);
  }
  w.final_norm = Mat<T>(1, d);
  w.unembed = Mat<T>(v, d);
  return w;
}

template <typename T>
RopeTable<T> RopeTable<T>::build(int max_len, int head_width) {
  const int half = head_width / 2;
  RopeTable t;
  t.cos = Mat<T>(static_cast<std::size_t>(max_len), static_cast<std::size_t>(half));
  t.sin = Mat<T>(static_cast<std::size_t>(max_len), static_cast<std::size_t>(half));
  for (int p = 0; p < max_len; ++p)
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / head_width);
      t.cos(static_cast<std::size_t>(p), static_cast<std::size_t>(i)) = static_cast<T>(std::cos(p * freq));
      t.sin(static_cast<std::size_t>(p), static_cast<std::size_t>(i)) = static_cast<T>(std::sin(p * freq));
    }
  return t;
}

template <typename T>
BasicModel<T>::BasicModel(ModelConfig config, Weights<T> weights, bool frozen, double final_loss)
    : BasicModel(config, std::make_shared<const Weights<T>>(std::move(weights)), frozen,
                 final_loss) {}

template <typename T>
BasicModel<T>::BasicModel(ModelConfig config, std::shared_ptr<const Weights<T>> weights,
                          bool frozen, double final_loss)
    : config_(config),
      weights_(std::move(weights)),
      rope_(std::make_shared<const RopeTable<T>>(
          RopeTable<T>::build(config.max_len, config.head_width()))),
      frozen_(frozen),
      final_loss_(final_loss) {
  config_.validate();
}

template <typename T>
template <typename U>
BasicModel<U> BasicModel<T>::cast() const {
  Weights<U> out = Weights<U>::zeros(config_);
  std::vector<const BasicMatrix<T>*> src;
  weights_->for_each([&](const std::string&, const BasicMatrix<T>& m) { src.push_back(&m); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, BasicMatrix<U>& m) { m = src[i++]->template cast<U>(); });
  return BasicModel<U>(config_, std::move(out), frozen_, final_loss_);
}

template struct Weights<float>;
template struct Weights<double>;
template struct RopeTable<float>;
template struct RopeTable<double>;
template class BasicModel<float>;
template class BasicModel<double>;
template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;

BaseModel init_model(const ModelConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, "init"));
  Weights<float> w = Weights<float>::zeros(config);
  const float scale = 1.0f / std::sqrt(static_cast<float>(config.width));
  w.for_each([&](const std::string& name, Matrix& m) {
    const bool is_norm = name.find("norm") != std::string::npos;
    if (is_norm) {
      std::fill(m.flat().begin(), m.flat().end(), 1.0f);
      return;
    }
    // the down projection reads ffn-wide activations
    const float s = name.ends_with(".w2") ? 1.0f / std::sqrt(static_cast<float>(config.ffn)) : scale;
    std::uniform_real_distribution<float> dist(-s, s);
    for (float& v : m.flat()) v = dist(rng);
  });
  return BaseModel(config, std::move(w), false);
}

void validate_tokens(const ModelConfig& config, std::span<const int> tokens) {
  require(!tokens.empty(), ErrorKind::input, "empty token sequence");
  require(tokens.size() <= static_cast<std::size_t>(config.max_len), ErrorKind::input,
          "sequence length " + std::to_string(tokens.size()) + " exceeds max " +
              std::to_string(config.max_len));
  for (int t : tokens)
    require(t >= 0 && t < config.vocab, ErrorKind::input, "token id out of range: " + std::to_string(t));
}

namespace {

// Cross-entropy over next-token predictions; fills dlogits scaled by `scale`.
double sequence_ce(const Matrix& logits, std::span<const int> tokens, float scale, Matrix* dlogits) {
  const std::size_t n = tokens.size();
  if (dlogits != nullptr) *dlogits = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  std::vector<float> p(logits.cols());
  for (std::size_t i = 0; i + 1 < n; ++i) {
    auto row = logits.row(i);
    std::copy(row.begin(), row.end(), p.begin());
    softmax_inplace<float>(p);
    const auto target = static_cast<std::size_t>(tokens[i + 1]);
    loss -= std::log(std::max(static_cast<double>(p[target]), 1e-30));
    if (dlogits != nullptr) {
      auto g = dlogits->row(i);
      for (std::size_t c = 0; c < p.size(); ++c) g[c] = p[c] * scale;
      g[target] -= scale;
    }
  }
  return loss;
}

struct Adam {
  Weights<float> m, v;
  int t = 0;
};

}  // namespace

double corpus_loss(const BaseModel& model, const std::vector<std::vector<int>>& corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    validate_tokens(model.config(), seq);
    Matrix x = detail::embed(model, seq);
    Matrix logits = detail::run_from(model, std::move(x), 0, nullptr);
    total += sequence_ce(logits, seq, 1.0f, nullptr);
    count += seq.size() - 1;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

BaseModel pretrain(const BaseModel& model, const std::vector<std::vector<int>>& corpus,
                   const PretrainOptions& options) {
  require(!model.frozen(), ErrorKind::state, "pretrain: model is already frozen");
  require(options.steps >= 0 && options.batch >= 1, ErrorKind::config, "pretrain: bad options");
  const ModelConfig& cfg = model.config();
  for (const auto& seq : corpus) validate_tokens(cfg, seq);

  auto weights = std::make_shared<Weights<float>>(model.weights());
  Adam adam{Weights<float>::zeros(cfg), Weights<float>::zeros(cfg)};
  Rng rng(derive_seed(options.seed, "pretrain"));

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  const int warmup = std::max(1, static_cast<int>(options.warmup_fraction * options.steps));
  for (int step = 0; step < options.steps && !corpus.empty(); ++step) {
    BaseModel view(cfg, std::shared_ptr<const Weights<float>>(weights), false);
    Weights<float> grads = Weights<float>::zeros(cfg);

    std::vector<std::size_t> batch;
    while (batch.size() < static_cast<std::size_t>(options.batch)) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    std::size_t predicted = 0;
    for (auto i : batch) predicted += corpus[i].size() > 0 ? corpus[i].size() - 1 : 0;
    if (predicted == 0) continue;
    const float scale = 1.0f / static_cast<float>(predicted);

    for (auto i : batch) {
      const auto& seq = corpus[i];
      if (seq.size() < 2) continue;
      detail::Tape<float> tape;
      Matrix logits = detail::run_from(view, detail::embed(view, seq), 0, &tape);
      Matrix dlogits;
      sequence_ce(logits, seq, scale, &dlogits);
      Matrix dx = detail::backward(view, tape, dlogits, &grads);
      for (std::size_t p = 0; p < seq.size(); ++p) {
        auto g = grads.tok_emb.row(static_cast<std::size_t>(seq[p]));
        auto s = dx.row(p);
        for (std::size_t c = 0; c < g.size(); ++c) g[c] += s[c];
      }
    }

    double sq = 0.0;
    grads.for_each([&](const std::string&, const Matrix& g) {
      for (float v : g.flat()) sq += static_cast<double>(v) * v;
    });
    const double gnorm = std::sqrt(sq);
    const float clip = gnorm > options.clip_norm ? static_cast<float>(options.clip_norm / gnorm) : 1.0f;

    float lr = options.lr;
    if (step < warmup) {
      lr *= static_cast<float>(step + 1) / static_cast<float>(warmup);
    } else {
      const double progress =
          static_cast<double>(step - warmup) / std::max(1, options.steps - warmup);
      lr *= static_cast<float>(0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
    }

    adam.t += 1;
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const float c1 = 1.0f - std::pow(b1, static_cast<float>(adam.t));
    const float c2 = 1.0f - std::pow(b2, static_cast<float>(adam.t));
    std::vector<Matrix*> gs, ms, vs, ps;
    grads.for_each([&](const std::string&, Matrix& m) { gs.push_back(&m); });
    adam.m.for_each([&](const std::string&, Matrix& m) { ms.push_back(&m); });
    adam.v.for_each([&](const std::string&, Matrix& m) { vs.push_back(&m); });
    weights->for_each([&](const std::string&, Matrix& m) { ps.push_back(&m); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      auto g = gs[k]->flat();
      auto m = ms[k]->flat();
      auto v = vs[k]->flat();
      auto p = ps[k]->flat();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const float gi = g[i] * clip;
        m[i] = b1 * m[i] + (1 - b1) * gi;
        v[i] = b2 * v[i] + (1 - b2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }

  BaseModel trained(cfg, Weights<float>(*weights), true);
  const double loss = corpus_loss(trained, corpus);
  return BaseModel(cfg, Weights<float>(*weights), true, loss);
}

namespace {

Matrix run_with_hidden(const BaseModel& model, std::span<const int> tokens,
                       const Intervention* intervention, std::vector<Matrix>* hidden) {
  validate_tokens(model.config(), tokens);
  const int layers = model.config().layers;
  if (intervention != nullptr)
    require(intervention->layer >= 1 && intervention->layer <= layers, ErrorKind::input,
            "intervention layer out of range");
  Matrix x = detail::embed(model, tokens);
  for (int l = 1; l <= layers; ++l) {
    detail::block_forward(model.weights().blocks[static_cast<std::size_t>(l - 1)], model.config(),
                          model.rope(), x, nullptr);
    if (intervention != nullptr && intervention->layer == l)
      for (std::size_t p = 0; p < x.rows(); ++p) intervention->apply(x.row(p), p);
    if (hidden != nullptr) hidden->push_back(x);
  }
  return detail::run_head(model, x, nullptr);
}

}  // namespace

ForwardResult forward(const BaseModel& model, std::span<const int> tokens,
                      const Intervention* intervention) {
  ForwardResult out;
  Matrix logits = run_with_hidden(model, tokens, intervention, &out.hidden);
  for (std::size_t i = 0; i < logits.rows(); ++i) out.probs.push_back(softmax(logits.row(i)));
  return out;
}

Matrix forward_logits(const BaseModel& model, std::span<const int> tokens,
                      const Intervention* intervention) {
  return run_with_hidden(model, tokens, intervention, nullptr);
}

Matrix hidden_states(const BaseModel& model, std::span<const int> tokens, int layer) {
  validate_tokens(model.config(), tokens);
  require(layer >= 1 && layer <= model.config().layers, ErrorKind::input,
          "layer " + std::to_string(layer) + " out of range");
  Matrix x = detail::embed(model, tokens);
  detail::run_blocks(model, x, 0, layer, nullptr);
  return x;
}

HiddenState hidden_at(const BaseModel& model, std::span<const int> tokens, int layer) {
  Matrix states = hidden_states(model, tokens, layer);
  auto last = states.row(states.rows() - 1);
  return {layer, states.rows() - 1, std::vector<float>(last.begin(), last.end())};
}

std::vector<int> generate(const BaseModel& model, std::span<const int> prompt,
                          const Intervention* intervention, int max_new, int eos) {
  require(!prompt.empty(), ErrorKind::input, "generate: empty prompt");
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (seq.size() >= static_cast<std::size_t>(model.config().max_len)) break;
    Matrix logits = forward_logits(model, seq, intervention);
    auto last = logits.row(logits.rows() - 1);
    std::size_t best = 0;
    for (std::size_t i = 1; i < last.size(); ++i)
      if (last[i] > last[best]) best = i;
    const int tok = static_cast<int>(best);
    if (tok == eos) break;
    out.push_back(tok);
    seq.push_back(tok);
  }
  return out;
}

std::uint64_t weights_digest(const BaseModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  model.weights().for_each([&](const std::string& name, const Matrix& m) {
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    for (std::uint8_t b : encode_blob(m)) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  });
  return h;
}

void save_checkpoint(const std::filesystem::path& dir, const BaseModel& model,
                     const Tokenizer& tokenizer) {
  std::filesystem::create_directories(dir);
  const ModelConfig& c = model.config();
  nlohmann::ordered_json manifest;
  manifest["format"] = "rilke-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = {{"layers", c.layers}, {"width", c.width}, {"heads", c.heads},
                        {"ffn", c.ffn},       {"vocab", c.vocab}, {"max_len", c.max_len},
                        {"seed", c.seed}};
  manifest["frozen"] = model.frozen();
  manifest["final_loss"] = model.final_loss();
  manifest["vocab"] = tokenizer.words();
  nlohmann::ordered_json blobs = nlohmann::ordered_json::object();
  model.weights().for_each([&](const std::string& name, const Matrix& m) {
    const std::string file = name + ".rilk";
    write_blob(dir / file, m);
    blobs[name] = file;
  });
  manifest["blobs"] = blobs;
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::load, "checkpoint manifest unreadable: " + std::string(e.what()));
  }
  require(manifest.value("format", "") == "rilke-checkpoint", ErrorKind::load,
          "not a checkpoint: " + dir.string());
  require(manifest.value("version", 0) == 1, ErrorKind::load, "unsupported checkpoint version");
  ModelConfig c;
  const auto& jc = manifest.at("config");
  c.layers = jc.at("layers");
  c.width = jc.at("width");
  c.heads = jc.at("heads");
  c.ffn = jc.at("ffn");
  c.vocab = jc.at("vocab");
  c.max_len = jc.at("max_len");
  c.seed = jc.at("seed");
  c.validate();
  std::vector<std::string> vocab = manifest.at("vocab");
  Tokenizer tok(std::vector<std::string>(vocab.begin() + std::min<std::size_t>(2, vocab.size()), vocab.end()));
  require(tok.words() == vocab, ErrorKind::load, "checkpoint vocabulary is malformed");
  require(tok.size() == c.vocab, ErrorKind::load, "vocabulary size does not match config");

  Weights<float> w = Weights<float>::zeros(c);
  const auto& blobs = manifest.at("blobs");
  w.for_each([&](const std::string& name, Matrix& m) {
    require(blobs.contains(name), ErrorKind::load, "checkpoint missing tensor " + name);
    Matrix loaded = read_blob(dir / blobs.at(name).get<std::string>());
    require(loaded.rows() == m.rows() && loaded.cols() == m.cols(), ErrorKind::integrity,
            "tensor " + name + " has the wrong shape");
    m = std::move(loaded);
  });
  return {BaseModel(c, std::move(w), manifest.value("frozen", true),
                    manifest.value("final_loss", 0.0)),
          std::move(tok)};
}

}  // namespace rilke
