#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "rilke/detail/transformer.hpp"
#include "rilke/kernels.hpp"
#include "rilke/model.hpp"
#include "rilke/tokenizer.hpp"

using namespace rilke;

namespace {

template <typename T>
double sequence_nll(const BasicModel<T>& model, const std::vector<int>& seq) {
  const auto logits = detail::run_from(model, detail::embed(model, std::span<const int>(seq)), 0, nullptr);
  double loss = 0;
  std::vector<double> lp;
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    auto row = logits.row(i);
    double mx = row[0], s = 0;
    for (T v : row) mx = std::max(mx, static_cast<double>(v));
    for (T v : row) s += std::exp(static_cast<double>(v) - mx);
    loss -= static_cast<double>(row[static_cast<std::size_t>(seq[i + 1])]) - mx - std::log(s);
  }
  return loss;
}

}  // namespace

TEST_CASE("forward produces one distribution per position") {
  const auto model = testing::tiny_model();
  const std::vector<int> toks{2, 5, 7, 1, 3};
  const auto res = forward(model, toks);
  REQUIRE(res.probs.size() == toks.size());
  REQUIRE(res.hidden.size() == 2);
  for (const auto& p : res.probs) {
    double s = 0;
    for (float v : p.probs()) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
  const Matrix logits = forward_logits(model, toks);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    const auto p = softmax(logits.row(i));
    for (std::size_t j = 0; j < p.size(); ++j) CHECK(p[j] == doctest::Approx(res.probs[i][j]).epsilon(1e-6));
  }
  CHECK(hidden_states(model, toks, 1) == res.hidden[0]);
  CHECK(hidden_states(model, toks, 2) == res.hidden[1]);
  const auto h = hidden_at(model, toks, 2);
  CHECK(h.position == 4);
  CHECK(std::equal(h.vector.begin(), h.vector.end(), res.hidden[1].row(4).begin()));
}

TEST_CASE("attention is causal") {
  const auto model = testing::tiny_model();
  const Matrix a = forward_logits(model, std::vector<int>{4, 9, 2, 11, 6});
  const Matrix b = forward_logits(model, std::vector<int>{4, 9, 2, 20, 13});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) CHECK(a(i, j) == b(i, j));
  bool changed = false;
  for (std::size_t j = 0; j < a.cols(); ++j) changed |= a(3, j) != b(3, j);
  CHECK(changed);
}

TEST_CASE("weight gradients match central differences in double") {
  const auto base = testing::tiny_model(11).cast<double>();
  const std::vector<int> seq{3, 8, 1, 14, 6, 2};
  detail::Tape<double> tape;
  const auto logits = detail::run_from(base, detail::embed(base, std::span<const int>(seq)), 0, &tape);
  detail::Mat<double> dlogits(logits.rows(), logits.cols());
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    std::vector<double> row(logits.row(i).begin(), logits.row(i).end());
    softmax_inplace(std::span<double>(row));
    for (std::size_t j = 0; j < row.size(); ++j) dlogits(i, j) = row[j];
    dlogits(i, static_cast<std::size_t>(seq[i + 1])) -= 1;
  }
  auto grads = Weights<double>::zeros(base.config());
  detail::backward(base, tape, dlogits, &grads);

  Rng rng(5);
  std::vector<std::pair<std::string, std::size_t>> probes;
  base.weights().for_each([&](const std::string& name, const MatrixD& m) {
    if (name == "tok_emb") return;
    for (int k = 0; k < 3; ++k) probes.emplace_back(name, std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng));
  });
  auto entry = [](Weights<double>& w, const std::string& name, std::size_t i) -> double& {
    double* out = nullptr;
    w.for_each([&](const std::string& n, MatrixD& m) {
      if (n == name) out = &m.flat()[i];
    });
    return *out;
  };
  for (const auto& [name, i] : probes) {
    const double h = 1e-6;
    Weights<double> plus = base.weights(), minus = base.weights();
    entry(plus, name, i) += h;
    entry(minus, name, i) -= h;
    const double fd = (sequence_nll(BasicModel<double>(base.config(), plus, false), seq) -
                       sequence_nll(BasicModel<double>(base.config(), minus, false), seq)) /
                      (2 * h);
    const double an = entry(grads, name, i);
    INFO(name << "[" << i << "] analytic " << an << " numeric " << fd);
    CHECK(std::abs(an - fd) <= 1e-6 + 1e-5 * std::abs(fd));
  }
}

TEST_CASE("identity hook leaves generation unchanged") {
  const auto model = testing::tiny_model();
  const std::vector<int> prompt{2, 9, 4};
  Intervention hook;
  hook.layer = 1;
  hook.apply = [](std::span<float>, std::size_t) {};
  const auto a = generate(model, prompt, nullptr, 6, -1);
  CHECK(a.size() == 6);
  CHECK(generate(model, prompt, &hook, 6, -1) == a);
  CHECK(generate(model, prompt, nullptr, 6, -1) == a);
  // a hook that moves the state does change the logits
  hook.apply = [](std::span<float> s, std::size_t) {
    for (auto& v : s) v += 5.0f;
  };
  CHECK(!(forward_logits(model, prompt, &hook) == forward_logits(model, prompt)));
}

TEST_CASE("generation stops at eos and respects max_len") {
  const auto model = testing::tiny_model();
  const std::vector<int> prompt{2, 9, 4};
  const auto free_run = generate(model, prompt, nullptr, 12, -1);
  CHECK(free_run.size() == 12);
  const int stop = free_run[3];
  const auto stopped = generate(model, prompt, nullptr, 12, stop);
  std::size_t first = 0;
  while (free_run[first] != stop) ++first;
  CHECK(stopped == std::vector<int>(free_run.begin(), free_run.begin() + static_cast<std::ptrdiff_t>(first)));
  const std::vector<int> long_prompt(15, 3);
  CHECK(generate(model, long_prompt, nullptr, 10, -1).size() == 1);
}

TEST_CASE("tokens are validated") {
  const auto model = testing::tiny_model();
  CHECK_THROWS_AS(forward_logits(model, std::vector<int>{1, 99}), Error);
  CHECK_THROWS_AS(forward_logits(model, std::vector<int>(17, 2)), Error);
  CHECK_THROWS_AS(generate(model, std::vector<int>{}, nullptr, 3, -1), Error);
}

TEST_CASE("pretraining lowers the loss and checkpoints round trip") {
  Tokenizer tok({"a", "b", "c", "d", "e", "f"});
  std::vector<std::vector<int>> corpus;
  for (const char* line : {"a b c d", "b c d e", "c d e f", "f e d c"}) {
    auto ids = tok.encode(line);
    ids.push_back(Tokenizer::kEos);
    corpus.push_back(ids);
  }
  auto cfg = testing::tiny_config(2);
  cfg.vocab = tok.size();
  const auto init = init_model(cfg);
  PretrainOptions opt;
  opt.steps = 150;
  opt.batch = 4;
  const auto trained = pretrain(init, corpus, opt);
  CHECK(trained.frozen());
  CHECK(trained.final_loss() < 0.5 * corpus_loss(init, corpus));
  CHECK(trained.final_loss() == doctest::Approx(corpus_loss(trained, corpus)));
  CHECK(weights_digest(pretrain(init, corpus, opt)) == weights_digest(trained));

  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(dir, trained, tok);
  const auto back = load_checkpoint(dir);
  CHECK(weights_digest(back.model) == weights_digest(trained));
  CHECK(back.tokenizer.words() == tok.words());
  CHECK(forward_logits(back.model, corpus[0]) == forward_logits(trained, corpus[0]));
}
