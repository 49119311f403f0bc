#include "rilke/intervention.hpp"

#include <cmath>
#include <random>

#include "json.hpp"

#include "rilke/kernels.hpp"
#include "rilke/rng.hpp"

namespace rilke {

InterventionModule new_module(int layer, std::size_t d, std::size_t r, std::uint64_t seed,
                              std::string id) {
  require(r >= 1, ErrorKind::config, "intervention rank must be at least 1");
  require(r <= d, ErrorKind::config,
          "intervention rank " + std::to_string(r) + " exceeds width " + std::to_string(d));
  require(layer >= 1, ErrorKind::config, "intervention layer must be >= 1");
  Rng rng(derive_seed(seed, "module-init"));
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixD raw(r, d);
  for (auto& v : raw.flat()) v = normal(rng);
  InterventionModule m;
  m.id = std::move(id);
  m.layer = layer;
  m.R = orthonormalize_rows(raw).cast<float>();
  m.A = m.R;
  m.b = Matrix(1, r, 0.0f);
  return m;
}

void validate_module(const InterventionModule& m) {
  require(m.rank() >= 1 && m.rank() <= m.width(), ErrorKind::config, "bad intervention rank");
  require(m.A.rows() == m.rank() && m.A.cols() == m.width(), ErrorKind::dimension,
          "A must match R in shape");
  require(m.b.rows() == 1 && m.b.cols() == m.rank(), ErrorKind::dimension, "b must be 1 x r");
  require(m.R.all_finite() && m.A.all_finite() && m.b.all_finite(), ErrorKind::numeric,
          "intervention parameters must be finite");
  const double residual = orthonormality_residual(m.R);
  require(residual <= 1e-5, ErrorKind::integrity,
          "R is not orthonormal (residual " + std::to_string(residual) + ")");
}

EditVector edit_vector(const InterventionModule& m, std::span<const float> h, std::string item_id) {
  const auto out = m.apply(h);
  EditVector v{std::move(item_id), std::vector<float>(h.size())};
  for (std::size_t j = 0; j < h.size(); ++j) v.vector[j] = out[j] - h[j];
  return v;
}

std::size_t param_count(std::size_t d, std::size_t r) { return 2 * r * d + r; }
std::size_t param_count(const InterventionModule& m) { return param_count(m.width(), m.rank()); }

namespace {

MatrixD projector(const Matrix& r) {
  MatrixD p(r.cols(), r.cols());
  p.map() = r.cast<double>().map().transpose() * r.cast<double>().map();
  return p;
}

}  // namespace

double subspace_similarity(const Matrix& r1, const Matrix& r2) {
  require(r1.cols() == r2.cols(), ErrorKind::dimension, "subspace similarity needs equal widths");
  const MatrixD p1 = projector(r1), p2 = projector(r2);
  const double n1 = p1.map().norm(), n2 = p2.map().norm();
  require(n1 > 0 && n2 > 0, ErrorKind::numeric, "subspace similarity of a zero matrix");
  return std::clamp((p1.map().array() * p2.map().array()).sum() / (n1 * n2), 0.0, 1.0);
}

double flattened_similarity(const Matrix& r1, const Matrix& r2) {
  require(r1.rows() == r2.rows() && r1.cols() == r2.cols(), ErrorKind::dimension,
          "flattened similarity needs equal shapes");
  const double n1 = norm(r1.flat()), n2 = norm(r2.flat());
  require(n1 > 0 && n2 > 0, ErrorKind::numeric, "flattened similarity of a zero matrix");
  return dot(r1.flat(), r2.flat()) / (n1 * n2);
}

Scope parse_scope(const std::string& name) {
  if (name == "all") return Scope::all_positions;
  if (name == "prompt-final") return Scope::prompt_final;
  fail(ErrorKind::config, "unknown intervention scope \"" + name + "\" (expected all or prompt-final)");
}

std::string to_string(Scope scope) { return scope == Scope::prompt_final ? "prompt-final" : "all"; }

Intervention as_intervention(const InterventionModule& m, std::size_t only_position) {
  return {m.layer, [m, only_position](std::span<float> state, std::size_t pos) {
            if (only_position == kAllPositions || pos == only_position) m.apply_inplace(state);
          }};
}

void save_module(const std::filesystem::path& dir, const InterventionModule& m) {
  std::filesystem::create_directories(dir);
  write_blob(dir / "R.rilk", m.R);
  write_blob(dir / "A.rilk", m.A);
  write_blob(dir / "b.rilk", m.b);
  nlohmann::ordered_json j;
  j["format"] = "rilke-module";
  j["version"] = 1;
  j["id"] = m.id;
  j["layer"] = m.layer;
  j["rank"] = m.rank();
  j["width"] = m.width();
  write_file_atomic(dir / "module.json", j.dump(2) + "\n");
}

InterventionModule load_module(const std::filesystem::path& dir, double residual_tolerance) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_text(dir / "module.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "module manifest " + (dir / "module.json").string() + ": " + e.what());
  }
  InterventionModule m;
  std::size_t r = 0, d = 0;
  try {
    require(j.at("format") == "rilke-module", ErrorKind::integrity, "not a module manifest: " + dir.string());
    require(j.at("version") == 1, ErrorKind::load, "unsupported module version in " + dir.string());
    m.id = j.at("id").get<std::string>();
    m.layer = j.at("layer").get<int>();
    r = j.at("rank").get<std::size_t>();
    d = j.at("width").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::integrity, "module manifest " + dir.string() + ": " + e.what());
  }
  m.R = read_blob(dir / "R.rilk");
  m.A = read_blob(dir / "A.rilk");
  m.b = read_blob(dir / "b.rilk");
  require(m.R.rows() == r && m.R.cols() == d && m.A.rows() == r && m.A.cols() == d && m.b.rows() == 1 &&
              m.b.cols() == r && r >= 1 && r <= d,
          ErrorKind::integrity, "module blob shapes disagree with the manifest in " + dir.string());
  const double residual = orthonormality_residual(m.R);
  require(residual <= residual_tolerance, ErrorKind::load,
          "module " + dir.string() + " has orthonormality residual " + std::to_string(residual));
  return m;
}

}  // namespace rilke
