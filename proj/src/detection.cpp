#include "dms2f/detection.hpp"

#include "dms2f/patching.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dms2f {

ScoreMap residual_map(const HsiCube& x, const Tensor<float>& x_hat) {
  if (x_hat.rank() != 3 || x_hat.dim(0) != x.height || x_hat.dim(1) != x.width || x_hat.dim(2) != x.bands) {
    throw ShapeError("residual_map: reconstruction " + to_string(x_hat.shape()) + " does not match cube " +
                     to_string({x.height, x.width, x.bands}));
  }
  ScoreMap map;
  map.height = x.height;
  map.width = x.width;
  const Eigen::VectorXd norms =
      (x.pixels.cast<double>() - x_hat.matrix().cast<double>()).rowwise().norm();
  map.scores = Eigen::Map<const Matrix<double>>(norms.data(), x.height, x.width);
  map.detector = "residual";
  return map;
}

template <typename Scalar>
Tensor<Scalar> reconstruct(Dms2fModel<Scalar>& model, const HsiCube& cube, Index stride, Index batch) {
  const ModelConfig& c = model.config();
  if (cube.bands != c.bands) {
    throw ShapeError("detect: cube has " + std::to_string(cube.bands) + " bands, model expects " +
                     std::to_string(c.bands));
  }
  NoGradGuard guard;
  const PatchSet<Scalar> set =
      extract_patches(cube.tensor().template cast<Scalar>(), c.patch, c.patch, stride);
  const Index per = c.patch * c.patch;
  Tensor<Scalar> outputs(set.patches.shape());
  for (Index start = 0; start < set.count(); start += batch) {
    const Index n = std::min(batch, set.count() - start);
    Tensor<Scalar> x({n, c.patch, c.patch, c.bands}, set.patches.matrix().middleRows(start * per, n * per));
    outputs.matrix().middleRows(start * per, n * per) = model.forward(Var<Scalar>(x), false).matrix();
  }
  return reassemble(outputs, set.origins, cube.height, cube.width);
}

template <typename Scalar>
ScoreMap detect(const HsiCube& cube, Dms2fModel<Scalar>& model, Index stride) {
  ScoreMap map = residual_map(cube, reconstruct(model, cube, stride).template cast<float>());
  map.detector = "model";
  map.config_hash = config_hash(model.config());
  return map;
}

ScoreMap detect(const HsiCube& cube, const Checkpoint& checkpoint, Index stride) {
  auto model = instantiate<float>(checkpoint);
  return detect(cube, *model, stride);
}

ScoreMap rx_score(const HsiCube& cube, double lambda_scale) {
  cube.validate();
  const Index n = cube.height * cube.width, C = cube.bands;
  Eigen::MatrixXd x = cube.pixels.cast<double>();
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  Eigen::MatrixXd sigma = (x.transpose() * x) / double(n);
  const double lambda = lambda_scale * sigma.trace() / double(C);
  sigma.diagonal().array() += lambda;

  const Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  const double rcond = llt.info() == Eigen::Success ? llt.rcond() : 0.0;
  if (!(rcond > 1e-15)) {
    std::ostringstream msg;
    msg << "rx_score: regularised covariance is singular or ill-conditioned (reciprocal condition " << rcond
        << ", lambda " << lambda << ", " << n << " pixels, " << C << " bands)";
    throw NumericError(msg.str());
  }
  // Whitened residuals z = L^-1 (x - mu); the score is |z|^2.
  const Eigen::MatrixXd z = llt.matrixL().solve(x.transpose());
  const Eigen::VectorXd s = z.colwise().squaredNorm().transpose();

  ScoreMap map;
  map.height = cube.height;
  map.width = cube.width;
  map.scores = Eigen::Map<const Matrix<double>>(s.data(), cube.height, cube.width);
  map.detector = "rx";
  std::ostringstream id;
  id << "rx:lambda_scale=" << lambda_scale;
  map.config_hash = fnv1a_hex(id.str());
  return map;
}

void write_score_csv(const ScoreMap& map, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# detector=" << map.detector << " config=" << map.config_hash << '\n' << "row,col,score\n";
  char line[96];
  for (Index r = 0; r < map.height; ++r) {
    for (Index c = 0; c < map.width; ++c) {
      std::snprintf(line, sizeof line, "%lld,%lld,%.17g\n", static_cast<long long>(r), static_cast<long long>(c),
                    map.scores(r, c));
      out << line;
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ScoreMap read_score_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  ScoreMap map;
  std::vector<std::tuple<Index, Index, double>> rows;
  std::string line;
  bool header = false;
  Index line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      std::string field;
      while (meta >> field) {
        if (field.rfind("detector=", 0) == 0) map.detector = field.substr(9);
        if (field.rfind("config=", 0) == 0) map.config_hash = field.substr(7);
      }
      continue;
    }
    if (!header) {
      if (line != "row,col,score") throw FormatError(path.string() + ": expected header row,col,score");
      header = true;
      continue;
    }
    long long r = 0, c = 0;
    double s = 0;
    char extra = 0;
    if (std::sscanf(line.c_str(), "%lld,%lld,%lf%c", &r, &c, &s, &extra) != 3 || r < 0 || c < 0) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed score row '" + line + "'");
    }
    rows.emplace_back(Index(r), Index(c), s);
    map.height = std::max(map.height, Index(r) + 1);
    map.width = std::max(map.width, Index(c) + 1);
  }
  if (rows.empty()) throw FormatError(path.string() + ": no scores");
  map.scores = Matrix<double>::Constant(map.height, map.width, std::numeric_limits<double>::quiet_NaN());
  for (const auto& [r, c, s] : rows) map.scores(r, c) = s;
  if (Index(rows.size()) != map.height * map.width || map.scores.hasNaN()) {
    throw FormatError(path.string() + ": scores do not cover a full " + std::to_string(map.height) + "x" +
                      std::to_string(map.width) + " grid exactly once");
  }
  return map;
}

void write_score_pgm(const ScoreMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << map.width << ' ' << map.height << "\n65535\n";
  const double lo = map.scores.minCoeff(), hi = map.scores.maxCoeff();
  std::vector<unsigned char> bytes;
  bytes.reserve(std::size_t(map.scores.size()) * 2);
  for (Index i = 0; i < map.scores.size(); ++i) {
    const double t = hi > lo ? (map.scores.data()[i] - lo) / (hi - lo) : 0.0;
    const auto v = static_cast<unsigned>(std::lround(t * 65535.0));
    bytes.push_back(static_cast<unsigned char>(v >> 8));
    bytes.push_back(static_cast<unsigned char>(v & 0xff));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

#define DMS2F_INSTANTIATE(S)                                                      \
  template Tensor<S> reconstruct<S>(Dms2fModel<S>&, const HsiCube&, Index, Index); \
  template ScoreMap detect<S>(const HsiCube&, Dms2fModel<S>&, Index);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
