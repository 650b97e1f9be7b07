#include "dms2f/data.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

namespace dms2f {

HsiCube::HsiCube(Index h, Index w, Index c) : height(h), width(w), bands(c), pixels(Matrix<float>::Zero(h * w, c)) {
  if (h < 1 || w < 1 || c < 1) {
    throw ShapeError("cube extents must be >= 1, got " + to_string({h, w, c}));
  }
}

Tensor<float> HsiCube::tensor() const { return Tensor<float>({height, width, bands}, pixels); }

void HsiCube::validate() const {
  if (height < 1 || width < 1 || bands < 1) throw ShapeError("cube extents must be >= 1");
  if (pixels.rows() != height * width || pixels.cols() != bands) {
    throw ShapeError("cube payload is " + std::to_string(pixels.rows()) + "x" + std::to_string(pixels.cols()) +
                     ", expected " + std::to_string(height * width) + "x" + std::to_string(bands));
  }
  if (mask && (mask->rows() != height || mask->cols() != width)) {
    throw ShapeError("mask is " + std::to_string(mask->rows()) + "x" + std::to_string(mask->cols()) + ", cube is " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  if (!pixels.allFinite()) throw NumericError("cube contains non-finite values");
}

namespace {

using nlohmann::json;

struct Header {
  Index h = 0, w = 0, c = 0;
  std::string dtype;
};

void write_header(std::ostream& out, Index h, Index w, Index c, const char* dtype) {
  // Fixed key order so identical cubes give identical files.
  out << R"({"hsic":1,"h":)" << h << R"(,"w":)" << w << R"(,"c":)" << c << R"(,"dtype":")" << dtype
      << R"(","order":"bip"})" << '\n';
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

Header read_header(std::istream& in, const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line) || line.size() > 4096) {
    throw FormatError(path.string() + ": missing or oversized HSIC header line");
  }
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": header is not valid JSON (" + e.what() + ")");
  }
  if (!j.is_object() || !j.contains("hsic")) throw FormatError(path.string() + ": not an HSIC file");
  if (j["hsic"] != 1) throw FormatError(path.string() + ": unsupported HSIC version " + j["hsic"].dump());
  Header h;
  try {
    h.h = j.at("h").get<Index>();
    h.w = j.at("w").get<Index>();
    h.c = j.at("c").get<Index>();
    h.dtype = j.at("dtype").get<std::string>();
    if (j.at("order").get<std::string>() != "bip") throw FormatError(path.string() + ": only bip order is supported");
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed HSIC header (" + e.what() + ")");
  }
  if (h.h < 1 || h.w < 1 || h.c < 1) throw FormatError(path.string() + ": header extents must be >= 1");
  return h;
}

std::vector<char> read_payload(std::istream& in, std::size_t expected, const std::filesystem::path& path) {
  std::vector<char> bytes(expected);
  in.read(bytes.data(), static_cast<std::streamsize>(expected));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != expected) {
    std::ostringstream msg;
    msg << path.string() << ": corrupt payload, expected " << expected << " bytes, found " << got;
    throw FormatError(msg.str());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path.string() + ": corrupt payload, trailing bytes after " + std::to_string(expected));
  }
  return bytes;
}

float float_from_le(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

void float_to_le(float v, char* p) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  std::memcpy(p, &bits, 4);
}

}  // namespace

void save_cube(const HsiCube& cube, const std::filesystem::path& path) {
  cube.validate();
  std::ofstream out = open_out(path);
  write_header(out, cube.height, cube.width, cube.bands, "f32");
  std::vector<char> bytes(static_cast<std::size_t>(cube.pixels.size()) * 4);
  for (Index i = 0; i < cube.pixels.size(); ++i) float_to_le(cube.pixels.data()[i], &bytes[std::size_t(i) * 4]);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

HsiCube load_cube(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const Header h = read_header(in, path);
  if (h.dtype != "f32") throw FormatError(path.string() + ": expected dtype f32, got " + h.dtype);
  const std::vector<char> bytes = read_payload(in, std::size_t(h.h * h.w * h.c) * 4, path);
  HsiCube cube(h.h, h.w, h.c);
  for (Index i = 0; i < cube.pixels.size(); ++i) cube.pixels.data()[i] = float_from_le(&bytes[std::size_t(i) * 4]);
  return cube;
}

void save_mask(const Mask& mask, const std::filesystem::path& path) {
  std::ofstream out = open_out(path);
  write_header(out, mask.rows(), mask.cols(), 1, "u8");
  std::vector<char> bytes(static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i) bytes[std::size_t(i)] = mask.data()[i] ? 1 : 0;
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Mask load_mask(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const Header h = read_header(in, path);
  if (h.dtype != "u8" || h.c != 1) throw FormatError(path.string() + ": mask must have dtype u8 and c 1");
  const std::vector<char> bytes = read_payload(in, std::size_t(h.h * h.w), path);
  Mask mask(h.h, h.w);
  for (Index i = 0; i < mask.size(); ++i) {
    const char b = bytes[std::size_t(i)];
    if (b != 0 && b != 1) throw FormatError(path.string() + ": mask byte " + std::to_string(i) + " is not 0 or 1");
    mask.data()[i] = b == 1;
  }
  return mask;
}

std::filesystem::path mask_path_for(const std::filesystem::path& cube_path) {
  std::filesystem::path p = cube_path;
  return p.replace_extension(".mask" + cube_path.extension().string());
}

HsiCube normalize(const HsiCube& cube) {
  cube.validate();
  HsiCube out = cube;
  for (Index b = 0; b < cube.bands; ++b) {
    auto col = out.pixels.col(b);
    const float lo = col.minCoeff(), hi = col.maxCoeff();
    if (hi > lo) {
      col = ((col.array() - lo) / (hi - lo)).matrix();
    } else {
      col.setZero();
    }
  }
  return out;
}

void SceneSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("scene spec: " + what); };
  if (height < 1 || width < 1 || bands < 1) fail("height, width and bands must be >= 1");
  if (endmembers < 1) fail("endmembers must be >= 1");
  if (anomalies < 0) fail("anomalies must be >= 0");
  if (min_size < 1 || min_size > max_size) fail("anomaly sizes need 1 <= min_size <= max_size");
  if (max_size > height || max_size > width) {
    fail("anomaly size " + std::to_string(max_size) + " is larger than the " + std::to_string(height) + "x" +
         std::to_string(width) + " scene");
  }
  if (!(contrast >= 0) || !std::isfinite(contrast)) fail("contrast must be finite and >= 0");
  if (!(noise >= 0) || !std::isfinite(noise)) fail("noise must be finite and >= 0");
}

namespace {

// Baseline plus a slope and a few Gaussian bumps over normalised wavelength.
Eigen::RowVectorXd smooth_spectrum(Index bands, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> base(0.2, 0.6), slope(-0.15, 0.15), centre(0.0, 1.0), width(0.08, 0.3),
      amp(-0.25, 0.25);
  Eigen::RowVectorXd s(bands);
  const double b0 = base(rng), sl = slope(rng);
  double mu[3], sd[3], a[3];
  for (int q = 0; q < 3; ++q) {
    mu[q] = centre(rng);
    sd[q] = width(rng);
    a[q] = amp(rng);
  }
  for (Index i = 0; i < bands; ++i) {
    const double x = bands == 1 ? 0.5 : double(i) / double(bands - 1);
    double v = b0 + sl * (x - 0.5);
    for (int q = 0; q < 3; ++q) v += a[q] * std::exp(-0.5 * std::pow((x - mu[q]) / sd[q], 2));
    s[i] = std::clamp(v, 0.02, 1.0);
  }
  return s;
}

}  // namespace

HsiCube synth_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const Index H = spec.height, W = spec.width, C = spec.bands, M = spec.endmembers;

  Eigen::MatrixXd endmembers(M, C);
  for (Index m = 0; m < M; ++m) endmembers.row(m) = smooth_spectrum(C, rng);

  // Low-frequency cosine fields pushed through a softmax give smooth
  // abundances that sum to one at every pixel.
  std::uniform_real_distribution<double> freq(-1.5, 1.5), phase(0.0, 2 * std::numbers::pi), amp(0.5, 1.5);
  Eigen::MatrixXd logits = Eigen::MatrixXd::Zero(H * W, M);
  for (Index m = 0; m < M; ++m) {
    for (int q = 0; q < 3; ++q) {
      const double fx = freq(rng), fy = freq(rng), ph = phase(rng), a = amp(rng);
      for (Index r = 0; r < H; ++r) {
        for (Index c = 0; c < W; ++c) {
          logits(r * W + c, m) +=
              a * std::cos(2 * std::numbers::pi * (fx * double(c) / double(W) + fy * double(r) / double(H)) + ph);
        }
      }
    }
  }
  Eigen::MatrixXd abundance = (1.5 * logits).array().exp().matrix();
  abundance.array().colwise() /= abundance.rowwise().sum().array();

  Eigen::MatrixXd scene = abundance * endmembers;
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Index i = 0; i < scene.size(); ++i) scene.data()[i] += spec.noise * gauss(rng);

  const Eigen::RowVectorXd mean = scene.colwise().mean();
  const double mean_std =
      ((scene.rowwise() - mean).array().square().colwise().sum() / double(H * W)).sqrt().mean();

  HsiCube cube(H, W, C);
  Mask mask = Mask::Constant(H, W, false);
  std::uniform_int_distribution<Index> side(spec.min_size, spec.max_size);
  for (Index a = 0; a < spec.anomalies; ++a) {
    Eigen::RowVectorXd dir = smooth_spectrum(C, rng) - mean;
    const double rms = std::sqrt(dir.squaredNorm() / double(C));
    if (rms > 0) dir *= mean_std / rms;
    const Index ah = side(rng), aw = side(rng);
    std::uniform_int_distribution<Index> row(0, H - ah), col(0, W - aw);
    Index r0 = 0, c0 = 0;
    // Keep implants apart (one pixel of background between them) when the
    // scene has room; give up after a bounded number of draws.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      r0 = row(rng);
      c0 = col(rng);
      const Index rl = std::max<Index>(r0 - 1, 0), cl = std::max<Index>(c0 - 1, 0);
      const Index rh = std::min(r0 + ah + 1, H), ch = std::min(c0 + aw + 1, W);
      if (!mask.block(rl, cl, rh - rl, ch - cl).any()) break;
    }
    for (Index r = r0; r < r0 + ah; ++r) {
      for (Index c = c0; c < c0 + aw; ++c) {
        scene.row(r * W + c) += spec.contrast * dir;
        mask(r, c) = true;
      }
    }
  }
  cube.pixels = scene.cast<float>();
  cube.mask = std::move(mask);
  return cube;
}

}  // namespace dms2f
