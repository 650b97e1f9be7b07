#include "dms2f/patching.hpp"

#include <sstream>
#include <stdexcept>

namespace dms2f {

std::vector<Index> window_starts(Index extent, Index window, Index stride) {
  if (window < 1 || window > extent) {
    throw ShapeError("window " + std::to_string(window) + " does not fit extent " + std::to_string(extent));
  }
  if (stride < 1) throw ShapeError("stride must be >= 1, got " + std::to_string(stride));
  // A stride past the window would leave uncovered gaps between windows.
  if (stride > window) {
    throw ShapeError("stride " + std::to_string(stride) + " exceeds window " + std::to_string(window));
  }
  std::vector<Index> starts;
  for (Index s = 0; s + window <= extent; s += stride) starts.push_back(s);
  if (starts.back() != extent - window) starts.push_back(extent - window);
  return starts;
}

template <typename Scalar>
PatchSet<Scalar> extract_patches(const Tensor<Scalar>& cube, Index h, Index w, Index stride) {
  if (cube.rank() != 3) throw ShapeError("extract_patches: expected (H,W,C), got " + to_string(cube.shape()));
  const Index H = cube.dim(0), W = cube.dim(1), C = cube.dim(2);
  if (h > H || w > W) {
    std::ostringstream msg;
    msg << "extract_patches: " << h << 'x' << w << " patch is larger than the " << H << 'x' << W << " cube";
    throw ShapeError(msg.str());
  }
  const std::vector<Index> rows = window_starts(H, h, stride), cols = window_starts(W, w, stride);

  PatchSet<Scalar> set;
  set.height = H;
  set.width = W;
  set.patch_h = h;
  set.patch_w = w;
  for (Index r : rows) {
    for (Index c : cols) set.origins.push_back({r, c});
  }
  set.patches = Tensor<Scalar>({set.count(), h, w, C});
  const Matrix<Scalar>& src = cube.matrix();
  for (Index i = 0; i < set.count(); ++i) {
    const Origin o = set.origins[std::size_t(i)];
    auto dst = set.patch(i);
    for (Index r = 0; r < h; ++r) dst.middleRows(r * w, w) = src.middleRows((o.row + r) * W + o.col, w);
  }
  return set;
}

void MaskSpec::validate(Index patch_side) const {
  if (!(probability >= 0.0 && probability <= 1.0)) {
    throw std::invalid_argument("mask probability must lie in [0, 1], got " + std::to_string(probability));
  }
  if (min_side < 1 || min_side > max_side || max_side > patch_side) {
    std::ostringstream msg;
    msg << "mask sides need 1 <= min_side <= max_side <= " << patch_side << ", got [" << min_side << ", "
        << max_side << ']';
    throw std::invalid_argument(msg.str());
  }
}

template <typename Scalar>
std::optional<MaskRegion> apply_random_mask(Eigen::Ref<Matrix<Scalar>> patch, Index h, Index w, const MaskSpec& spec,
                                            std::mt19937_64& rng) {
  if (patch.rows() != h * w) throw ShapeError("apply_random_mask: patch rows do not match h*w");
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (!(coin(rng) < spec.probability)) return std::nullopt;
  MaskRegion region;
  region.height = std::uniform_int_distribution<Index>(std::min(spec.min_side, h), std::min(spec.max_side, h))(rng);
  region.width = std::uniform_int_distribution<Index>(std::min(spec.min_side, w), std::min(spec.max_side, w))(rng);
  region.row = std::uniform_int_distribution<Index>(0, h - region.height)(rng);
  region.col = std::uniform_int_distribution<Index>(0, w - region.width)(rng);
  for (Index r = region.row; r < region.row + region.height; ++r) {
    patch.middleRows(r * w + region.col, region.width).setConstant(static_cast<Scalar>(spec.fill));
  }
  return region;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, std::optional<MaskRegion>> random_mask(const Tensor<Scalar>& patch, const MaskSpec& spec,
                                                                 std::mt19937_64& rng) {
  if (patch.rank() != 3) throw ShapeError("random_mask: expected (h,w,C), got " + to_string(patch.shape()));
  Tensor<Scalar> out = patch;
  auto region = apply_random_mask<Scalar>(out.matrix(), patch.dim(0), patch.dim(1), spec, rng);
  return {std::move(out), region};
}

template <typename Scalar>
Tensor<Scalar> reassemble(const Tensor<Scalar>& outputs, const std::vector<Origin>& origins, Index height,
                          Index width) {
  if (outputs.rank() != 4 || outputs.dim(0) != static_cast<Index>(origins.size())) {
    throw ShapeError("reassemble: expected (" + std::to_string(origins.size()) + ",h,w,C) outputs, got " +
                     to_string(outputs.shape()));
  }
  const Index h = outputs.dim(1), w = outputs.dim(2), C = outputs.dim(3);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(height * width, C);
  Eigen::VectorXd count = Eigen::VectorXd::Zero(height * width);
  for (std::size_t i = 0; i < origins.size(); ++i) {
    const Origin o = origins[i];
    if (o.row < 0 || o.col < 0 || o.row + h > height || o.col + w > width) {
      throw ShapeError("reassemble: patch " + std::to_string(i) + " lies outside the grid");
    }
    const auto block = outputs.matrix().middleRows(Index(i) * h * w, h * w);
    for (Index r = 0; r < h; ++r) {
      const Index dst = (o.row + r) * width + o.col;
      sum.middleRows(dst, w) += block.middleRows(r * w, w).template cast<double>();
      count.segment(dst, w).array() += 1.0;
    }
  }
  for (Index p = 0; p < height * width; ++p) {
    if (count[p] == 0) {
      throw ShapeError("reassemble: pixel (" + std::to_string(p / width) + ", " + std::to_string(p % width) +
                       ") is not covered by any patch");
    }
  }
  sum.array().colwise() /= count.array();
  return Tensor<Scalar>({height, width, C}, sum.cast<Scalar>());
}

#define DMS2F_INSTANTIATE(S)                                                                                      \
  template PatchSet<S> extract_patches<S>(const Tensor<S>&, Index, Index, Index);                                \
  template std::optional<MaskRegion> apply_random_mask<S>(Eigen::Ref<Matrix<S>>, Index, Index, const MaskSpec&,  \
                                                          std::mt19937_64&);                                      \
  template std::pair<Tensor<S>, std::optional<MaskRegion>> random_mask<S>(const Tensor<S>&, const MaskSpec&,     \
                                                                          std::mt19937_64&);                      \
  template Tensor<S> reassemble<S>(const Tensor<S>&, const std::vector<Origin>&, Index, Index);

DMS2F_INSTANTIATE(float)
DMS2F_INSTANTIATE(double)
#undef DMS2F_INSTANTIATE

}  // namespace dms2f
