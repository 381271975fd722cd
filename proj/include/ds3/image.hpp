#pragma once

#include <cstdint>

#include <Eigen/Core>

namespace ds3 {

/// Row-major so that a (height x width) image has the same memory layout as
/// a contiguous [H, W] tensor slice.
template <typename Scalar>
using ImageT = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Image = ImageT<float>;
using ImageD = ImageT<double>;
using Mask = ImageT<std::uint8_t>;

}  // namespace ds3
