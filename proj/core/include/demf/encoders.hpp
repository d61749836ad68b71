#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "demf/attention.hpp"
#include "demf/demf.hpp"
#include "demf/geometry.hpp"
#include "demf/params.hpp"
#include "demf/rng.hpp"
#include "demf/tensor.hpp"

namespace demf {

// Farthest-point sampling starting from index 0. Returns min(n, |points|)
// distinct indices.
std::vector<std::size_t> farthest_point_sample(const std::vector<Point3>& points, std::size_t n);

// Per-seed neighbourhood statistics within `radius`, all relative to the
// seed: [count / count_scale, mean offset / radius (3), variance / radius^2 (3)].
// Empty neighbourhoods give the zero vector.
inline constexpr std::size_t kPointStatsWidth = 7;
Tensor local_statistics(const std::vector<Point3>& points, const std::vector<Point3>& seeds,
                        double radius, double count_scale);

// Candidate sampler plus a two-layer MLP over local statistics.
class PointEncoder {
 public:
  static PointEncoder create(ParamStore& store, std::size_t candidates, std::size_t channels,
                             double radius, Rng& rng);

  PointFeatureSet encode(const std::vector<Point3>& points) const;
  PointFeatureSet encode_at(const std::vector<Point3>& points,
                            const std::vector<Point3>& seeds) const;

  std::size_t candidates() const { return candidates_; }
  double radius() const { return radius_; }
  static constexpr double kCountScale = 64.0;

 private:
  std::size_t candidates_ = 0;
  double radius_ = 0.0;
  Tensor w1_, b1_, w2_, b2_;
};

// Chain of stride-2 3x3 convolutions with ReLU; level l has extent
// ceil(H0 / 2^l) x ceil(W0 / 2^l) and C channels.
class ImageEncoder {
 public:
  static ImageEncoder create(ParamStore& store, std::size_t levels, std::size_t channels,
                             std::size_t in_channels, Rng& rng);

  FeaturePyramid encode(const Tensor& image) const;
  std::size_t levels() const { return weights_.size(); }

 private:
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

}  // namespace demf
