#include "demf/encoders.hpp"

#include <algorithm>
#include <limits>

#include "demf/error.hpp"
#include "demf/ops.hpp"

namespace demf {

std::vector<std::size_t> farthest_point_sample(const std::vector<Point3>& points, std::size_t n) {
  std::vector<std::size_t> picked;
  if (points.empty() || n == 0) return picked;
  n = std::min(n, points.size());
  std::vector<double> dist(points.size(), std::numeric_limits<double>::infinity());
  std::size_t current = 0;
  picked.push_back(current);
  while (picked.size() < n) {
    const Point3& c = points[current];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double dx = points[i].x - c.x, dy = points[i].y - c.y, dz = points[i].z - c.z;
      dist[i] = std::min(dist[i], dx * dx + dy * dy + dz * dz);
      if (dist[i] > best_d) {
        best_d = dist[i];
        best = i;
      }
    }
    current = best;
    picked.push_back(current);
  }
  return picked;
}

Tensor local_statistics(const std::vector<Point3>& points, const std::vector<Point3>& seeds,
                        double radius, double count_scale) {
  std::vector<Real> stats(seeds.size() * kPointStatsWidth, Real{0});
  const double r2 = radius * radius;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
    std::size_t count = 0;
    for (const Point3& p : points) {
      const double d[3] = {p.x - seeds[s].x, p.y - seeds[s].y, p.z - seeds[s].z};
      if (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] > r2) continue;
      ++count;
      for (int a = 0; a < 3; ++a) {
        sum[a] += d[a];
        sq[a] += d[a] * d[a];
      }
    }
    if (count == 0) continue;
    Real* row = stats.data() + s * kPointStatsWidth;
    const double inv = 1.0 / static_cast<double>(count);
    row[0] = static_cast<Real>(static_cast<double>(count) / count_scale);
    for (int a = 0; a < 3; ++a) {
      const double mean = sum[a] * inv;
      const double var = std::max(0.0, sq[a] * inv - mean * mean);
      row[1 + a] = static_cast<Real>(mean / radius);
      row[4 + a] = static_cast<Real>(var / r2);
    }
  }
  return Tensor({seeds.size(), kPointStatsWidth}, std::move(stats));
}

PointEncoder PointEncoder::create(ParamStore& store, std::size_t candidates, std::size_t channels,
                                  double radius, Rng& rng) {
  if (candidates == 0 || channels == 0 || !(radius > 0.0)) {
    throw ConfigInvalid("point encoder needs positive candidates, channels and radius");
  }
  PointEncoder e;
  e.candidates_ = candidates;
  e.radius_ = radius;
  e.w1_ = store.uniform("point_encoder.fc1.weight", {kPointStatsWidth, channels}, kPointStatsWidth,
                        rng, "point_encoder");
  e.b1_ = store.zeros("point_encoder.fc1.bias", {channels}, "point_encoder");
  e.w2_ = store.uniform("point_encoder.fc2.weight", {channels, channels}, channels, rng,
                        "point_encoder");
  e.b2_ = store.zeros("point_encoder.fc2.bias", {channels}, "point_encoder");
  return e;
}

PointFeatureSet PointEncoder::encode_at(const std::vector<Point3>& points,
                                        const std::vector<Point3>& seeds) const {
  if (seeds.empty()) throw ShapeMismatch("point encoder seeds", {}, {candidates_});
  const Tensor stats = local_statistics(points, seeds, radius_, kCountScale);
  return {linear(relu(linear(stats, w1_, b1_)), w2_, b2_), seeds};
}

PointFeatureSet PointEncoder::encode(const std::vector<Point3>& points) const {
  std::vector<Point3> seeds;
  for (std::size_t i : farthest_point_sample(points, candidates_)) seeds.push_back(points[i]);
  return encode_at(points, seeds);
}

ImageEncoder ImageEncoder::create(ParamStore& store, std::size_t levels, std::size_t channels,
                                  std::size_t in_channels, Rng& rng) {
  if (levels == 0 || channels == 0) throw ConfigInvalid("image encoder needs levels and channels");
  ImageEncoder e;
  std::size_t cin = in_channels;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string name = "image_encoder.conv" + std::to_string(l + 1);
    e.weights_.push_back(
        store.uniform(name + ".weight", {channels, cin, 3, 3}, cin * 9, rng, "image_encoder"));
    e.biases_.push_back(store.zeros(name + ".bias", {channels}, "image_encoder"));
    cin = channels;
  }
  return e;
}

FeaturePyramid ImageEncoder::encode(const Tensor& image) const {
  FeaturePyramid pyramid;
  Tensor x = image;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    x = relu(conv2d(x, weights_[l], biases_[l], 2, 1));
    pyramid.levels.push_back(x);
  }
  return pyramid;
}

}  // namespace demf
