#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

namespace demf {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct Pixel2 {
  double u = 0.0;
  double v = 0.0;
};

// Image coordinates scaled to [0,1]^2 by the image extent.
struct Unit2 {
  double a = 0.0;
  double b = 0.0;
};

// Denominator threshold below which a point is treated as lying on or behind
// the camera plane.
inline constexpr double kProjectionEpsilon = 1e-6;

// Homogeneous 3x3 projection (row-major psi[0..8]) plus the image extent in
// pixels. pixel = (psi[0..2].p, psi[3..5].p) / psi[6..8].p
class CameraModel {
 public:
  CameraModel(std::array<double, 9> psi, double width_px, double height_px);

  // Pinhole camera looking down +z with focal length f and principal point
  // (cx, cy).
  static CameraModel pinhole(double f, double cx, double cy, double width_px, double height_px);

  const std::array<double, 9>& psi() const { return psi_; }
  double width() const { return width_; }
  double height() const { return height_; }

 private:
  std::array<double, 9> psi_;
  double width_;
  double height_;
};

// Throws DegenerateProjection when |psi[6..8].p| <= kProjectionEpsilon.
Pixel2 project(const CameraModel& cam, const Point3& p);
// Scales by the image extent and clamps to [0,1]^2.
Unit2 normalize_pixel(const CameraModel& cam, const Pixel2& px);
Pixel2 denormalize(const CameraModel& cam, const Unit2& uv);
// Also rejects points behind the camera (denominator <= -kProjectionEpsilon).
Unit2 ref_point(const CameraModel& cam, const Point3& s);

// Camera text record: nine psi values then W0 H0, whitespace separated.
CameraModel parse_camera(const std::string& text);
std::vector<CameraModel> read_camera_file(const std::string& path);
std::string format_camera(const CameraModel& cam);

}  // namespace demf
