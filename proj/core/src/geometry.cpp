#include "demf/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "demf/error.hpp"
#include "demf/interchange.hpp"

namespace demf {

CameraModel::CameraModel(std::array<double, 9> psi, double width_px, double height_px)
    : psi_(psi), width_(width_px), height_(height_px) {
  if (!(width_px > 0.0) || !(height_px > 0.0)) {
    throw Error("camera extent must be positive");
  }
  if (std::all_of(psi.begin(), psi.end(), [](double v) { return v == 0.0; })) {
    throw Error("camera projection parameters are all zero");
  }
}

CameraModel CameraModel::pinhole(double f, double cx, double cy, double width_px,
                                 double height_px) {
  return CameraModel({f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0}, width_px, height_px);
}

Pixel2 project(const CameraModel& cam, const Point3& p) {
  const auto& s = cam.psi();
  const double d = s[6] * p.x + s[7] * p.y + s[8] * p.z;
  if (!(std::abs(d) > kProjectionEpsilon)) throw DegenerateProjection(d);
  return {(s[0] * p.x + s[1] * p.y + s[2] * p.z) / d, (s[3] * p.x + s[4] * p.y + s[5] * p.z) / d};
}

Unit2 normalize_pixel(const CameraModel& cam, const Pixel2& px) {
  return {std::clamp(px.u / cam.width(), 0.0, 1.0), std::clamp(px.v / cam.height(), 0.0, 1.0)};
}

Pixel2 denormalize(const CameraModel& cam, const Unit2& uv) {
  return {uv.a * cam.width(), uv.b * cam.height()};
}

Unit2 ref_point(const CameraModel& cam, const Point3& s) {
  const auto& psi = cam.psi();
  const double d = psi[6] * s.x + psi[7] * s.y + psi[8] * s.z;
  // Points behind the camera plane would mirror through the principal point.
  if (!(d > kProjectionEpsilon)) throw DegenerateProjection(d);
  return normalize_pixel(cam, project(cam, s));
}

CameraModel parse_camera(const std::string& text) {
  std::istringstream in(text);
  std::array<double, 9> psi{};
  double w = 0.0, h = 0.0;
  std::string token;
  std::vector<double> values;
  while (in >> token) values.push_back(parse_real(token));
  if (values.size() != 11) {
    throw Error("camera record needs 11 values (9 psi, W0, H0), got " +
                std::to_string(values.size()));
  }
  std::copy_n(values.begin(), 9, psi.begin());
  w = values[9];
  h = values[10];
  return CameraModel(psi, w, h);
}

std::vector<CameraModel> read_camera_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open camera file: " + path);
  std::vector<CameraModel> cams;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    cams.push_back(parse_camera(line));
  }
  if (cams.empty()) throw Error("camera file has no records: " + path);
  return cams;
}

std::string format_camera(const CameraModel& cam) {
  std::string out;
  for (double v : cam.psi()) out += format_real(v) + ' ';
  out += format_real(cam.width()) + ' ' + format_real(cam.height());
  return out;
}

}  // namespace demf
