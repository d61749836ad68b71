#include "demf/interchange.hpp"

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>

#include "demf/error.hpp"

namespace demf {

std::string format_real(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_real(std::string_view text) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last) {
    throw Error("not a decimal number: '" + std::string(text) + "'");
  }
  return value;
}

namespace {

std::size_t parse_index(std::string_view text) {
  std::size_t value = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
    throw Error("not a non-negative integer: '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

std::string format_record(const BoxRecord& r) {
  std::string out = std::to_string(r.scene_id) + ' ' + std::to_string(r.class_id);
  for (double v : {r.box.center.x, r.box.center.y, r.box.center.z}) out += ' ' + format_real(v);
  for (double v : r.box.size) out += ' ' + format_real(v);
  if (r.has_score) out += ' ' + format_real(r.score);
  return out;
}

BoxRecord parse_record(std::string_view line) {
  std::istringstream in{std::string(line)};
  std::vector<std::string> tokens;
  for (std::string t; in >> t;) tokens.push_back(t);
  if (tokens.size() != 8 && tokens.size() != 9) {
    throw Error("box record needs 8 or 9 fields, got " + std::to_string(tokens.size()));
  }
  BoxRecord r;
  r.scene_id = parse_index(tokens[0]);
  r.class_id = parse_index(tokens[1]);
  r.box.center = {parse_real(tokens[2]), parse_real(tokens[3]), parse_real(tokens[4])};
  for (std::size_t i = 0; i < 3; ++i) {
    r.box.size[i] = parse_real(tokens[5 + i]);
    if (!(r.box.size[i] > 0.0)) throw Error("box size must be positive");
  }
  if (tokens.size() == 9) {
    r.has_score = true;
    r.score = parse_real(tokens[8]);
  }
  return r;
}

void write_records(std::ostream& out, const std::vector<BoxRecord>& records) {
  for (const BoxRecord& r : records) out << format_record(r) << '\n';
}

std::vector<BoxRecord> read_records(std::istream& in) {
  std::vector<BoxRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    out.push_back(parse_record(line));
  }
  return out;
}

}  // namespace demf
