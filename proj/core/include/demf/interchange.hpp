#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "demf/boxes.hpp"

namespace demf {

// Shortest decimal that parses back to the identical double.
std::string format_real(double value);
// Correctly rounded decimal-to-binary conversion; throws Error on junk.
double parse_real(std::string_view text);

// One line per box: scene_id class_id cx cy cz sx sy sz [score]
struct BoxRecord {
  std::size_t scene_id = 0;
  std::size_t class_id = 0;
  Box3 box;
  bool has_score = false;
  double score = 0.0;
};

std::string format_record(const BoxRecord& r);
BoxRecord parse_record(std::string_view line);

void write_records(std::ostream& out, const std::vector<BoxRecord>& records);
// Skips blank lines and lines starting with '#'.
std::vector<BoxRecord> read_records(std::istream& in);

}  // namespace demf
