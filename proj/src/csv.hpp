#pragma once

#include <string>
#include <vector>

namespace dfr {

// Quotes a field when it contains a comma, quote or newline.
std::string csv_field(const std::string& s);
// Splits one CSV line, honouring double-quoted fields.
std::vector<std::string> csv_split(const std::string& line);

}  // namespace dfr
