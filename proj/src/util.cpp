#include "groundiff/util.hpp"

#include <cstdio>

namespace groundiff {

std::string to_hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

}  // namespace groundiff
