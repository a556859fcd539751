// Prints the built-in desk-scale default configuration as JSON.
//
// configs/desk.json is generated by this tool and checked in; the unit suite
// asserts the two stay identical, so regenerate the file after changing any
// default:
//
//   build/make_default_config > configs/desk.json
#include <cstdio>

#include "groundiff/config.hpp"

int main() {
  std::printf("%s\n", groundiff::desk_default().to_json().c_str());
  return 0;
}
