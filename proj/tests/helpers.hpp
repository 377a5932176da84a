#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "prefbench/mdp.hpp"

namespace testing {

// Missing files read as empty when allow_missing is set.
inline std::string read_file_abs(const std::string& path, bool allow_missing = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (allow_missing) return {};
    throw std::runtime_error("cannot open " + path);
  }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string read_file(const std::string& relative) {
  std::ifstream in(std::string(PREFBENCH_SOURCE_DIR) + "/" + relative, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + relative);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline prefbench::GridMap load_map(const std::string& name) {
  return prefbench::parse_map(read_file("maps/" + name + ".txt"), name);
}

}  // namespace testing
