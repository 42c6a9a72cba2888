#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mvsds/core/common.hpp"

namespace mvsds {

// Insertion-ordered JSON so serialized artifacts are byte-stable.
using Json = nlohmann::ordered_json;

// Floats in artifacts are written with 9 significant digits, enough to
// round-trip float32 exactly. Used by the hand-rolled writers for files
// whose schema pins the float formatting.
inline std::string fmt_f32(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%#.9g", v);
  std::string s(buf);
  if (!s.empty() && s.back() == '.') s.pop_back();  // "%#.9g" of integers
  return s;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  MVSDS_CHECK(in.good(), "cannot open ", path.string());
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  return content;
}

// Atomic write: temp file in the target directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& content) {
  namespace fs = std::filesystem;
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    MVSDS_CHECK(out.good(), "cannot write ", tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    MVSDS_CHECK(out.good(), "write failed for ", tmp.string());
  }
  fs::rename(tmp, path);
}

inline Json load_json_file(const std::filesystem::path& path) {
  return Json::parse(read_text_file(path));
}

inline void save_json_file(const std::filesystem::path& path, const Json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace mvsds
