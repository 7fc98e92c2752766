#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

#include "v0/v0.hpp"

namespace v0::test {

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("v0_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline ContextPair pair_of(std::string id, double label, Embedding e) {
  return ContextPair{std::move(id), label, std::move(e)};
}

inline CapabilityContext context_of(std::vector<ContextPair> pairs, std::string policy = "p", std::uint64_t step = 0) {
  CapabilityContext c;
  c.policy_id = std::move(policy);
  c.step = step;
  c.pairs = std::move(pairs);
  return c;
}

}  // namespace v0::test
