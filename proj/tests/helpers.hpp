#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "proqe/kg.hpp"
#include "proqe/rng.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("proqe_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Random graph with every entity and relation present in the id spaces.
inline proqe::KnowledgeGraph random_kg(std::size_t n, std::size_t r, std::size_t triples,
                                       std::uint64_t seed) {
  proqe::Rng rng(seed);
  std::vector<proqe::Triple> t;
  for (std::size_t i = 0; i < triples; ++i)
    t.push_back({static_cast<proqe::EntityId>(proqe::uniform_index(rng, n)),
                 static_cast<proqe::RelationId>(proqe::uniform_index(rng, r)),
                 static_cast<proqe::EntityId>(proqe::uniform_index(rng, n))});
  return proqe::KnowledgeGraph(proqe::Vocab::numbered("e", n), proqe::Vocab::numbered("r", r),
                               std::move(t));
}

}  // namespace testing
