#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "griddet/lidar_io.hpp"

namespace griddet::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("griddet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline PointCloud random_cloud(std::mt19937_64& rng, size_t n, double lo, double hi, double zlo = -2.0,
                               double zhi = 4.0) {
  std::uniform_real_distribution<double> xy(lo, hi), z(zlo, zhi), u(0.0, 1.0);
  PointCloud c;
  c.frame_id = "random";
  for (size_t i = 0; i < n; ++i) {
    c.points.push_back({static_cast<float>(xy(rng)), static_cast<float>(xy(rng)), static_cast<float>(z(rng)),
                        static_cast<float>(u(rng)), 0.f});
  }
  return c;
}

}  // namespace griddet::testing
