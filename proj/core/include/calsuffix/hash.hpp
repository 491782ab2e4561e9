#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

#include <Eigen/Core>

namespace calsuffix {

// FNV-1a, 64 bit. Used for content fingerprints (parameters, masks,
// configs); not a cryptographic hash.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void update(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void update_value(T v) {
    update(&v, sizeof(v));
  }
  void update(const Eigen::MatrixXd& m) {
    update_value<std::int64_t>(m.rows());
    update_value<std::int64_t>(m.cols());
    update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex_digest(std::uint64_t h);

}  // namespace calsuffix
