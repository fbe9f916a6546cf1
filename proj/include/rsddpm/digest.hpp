#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace rsddpm {

/// Incremental SHA-256 (OpenSSL EVP underneath).
class Sha256 {
 public:
  using Digest = std::array<std::uint8_t, 32>;

  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n);
  void update(std::string_view s) { update(s.data(), s.size()); }
  Digest finish();

  static Digest of(const void* data, std::size_t n);
  static std::string hex(const Digest& d);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace rsddpm
