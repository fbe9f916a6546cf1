#include "rsddpm/digest.hpp"

#include <openssl/evp.h>

#include <stdexcept>

namespace rsddpm {

struct Sha256::Impl {
  EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
  impl_->ctx = EVP_MD_CTX_new();
  if (!impl_->ctx || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: EVP initialisation failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(impl_->ctx); }

void Sha256::update(const void* data, std::size_t n) {
  if (EVP_DigestUpdate(impl_->ctx, data, n) != 1) throw std::runtime_error("sha256: update failed");
}

Sha256::Digest Sha256::finish() {
  Digest d{};
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(impl_->ctx, d.data(), &len) != 1 || len != d.size()) {
    throw std::runtime_error("sha256: finalisation failed");
  }
  return d;
}

Sha256::Digest Sha256::of(const void* data, std::size_t n) {
  Sha256 h;
  h.update(data, n);
  return h.finish();
}

std::string Sha256::hex(const Digest& d) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : d) {
    s.push_back(kHex[b >> 4]);
    s.push_back(kHex[b & 0xf]);
  }
  return s;
}

}  // namespace rsddpm
