#include "trajmask/common.hpp"

#include <fstream>
#include <sstream>

namespace trajmask {

std::string hex_u64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string Fnv1a::hex() const { return hex_u64(h_); }

uint64_t fnv1a_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "missing-file", "cannot open '" + path + "'");
  Fnv1a h;
  char buf[65536];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0)
    h.update(buf, static_cast<size_t>(is.gcount()));
  return h.digest();
}

}  // namespace trajmask
