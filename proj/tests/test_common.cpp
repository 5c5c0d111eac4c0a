#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "trajmask/common.hpp"

using namespace trajmask;

TEST_CASE("error carries a stable code") {
  try {
    fail("config-error", "bad thing");
  } catch (const Error& e) {
    CHECK(e.code() == "config-error");
    CHECK(std::string(e.what()) == "config-error: bad thing");
  }
}

TEST_CASE("derive_seed separates streams") {
  std::set<uint64_t> seen;
  for (uint64_t s : {0ull, 1ull, 42ull})
    for (uint64_t stream = 0; stream < 8; ++stream) seen.insert(derive_seed(s, stream));
  CHECK(seen.size() == 24);  // no collisions across seeds or streams
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));
}

TEST_CASE("rng determinism and ranges") {
  Rng a(123), b(123);
  for (int i = 0; i < 1000; ++i) {
    double u = a.uniform01();
    CHECK(u == b.uniform01());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  Rng c(5);
  for (int i = 0; i < 1000; ++i) {
    int v = c.uniform_int(7);
    CHECK(v >= 0);
    CHECK(v < 7);
  }
}

TEST_CASE("uniform_int is unbiased enough over small n") {
  Rng r(99);
  const int n = 5, draws = 100000;
  std::vector<int> counts(n, 0);
  for (int i = 0; i < draws; ++i) counts[r.uniform_int(n)]++;
  // each bin expected 20000, sd ~ sqrt(draws * p (1-p)) ~ 126.5; allow 5 sd
  for (int c : counts) CHECK(std::abs(c - draws / n) < 650);
}

TEST_CASE("normal has roughly unit moments") {
  Rng r(7);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    double x = r.normal();
    sum += x;
    sq += x * x;
  }
  double mean = sum / n, var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.03);
}

TEST_CASE("categorical respects weights") {
  Rng r(11);
  std::vector<double> w = {1.0, 3.0};
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    if (r.categorical(w) == 1) ++hits;
  CHECK(std::abs(hits / double(n) - 0.75) < 0.01);
}

TEST_CASE("fnv1a matches known vectors") {
  // Reference values for the 64-bit FNV-1a parameters.
  Fnv1a h;
  CHECK(h.digest() == 0xcbf29ce484222325ull);  // offset basis for empty input
  Fnv1a h2;
  const char* s = "a";
  h2.update(s, 1);
  CHECK(h2.digest() == 0xaf63dc4c8601ec8cull);
  Fnv1a h3;
  const char* fb = "foobar";
  h3.update(fb, 6);
  CHECK(h3.digest() == 0x85944171f73967e8ull);
}

TEST_CASE("fnv1a_file streams the same digest as one-shot") {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / "trajmask_fnv_test.bin";
  std::string blob(300000, 'x');
  for (size_t i = 0; i < blob.size(); ++i) blob[i] = char(i * 31 + 7);
  {
    std::ofstream f(p, std::ios::binary);
    f.write(blob.data(), std::streamsize(blob.size()));
  }
  Fnv1a h;
  h.update(blob.data(), blob.size());
  CHECK(fnv1a_file(p.string()) == h.digest());
  CHECK(hex_u64(h.digest()).size() == 16);
  fs::remove(p);
}
