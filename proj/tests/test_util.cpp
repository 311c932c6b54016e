#include "radmap/util.hpp"

#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

using namespace radmap;

TEST_CASE("fnv1a64 reference vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("hello") == 0xa430d84680aabd0bull);
  CHECK(fnv1a64("spde/field1") == 0x4d33258d687cd905ull);
}

TEST_CASE("splitmix64 reference vectors") {
  CHECK(splitmix64(0) == 0xe220a8397b1dcdafull);
  CHECK(splitmix64(1) == 0x910a2dec89025cc1ull);
  CHECK(splitmix64(0xdeadbeefull) == 0x4adfb90f68c9eb9bull);
}

TEST_CASE("rng streams are deterministic and stage-separated") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform01() == b.uniform01());

  RngStream root(7);
  RngStream s1 = root.derive("fields");
  RngStream s2 = root.derive("noise");
  RngStream s1b = RngStream(7).derive("fields");
  bool differ = false;
  for (int i = 0; i < 16; ++i) {
    double x = s1.uniform01();
    CHECK(x == s1b.uniform01());
    if (x != s2.uniform01()) differ = true;
  }
  CHECK(differ);
}

TEST_CASE("uniform01 stays in [0,1) and fills the interval") {
  RngStream rng(1);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    double u = rng.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.001);
  CHECK(hi > 0.999);
}

TEST_CASE("normal deviates match first two moments") {
  RngStream rng(99);
  const int n = 200000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    sum += z;
    sumsq += z * z;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("uniform_index is unbiased over small ranges") {
  RngStream rng(3);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) ++counts[std::size_t(rng.uniform_index(5))];
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
}

TEST_CASE("sample_indices draws distinct sorted-free subsets deterministically") {
  RngStream rng(11);
  auto pick = rng.sample_indices(100, 30);
  CHECK(pick.size() == 30);
  std::set<std::size_t> uniq(pick.begin(), pick.end());
  CHECK(uniq.size() == 30);
  for (std::size_t idx : pick) CHECK(idx < 100);
  RngStream rng2(11);
  CHECK(rng2.sample_indices(100, 30) == pick);
}

TEST_CASE("fmt_double round-trips exactly") {
  std::vector<double> values = {0.0,       1.0,     -1.0,        0.1,      1.0 / 3.0,
                                1e-300,    1e300,   3.141592653589793,     -2.5e-8,
                                123456789.123456789, 0.13966747401529313};
  for (double v : values) {
    double back = 0.0;
    std::sscanf(fmt_double(v).c_str(), "%lf", &back);
    CHECK(back == v);
  }
  CHECK(fmt_double(0.25) == "0.25");
  CHECK(fmt_double(2.0) == "2");
}

TEST_CASE("parallel_for covers every index exactly once") {
  const std::size_t n = 10007;
  std::vector<std::atomic<int>> hits(n);
  for (auto& h : hits) h.store(0);
  parallel_for(n, 4, [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) CHECK(h.load() == 1);
}

TEST_CASE("parallel_for propagates worker exceptions") {
  CHECK_THROWS_AS(parallel_for(100, 3,
                               [&](std::size_t i) {
                                 if (i == 57) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
}
