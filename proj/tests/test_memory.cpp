#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "check_util.hpp"
#include "elmur/memory.hpp"
#include "elmur/memory_theory.hpp"

using namespace elmur;
using TD = Tensor<double>;

namespace {

TD constant_candidates(int b, int m, int d, double value) { return TD::full({b, m, d}, value); }

}  // namespace

TEST_CASE("lru_init") {
  LruConfig zero{3, 0.5, 0.0};
  auto s = lru_init<double>(zero, 2, 4, 1);
  for (double v : s.m.values()) CHECK(v == 0.0);
  for (auto a : s.anchors) CHECK(a == kEmptyAnchor);
  CHECK(s.m.shape() == Shape{2, 3, 4});

  LruConfig cfg{10, 0.5, 0.02};
  auto big = lru_init<double>(cfg, 10, 100, 7);
  double mean = 0, var = 0;
  const double n = static_cast<double>(big.m.numel());
  for (double v : big.m.values()) mean += v;
  mean /= n;
  for (double v : big.m.values()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (n - 1));
  CHECK(std::abs(mean) < 3 * 0.02 / std::sqrt(n));
  CHECK(std::abs(sd - 0.02) < 3 * 0.02 / std::sqrt(2 * (n - 1)));

  auto again = lru_init<double>(cfg, 10, 100, 7);
  for (std::size_t i = 0; i < big.m.numel(); ++i) CHECK(again.m.values()[i] == big.m.values()[i]);
  CHECK_THROWS(lru_init<double>(LruConfig{0, 0.5, 0.0}, 1, 1, 0));
  CHECK_THROWS(lru_init<double>(LruConfig{1, 1.5, 0.0}, 1, 1, 0));
}

TEST_CASE("first write fills slot 0 completely") {
  LruConfig cfg{3, 0.05, 0.1};
  auto s = lru_init<double>(cfg, 1, 2, 3);
  TD u({1, 3, 2}, {1, 2, 3, 4, 5, 6});
  auto s2 = lru_update(s, u, 0, cfg);
  CHECK(s2.anchors == std::vector<std::int64_t>{0, kEmptyAnchor, kEmptyAnchor});
  CHECK(s2.m.values()[0] == 1.0);
  CHECK(s2.m.values()[1] == 2.0);
  for (int i = 2; i < 6; ++i) CHECK(s2.m.values()[i] == s.m.values()[i]);
  CHECK(s2.writes == 1);
}

TEST_CASE("fill order, argmin selection, one anchor per update, untouched slots exact") {
  Rng rng(4);
  for (int slots : {1, 2, 3, 5}) {
    LruConfig cfg{slots, 0.3, 0.5};
    auto s = lru_init<double>(cfg, 1, 3, slots);
    std::int64_t t = 0;
    for (int step = 0; step < 4 * slots + 3; ++step) {
      t += rng.uniform_int(1, 4);
      auto u = testutil::random_tensor({1, slots, 3}, rng, false);
      int expect_slot = -1;
      double expect_alpha = 0;
      if (step < slots) {
        expect_slot = step;
        expect_alpha = 1.0;
      } else {
        expect_slot = 0;
        for (int j = 1; j < slots; ++j)
          if (s.anchors[j] < s.anchors[expect_slot]) expect_slot = j;
        expect_alpha = 0.3;
      }
      auto s2 = lru_update(s, u, t, cfg);
      int changed = 0;
      for (int j = 0; j < slots; ++j) {
        if (s2.anchors[j] != s.anchors[j]) ++changed;
        for (int i = 0; i < 3; ++i) {
          const double before = s.m.values()[j * 3 + i], after = s2.m.values()[j * 3 + i];
          if (j == expect_slot)
            CHECK(after == doctest::Approx(expect_alpha * u.values()[j * 3 + i] + (1 - expect_alpha) * before).epsilon(1e-14));
          else
            CHECK(after == before);
        }
      }
      CHECK(changed == 1);
      CHECK(s2.anchors[expect_slot] == t);
      s = s2;
    }
  }
}

TEST_CASE("ties go to the lowest slot index") {
  std::vector<std::int64_t> anchors{5, 3, 3, 4};
  CHECK(lru_choose(anchors, 0.1).slot == 1);
  CHECK(lru_choose(anchors, 0.1).alpha == 0.1);
  anchors = {5, kEmptyAnchor, 3, kEmptyAnchor};
  CHECK(lru_choose(anchors, 0.1).slot == 1);
  CHECK(lru_choose(anchors, 0.1).alpha == 1.0);
  CHECK(lru_choose(anchors, 0.1, WritePolicy::SlotZero).slot == 0);
}

TEST_CASE("blend extremes") {
  for (double lambda : {0.0, 1.0}) {
    LruConfig cfg{2, lambda, 0.0};
    auto s = lru_init<double>(cfg, 1, 2, 0);
    s = lru_update(s, constant_candidates(1, 2, 2, 1.0), 0, cfg);
    s = lru_update(s, constant_candidates(1, 2, 2, 2.0), 1, cfg);
    auto s3 = lru_update(s, TD({1, 2, 2}, {9, 8, 7, 6}), 2, cfg);
    CHECK(s3.anchors == std::vector<std::int64_t>{2, 1});
    if (lambda == 0.0) {
      CHECK(s3.m.values()[0] == 1.0);
      CHECK(s3.m.values()[1] == 1.0);
    } else {
      CHECK(s3.m.values()[0] == 9.0);
      CHECK(s3.m.values()[1] == 8.0);
    }
  }
}

TEST_CASE("write times must increase") {
  LruConfig cfg{2, 0.5, 0.0};
  auto s = lru_init<double>(cfg, 1, 1, 0);
  s = lru_update(s, constant_candidates(1, 2, 1, 1.0), 4, cfg);
  CHECK_THROWS_AS(lru_update(s, constant_candidates(1, 2, 1, 1.0), 4, cfg), std::invalid_argument);
  CHECK_THROWS_AS(lru_update(s, constant_candidates(1, 2, 1, 1.0), 2, cfg), std::invalid_argument);
  CHECK_THROWS_AS(lru_update(lru_init<double>(cfg, 1, 1, 0), constant_candidates(1, 2, 1, 1.0), -1, cfg),
                  std::invalid_argument);
}

TEST_CASE("batch rows are independent and inactive rows untouched") {
  LruConfig cfg{2, 0.5, 0.1};
  auto s = lru_init<double>(cfg, 2, 2, 5);
  std::vector<std::int64_t> t{3, 7};
  std::vector<std::uint8_t> active{1, 0};
  auto s2 = lru_update(s, constant_candidates(2, 2, 2, 1.0), t, cfg, WritePolicy::Lru, active);
  CHECK(s2.anchors == std::vector<std::int64_t>{3, kEmptyAnchor, kEmptyAnchor, kEmptyAnchor});
  for (int i = 4; i < 8; ++i) CHECK(s2.m.values()[i] == s.m.values()[i]);
}

TEST_CASE("slot-zero policy always blends slot 0") {
  LruConfig cfg{3, 0.25, 0.0};
  auto s = lru_init<double>(cfg, 1, 1, 0);
  for (int t = 0; t < 4; ++t) s = lru_update(s, TD({1, 3, 1}, {1, 1, 1}), t, cfg, WritePolicy::SlotZero);
  CHECK(s.m.values()[0] == doctest::Approx(1 - std::pow(0.75, 4)).epsilon(1e-14));
  CHECK(s.m.values()[1] == 0.0);
  CHECK(s.anchors == std::vector<std::int64_t>{3, kEmptyAnchor, kEmptyAnchor});
}

TEST_CASE("lru blend gradient") {
  Rng rng(6);
  LruConfig cfg{2, 0.3, 0.0};
  auto base = lru_init<double>(cfg, 2, 3, 0);
  std::vector<std::int64_t> t1{0, 0}, t2{1, 1}, t3{2, 5};
  base = lru_update(base, testutil::random_tensor({2, 2, 3}, rng, false), t1, cfg);
  base = lru_update(base, testutil::random_tensor({2, 2, 3}, rng, false), t2, cfg);
  auto m = testutil::random_tensor({2, 2, 3}, rng), u = testutil::random_tensor({2, 2, 3}, rng);
  auto w = testutil::random_tensor({2, 2, 3}, rng, false);
  auto f = [&] {
    MemoryState<double> s{m, base.anchors};
    return sum(mul(lru_update(s, u, t3, cfg).m, w));
  };
  CHECK(testutil::gradcheck(f, {m, u}) < 1e-6);
}

TEST_CASE("forgetting coefficients") {
  auto w0 = theory::forgetting_coefficients(0.3, 0);
  CHECK(w0.initial == 1.0);
  CHECK(w0.writes.empty());
  auto w = theory::forgetting_coefficients(0.5, 2);
  CHECK(w.initial == 0.25);
  CHECK(w.writes == std::vector<double>{0.25, 0.5});

  // chained lru_update on a single scalar slot with one-hot histories
  LruConfig cfg{1, 0.5, 0.0};
  for (int source = 0; source < 3; ++source) {
    auto s = lru_init<double>(cfg, 1, 1, 0);
    s = lru_update(s, TD({1, 1, 1}, {source == 0 ? 1.0 : 0.0}), 0, cfg);
    for (int u = 1; u <= 2; ++u) s = lru_update(s, TD({1, 1, 1}, {source == u ? 1.0 : 0.0}), u, cfg);
    const double expect = source == 0 ? w.initial : w.writes[source - 1];
    CHECK(s.m.values()[0] == expect);
  }

  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const double lambda = rng.uniform();
    const int k = rng.uniform_int(0, 60);
    auto c = theory::forgetting_coefficients(lambda, k);
    double s = c.initial;
    CHECK(c.initial >= 0);
    for (double x : c.writes) {
      CHECK(x >= 0);
      s += x;
    }
    CHECK(std::abs(s - 1) < 1e-12);
  }
}

TEST_CASE("half life") {
  CHECK(theory::half_life(0.5) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(theory::half_life(1.0) == 0.0);
  const double h = theory::half_life(1e-3);
  CHECK(h == doctest::Approx(692.8).epsilon(1e-4));
  CHECK(std::abs(h - std::log(2.0) / 1e-3) / (std::log(2.0) / 1e-3) < 1e-3);
  for (double lambda : {0.05, 0.2, 0.5, 0.8}) {
    int k = 0;
    double w = 1;
    while (w > 0.5) {
      w *= 1 - lambda;
      ++k;
    }
    CHECK(k == static_cast<int>(std::ceil(theory::half_life(lambda) - 1e-12)));
  }
  CHECK_THROWS_AS(theory::half_life(0.0), std::domain_error);
  CHECK_THROWS_AS(theory::half_life(-0.1), std::domain_error);
}

TEST_CASE("effective horizon") {
  CHECK(theory::effective_horizon(1, 1, 0.5, 0.5) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(theory::effective_horizon(2, 10, 0.05, 0.5) == doctest::Approx(20 * std::log(0.5) / std::log(0.95)).epsilon(1e-14));
  CHECK(theory::effective_horizon(2, 10, 0.05, 1.0) == 0.0);
  CHECK_THROWS_AS(theory::effective_horizon(2, 10, 0.0, 0.5), std::domain_error);
  CHECK_THROWS_AS(theory::effective_horizon(2, 10, 1.0, 0.5), std::domain_error);
  CHECK_THROWS_AS(theory::effective_horizon(2, 10, 0.5, 0.0), std::domain_error);
}

TEST_CASE("boundedness") {
  CHECK(theory::verify_boundedness(1.0, 0.5, 10000, 1) <= 1.0 + 1e-9);
  CHECK(theory::verify_boundedness(3.0, 0.9, 2000, 2) <= 3.0 + 1e-9);

  // lambda = 0: once full, content never changes
  LruConfig cfg{1, 0.0, 0.0};
  auto s = lru_init<double>(cfg, 1, 2, 0);
  s = lru_update(s, TD({1, 1, 2}, {0.6, 0.8}), 0, cfg);
  for (int t = 1; t < 50; ++t) s = lru_update(s, TD({1, 1, 2}, {-1.0, 0.0}), t, cfg);
  CHECK(s.m.values()[0] == 0.6);
  CHECK(s.m.values()[1] == 0.8);

  // single slot, alternating +-C e1, full overwrite
  LruConfig full{1, 1.0, 0.0};
  auto f = lru_init<double>(full, 1, 2, 0);
  for (int t = 0; t < 20; ++t) {
    f = lru_update(f, TD({1, 1, 2}, {t % 2 ? -2.0 : 2.0, 0.0}), t, full);
    CHECK(std::hypot(f.m.values()[0], f.m.values()[1]) == 2.0);
  }
}

TEST_CASE("theory check routines") {
  for (const auto& c : theory::check_forgetting({0.05, 0.2, 0.5, 0.8, 1.0}, 50, 1)) CHECK_MESSAGE(c.passed, c.name, ": ", c.detail);
  for (const auto& c : theory::check_half_life({0.05, 0.2, 0.5, 0.8, 1.0})) CHECK_MESSAGE(c.passed, c.name, ": ", c.detail);
  for (const auto& c : theory::check_boundedness({0.1, 0.5, 0.9}, 2000, 1)) CHECK_MESSAGE(c.passed, c.name, ": ", c.detail);

  // 20 * ln 2 / -ln 0.95 = 270.2681...
  auto h = theory::check_horizon(2, 10, 0.05, 0.5, 270.2681, 0.001);
  CHECK(h[0].passed);
  CHECK(h[1].passed);
  CHECK(h[1].detail.find("crossed at step 280") != std::string::npos);
  CHECK_FALSE(theory::check_horizon(2, 10, 0.05, 0.5, 270.30, 0.01)[0].passed);
}
