#include <doctest.h>

#include <cmath>
#include <complex>
#include <vector>

#include "bladca/bladca.hpp"

using namespace bladca;

namespace {

Relation static_rel(StaticMap m) { return Relation{{}, std::move(m), {}}; }

SisoFeedbackNetwork single_cubic(double alpha) {
  return SisoFeedbackNetwork::chain({NonlinearBlock::siso(
      "c", static_rel(StaticMap{StaticMap::Kind::polynomial, {1, 0, alpha}, 1, 1}))});
}

PortNetwork two_port(double s11, std::optional<double> alpha, double g, double s22,
                     std::optional<double> sat_limit = {}, double s12 = 0.0) {
  PortNetwork net;
  auto blk = NonlinearBlock::multiport("amp", 2);
  blk.rel[0][0] = Relation{FrfSpec::constant({s11, 0}), {}, {}};
  if (s12 != 0.0) blk.rel[0][1] = Relation{FrfSpec::constant({s12, 0}), {}, {}};
  if (sat_limit)
    blk.rel[1][0] = Relation{{}, StaticMap{StaticMap::Kind::saturation, {}, 1, *sat_limit},
                             FrfSpec::constant({g, 0})};
  else if (alpha)
    blk.rel[1][0] = Relation{{}, StaticMap{StaticMap::Kind::polynomial, {1, 0, *alpha}, 1, 1},
                             FrfSpec::constant({g, 0})};
  else
    blk.rel[1][0] = Relation{FrfSpec::constant({g, 0}), {}, {}};
  blk.rel[1][1] = Relation{FrfSpec::constant({s22, 0}), {}, {}};
  net.subckts = {blk};
  net.package = PortNetwork::chain_package(1);
  net.z0 = 50.0;
  return net;
}

} // namespace

TEST_CASE("noiseless linear system: exact SIMO estimate, zero covariance, any M and seed") {
  SisoFeedbackNetwork net;
  net.blocks = {NonlinearBlock::siso("f", Relation{FrfSpec::lowpass(40.0, {3.0, 0.0}), {}, {}})};
  net.input_map = {FrfSpec::constant({1, 0})};
  net.output_map = {FrfSpec::constant({1, 0})};
  net.feedback_map = {{FrfSpec::constant({0.2, 0})}};
  auto spec = design_multisine(Rational(10), Rational(10), Rational(200), 0.25, MultisineKind::odd, 5);
  for (auto [m, seed] : {std::pair{2, 1u}, std::pair{9, 77u}}) {
    auto recs = run_experiment(Network(net), spec, {}, m, seed, SolveConfig{});
    auto simo = estimate_simo(recs, "r", {"y.f", "u.f"});
    auto siso = simo_to_siso(simo, 0, 1);
    for (std::size_t b = 0; b < siso.g_bla.size(); ++b) {
      const double f = simo.grid.freq_hz(b);
      const Complex g = FrfSpec::lowpass(40.0, {3.0, 0.0}).eval(f);
      CHECK(std::abs(siso.g_bla[b] - g) <= 1e-12 * std::abs(g));
      CHECK(siso.variance[b] <= 1e-24);
      CHECK(simo.cov[b].cwiseAbs().maxCoeff() <= 1e-24);
    }
  }
}

TEST_CASE("identical records give zero covariance") {
  auto net = single_cubic(0.1);
  auto spec = design_multisine(Rational(1), Rational(1), Rational(20), 0.4, MultisineKind::full, 2);
  auto recs = run_experiment(Network(net), spec, {}, 1, 4, SolveConfig{});
  recs.push_back(recs[0]);
  recs[1].m = 1;
  auto simo = estimate_simo(recs, "r", {"y.c", "u.c"});
  for (const auto& c : simo.cov) CHECK(c.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("covariance is Hermitian with nonnegative real diagonal") {
  auto net = single_cubic(0.2);
  auto spec = design_multisine(Rational(1), Rational(1), Rational(30), 0.5, MultisineKind::full, 6);
  auto recs = run_experiment(Network(net), spec, {}, 24, 8, SolveConfig{});
  auto simo = estimate_simo(recs, "r", {"y.c", "u.c"});
  for (const auto& c : simo.cov) {
    CHECK((c - c.adjoint()).cwiseAbs().maxCoeff() <= 1e-12 * (c.cwiseAbs().maxCoeff() + 1e-300));
    for (int i = 0; i < c.rows(); ++i) {
      CHECK(c(i, i).imag() == 0.0);
      CHECK(c(i, i).real() >= 0.0);
    }
  }
}

TEST_CASE("static cubic BLA matches the Bussgang-type oracle") {
  // y = u + 0.1 u^3 under a 100-line multisine of variance 0.25. For an
  // N-line random-phase multisine the coherent gain is
  //   1 + 3 a s^2 (1 - 1/(2N)),
  // verified against direct cross-spectral Monte-Carlo averaging below.
  const double alpha = 0.1, var = 0.25;
  const int N = 100, M = 2000;
  auto net = single_cubic(alpha);
  auto spec = design_multisine(Rational(1), Rational(1), Rational(N), std::sqrt(var),
                               MultisineKind::full, 3);
  auto recs = run_experiment(Network(net), spec, {}, M, 12345, SolveConfig{});
  auto siso = simo_to_siso(estimate_simo(recs, "r", {"y.c", "u.c"}), 0, 1);

  const double oracle = 1.0 + 3 * alpha * var * (1.0 - 1.0 / (2.0 * N));
  Complex mean(0, 0);
  double var_mean = 0;
  for (std::size_t b = 0; b < siso.g_bla.size(); ++b) {
    mean += siso.g_bla[b];
    var_mean += siso.variance[b];
  }
  mean /= double(N);
  const double sigma_mean = std::sqrt(var_mean) / double(N);
  CHECK(std::abs(mean - Complex(oracle, 0)) < 3.5 * sigma_mean);

  // independent estimator route: cross-spectral averaging sum(Y conj(R)) / sum(U conj(R))
  Complex num(0, 0), den(0, 0);
  for (const auto& rec : recs)
    for (std::int64_t b : rec.grid.sources[0].excited) {
      num += rec.signal("y.c")[static_cast<std::size_t>(b)] * std::conj(rec.signal("r")[static_cast<std::size_t>(b)]);
      den += rec.signal("u.c")[static_cast<std::size_t>(b)] * std::conj(rec.signal("r")[static_cast<std::size_t>(b)]);
    }
  const Complex cross = num / den;
  CHECK(std::abs(cross - mean) < 4.0 * sigma_mean);
}

TEST_CASE("closed-loop BLA of a compressive op-amp model shows ~0.1 dB compression") {
  // Two-stage model: saturating input stage, gain output stage, resistive
  // feedback. The clip level sits near 2.4x the input-referred drive so the
  // closed-loop BLA lands about 0.1 dB below the small-signal response.
  const double a0 = 200.0, m_fb = 0.02;
  const double sigma_u = 0.05 / (1.0 + a0 * m_fb);
  SisoFeedbackNetwork net;
  net.blocks = {NonlinearBlock::siso(
      "op", Relation{{}, StaticMap{StaticMap::Kind::saturation, {}, 1, 2.4 * sigma_u},
                     FrfSpec::constant({a0, 0})})};
  net.input_map = {FrfSpec::constant({1, 0})};
  net.output_map = {FrfSpec::constant({1, 0})};
  net.feedback_map = {{FrfSpec::constant({m_fb, 0})}};
  auto spec = design_multisine(Rational(100), Rational(100), Rational(5000), 0.05,
                               MultisineKind::random_odd, 31);
  SolveConfig cfg;
  cfg.damping = 0.25;
  cfg.max_iter = 400;
  auto recs = run_experiment(Network(net), spec, {}, 64, 9, cfg);
  auto cl = simo_to_siso(estimate_simo(recs, "r", {"y_t", "r"}), 0, 1);
  const double g_ss = a0 / (1.0 + a0 * m_fb);
  double mean_db = 0;
  int n = 0;
  for (std::size_t b = 0; b < cl.g_bla.size(); ++b)
    if (cl.valid[b]) {
      mean_db += 20.0 * std::log10(std::abs(cl.g_bla[b]) / g_ss);
      ++n;
    }
  mean_db /= n;
  CHECK(mean_db < -0.02); // compression, not expansion
  CHECK(mean_db > -0.5);  // of the right order
}

TEST_CASE("scale invariance of the normalized estimate") {
  auto net = single_cubic(0.15);
  auto spec = design_multisine(Rational(1), Rational(1), Rational(16), 0.4, MultisineKind::full, 4);
  auto recs = run_experiment(Network(net), spec, {}, 8, 21, SolveConfig{});
  auto base = simo_to_siso(estimate_simo(recs, "r", {"y.c", "u.c"}), 0, 1);
  const Complex c(0.7, -0.4);
  for (auto& rec : recs)
    for (auto& [name, vals] : rec.signals)
      for (auto& v : vals) v *= c;
  auto scaled = simo_to_siso(estimate_simo(recs, "r", {"y.c", "u.c"}), 0, 1);
  for (std::size_t b = 0; b < base.g_bla.size(); ++b) {
    CHECK(std::abs(scaled.g_bla[b] - base.g_bla[b]) <= 1e-12 * std::abs(base.g_bla[b]));
    CHECK(scaled.variance[b] == doctest::Approx(base.variance[b]).epsilon(1e-9));
  }
}

TEST_CASE("vanishing denominator flags bins instead of failing") {
  auto net = single_cubic(0.1);
  auto spec = design_multisine(Rational(1), Rational(1), Rational(8), 0.4, MultisineKind::full, 4);
  auto recs = run_experiment(Network(net), spec, {}, 4, 2, SolveConfig{});
  for (auto& rec : recs)
    for (auto& [name, vals] : rec.signals)
      if (name == "u.c")
        for (auto& v : vals) v = Complex(0, 0);
  auto siso = simo_to_siso(estimate_simo(recs, "r", {"y.c", "u.c"}), 0, 1);
  for (std::size_t b = 0; b < siso.valid.size(); ++b) CHECK_FALSE(siso.valid[b]);
}

TEST_CASE("affine interpolation between zippered bins is exact") {
  std::vector<double> x{1.0, 2.0, 4.0, 8.0};
  std::vector<Complex> y;
  for (double xi : x) y.emplace_back(0.5 + 2.0 * xi, -1.0 + 0.25 * xi);
  for (double q : {1.5, 3.0, 6.5}) {
    Complex want(0.5 + 2.0 * q, -1.0 + 0.25 * q);
    CHECK(std::abs(detail::interp_complex(x, y, q) - want) < 1e-14);
  }
  CHECK(detail::interp_complex(x, y, 0.5) == y.front()); // endpoint hold
  CHECK(detail::interp_complex(x, y, 9.0) == y.back());
}

TEST_CASE("MIMO BLA of a linear 2-port recovers S exactly") {
  auto net = two_port(0.1, std::nullopt, 0.8, 0.2, {}, 0.05);
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(50000), 0.2,
                               MultisineKind::full, 7);
  auto tick = design_tickler(main, Rational(1000, 3), 2e-4, 8);
  auto recs = run_experiment(Network(net), main, {tick}, 4, 55, SolveConfig{});
  auto mimo = estimate_mimo(recs, "amp", 2, {"r", "r.t1"});
  REQUIRE(mimo.s_bla.size() == main.grid.size());
  for (std::size_t b = 0; b < mimo.s_bla.size(); ++b) {
    CHECK(mimo.valid[b]);
    CHECK(std::abs(mimo.s_bla[b](0, 0) - Complex(0.1, 0)) < 1e-9);
    CHECK(std::abs(mimo.s_bla[b](0, 1) - Complex(0.05, 0)) < 1e-9);
    CHECK(std::abs(mimo.s_bla[b](1, 0) - Complex(0.8, 0)) < 1e-9);
    CHECK(std::abs(mimo.s_bla[b](1, 1) - Complex(0.2, 0)) < 1e-9);
  }
}

TEST_CASE("MIMO BLA of a weak cubic matches the linearization oracle within 3 sigma") {
  const double g = 0.9, eps = 50.0;
  auto net = two_port(0.05, eps, g, 0.1);
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(50000), 0.2,
                               MultisineKind::full, 7);
  auto tick = design_tickler(main, Rational(1000, 3), 2e-4, 8);
  const int M = 200;
  auto recs = run_experiment(Network(net), main, {tick}, M, 99, SolveConfig{});
  auto mimo = estimate_mimo(recs, "amp", 2, {"r", "r.t1"});

  // a1 is exactly the source wave (matched input): variance 0.2^2 / (4 z0)
  const double var_a1 = 0.2 * 0.2 / (4.0 * 50.0);
  const std::size_t nlines = main.grid.size();
  const double oracle =
      g * (1.0 + 3.0 * eps * var_a1 * (1.0 - 1.0 / (2.0 * static_cast<double>(nlines))));
  Complex mean(0, 0);
  double var_mean = 0;
  for (std::size_t b = 0; b < mimo.s_bla.size(); ++b) {
    REQUIRE(mimo.valid[b]);
    mean += mimo.s_bla[b](1, 0);
    var_mean += mimo.entry_variance(b, 2, 1);
  }
  mean /= double(mimo.s_bla.size());
  double sigma_mean = std::sqrt(var_mean) / double(mimo.s_bla.size());
  CHECK(std::abs(mean - Complex(oracle, 0)) < 3.5 * sigma_mean);
  // s11 is linear: estimated exactly up to estimator noise
  CHECK(std::abs(mimo.s_bla[5](0, 0) - Complex(0.05, 0)) < 1e-6);
}

TEST_CASE("saturating 2-port: transmission deviates, input match barely moves") {
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(50000), 0.2,
                               MultisineKind::full, 7);
  const double sigma_a1 = 0.2 / (2.0 * std::sqrt(50.0));
  auto net = two_port(0.05, {}, 1.0, 0.1, {0.5 * sigma_a1});
  auto tick = design_tickler(main, Rational(1000, 3), 2e-4, 8);
  auto recs = run_experiment(Network(net), main, {tick}, 64, 5, SolveConfig{});
  auto mimo = estimate_mimo(recs, "amp", 2, {"r", "r.t1"});
  double dev21 = 0, dev11 = 0;
  for (std::size_t b = 0; b < mimo.s_bla.size(); ++b) {
    dev21 += std::abs(mimo.s_bla[b](1, 0) - Complex(1.0, 0));
    dev11 += std::abs(mimo.s_bla[b](0, 0) - Complex(0.05, 0));
  }
  CHECK(dev21 > 10.0 * dev11);
  CHECK(dev21 / double(mimo.s_bla.size()) > 0.2); // strong compression
}

TEST_CASE("sequential and simultaneous tickler application agree within noise") {
  auto net = two_port(0.05, 20.0, 0.9, 0.1);
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(30000), 0.2,
                               MultisineKind::full, 7);
  auto tick = design_tickler(main, Rational(1000, 3), 2e-4, 8);
  SolveConfig sim;
  SolveConfig seq;
  seq.tickler_mode = SolveConfig::TicklerMode::sequential;
  const int M = 64;
  auto mimo_sim = estimate_mimo(run_experiment(Network(net), main, {tick}, M, 3, sim), "amp", 2,
                                {"r", "r.t1"});
  auto mimo_seq = estimate_mimo(run_experiment(Network(net), main, {tick}, M, 3, seq), "amp", 2,
                                {"r", "r.t1"});
  for (std::size_t b = 0; b < mimo_sim.s_bla.size(); ++b)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double s3 = 3.0 * std::sqrt(mimo_sim.entry_variance(b, i + 1, j + 1) +
                                    mimo_seq.entry_variance(b, i + 1, j + 1));
        CHECK(std::abs(mimo_sim.s_bla[b](i, j) - mimo_seq.s_bla[b](i, j)) <= s3 + 1e-12);
      }
}

TEST_CASE("Kronecker covariance transform reduces to the scalar variance formula at p = 1") {
  PortNetwork net;
  auto blk = NonlinearBlock::multiport("s", 1);
  blk.rel[0][0] = Relation{{}, StaticMap{StaticMap::Kind::polynomial, {1, 0, 30.0}, 1, 1},
                           FrfSpec::constant({0.7, 0})};
  net.subckts = {blk};
  // 1-port package: dim 3; route source -> sub-circuit, load unused
  net.package.assign(3, std::vector<FrfSpec>(3, FrfSpec::constant({0, 0})));
  net.package[0][2] = net.package[2][0] = FrfSpec::constant({1, 0});
  net.z0 = 50.0;
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(30000), 0.2,
                               MultisineKind::full, 7);
  auto recs = run_experiment(Network(net), main, {}, 32, 13, SolveConfig{});
  auto mimo = estimate_mimo(recs, "s", 1, {"r"});
  auto siso = simo_to_siso(estimate_simo(recs, "r", {"b.s.1", "a.s.1"}), 0, 1);
  for (std::size_t b = 0; b < mimo.s_bla.size(); ++b) {
    CHECK(std::abs(mimo.s_bla[b](0, 0) - siso.g_bla[b]) <= 1e-12 * std::abs(siso.g_bla[b]));
    CHECK(mimo.entry_variance(b, 1, 1) == doctest::Approx(siso.variance[b]).epsilon(1e-9));
  }
}

TEST_CASE("small-signal override pins entries and records provenance") {
  auto net = two_port(0.05, {}, 0.9, 0.1);
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(30000), 0.2,
                               MultisineKind::full, 7);
  auto tick = design_tickler(main, Rational(1000, 3), 2e-4, 8);
  auto recs = run_experiment(Network(net), main, {tick}, 4, 55, SolveConfig{});
  auto mimo = estimate_mimo(recs, "amp", 2, {"r", "r.t1"});
  override_entry(mimo, 1, 2, [](double) { return Complex(0.011, -0.002); }, "bench AC sweep");
  for (std::size_t b = 0; b < mimo.s_bla.size(); ++b)
    CHECK(mimo.s_bla[b](0, 1) == Complex(0.011, -0.002));
  REQUIRE(mimo.overrides.size() == 1);
  CHECK(mimo.overrides[0].find("S(1,2)") != std::string::npos);
  CHECK(mimo.overrides[0].find("bench AC sweep") != std::string::npos);
  CHECK_THROWS_AS(override_entry(mimo, 3, 1, [](double) { return Complex(0, 0); }), ValidationError);
}

TEST_CASE("too few references is a structural error") {
  auto net = two_port(0.05, 20.0, 0.9, 0.1);
  auto main = design_multisine(Rational(1000), Rational(10000), Rational(30000), 0.2,
                               MultisineKind::full, 7);
  auto recs = run_experiment(Network(net), main, {}, 4, 3, SolveConfig{});
  CHECK_THROWS_AS(estimate_mimo(recs, "amp", 2, {"r"}), ValidationError);
}

TEST_CASE("realization budget loop") {
  // noiseless linear closure: attained at the first batch
  auto lin = realization_budget([](int) { return 0.0; }, 1e-6, 16, 256);
  CHECK(lin.attained);
  CHECK(lin.m_used == 16);

  // 1/sqrt(M) decay reaches the target eventually
  auto decay = realization_budget([](int m) { return 1.0 / std::sqrt(double(m)); }, 0.11, 16, 256);
  CHECK(decay.attained);
  CHECK(decay.m_used == 96);

  // unattainable target: reports max_M with the non-attainment flag
  auto cap = realization_budget([](int m) { return 1.0 / std::sqrt(double(m)); }, 1e-6, 16, 64);
  CHECK_FALSE(cap.attained);
  CHECK(cap.m_used == 64);
  CHECK(cap.sigma_max == doctest::Approx(0.125));
}
