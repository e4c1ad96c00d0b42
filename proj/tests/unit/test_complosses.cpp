#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "czsl/complosses.hpp"
#include "czsl/compspace.hpp"
#include "czsl/log.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace czsl;
using testing::random_matrix;
using testing::relative_error;
using namespace czsl::testing;

namespace {

// Suppresses expected warnings for the duration of a test.
struct QuietWarnings {
  QuietWarnings() : previous(set_warning_sink([](const std::string&) {})) {}
  ~QuietWarnings() { set_warning_sink(previous); }
  WarningSink previous;
};

}  // namespace

TEST_SUITE("complosses") {

TEST_CASE("compositional smoothing: red cube against four classes") {
  const auto s = CompositionSpace::build({"red", "blue"}, {"cube", "sphere"});
  const std::vector<std::optional<Composition>> gt = {s.parse("red cube")};
  const std::vector<Composition> classes = {s.parse("red cube"), s.parse("blue cube"),
                                            s.parse("red sphere"), s.parse("blue sphere")};
  const Eigen::MatrixXd y = smooth_targets(s, gt, classes, SmoothingPolicy{});
  REQUIRE(y.rows() == 1);
  CHECK(y(0, 0) == 1.0);
  CHECK(y(0, 1) == doctest::Approx(0.2));
  CHECK(y(0, 2) == doctest::Approx(0.2));
  CHECK(y(0, 3) == 0.0);

  SmoothingPolicy conv;
  conv.mode = SmoothingMode::conventional;
  const Eigen::MatrixXd c = smooth_targets(s, gt, classes, conv);
  CHECK(c(0, 0) == doctest::Approx(0.925));
  for (int j = 1; j < 4; ++j) CHECK(c(0, j) == doctest::Approx(0.025));

  SmoothingPolicy none;
  none.mode = SmoothingMode::none;
  const Eigen::MatrixXd o = smooth_targets(s, gt, classes, none);
  CHECK(o(0, 0) == 1.0);
  CHECK(o.row(0).sum() == 1.0);
}

TEST_CASE("smoothing: background rows are zero, asymmetric weights route by match") {
  const auto& s = default_manifest().space;
  const auto classes = s.compositions();
  SmoothingPolicy p;
  p.p_object = 0.3;
  p.p_attribute = 0.05;
  const std::vector<std::optional<Composition>> gt = {std::nullopt, s.parse("green cube")};
  const Eigen::MatrixXd y = smooth_targets(s, gt, classes, p);
  CHECK(y.row(0).isZero());
  CHECK(y(1, s.id(s.parse("red cube"))) == doctest::Approx(0.3));
  CHECK(y(1, s.id(s.parse("green sphere"))) == doctest::Approx(0.05));
  CHECK(y(1, s.id(s.parse("red sphere"))) == 0.0);

  p.p_object = 1.5;
  CHECK_THROWS_AS(smooth_targets(s, gt, classes, p), ValidationError);
  CHECK(parse_smoothing_mode(to_string(SmoothingMode::conventional)) == SmoothingMode::conventional);
}

TEST_CASE("BCE of p=0.5 against y=1 is ln 2; shapes must agree") {
  Eigen::MatrixXd p(1, 1), y(1, 1);
  p << 0.5;
  y << 1.0;
  CHECK(classification_loss(p, y) == doctest::Approx(0.693147).epsilon(1e-6));
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 1);
  CHECK(classification_loss_from_logits(z, y).value == doctest::Approx(std::log(2.0)));
  CHECK(classification_loss_from_logits(z, y).gradient(0, 0) == doctest::Approx(-0.5));
  CHECK_THROWS_AS(classification_loss(Eigen::MatrixXd(2, 1), y), ShapeError);
  // Saturated probabilities with matching hard labels stay finite.
  Eigen::MatrixXd sat(1, 2), hard(1, 2);
  sat << 1.0, 0.0;
  hard << 1.0, 0.0;
  CHECK(classification_loss(sat, hard) == 0.0);
}

TEST_CASE("orthogonality: orthogonal 0, identical 1, 45 degrees 0.70711, single row 0") {
  QuietWarnings quiet;
  Eigen::MatrixXd orth(2, 2), same(2, 2), tilt(2, 2);
  orth << 1, 0, 0, 1;
  same << 1, 0, 3, 0;
  tilt << 1, 0, 1, 1;
  CHECK(orthogonality_loss(orth) == doctest::Approx(0.0));
  CHECK(orthogonality_loss(same) == doctest::Approx(1.0));
  CHECK(orthogonality_loss(tilt) == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(orthogonality_loss(Eigen::MatrixXd::Ones(1, 3)) == 0.0);
  // Antiparallel rows count like parallel ones.
  Eigen::MatrixXd anti(2, 2);
  anti << 1, 0, -1, 0;
  CHECK(orthogonality_loss(anti) == doctest::Approx(1.0));
}

TEST_CASE("distance: unit separation 0, opposite centroids -ln 2, coincident at the floor") {
  Eigen::MatrixXd a(1, 2), o(2, 2);
  a << 1, 0;
  o << 0, 1, 0, -1;
  CHECK(distance_loss(a, o) == doctest::Approx(0.0).epsilon(1e-12));
  Eigen::MatrixXd opp(1, 2);
  opp << -4, 0;  // scale is irrelevant after normalization
  CHECK(distance_loss(a, opp) == doctest::Approx(-0.693147).epsilon(1e-6));
  CHECK(distance_loss(a, a) == doctest::Approx(-std::log(1e-8)));
  CHECK_THROWS_AS(distance_loss(Eigen::MatrixXd(0, 2), o), ValidationError);
}

TEST_CASE("HSIC on three scalar samples by hand") {
  Eigen::MatrixXd x(3, 1), y(3, 1), r(3, 1), c(3, 1);
  x << 1, 2, 3;
  y << 2, 4, 6;
  r << 3, 2, 1;
  c << 5, 5, 5;
  // Centred x is (-1, 0, 1); tr(KHLH) = (x_c . y_c)^2, divided by (n-1)^2 = 4.
  CHECK(hsic(x, x) == doctest::Approx(1.0));
  CHECK(hsic(x, y) == doctest::Approx(4.0));
  CHECK(hsic(x, r) == doctest::Approx(1.0));
  CHECK(hsic(x, c) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK_THROWS_AS(hsic(Eigen::MatrixXd(1, 1), Eigen::MatrixXd(1, 1)), ValidationError);
  CHECK_THROWS_AS(hsic(x, Eigen::MatrixXd(2, 1)), ShapeError);
}

TEST_CASE("HSIC is symmetric and vanishes for constant samples") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd x = random_matrix(6, 4, rng);
    const Eigen::MatrixXd y = random_matrix(6, 3, rng);
    CHECK(relative_error(hsic(x, y), hsic(y, x)) < 1e-12);
    const Kernel g = Kernel::gaussian(1.3);
    CHECK(relative_error(hsic(x, y, g), hsic(y, x, g)) < 1e-12);
    Eigen::MatrixXd constant(6, 3);
    constant.rowwise() = y.row(0);
    CHECK(std::abs(hsic(x, constant)) < 1e-12);
    CHECK(std::abs(hsic(x, constant, g)) < 1e-12);
    CHECK(hsic(x, x) >= -1e-12);
  }
}

TEST_CASE("loss values agree with long double references on random inputs") {
  QuietWarnings quiet;
  Rng rng(2024);
  for (int trial = 0; trial < 120; ++trial) {
    const auto n = static_cast<Eigen::Index>(rng.uniform_int(2, 9));
    const auto d = static_cast<Eigen::Index>(rng.uniform_int(2, 12));
    const Eigen::MatrixXd z = random_matrix(n, d, rng, 3.0);
    Eigen::MatrixXd y(n, d);
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = rng.uniform();
    CHECK(relative_error(classification_loss_from_logits(z, y).value, static_cast<double>(bce_oracle(z, y))) <
          1e-10);

    const Eigen::MatrixXd e = random_matrix(n, d, rng);
    CHECK(relative_error(orthogonality_loss(e), static_cast<double>(orthogonality_oracle(e))) < 1e-10);

    const Eigen::MatrixXd o = random_matrix(static_cast<Eigen::Index>(rng.uniform_int(1, 5)), d, rng);
    CHECK(relative_error(distance_loss(e, o), static_cast<double>(distance_oracle(e, o))) < 1e-10);

    const Eigen::MatrixXd x = random_matrix(n, d, rng);
    const Eigen::MatrixXd w = random_matrix(n, d + 1, rng);
    CHECK(relative_error(hsic(x, w), static_cast<double>(hsic_oracle(linear_gram(x), linear_gram(w)))) < 1e-10);
    const double bw = rng.uniform(0.5, 3.0);
    CHECK(relative_error(hsic(x, w, Kernel::gaussian(bw)),
                         static_cast<double>(hsic_oracle(gaussian_gram(x, bw), gaussian_gram(w, bw)))) < 1e-10);
  }
}

TEST_CASE("median bandwidth matches a sorted scan") {
  Eigen::MatrixXd x(4, 1);
  x << 0, 1, 3, 7;
  // Pairwise distances 1,3,7,2,6,4 -> sorted 1,2,3,4,6,7 -> median 3.5.
  CHECK(median_bandwidth(x) == doctest::Approx(3.5));
  Eigen::MatrixXd same = Eigen::MatrixXd::Ones(3, 2);
  CHECK(median_bandwidth(same) == 1.0);
}

TEST_CASE("separation terms are the weighted sub-losses and sum to the total") {
  Rng rng(5);
  const TokenTable t(random_matrix(6, 8, rng), random_matrix(3, 8, rng));
  SeparationWeights w;
  const SeparationResult r = separation_loss(t, w);
  CHECK(r.distance == doctest::Approx(0.1 * distance_loss(t.attributes(), t.objects())));
  CHECK(r.attribute == doctest::Approx(0.1 * orthogonality_loss(t.attributes())));
  CHECK(r.object == doctest::Approx(0.1 * orthogonality_loss(t.objects())));
  CHECK(r.total == doctest::Approx(r.distance + r.attribute + r.object));

  SeparationWeights doubled = w;
  doubled.attribute = 0.2;
  const SeparationResult r2 = separation_loss(t, doubled);
  CHECK(r2.attribute == doctest::Approx(2 * r.attribute));
  CHECK(r2.distance == r.distance);
  CHECK(r2.object == r.object);

  SeparationWeights off{0, 0, 0, 0};
  const SeparationResult z = separation_loss(t, off);
  CHECK(z.total == 0.0);
  CHECK(z.gradient.attributes.isZero());
  CHECK(z.gradient.objects.isZero());

  SeparationWeights bad = w;
  bad.distance = -1;
  CHECK_THROWS_AS(separation_loss(t, bad), ValidationError);
}

TEST_CASE("decorrelation pairs each instance's object and attribute rows") {
  const auto& s = default_manifest().space;
  Rng rng(8);
  const TokenTable t(random_matrix(6, 8, rng), random_matrix(3, 8, rng));
  const std::vector<Composition> batch = {s.parse("red cube"), s.parse("blue sphere"), s.parse("green cylinder"),
                                          s.parse("red sphere")};
  Eigen::MatrixXd objs(4, 8), attrs(4, 8);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    objs.row(static_cast<Eigen::Index>(i)) = t.objects().row(batch[i].object);
    attrs.row(static_cast<Eigen::Index>(i)) = t.attributes().row(batch[i].attribute);
  }
  const LD expected = hsic_oracle(linear_gram(unit_rows(objs)), linear_gram(unit_rows(attrs)));
  SeparationWeights w;
  w.hsic = 2.5;
  CHECK(relative_error(decorrelation_loss(t, batch, w).value, 2.5 * static_cast<double>(expected)) < 1e-10);

  const std::vector<Composition> one = {s.parse("red cube")};
  CHECK(decorrelation_loss(t, one, w).value == 0.0);
  CHECK(decorrelation_loss(t, one, w).gradient.attributes.isZero());
}

TEST_CASE("total loss breakdown sums to the total") {
  const auto& s = default_manifest().space;
  Rng rng(12);
  const TokenTable t(random_matrix(6, 8, rng), random_matrix(3, 8, rng));
  const std::vector<Composition> batch = {s.parse("red cube"), s.parse("blue sphere"), s.parse("green cylinder")};
  const Eigen::MatrixXd logits = random_matrix(3, 18, rng);
  const std::vector<std::optional<Composition>> gt(batch.begin(), batch.end());
  const Eigen::MatrixXd y = smooth_targets(s, gt, s.compositions(), SmoothingPolicy{});
  const TotalLoss l = total_loss(logits, y, t, batch, SeparationWeights{});
  CHECK(l.breakdown.total == doctest::Approx(l.breakdown.sum_of_terms()).epsilon(1e-14));
  CHECK(l.breakdown.classification == doctest::Approx(classification_loss_from_logits(logits, y).value));
  CHECK(l.breakdown.hsic == doctest::Approx(decorrelation_loss(t, batch, SeparationWeights{}).value));
  CHECK(l.grad_logits.rows() == 3);
}

TEST_CASE("analytic gradients match central differences") {
  QuietWarnings quiet;
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::MatrixXd z = random_matrix(4, 5, rng, 2.0);
    Eigen::MatrixXd y(4, 5);
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = rng.uniform();
    CHECK(gradient_error(classification_loss_from_logits(z, y).gradient,
                         numeric_gradient([&](const Eigen::MatrixXd& m) {
                           return classification_loss_from_logits(m, y).value;
                         }, z)) < 1e-6);

    const Eigen::MatrixXd e = random_matrix(5, 6, rng);
    CHECK(gradient_error(orthogonality_loss_with_gradient(e).gradient,
                         numeric_gradient([](const Eigen::MatrixXd& m) { return orthogonality_loss(m); }, e)) <
          1e-6);

    const Eigen::MatrixXd a = random_matrix(4, 6, rng);
    const Eigen::MatrixXd o = random_matrix(3, 6, rng);
    const auto dist = distance_loss_with_gradient(a, o);
    CHECK(gradient_error(dist.grad_attributes,
                         numeric_gradient([&](const Eigen::MatrixXd& m) { return distance_loss(m, o); }, a)) < 1e-6);
    CHECK(gradient_error(dist.grad_objects,
                         numeric_gradient([&](const Eigen::MatrixXd& m) { return distance_loss(a, m); }, o)) < 1e-6);

    const Eigen::MatrixXd x = random_matrix(5, 3, rng);
    const Eigen::MatrixXd w = random_matrix(5, 4, rng);
    for (const Kernel k : {Kernel::linear(), Kernel::gaussian(1.7)}) {
      const auto h = hsic_with_gradient(x, w, k);
      CHECK(gradient_error(h.grad_x,
                           numeric_gradient([&](const Eigen::MatrixXd& m) { return hsic(m, w, k); }, x)) < 1e-6);
      CHECK(gradient_error(h.grad_y,
                           numeric_gradient([&](const Eigen::MatrixXd& m) { return hsic(x, m, k); }, w)) < 1e-6);
    }
  }
}

TEST_CASE("separation and decorrelation table gradients match central differences") {
  const auto& s = default_manifest().space;
  Rng rng(31);
  const Eigen::MatrixXd attrs = random_matrix(6, 8, rng);
  const Eigen::MatrixXd objs = random_matrix(3, 8, rng);
  const std::vector<Composition> batch = {s.parse("red cube"), s.parse("blue sphere"), s.parse("green cylinder"),
                                          s.parse("purple cube"), s.parse("red sphere")};
  const SeparationWeights w{0.3, 0.2, 0.4, 1.5};
  const auto value = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& o) {
    const TokenTable t(a, o);
    return separation_loss(t, w).total + decorrelation_loss(t, batch, w).value;
  };
  const TokenTable t(attrs, objs);
  const SeparationResult sep = separation_loss(t, w);
  const DecorrelationResult dec = decorrelation_loss(t, batch, w);
  CHECK(gradient_error(sep.gradient.attributes + dec.gradient.attributes,
                       numeric_gradient([&](const Eigen::MatrixXd& m) { return value(m, objs); }, attrs)) < 1e-6);
  CHECK(gradient_error(sep.gradient.objects + dec.gradient.objects,
                       numeric_gradient([&](const Eigen::MatrixXd& m) { return value(attrs, m); }, objs)) < 1e-6);
}

}  // TEST_SUITE
