#include <dcm/cluster_energy.hpp>
#include <gtest/gtest.h>

#include <random>

using namespace dcm;

namespace {

RatMat3 identity_basis() {
  RatMat3 A;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) A[i][j] = (i == j) ? 1 : 0;
  return A;
}

const BravaisCrystal& cubic() {
  static BravaisCrystal c =
      build_crystal(identity_basis(), Rat(3), Rat(3), true, "cubic");
  return c;
}

const std::vector<Rat> kShells = {Rat(1), Rat(2), Rat(3)};

ClusterEnergy springs(double k1, double k2, double k3) {
  return shell_spring_energy(cubic(), kShells, {k1, k2, k3});
}

Mat3 random_mat(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat3 A;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) A(i, j) = g(rng);
  return A;
}

}  // namespace

TEST(RefEnergy, SkewAffineVanishes) {
  Mat3 S;
  S << 0, 2, -1, -2, 0, 3, 1, -3, 0;
  EXPECT_NEAR(reference_energy(affine_cluster_strain(cubic(), S)), 0.0, 1e-20);
}

TEST(RefEnergy, IdentityHandValue) {
  // ordered cover bonds: 24 axis (|h|^2=1), 24 face (2), 8 body (3)
  // sum |h|^2 = 24 + 48 + 24 = 96
  EXPECT_NEAR(reference_energy(affine_cluster_strain(cubic(), Mat3::Identity())),
              96.0, 1e-10);
}

TEST(RefEnergy, SymmetricMinimizerIsZeroOnCubic) {
  std::mt19937_64 rng(3);
  Mat3 A = random_mat(rng);
  A = (A + A.transpose()).eval();
  double direct = 0;
  const auto& c = cubic();
  for (const auto& b : c.cluster0_bonds)
    direct += (A * c.cart(c.neighbors[b.second])).squaredNorm();
  Mat3 S;
  EXPECT_NEAR(reference_energy(affine_cluster_strain(c, A), &S), direct,
              1e-9 * direct);
  EXPECT_NEAR(S.norm(), 0.0, 1e-10);
}

TEST(RefEnergy, GridRefinementMatchesClosedForm) {
  // brute-force search over the axial vector of the skew minimizer
  std::mt19937_64 rng(17);
  auto t = detail::random_cluster_strain(cubic(), rng);
  const double closed = reference_energy(t);
  const auto& c = cubic();
  auto value_at = [&](const Vec3& w) {
    double e = 0;
    for (std::size_t i = 0; i < c.cluster0_bonds.size(); ++i) {
      // locate slot in cluster_bonds (subsequence scan)
      const auto& b = c.cluster0_bonds[i];
      std::size_t slot = 0;
      while (c.cluster_bonds[slot] != b) ++slot;
      const Vec3 hc = c.cart(c.neighbors[b.second]);
      e += (t.vals[slot] - w.cross(hc)).squaredNorm();
    }
    return e;
  };
  Vec3 center = Vec3::Zero();
  double width = 2.0, best = value_at(center);
  for (int level = 0; level < 14; ++level) {
    Vec3 best_w = center;
    for (int a = -2; a <= 2; ++a)
      for (int b = -2; b <= 2; ++b)
        for (int d = -2; d <= 2; ++d) {
          const Vec3 w = center + width / 2.0 * Vec3(a, b, d);
          const double v = value_at(w);
          if (v < best) {
            best = v;
            best_w = w;
          }
        }
    center = best_w;
    width /= 2.0;
  }
  EXPECT_LE(closed, best + 1e-9);
  EXPECT_NEAR(best, closed, 1e-6 * std::max(1.0, closed));
}

TEST(Springs, AffineHandValues) {
  // ordered-bond sums on the sqrt(3) cubic cluster:
  //   E[xi^(e1 x e1)] = 36 k1 + 48 k2 + 64/3 k3
  //   E[xi^(e1 x e2 + e2 x e1)] = 96 k2 + 256/3 k3
  auto ce = springs(1.0, 0.5, 0.75);
  Mat3 E11 = Mat3::Zero();
  E11(0, 0) = 1;
  EXPECT_NEAR(ce.energy(affine_cluster_strain(cubic(), E11)),
              36.0 + 24.0 + 16.0, 1e-10);
  Mat3 Sh = Mat3::Zero();
  Sh(0, 1) = Sh(1, 0) = 1;
  EXPECT_NEAR(ce.energy(affine_cluster_strain(cubic(), Sh)), 48.0 + 64.0,
              1e-10);
}

TEST(Springs, RejectsBadSpecs) {
  EXPECT_THROW(spring_energy(cubic(), {{ivec3{1, 0, 0}, -1.0}}), DcmError);
  EXPECT_THROW(spring_energy(cubic(), {{ivec3{2, 0, 0}, 1.0}}), DcmError);
}

TEST(Certify, NNOnlyHasShearNullMode) {
  auto rep = verify_cluster_energy(springs(1.0, 0.0, 0.0));
  EXPECT_LE(rep.alpha_hat, 1e-10);
  EXPECT_FALSE(rep.passed);
  EXPECT_LE(rep.invariance_residual, 1e-10);
  // witness: unit symmetric matrix with zero spring energy, nonzero E0
  const Mat3& W = rep.witness;
  EXPECT_NEAR((W - W.transpose()).norm(), 0.0, 1e-9);
  EXPECT_NEAR(W.norm(), 1.0, 1e-9);
  EXPECT_NEAR(std::abs(W(0, 0)) + std::abs(W(1, 1)) + std::abs(W(2, 2)), 0.0,
              1e-8);
  auto ce = springs(1.0, 0.0, 0.0);
  EXPECT_LE(ce.energy(affine_cluster_strain(cubic(), W)), 1e-12);
  EXPECT_GE(reference_energy(affine_cluster_strain(cubic(), W)), 1.0);
}

TEST(Certify, NNPlusNNNAlphaIsThreeHalves) {
  // cubic-symmetry irreducible ratios for k1 = k2 = 1, k3 = 0:
  //   trace 396/96, deviatoric 120/64, shear 96/64; minimum 3/2
  auto rep = verify_cluster_energy(springs(1.0, 1.0, 0.0));
  EXPECT_NEAR(rep.alpha_hat, 1.5, 1e-9);
  EXPECT_TRUE(rep.passed);
  EXPECT_LE(rep.invariance_residual, 1e-10);
  EXPECT_NEAR(rep.c_hat, 1.0, 1e-12);
}

TEST(Certify, ReferenceEnergySelfComparison) {
  // E_C := E0 as an explicit matrix form; alpha_hat must be exactly 1
  const auto& c = cubic();
  const std::size_t P = c.cluster_bonds.size();
  // residual map of E0 is linear; assemble columns on the cover slots
  std::vector<std::size_t> slots;
  {
    std::size_t j = 0;
    for (const auto& b : c.cluster0_bonds) {
      while (c.cluster_bonds[j] != b) ++j;
      slots.push_back(j);
    }
  }
  auto residual = [&](const Eigen::VectorXd& v) {
    ClusterStrain t;
    t.crystal = &c;
    t.vals.resize(P);
    for (std::size_t i = 0; i < P; ++i) t.vals[i] = v.segment<3>(3 * std::int64_t(i));
    return reference_energy(t);
  };
  Eigen::MatrixXd Q(3 * P, 3 * P);
  Q.setZero();
  // polarize over the cover-slot coordinates only; others do not enter E0
  std::vector<Eigen::Index> coords;
  for (auto s : slots)
    for (int d = 0; d < 3; ++d) coords.push_back(Eigen::Index(3 * s + d));
  std::vector<double> diag(coords.size());
  for (std::size_t a = 0; a < coords.size(); ++a) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(3 * Eigen::Index(P));
    v(coords[a]) = 1;
    diag[a] = residual(v);
  }
  for (std::size_t a = 0; a < coords.size(); ++a)
    for (std::size_t b = a; b < coords.size(); ++b) {
      Eigen::VectorXd v = Eigen::VectorXd::Zero(3 * Eigen::Index(P));
      v(coords[a]) += 1;
      v(coords[b]) += 1;
      const double q =
          a == b ? 4.0 * diag[a] : residual(v);
      const double off = a == b ? diag[a] : 0.5 * (q - diag[a] - diag[b]);
      Q(coords[a], coords[b]) = off;
      Q(coords[b], coords[a]) = off;
    }
  auto ce = matrix_energy(c, Q);
  // sanity: the matrix form reproduces E0 on random strains
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    auto t = detail::random_cluster_strain(c, rng);
    EXPECT_NEAR(ce.energy(t), reference_energy(t),
                1e-9 * std::max(1.0, reference_energy(t)));
  }
  auto rep = verify_cluster_energy(ce);
  EXPECT_NEAR(rep.alpha_hat, 1.0, 1e-9);
  EXPECT_TRUE(rep.passed);
}

TEST(Certify, MatrixFormMustBeSymmetric) {
  const auto& c = cubic();
  const auto P = Eigen::Index(3 * c.cluster_bonds.size());
  Eigen::MatrixXd Q = Eigen::MatrixXd::Identity(P, P);
  Q(0, 1) = 1.0;  // asymmetric
  EXPECT_THROW(matrix_energy(c, Q), DcmError);
}

TEST(Elastic, HandValuesAndSymmetries) {
  auto ce = springs(1.0, 0.5, 0.75);
  auto cert = verify_cluster_energy(ce);
  ASSERT_TRUE(cert.passed);
  auto C = elastic_tensor(ce, cert);
  EXPECT_NEAR(cell_volume(cubic()), 1.0, 1e-12);
  // C1111 = 72 k1 + 96 k2 + 128/3 k3, C1212 = C1122 = 48 k2 + 128/3 k3
  EXPECT_NEAR(C.c[0][0][0][0], 72.0 + 48.0 + 32.0, 1e-9);
  EXPECT_NEAR(C.c[0][1][0][1], 24.0 + 32.0, 1e-9);
  EXPECT_NEAR(C.c[0][0][1][1], 24.0 + 32.0, 1e-9);  // Cauchy relation
  EXPECT_NEAR(C.c[1][1][1][1], C.c[0][0][0][0], 1e-9);
  EXPECT_NEAR(C.c[2][2][2][2], C.c[0][0][0][0], 1e-9);
  EXPECT_LE(C.major_asymmetry(), 1e-12 * C.c[0][0][0][0]);
  EXPECT_LE(C.max_skew_response(), 1e-9);
  EXPECT_GT(C.min_sym_eigenvalue(), 0.0);
}

TEST(Elastic, RequiresCertification) {
  auto ce = springs(1.0, 0.0, 0.0);
  auto cert = verify_cluster_energy(ce);
  ASSERT_FALSE(cert.passed);
  EXPECT_THROW(elastic_tensor(ce, cert), DcmError);
}

TEST(Elastic, ScalesWithEnergy) {
  auto c1 = verify_cluster_energy(springs(1.0, 1.0, 0.0));
  auto c2 = verify_cluster_energy(springs(2.5, 2.5, 0.0));
  auto C1 = elastic_tensor(springs(1.0, 1.0, 0.0), c1);
  auto C2 = elastic_tensor(springs(2.5, 2.5, 0.0), c2);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l)
          EXPECT_NEAR(C2.c[i][j][k][l], 2.5 * C1.c[i][j][k][l], 1e-9);
}

TEST(Elastic, IsotropicSpringFixture) {
  // k2 = 3/2 k1 balances the cubic anisotropy: mu = lambda = 72 k1
  auto ce = springs(1.0, 1.5, 0.0);
  auto cert = verify_cluster_energy(ce);
  ASSERT_TRUE(cert.passed);
  auto C = elastic_tensor(ce, cert);
  auto I = ElasticTensor::isotropic(72.0, 72.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        for (int l = 0; l < 3; ++l)
          EXPECT_NEAR(C.c[i][j][k][l], I.c[i][j][k][l], 1e-9);
}

TEST(Elastic, IsotropicClosedForm) {
  auto C = ElasticTensor::isotropic(3.0, 2.0);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 10; ++t) {
    Mat3 A = random_mat(rng);
    const Mat3 s = 0.5 * (A + A.transpose());
    const double want = 2.0 * A.trace() * A.trace() + 2.0 * 3.0 * s.squaredNorm();
    EXPECT_NEAR(C.contract(A, A), want, 1e-10 * std::abs(want));
  }
}

TEST(Energy, SkewAndZeroFieldsVanish) {
  auto r = build_region(cubic(), Rat(1, 8), Box{});
  auto ce = springs(1.0, 1.0, 0.0);
  StrainField zero(r);
  EXPECT_EQ(total_energy(zero, ce), 0.0);
  Mat3 S;
  S << 0, 1, -2, -1, 0, 0.5, 2, -0.5, 0;
  SiteField u(r);
  for (std::size_t s2 = 0; s2 < r.sites.size(); ++s2)
    u.u[s2] = S * r.site_cart[s2];
  EXPECT_NEAR(total_energy(discrete_gradient(u), ce), 0.0, 1e-12);
}

TEST(Energy, AffineMatchesClusterCountAndTensor) {
  auto r = build_region(cubic(), Rat(1, 8), Box{});
  auto ce = springs(1.0, 1.0, 0.0);
  auto cert = verify_cluster_energy(ce);
  auto C = elastic_tensor(ce, cert);
  Mat3 A;
  A << 0.2, 0.1, 0, 0.1, -0.3, 0.05, 0, 0.05, 0.4;
  SiteField u(r);
  for (std::size_t s = 0; s < r.sites.size(); ++s) u.u[s] = A * r.site_cart[s];
  const double E = total_energy(discrete_gradient(u), ce);
  const double epsn = std::pow(r.eps, 3);
  const double percluster = ce.energy(affine_cluster_strain(cubic(), A));
  const double nclust = double(r.cluster_sites.size());
  EXPECT_NEAR(E, nclust * epsn * percluster, 1e-12 * E);
  EXPECT_NEAR(E, 0.5 * C.contract(A, A) * nclust * epsn * cell_volume(cubic()),
              1e-10 * E);
}

TEST(Energy, AdditiveOverAlignedPartition) {
  auto ce = springs(1.0, 1.0, 0.0);
  // open boxes sharing a face; their union omits the interface plane, so no
  // cluster can straddle it
  const Box left{Vec3(0, 0, 0), Vec3(1, 1, 1)};
  const Box right{Vec3(1, 0, 0), Vec3(2, 1, 1)};
  Mat3 A;
  A << 0.3, 0, 0.1, 0, -0.2, 0, 0.1, 0, 0.05;
  auto energy_on = [&](const std::vector<Box>& b) {
    auto r = build_region(cubic(), Rat(1, 8), b);
    SiteField u(r);
    for (std::size_t s = 0; s < r.sites.size(); ++s)
      u.u[s] = A * r.site_cart[s];
    return std::make_pair(total_energy(discrete_gradient(u), ce),
                          r.cluster_sites.size());
  };
  auto [el, nl] = energy_on({left});
  auto [er, nr] = energy_on({right});
  auto [eb, nb] = energy_on({left, right});
  EXPECT_EQ(nl + nr, nb);  // cluster sets partition exactly
  EXPECT_NEAR(eb, el + er, 1e-12 * eb);
}

TEST(Energy, CoercivitySandwich) {
  auto ce = springs(1.0, 1.0, 0.0);
  auto rep = verify_cluster_energy(ce);
  std::mt19937_64 rng(23);
  for (int t = 0; t < 200; ++t) {
    // affine family: certified lower bound
    Mat3 A = random_mat(rng);
    auto ta = affine_cluster_strain(cubic(), A);
    EXPECT_LE(rep.alpha_hat * reference_energy(ta),
              ce.energy(ta) * (1 + 1e-10) + 1e-12);
    // full space: quadratic upper bound
    auto tr = detail::random_cluster_strain(cubic(), rng);
    double norm2 = 0;
    for (const auto& v : tr.vals) norm2 += v.squaredNorm();
    EXPECT_LE(ce.energy(tr), rep.c_hat * norm2 * (1 + 1e-12));
  }
}
