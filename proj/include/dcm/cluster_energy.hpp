#pragma once

// Quadratic cluster energies, the reference energy E0 with its skew
// relaxation, coercivity certification, elastic tensor extraction, and the
// total energy of a strain field.

#include <dcm/fields.hpp>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <json.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace dcm {

struct SpringSpec {
  ivec3 h;   // lattice direction; applies to the +-h pair
  double k;  // stiffness, must be >= 0
};

// E_C on cluster strains. Two backing forms:
//  - longitudinal springs  E[t] = sum_bonds k_h (t(y,h).hhat)^2
//  - explicit dense symmetric form on the stacked bond values
// Sums run over the ordered bond set (both (y,h) and (y+h,-h)), matching the
// cluster_bonds enumeration.
class ClusterEnergy {
 public:
  const BravaisCrystal* crystal = nullptr;
  std::vector<double> k;  // per ordered cluster bond (spring form)
  Eigen::MatrixXd Q;      // 3P x 3P (matrix form), P = #ordered bonds
  bool spring_form = true;
  std::string label;

  double energy(const ClusterStrain& t) const {
    const std::size_t P = crystal->cluster_bonds.size();
    if (t.vals.size() != P) throw DcmError("cluster: strain size mismatch");
    if (spring_form) {
      double e = 0;
      for (std::size_t i = 0; i < P; ++i) {
        if (k[i] == 0.0) continue;
        const Vec3 hc = crystal->cart(crystal->neighbors[crystal->cluster_bonds[i].second]);
        const double lon = t.vals[i].dot(hc) / hc.norm();
        e += k[i] * lon * lon;
      }
      return e;
    }
    Eigen::VectorXd v(3 * P);
    for (std::size_t i = 0; i < P; ++i) v.segment<3>(3 * std::int64_t(i)) = t.vals[i];
    return v.dot(Q * v);
  }

  // upper quadratic bound: energy <= c_hat * sum |t|^2
  double c_hat() const {
    if (spring_form) {
      double m = 0;
      for (double ki : k) m = std::max(m, ki);
      return m;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
    return std::max(0.0, es.eigenvalues().maxCoeff());
  }
};

inline ClusterEnergy spring_energy(const BravaisCrystal& c,
                                   const std::vector<SpringSpec>& springs) {
  ClusterEnergy ce;
  ce.crystal = &c;
  ce.spring_form = true;
  ce.k.assign(c.cluster_bonds.size(), 0.0);
  for (const auto& s : springs) {
    if (s.k < 0) throw DcmError("cluster: negative stiffness");
    if (!c.neighbor_index.count(s.h))
      throw DcmError("cluster: spring direction is not a bond");
    for (std::size_t i = 0; i < c.cluster_bonds.size(); ++i) {
      const ivec3& h = c.neighbors[c.cluster_bonds[i].second];
      if (h == s.h || h == -s.h) ce.k[i] = s.k;
    }
  }
  return ce;
}

// stiffness per coordination shell, shells given by squared bond length
inline ClusterEnergy shell_spring_energy(const BravaisCrystal& c,
                                         const std::vector<Rat>& shells,
                                         const std::vector<double>& k_shell) {
  if (shells.size() != k_shell.size())
    throw DcmError("cluster: shell/stiffness count mismatch");
  ClusterEnergy ce;
  ce.crystal = &c;
  ce.spring_form = true;
  ce.k.assign(c.cluster_bonds.size(), 0.0);
  for (std::size_t i = 0; i < c.cluster_bonds.size(); ++i) {
    const int s = c.shell_of(c.neighbors[c.cluster_bonds[i].second], shells);
    if (s >= 0) ce.k[i] = k_shell[s];
  }
  return ce;
}

inline ClusterEnergy matrix_energy(const BravaisCrystal& c,
                                   const Eigen::MatrixXd& Q) {
  const auto P = Eigen::Index(3 * c.cluster_bonds.size());
  if (Q.rows() != P || Q.cols() != P)
    throw DcmError("cluster: form matrix has wrong size");
  if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1 + Q.cwiseAbs().maxCoeff()))
    throw DcmError("cluster: form matrix is not symmetric");
  ClusterEnergy ce;
  ce.crystal = &c;
  ce.spring_form = false;
  ce.Q = 0.5 * (Q + Q.transpose());
  return ce;
}

// E0[t] = min over skew S of sum_{C0 bonds} |t(y,h) - S h|^2.
// With S h = w x h the normal equations are M w = sum h x t,
// M = sum (|h|^2 I - h h^T), h Cartesian over the cover-vertex bonds.
inline double reference_energy(const ClusterStrain& t, Mat3* minimizer = nullptr) {
  const BravaisCrystal& c = *t.crystal;
  if (c.cluster0_bonds.empty()) throw DcmError("cluster: crystal has no cover");
  // map ordered cluster bond -> position in cluster_bonds
  // cluster0_bonds store (cluster idx, nbr idx); locate matching slot
  Mat3 M = Mat3::Zero();
  Vec3 rhs = Vec3::Zero();
  std::vector<std::pair<std::size_t, Vec3>> c0;  // (cluster bond slot, h cart)
  std::size_t j = 0;
  for (const auto& b : c.cluster0_bonds) {
    while (j < c.cluster_bonds.size() && c.cluster_bonds[j] != b) ++j;
    if (j == c.cluster_bonds.size()) {
      // restart scan; cluster0_bonds follow cluster_bonds order, so this
      // only happens on a malformed crystal
      throw DcmError("cluster: cover bond missing from cluster bonds");
    }
    const Vec3 hc = c.cart(c.neighbors[b.second]);
    c0.emplace_back(j, hc);
    M += hc.squaredNorm() * Mat3::Identity() - hc * hc.transpose();
    rhs += hc.cross(t.vals[j]);
  }
  Vec3 w = Vec3::Zero();
  if (std::abs(M.determinant()) > 1e-14) w = M.ldlt().solve(rhs);
  double e = 0;
  for (const auto& [slot, hc] : c0) e += (t.vals[slot] - w.cross(hc)).squaredNorm();
  if (minimizer) {
    Mat3 S;
    S << 0, -w(2), w(1), w(2), 0, -w(0), -w(1), w(0), 0;
    *minimizer = S;
  }
  return e;
}

struct CertificationReport {
  double alpha_hat = 0;
  double invariance_residual = 0;
  double c_hat = 0;
  Mat3 witness = Mat3::Zero();  // symmetric direction attaining alpha_hat
  bool passed = false;
};

namespace detail {

inline std::vector<Mat3> sym_basis() {
  std::vector<Mat3> B;
  const double s = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 3; ++i) {
    Mat3 m = Mat3::Zero();
    m(i, i) = 1;
    B.push_back(m);
  }
  const int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  for (auto& p : pairs) {
    Mat3 m = Mat3::Zero();
    m(p[0], p[1]) = m(p[1], p[0]) = s;
    B.push_back(m);
  }
  return B;
}

inline std::vector<Mat3> skew_basis() {
  std::vector<Mat3> B;
  const double s = 1.0 / std::sqrt(2.0);
  const int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  for (auto& p : pairs) {
    Mat3 m = Mat3::Zero();
    m(p[0], p[1]) = s;
    m(p[1], p[0]) = -s;
    B.push_back(m);
  }
  return B;
}

// random admissible cluster strain: independent values on canonical pairs
inline ClusterStrain random_cluster_strain(const BravaisCrystal& c,
                                           std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  ClusterStrain t;
  t.crystal = &c;
  t.vals.resize(c.cluster_bonds.size());
  std::map<std::pair<ivec3, ivec3>, Vec3> canon;
  for (std::size_t i = 0; i < c.cluster_bonds.size(); ++i) {
    const ivec3 y = c.cluster[c.cluster_bonds[i].first];
    const ivec3 h = c.neighbors[c.cluster_bonds[i].second];
    const bool flip = !(h > ivec3{0, 0, 0});
    const std::pair<ivec3, ivec3> key =
        flip ? std::make_pair(y + h, -h) : std::make_pair(y, h);
    auto it = canon.find(key);
    if (it == canon.end())
      it = canon.emplace(key, Vec3(g(rng), g(rng), g(rng))).first;
    t.vals[i] = flip ? Vec3(-it->second) : it->second;
  }
  return t;
}

}  // namespace detail

// Certifies rotation invariance and coercivity on the affine family.
// alpha_hat is the smallest generalized eigenvalue of the 6x6 pencil
// (E_C[xi^A], E0[xi^A]) over symmetric A, after removing the null space of
// the reference form. A vanishing alpha_hat comes with the null direction as
// a witness.
inline CertificationReport verify_cluster_energy(const ClusterEnergy& ce,
                                                 std::uint64_t seed = 2026) {
  const BravaisCrystal& c = *ce.crystal;
  CertificationReport rep;
  rep.c_hat = ce.c_hat();

  // invariance residual on random strains against the skew basis
  std::mt19937_64 rng(seed);
  const auto SB = detail::skew_basis();
  for (int trial = 0; trial < 100; ++trial) {
    auto t = detail::random_cluster_strain(c, rng);
    const double e0 = ce.energy(t);
    for (const auto& S : SB) {
      ClusterStrain ts = t;
      for (std::size_t i = 0; i < ts.vals.size(); ++i)
        ts.vals[i] += S * c.cart(c.neighbors[c.cluster_bonds[i].second]);
      const double d = std::abs(ce.energy(ts) - e0);
      rep.invariance_residual =
          std::max(rep.invariance_residual, d / std::max(1.0, e0));
    }
  }

  // 6x6 pencil over the symmetric affine family
  const auto B = detail::sym_basis();
  auto affine = [&](const Mat3& A) { return affine_cluster_strain(c, A); };
  auto polarize = [&](auto&& f) {
    Eigen::MatrixXd m(6, 6);
    std::vector<double> diag(6);
    for (int a = 0; a < 6; ++a) diag[a] = f(B[a]);
    for (int a = 0; a < 6; ++a)
      for (int b = a; b < 6; ++b) {
        const double fab = f(B[a] + B[b]);
        m(a, b) = m(b, a) = 0.5 * (fab - diag[a] - diag[b]);
      }
    return m;
  };
  const Eigen::MatrixXd P = polarize([&](const Mat3& A) { return ce.energy(affine(A)); });
  const Eigen::MatrixXd G = polarize([&](const Mat3& A) { return reference_energy(affine(A)); });

  // quotient by null(G)
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eg(G);
  const double gmax = eg.eigenvalues().maxCoeff();
  std::vector<int> keep;
  for (int i = 0; i < 6; ++i)
    if (eg.eigenvalues()(i) > 1e-12 * std::max(1.0, gmax)) keep.push_back(i);
  if (keep.empty()) throw DcmError("cluster: reference form vanishes on symmetric matrices");
  Eigen::MatrixXd V(6, Eigen::Index(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) V.col(Eigen::Index(i)) = eg.eigenvectors().col(keep[i]);
  const Eigen::MatrixXd Pr = V.transpose() * P * V;
  const Eigen::MatrixXd Gr = V.transpose() * G * V;
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(Pr, Gr);
  Eigen::Index argmin = 0;
  ges.eigenvalues().minCoeff(&argmin);
  rep.alpha_hat = std::max(0.0, ges.eigenvalues()(argmin));
  Eigen::VectorXd v6 = V * ges.eigenvectors().col(argmin);
  rep.witness = Mat3::Zero();
  for (int a = 0; a < 6; ++a) rep.witness += v6(a) * B[a];
  rep.witness /= std::max(1e-300, rep.witness.norm());

  const double scale = std::max(1.0, ges.eigenvalues().maxCoeff());
  rep.passed = rep.alpha_hat > 1e-10 * scale && rep.invariance_residual <= 1e-10;
  return rep;
}

inline nlohmann::json certification_to_json(const CertificationReport& rep,
                                            const std::string& label) {
  nlohmann::json j;
  j["energy"] = label;
  j["alpha_hat"] = rep.alpha_hat;
  j["invariance_residual"] = rep.invariance_residual;
  j["c_hat"] = rep.c_hat;
  j["passed"] = rep.passed;
  std::vector<std::vector<double>> w(3, std::vector<double>(3));
  for (int i = 0; i < 3; ++i)
    for (int jj = 0; jj < 3; ++jj) w[i][jj] = rep.witness(i, jj);
  j["witness"] = w;
  return j;
}

struct ElasticTensor {
  double c[3][3][3][3] = {};

  double contract(const Mat3& A, const Mat3& B) const {  // C A . B
    double s = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int kk = 0; kk < 3; ++kk)
          for (int l = 0; l < 3; ++l) s += c[i][j][kk][l] * A(i, j) * B(kk, l);
    return s;
  }
  Mat3 apply(const Mat3& A) const {  // (C A)_ij
    Mat3 out = Mat3::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int kk = 0; kk < 3; ++kk)
          for (int l = 0; l < 3; ++l) out(i, j) += c[i][j][kk][l] * A(kk, l);
    return out;
  }
  double major_asymmetry() const {
    double m = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int kk = 0; kk < 3; ++kk)
          for (int l = 0; l < 3; ++l)
            m = std::max(m, std::abs(c[i][j][kk][l] - c[kk][l][i][j]));
    return m;
  }
  double max_skew_response() const {  // max |C S| over the skew basis
    double m = 0;
    for (const auto& S : detail::skew_basis())
      m = std::max(m, apply(S).cwiseAbs().maxCoeff());
    return m;
  }
  double min_sym_eigenvalue() const {
    const auto B = detail::sym_basis();
    Eigen::Matrix<double, 6, 6> M;
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b) M(a, b) = contract(B[a], B[b]);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> es(M);
    return es.eigenvalues().minCoeff();
  }
  static ElasticTensor isotropic(double mu, double lambda) {
    ElasticTensor t;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int kk = 0; kk < 3; ++kk)
          for (int l = 0; l < 3; ++l)
            t.c[i][j][kk][l] = lambda * (i == j) * (kk == l) +
                               mu * ((i == kk) * (j == l) + (i == l) * (j == kk));
    return t;
  }
};

inline double cell_volume(const BravaisCrystal& c) {
  if (!c.has_cover()) throw DcmError("cluster: crystal has no cover");
  double v = 0;
  for (const auto& s : c.cover) v += simplex_volume(c, s);
  return v;
}

// (1/2) C A . A = E_C[xi^A] / vol(T_*), assembled by polarization.
inline ElasticTensor elastic_tensor(const ClusterEnergy& ce,
                                    const CertificationReport& cert) {
  if (!cert.passed) throw DcmError("cluster: certification missing");
  const BravaisCrystal& c = *ce.crystal;
  const double vol = cell_volume(c);
  auto q = [&](const Mat3& A) {
    return 2.0 * ce.energy(affine_cluster_strain(c, A)) / vol;
  };
  ElasticTensor t;
  Mat3 E[3][3];
  double diag[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      E[i][j] = Mat3::Zero();
      E[i][j](i, j) = 1;
      diag[i][j] = q(E[i][j]);
    }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int kk = 0; kk < 3; ++kk)
        for (int l = 0; l < 3; ++l)
          t.c[i][j][kk][l] =
              0.5 * (q(E[i][j] + E[kk][l]) - diag[i][j] - diag[kk][l]);
  return t;
}

// E_eps[xi, Omega] = sum over cluster centers of eps^n E_C[tau_x xi]
inline double total_energy(const StrainField& xi, const ClusterEnergy& ce,
                           int threads = 1) {
  const LatticeRegion& r = *xi.region;
  const double epsn = r.eps * r.eps * r.eps;
  return deterministic_reduce(
      r.cluster_sites.size(), threads, 0.0,
      [&](std::size_t i, double& acc) {
        acc += epsn * ce.energy(extract_cluster_strain(xi, r.sites[r.cluster_sites[i]]));
      });
}

}  // namespace dcm
