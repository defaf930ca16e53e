#pragma once

// Polyhedral dislocation curves and their discrete counterparts: diluteness
// certification for segment unions, core detection for bond strain fields,
// Burgers classification of loop circulations, line measure extraction from
// circulation stations, and the curl-mass bound check.

#include <dcm/cluster_energy.hpp>
#include <dcm/interp.hpp>
#include <dcm/io.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace dcm {

// ---------------------------------------------------------------------------
// polyhedral curves

struct Segment {
  Vec3 a = Vec3::Zero();
  Vec3 d = Vec3::Zero();

  double length() const { return (d - a).norm(); }
  Vec3 tangent() const {
    const double l = length();
    if (l <= 0) throw DcmError("curve: degenerate segment");
    return (d - a) / l;
  }
  Vec3 point_at(double f) const { return a + f * (d - a); }
};

struct PolyhedralCurve {
  std::vector<Segment> segments;

  double length() const {
    double l = 0;
    for (const auto& s : segments) l += s.length();
    return l;
  }
};

inline double point_segment_distance(const Vec3& p, const Segment& s) {
  const Vec3 e = s.d - s.a;
  const double ee = e.squaredNorm();
  if (ee <= 0) return (p - s.a).norm();
  const double t = std::clamp((p - s.a).dot(e) / ee, 0.0, 1.0);
  return (p - (s.a + t * e)).norm();
}

inline double point_curve_distance(const Vec3& p, const PolyhedralCurve& g) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : g.segments)
    best = std::min(best, point_segment_distance(p, s));
  return best;
}

// closest-point distance between two closed segments
inline double segment_segment_distance(const Segment& s, const Segment& t) {
  const Vec3 u = s.d - s.a, v = t.d - t.a, w = s.a - t.a;
  const double a = u.squaredNorm(), b = u.dot(v), c = v.squaredNorm();
  const double d = u.dot(w), e = v.dot(w);
  const double den = a * c - b * b;
  double sc, tc;
  if (den > 1e-14 * std::max(a * c, 1e-300)) {
    sc = std::clamp((b * e - c * d) / den, 0.0, 1.0);
  } else {
    sc = 0;  // near parallel, clamp one end and fall through
  }
  tc = c > 0 ? std::clamp((b * sc + e) / c, 0.0, 1.0) : 0.0;
  sc = a > 0 ? std::clamp((b * tc - d) / a, 0.0, 1.0) : 0.0;
  // one refinement pass keeps clamped corners consistent
  tc = c > 0 ? std::clamp((b * sc + e) / c, 0.0, 1.0) : 0.0;
  return ((s.a + sc * u) - (t.a + tc * v)).norm();
}

// ---------------------------------------------------------------------------
// diluteness certification

struct DilutenessReport {
  bool dilute = false;
  // 0 none; 1 short segment; 2 close disjoint pair; 3 sharp or broken
  // junction; 4 endpoint strictly inside the domain
  int violated_clause = 0;
  int witness_i = -1, witness_j = -1;
  double witness_value = 0;  // offending length, distance or angle
  std::string detail;
  double curve_length = 0;
  double length_bound = 0;  // packing cap, valid when dilute
};

namespace detail {

// indices of coincident endpoints: 0 -> a, 1 -> d
inline bool shared_endpoint(const Segment& s, const Segment& t, double tol,
                            int* es, int* et) {
  const Vec3 sp[2] = {s.a, s.d}, tp[2] = {t.a, t.d};
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      if ((sp[i] - tp[j]).norm() <= tol) {
        if (es) *es = i;
        if (et) *et = j;
        return true;
      }
  return false;
}

}  // namespace detail

// Checks that gamma is a (k, alpha)-dilute union of segments in omega: every
// segment at least k long, disjoint pairs at least alpha*k apart, touching
// pairs sharing an endpoint at angle at least alpha, and no curve endpoint in
// the open box. Reports the first violated clause with a witness pair; on a
// pass the total length obeys an explicit packing bound in (k, alpha, omega).
inline DilutenessReport certify_dilute(const PolyhedralCurve& gamma,
                                       const Box& omega, double k,
                                       double alpha) {
  if (!(k > 0)) throw DcmError("dilute: k must be positive");
  if (!(alpha > 0) || alpha > 0.25)
    throw DcmError("dilute: alpha must lie in (0, 1/4]");
  if (gamma.segments.empty()) throw DcmError("dilute: empty curve");

  DilutenessReport rep;
  rep.curve_length = gamma.length();
  const double diam = (omega.hi - omega.lo).norm();
  const double tol = 1e-9 * std::max(k, diam);
  const int n = int(gamma.segments.size());

  for (int i = 0; i < n; ++i) {
    const double len = gamma.segments[i].length();
    if (len < k) {
      rep.violated_clause = 1;
      rep.witness_i = i;
      rep.witness_value = len;
      rep.detail = "segment shorter than k";
      return rep;
    }
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const Segment& s = gamma.segments[i];
      const Segment& t = gamma.segments[j];
      int es = 0, et = 0;
      if (!detail::shared_endpoint(s, t, tol, &es, &et)) {
        const double dist = segment_segment_distance(s, t);
        if (dist < alpha * k) {
          rep.violated_clause = 2;
          rep.witness_i = i;
          rep.witness_j = j;
          rep.witness_value = dist;
          rep.detail = "disjoint segments closer than alpha*k";
          return rep;
        }
      } else {
        // directions away from the shared endpoint
        const Vec3 ts = (es == 0 ? s.d - s.a : s.a - s.d).normalized();
        const Vec3 tt = (et == 0 ? t.d - t.a : t.a - t.d).normalized();
        const double ang = std::acos(std::clamp(ts.dot(tt), -1.0, 1.0));
        if (ang < alpha) {
          rep.violated_clause = 3;
          rep.witness_i = i;
          rep.witness_j = j;
          rep.witness_value = ang;
          rep.detail = "junction angle below alpha";
          return rep;
        }
      }
    }
  // curve endpoints are the degree-one segment ends
  for (int i = 0; i < n; ++i)
    for (int ei = 0; ei < 2; ++ei) {
      const Vec3 p = ei == 0 ? gamma.segments[i].a : gamma.segments[i].d;
      int degree = 0;
      for (int j = 0; j < n; ++j) {
        const Vec3 q[2] = {gamma.segments[j].a, gamma.segments[j].d};
        for (int ej = 0; ej < 2; ++ej)
          if ((p - q[ej]).norm() <= tol) ++degree;
      }
      if (degree == 1 && omega.contains(p)) {
        rep.violated_clause = 4;
        rep.witness_i = i;
        rep.witness_value = double(ei);
        rep.detail = "curve endpoint inside the domain";
        return rep;
      }
    }

  rep.dilute = true;
  // disjoint transverse cylinders of height k/2 and radius alpha^2 k pack the
  // volume, and each segment meets at most diam's worth of curve
  const double a2k = alpha * alpha * k;
  rep.length_bound =
      2.0 * diam * omega.volume() / (M_PI * a2k * a2k * k);
  return rep;
}

// ---------------------------------------------------------------------------
// core detection

struct CoreSite {
  ivec3 site{0, 0, 0};
  Vec3 cart = Vec3::Zero();
  DiscretePath witness;       // closed loop inside the detection ball
  Vec3 circulation = Vec3::Zero();
};

struct CoreRegion {
  const LatticeRegion* region = nullptr;
  double tol = 0;             // absolute circulation threshold used
  double ball_radius = 0;     // k_star * eps
  std::vector<CoreSite> sites;  // sorted by lattice coords

  bool contains(const ivec3& n) const {
    auto it = std::lower_bound(
        sites.begin(), sites.end(), n,
        [](const CoreSite& c, const ivec3& v) { return c.site < v; });
    return it != sites.end() && it->site == n;
  }
};

namespace detail {

struct GeneratorHit {
  DiscretePath loop;
  Vec3 circ;
};

// Triangles y, y+h1, y+h2 with all three legs bonds of the crystal, rooted
// at the lex-least vertex so each geometric triangle is scanned once.
inline std::vector<std::array<ivec3, 3>> triangle_generators(
    const BravaisCrystal& c) {
  std::vector<std::array<ivec3, 3>> tris;
  const auto& nb = c.nplus;
  for (std::size_t i = 0; i < nb.size(); ++i)
    for (std::size_t j = i + 1; j < nb.size(); ++j) {
      const ivec3 diff = nb[j] - nb[i];
      if (c.neighbor_index.count(diff))
        tris.push_back({nb[i], nb[j], diff});
    }
  return tris;
}

}  // namespace detail

// Flags the sites whose detection ball contains a closed lattice loop with
// nonresidual circulation. Generator loops are the bond triangles and, for
// each multi-step bond, its unit staircase closed by the bond itself; a site
// is flagged when some bad generator fits inside its ball. Witness loops are
// stored and can be re-evaluated against the same field.
inline CoreRegion detect_core(const StrainField& xi) {
  const LatticeRegion& r = *xi.region;
  const BravaisCrystal& c = *r.crystal;
  const double eps = r.eps;
  const double rad = c.k_star * eps;

  CoreRegion core;
  core.region = &r;
  core.ball_radius = rad;
  double xmax = 0;
  for (const auto& v : xi.vals) xmax = std::max(xmax, v.norm());
  core.tol = 1e-9 * eps * xmax;

  const auto& tris = detail::triangle_generators(c);
  std::vector<detail::GeneratorHit> bad;
  for (const ivec3& y : r.sites) {
    for (const auto& t : tris) {
      const ivec3 y1 = y + t[0], y2 = y + t[1];
      if (!r.has_site(y1) || !r.has_site(y2)) continue;
      const Vec3 circ =
          eps * (xi.get(y, t[0]) + xi.get(y1, t[2]) - xi.get(y, t[1]));
      if (circ.norm() > core.tol)
        bad.push_back({DiscretePath{{y, y1, y2, y}}, circ});
    }
    for (const ivec3& h : c.nplus) {
      std::int64_t l1 = 0;
      for (int i = 0; i < 3; ++i) l1 += h[i] < 0 ? -h[i] : h[i];
      if (l1 <= 1) continue;  // unit staircase equals the bond itself
      const auto steps = elementary_path(c, h);
      DiscretePath P;
      P.pts.reserve(steps.size() + 1);
      bool present = true;
      for (const auto& p : steps) {
        const ivec3 q = y + p;
        if (!r.has_site(q)) {
          present = false;
          break;
        }
        P.pts.push_back(q);
      }
      if (!present || !r.has_site(y + h)) continue;
      P.pts.push_back(y);  // close with the bond itself
      Vec3 circ = Vec3::Zero();
      for (std::size_t s = 0; s + 1 < P.pts.size(); ++s)
        circ += eps * xi.get(P.pts[s], P.pts[s + 1] - P.pts[s]);
      if (circ.norm() > core.tol) bad.push_back({std::move(P), circ});
    }
  }
  if (bad.empty()) return core;

  // a site owns a generator when every loop vertex lies in its ball; the
  // ball itself must sit inside the domain
  auto ball_in_domain = [&](const Vec3& x) {
    for (const auto& b : r.domain) {
      bool in = true;
      for (int i = 0; i < 3; ++i)
        if (x[i] < b.lo[i] + rad || x[i] > b.hi[i] - rad) {
          in = false;
          break;
        }
      if (in) return true;
    }
    return false;
  };
  Eigen::JacobiSVD<Mat3> svd(c.Ainv);
  const std::int64_t reach =
      std::int64_t(std::ceil(svd.singularValues()(0) * c.k_star)) + 1;
  std::unordered_map<ivec3, int, IVec3Hash> owner;  // site -> first generator
  for (std::size_t g = 0; g < bad.size(); ++g) {
    const auto& pts = bad[g].loop.pts;
    std::vector<Vec3> carts(pts.size());
    for (std::size_t s = 0; s < pts.size(); ++s) carts[s] = eps * c.cart(pts[s]);
    const ivec3 base = pts[0];
    for (std::int64_t di = -reach; di <= reach; ++di)
      for (std::int64_t dj = -reach; dj <= reach; ++dj)
        for (std::int64_t dk = -reach; dk <= reach; ++dk) {
          const ivec3 x = base + ivec3{di, dj, dk};
          if (owner.count(x) || !r.has_site(x)) continue;
          const Vec3 xc = eps * c.cart(x);
          if (!ball_in_domain(xc)) continue;
          bool fits = true;
          for (const auto& v : carts)
            if ((v - xc).norm() > rad + 1e-12 * rad) {
              fits = false;
              break;
            }
          if (fits) owner.emplace(x, int(g));
        }
  }
  core.sites.reserve(owner.size());
  for (const auto& [site, g] : owner) {
    CoreSite cs;
    cs.site = site;
    cs.cart = eps * c.cart(site);
    cs.witness = bad[g].loop;
    cs.circulation = bad[g].circ;
    core.sites.push_back(std::move(cs));
  }
  std::sort(core.sites.begin(), core.sites.end(),
            [](const CoreSite& a, const CoreSite& b) { return a.site < b.site; });
  return core;
}

// tube containment of the core around a curve, radius m * eps
struct TubeReport {
  bool contained = true;
  double radius = 0;
  double max_dist = 0;
  ivec3 worst_site{0, 0, 0};
};

inline TubeReport core_tube_check(const CoreRegion& core,
                                  const PolyhedralCurve& gamma, double m) {
  TubeReport rep;
  rep.radius = m * core.region->eps;
  for (const auto& cs : core.sites) {
    const double d = point_curve_distance(cs.cart, gamma);
    if (d > rep.max_dist) {
      rep.max_dist = d;
      rep.worst_site = cs.site;
    }
  }
  rep.contained = rep.max_dist <= rep.radius;
  return rep;
}

// ---------------------------------------------------------------------------
// Burgers classification

struct BurgersReport {
  Vec3 circulation = Vec3::Zero();
  ivec3 coeffs{0, 0, 0};   // integer coords in the Burgers basis
  Vec3 nearest = Vec3::Zero();
  double gap = 0;          // |circulation - nearest|
  double threshold = 0;    // refusal gate: quarter of the shortest |eps b|
  bool classified = false;
};

namespace detail {

// shortest nonzero Cartesian length over small combinations of the basis
inline double shortest_burgers(const BravaisCrystal& c,
                               const std::vector<ivec3>& basis) {
  double best = std::numeric_limits<double>::infinity();
  const int r = int(basis.size());
  std::array<std::int64_t, 3> co{0, 0, 0};
  const std::int64_t lim = 2;
  std::function<void(int)> rec = [&](int j) {
    if (j == r) {
      ivec3 v{0, 0, 0};
      for (int i = 0; i < r; ++i) v = v + co[i] * basis[i];
      const double l = c.cart(v).norm();
      if (l > 0) best = std::min(best, l);
      return;
    }
    for (co[j] = -lim; co[j] <= lim; ++co[j]) rec(j + 1);
  };
  rec(0);
  return best;
}

}  // namespace detail

// Rounds the circulation of a closed loop to the nearest element of eps * B.
// Classification is refused (not guessed) when the residual gap exceeds a
// quarter of the shortest nonzero Burgers length.
inline BurgersReport burgers_of_loop(const StrainField& xi,
                                     const SlipSystemSet& slips,
                                     const DiscretePath& loop) {
  const BravaisCrystal& c = *xi.region->crystal;
  const double eps = xi.region->eps;
  const int rk = int(slips.basis.size());
  if (rk == 0) throw DcmError("burgers: empty basis");

  BurgersReport rep;
  rep.circulation = circulation(xi, loop);
  Eigen::Matrix<double, 3, Eigen::Dynamic> B(3, rk);
  for (int j = 0; j < rk; ++j) B.col(j) = c.cart(slips.basis[j]);
  const Eigen::VectorXd guess =
      (eps * B).colPivHouseholderQr().solve(rep.circulation);

  // search the rounding neighborhood for the closest lattice element
  std::array<std::int64_t, 3> base{0, 0, 0}, bestc{0, 0, 0};
  for (int j = 0; j < rk; ++j) base[j] = std::llround(guess(j));
  double bestgap = std::numeric_limits<double>::infinity();
  std::array<std::int64_t, 3> co = base;
  std::function<void(int)> rec = [&](int j) {
    if (j == rk) {
      Vec3 cand = Vec3::Zero();
      for (int i = 0; i < rk; ++i) cand += double(co[i]) * B.col(i);
      const double g = (rep.circulation - eps * cand).norm();
      if (g < bestgap) {
        bestgap = g;
        bestc = co;
      }
      return;
    }
    for (co[j] = base[j] - 1; co[j] <= base[j] + 1; ++co[j]) rec(j + 1);
  };
  rec(0);

  for (int j = 0; j < rk; ++j) rep.coeffs[j] = bestc[j];
  ivec3 v{0, 0, 0};
  for (int j = 0; j < rk; ++j) v = v + rep.coeffs[j] * slips.basis[j];
  rep.nearest = eps * c.cart(v);
  rep.gap = bestgap;
  rep.threshold = 0.25 * eps * detail::shortest_burgers(c, slips.basis);
  rep.classified = rep.gap < rep.threshold;
  return rep;
}

// ---------------------------------------------------------------------------
// dislocation measures

struct MeasureSegment {
  Vec3 a = Vec3::Zero(), d = Vec3::Zero();  // oriented a -> d
  Vec3 tangent = Vec3::Zero();
  double length = 0;
  ivec3 coeffs{0, 0, 0};      // Burgers coords in the basis, exact
  Vec3 burgers = Vec3::Zero();  // eps * sum_j coeffs_j bhat_j, Cartesian
};

struct DislocationMeasure {
  double eps = 0;
  std::vector<ivec3> basis;   // bhat_j, lattice coordinates
  std::vector<MeasureSegment> segments;

  double total_mass() const {
    double m = 0;
    for (const auto& s : segments) m += s.burgers.norm() * s.length;
    return m;
  }
};

// Conservation at interior junctions: the signed integer Burgers sum over
// segments meeting at a point strictly inside omega must vanish exactly.
struct JunctionReport {
  bool balanced = true;
  std::vector<Vec3> junctions;
  int violating_junction = -1;
  ivec3 imbalance{0, 0, 0};
};

inline JunctionReport junction_balance(const DislocationMeasure& mu,
                                       const Box& omega) {
  JunctionReport rep;
  double scale = (omega.hi - omega.lo).norm();
  for (const auto& s : mu.segments) scale = std::max(scale, s.length);
  const double tol = 1e-9 * scale;

  std::vector<Vec3> pts;
  std::vector<ivec3> sums;
  auto accumulate = [&](const Vec3& p, const ivec3& th, int sign) {
    for (std::size_t i = 0; i < pts.size(); ++i)
      if ((pts[i] - p).norm() <= tol) {
        sums[i] = sums[i] + sign * th;
        return;
      }
    pts.push_back(p);
    sums.push_back(sign * th);
  };
  for (const auto& s : mu.segments) {
    accumulate(s.a, s.coeffs, +1);   // leaving a
    accumulate(s.d, s.coeffs, -1);   // arriving at d
  }
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!omega.contains(pts[i])) continue;
    rep.junctions.push_back(pts[i]);
    if (sums[i] != ivec3{0, 0, 0} && rep.violating_junction < 0) {
      rep.balanced = false;
      rep.violating_junction = int(rep.junctions.size()) - 1;
      rep.imbalance = sums[i];
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// measure extraction

struct StationRecord {
  int segment = -1;
  double frac = 0;
  DiscretePath loop;
  BurgersReport burgers;
};

struct ExtractionReport {
  DislocationMeasure measure;
  std::vector<StationRecord> stations;
  double rho_star = 0;       // station loop radius, 12 m eps / alpha
  bool scale_ok = true;      // m eps against the dilute small-scale cap
  bool stations_consistent = true;
  bool junctions_balanced = true;
  bool ok = false;
  std::vector<std::string> issues;
};

namespace detail {

// closed rectangular lattice loop around center, in lattice directions
// v1, v2 with half counts n1, n2; right handed about the requested normal
inline DiscretePath rectangle_loop(const ivec3& center, const ivec3& v1,
                                   std::int64_t n1, const ivec3& v2,
                                   std::int64_t n2) {
  DiscretePath P;
  P.pts.reserve(2 * (n1 + n2) * 2 + 1);
  ivec3 p = center - n1 * v1 - n2 * v2;
  P.pts.push_back(p);
  auto walk = [&](const ivec3& v, std::int64_t steps) {
    for (std::int64_t s = 0; s < steps; ++s) {
      p = p + v;
      P.pts.push_back(p);
    }
  };
  walk(v1, 2 * n1);
  walk(v2, 2 * n2);
  walk(-v1, 2 * n1);
  walk(-v2, 2 * n2);
  return P;
}

}  // namespace detail

// Reads the Burgers vector of every segment from lattice circulation loops
// at three stations (quarter, half, three quarter span), radius 12 m eps /
// alpha. Stations of one segment must classify identically; interior
// junction sums must vanish exactly. Inconsistencies are reported, never
// papered over.
inline ExtractionReport extract_measure(const StrainField& xi,
                                        const SlipSystemSet& slips,
                                        const PolyhedralCurve& gamma,
                                        double m, double alpha,
                                        const Box& omega) {
  if (!(m > 0) || !(alpha > 0) || alpha > 0.25)
    throw DcmError("extract: need m > 0 and alpha in (0, 1/4]");
  if (gamma.segments.empty()) throw DcmError("extract: empty curve");
  const LatticeRegion& r = *xi.region;
  const BravaisCrystal& c = *r.crystal;
  const double eps = r.eps;

  ExtractionReport rep;
  rep.rho_star = 12.0 * m * eps / alpha;
  double kmin = std::numeric_limits<double>::infinity();
  for (const auto& s : gamma.segments) kmin = std::min(kmin, s.length());
  rep.scale_ok = m * eps <= std::pow(alpha, 2.5) * kmin / 48.0;

  rep.measure.eps = eps;
  rep.measure.basis = slips.basis;

  const ivec3 axes[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  for (int si = 0; si < int(gamma.segments.size()); ++si) {
    const Segment& seg = gamma.segments[si];
    const Vec3 t = seg.tangent();

    // two most transverse lattice axes, ordered right handed about t
    int i1 = -1, i2 = -1;
    double c1 = -1, c2 = -1;
    for (int i = 0; i < 3; ++i) {
      const double cr = c.cart(axes[i]).cross(t).norm();
      if (cr > c1) {
        c2 = c1; i2 = i1;
        c1 = cr; i1 = i;
      } else if (cr > c2) {
        c2 = cr; i2 = i;
      }
    }
    ivec3 v1 = axes[i1], v2 = axes[i2];
    if (c.cart(v1).cross(c.cart(v2)).dot(t) < 0) std::swap(v1, v2);
    const Vec3 cv1 = c.cart(v1), cv2 = c.cart(v2);
    const std::int64_t n1 =
        std::max<std::int64_t>(1, std::llround(rep.rho_star / (eps * cv1.norm())));
    const std::int64_t n2 =
        std::max<std::int64_t>(1, std::llround(rep.rho_star / (eps * cv2.norm())));

    bool have_consensus = false;
    ivec3 consensus{0, 0, 0};
    bool seg_ok = true;
    for (double f : {0.25, 0.5, 0.75}) {
      const Vec3 p = seg.point_at(f);
      const Vec3 nl = c.Ainv * p / eps;
      const ivec3 center{std::llround(nl[0]), std::llround(nl[1]),
                         std::llround(nl[2])};
      StationRecord st;
      st.segment = si;
      st.frac = f;
      st.loop = detail::rectangle_loop(center, v1, n1, v2, n2);

      bool present = true;
      for (const auto& q : st.loop.pts)
        if (!r.has_site(q)) {
          present = false;
          break;
        }
      if (!present) {
        rep.issues.push_back("station loop leaves the region (segment " +
                             std::to_string(si) + ")");
        seg_ok = false;
        break;
      }
      // the segment must pierce the loop rectangle, other segments must not
      // come near it
      const Vec3 xc = eps * c.cart(center);
      const Vec3 nrm = cv1.cross(cv2).normalized();
      const double den = nrm.dot(seg.d - seg.a);
      if (std::abs(den) <= 1e-12 * seg.length()) {
        rep.issues.push_back("station loop parallel to its segment (segment " +
                             std::to_string(si) + ")");
        seg_ok = false;
        break;
      }
      const double th = nrm.dot(xc - seg.a) / den;
      const Vec3 q = seg.a + th * (seg.d - seg.a) - xc;
      Eigen::Matrix2d G;
      G << cv1.dot(cv1), cv1.dot(cv2), cv2.dot(cv1), cv2.dot(cv2);
      const Eigen::Vector2d rhs(q.dot(cv1), q.dot(cv2));
      const Eigen::Vector2d uv = G.ldlt().solve(rhs);
      if (th < 0 || th > 1 || std::abs(uv(0)) >= eps * double(n1) ||
          std::abs(uv(1)) >= eps * double(n2)) {
        rep.issues.push_back("station loop not pierced by its segment (segment " +
                             std::to_string(si) + ")");
        seg_ok = false;
        break;
      }
      for (int sj = 0; sj < int(gamma.segments.size()); ++sj)
        if (sj != si &&
            point_segment_distance(xc, gamma.segments[sj]) < rep.rho_star) {
          rep.issues.push_back("station loop too close to segment " +
                               std::to_string(sj));
          seg_ok = false;
        }
      if (!seg_ok) break;

      st.burgers = burgers_of_loop(xi, slips, st.loop);
      if (!st.burgers.classified) {
        rep.issues.push_back("station circulation not classifiable (segment " +
                             std::to_string(si) + ")");
        seg_ok = false;
      }
      if (seg_ok) {
        if (!have_consensus) {
          consensus = st.burgers.coeffs;
          have_consensus = true;
        } else if (st.burgers.coeffs != consensus) {
          rep.stations_consistent = false;
          rep.issues.push_back("station disagreement on segment " +
                               std::to_string(si));
          seg_ok = false;
        }
      }
      rep.stations.push_back(std::move(st));
      if (!seg_ok) break;
    }

    MeasureSegment ms;
    ms.a = seg.a;
    ms.d = seg.d;
    ms.tangent = t;
    ms.length = seg.length();
    if (seg_ok && have_consensus) {
      ms.coeffs = consensus;
      ivec3 v{0, 0, 0};
      for (std::size_t j = 0; j < slips.basis.size(); ++j)
        v = v + ms.coeffs[j] * slips.basis[j];
      ms.burgers = eps * c.cart(v);
    }
    rep.measure.segments.push_back(std::move(ms));
  }

  const auto jb = junction_balance(rep.measure, omega);
  rep.junctions_balanced = jb.balanced;
  if (!jb.balanced) rep.issues.push_back("junction imbalance");
  rep.ok = rep.stations_consistent && rep.junctions_balanced &&
           rep.issues.empty();
  return rep;
}

// ---------------------------------------------------------------------------
// curl-mass bound check

// |curl L xi|(Omega') against m * sqrt(H^1 of the fattened curve) * sqrt(E).
struct CurlMassReport {
  double curl_mass = 0;     // face jump mass with centroid in Omega'
  double tube_length = 0;   // curve length within distance 2 m eps of Omega'
  double energy = 0;        // total discrete energy over the region
  double m = 0;
  bool margin_ok = true;    // dist(Omega', domain boundary) >= 2 m eps
  double bound_factor = 0;  // curl_mass / (m * sqrt(tube_length * energy))
};

inline CurlMassReport curl_mass_bound_check(const StrainField& xi,
                                            const ClusterEnergy& ce,
                                            const SimplicialMesh& mesh,
                                            const PolyhedralCurve& gamma,
                                            double m, const Box& omega_prime,
                                            int threads = 1) {
  CurlMassReport rep;
  rep.m = m;
  const double reach = 2.0 * m * xi.region->eps;

  double margin = std::numeric_limits<double>::infinity();
  for (const auto& b : xi.region->domain)
    for (int i = 0; i < 3; ++i) {
      margin = std::min(margin, omega_prime.lo[i] - b.lo[i]);
      margin = std::min(margin, b.hi[i] - omega_prime.hi[i]);
    }
  rep.margin_ok = margin >= reach;

  const auto L = best_fit_field(xi, mesh);
  const auto fj = face_jump_measure(L);
  for (const auto& f : fj.faces)
    if (omega_prime.contains(f.centroid)) rep.curl_mass += f.curl_mass;

  auto dist_to_box = [&](const Vec3& p) {
    Vec3 d = Vec3::Zero();
    for (int i = 0; i < 3; ++i)
      d[i] = std::max({omega_prime.lo[i] - p[i], 0.0, p[i] - omega_prime.hi[i]});
    return d.norm();
  };
  const int samples = 4096;  // midpoint rule per segment
  for (const auto& s : gamma.segments) {
    int inside = 0;
    for (int i = 0; i < samples; ++i)
      if (dist_to_box(s.point_at((i + 0.5) / samples)) <= reach) ++inside;
    rep.tube_length += s.length() * double(inside) / samples;
  }

  rep.energy = total_energy(xi, ce, threads);
  const double den = m * std::sqrt(rep.tube_length * rep.energy);
  rep.bound_factor = den > 0
                         ? rep.curl_mass / den
                         : (rep.curl_mass > 0
                                ? std::numeric_limits<double>::infinity()
                                : 0.0);
  return rep;
}

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::json curve_to_json(const PolyhedralCurve& g) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : g.segments)
    segs.push_back({{"a", {s.a[0], s.a[1], s.a[2]}},
                    {"d", {s.d[0], s.d[1], s.d[2]}}});
  return {{"segments", segs}};
}

inline PolyhedralCurve curve_from_json(const nlohmann::json& j) {
  PolyhedralCurve g;
  for (const auto& js : j.at("segments")) {
    Segment s;
    for (int i = 0; i < 3; ++i) {
      s.a[i] = js.at("a").at(i).get<double>();
      s.d[i] = js.at("d").at(i).get<double>();
    }
    g.segments.push_back(s);
  }
  return g;
}

inline nlohmann::json measure_to_json(const DislocationMeasure& mu) {
  nlohmann::json basis = nlohmann::json::array();
  for (const auto& b : mu.basis) basis.push_back({b[0], b[1], b[2]});
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : mu.segments)
    segs.push_back({{"a", {s.a[0], s.a[1], s.a[2]}},
                    {"d", {s.d[0], s.d[1], s.d[2]}},
                    {"coeffs", {s.coeffs[0], s.coeffs[1], s.coeffs[2]}},
                    {"burgers", {s.burgers[0], s.burgers[1], s.burgers[2]}}});
  return {{"eps", mu.eps}, {"basis", basis}, {"segments", segs}};
}

inline DislocationMeasure measure_from_json(const nlohmann::json& j) {
  DislocationMeasure mu;
  mu.eps = j.at("eps").get<double>();
  for (const auto& jb : j.at("basis"))
    mu.basis.push_back(
        ivec3{jb.at(0).get<std::int64_t>(), jb.at(1).get<std::int64_t>(),
              jb.at(2).get<std::int64_t>()});
  for (const auto& js : j.at("segments")) {
    MeasureSegment s;
    for (int i = 0; i < 3; ++i) {
      s.a[i] = js.at("a").at(i).get<double>();
      s.d[i] = js.at("d").at(i).get<double>();
      s.coeffs[i] = js.at("coeffs").at(i).get<std::int64_t>();
      s.burgers[i] = js.at("burgers").at(i).get<double>();
    }
    s.length = (s.d - s.a).norm();
    s.tangent = s.length > 0 ? Vec3((s.d - s.a) / s.length) : Vec3::Zero();
    mu.segments.push_back(s);
  }
  return mu;
}

inline void write_core_csv(std::ostream& os, const CoreRegion& core) {
  os << csv_row({"n1", "n2", "n3", "x1", "x2", "x3"});
  for (const auto& cs : core.sites)
    os << csv_row({std::to_string(cs.site[0]), std::to_string(cs.site[1]),
                   std::to_string(cs.site[2]), format_double(cs.cart[0]),
                   format_double(cs.cart[1]), format_double(cs.cart[2])});
}

}  // namespace dcm
