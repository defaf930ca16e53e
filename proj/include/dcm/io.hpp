#pragma once

// CSV (RFC 4180) and JSON serialization for fields and crystals.
// Strain CSV layout: one metadata record (eps, lattice id), one column
// header record, then x1..x3,h1..h3,v1..v3 rows. Site and bond coordinates
// are integer lattice coordinates, so they round-trip exactly.

#include <dcm/fields.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace dcm {

using nlohmann::json;

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += "\"";
  return out;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out += ',';
    out += csv_escape(fields[i]);
  }
  out += "\r\n";
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string rat_str(const Rat& r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

inline Rat rat_parse(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) {
    // integers or decimal floats
    if (s.find('.') != std::string::npos || s.find('e') != std::string::npos ||
        s.find('E') != std::string::npos)
      return rat_from_double(std::stod(s));
    return Rat(BigInt(s));
  }
  return Rat(BigInt(s.substr(0, slash)), BigInt(s.substr(slash + 1)));
}

// split a CSV record (no embedded newlines in our own files)
inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else
          quoted = false;
      } else
        cur += c;
    } else if (c == '"')
      quoted = true;
    else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c == '\r') {
      // swallow
    } else
      cur += c;
  }
  out.push_back(cur);
  return out;
}

inline void write_strain_csv(std::ostream& os, const StrainField& xi) {
  const LatticeRegion& r = *xi.region;
  os << csv_row({"meta", "eps", rat_str(r.eps_exact), "lattice",
                 r.crystal->id, "", "", "", ""});
  os << csv_row({"x1", "x2", "x3", "h1", "h2", "h3", "v1", "v2", "v3"});
  const int np = r.nplus();
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    for (int k = 0; k < np; ++k) {
      if (r.bond_partner[std::int64_t(s) * np + k] < 0) continue;
      const ivec3& x = r.sites[s];
      const ivec3& h = r.crystal->nplus[k];
      const Vec3& v = xi.vals[std::int64_t(s) * np + k];
      os << csv_row({std::to_string(x[0]), std::to_string(x[1]),
                     std::to_string(x[2]), std::to_string(h[0]),
                     std::to_string(h[1]), std::to_string(h[2]),
                     format_double(v[0]), format_double(v[1]),
                     format_double(v[2])});
    }
}

inline StrainField read_strain_csv(std::istream& is, const LatticeRegion& r) {
  std::string line;
  if (!std::getline(is, line)) throw DcmError("strain csv: empty file");
  auto meta = csv_split(line);
  if (meta.size() < 5 || meta[0] != "meta")
    throw DcmError("strain csv: missing metadata record");
  if (rat_parse(meta[2]) != r.eps_exact)
    throw DcmError("strain csv: eps mismatch");
  if (meta[4] != r.crystal->id) throw DcmError("strain csv: lattice mismatch");
  if (!std::getline(is, line)) throw DcmError("strain csv: missing header");
  StrainField xi(r);
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    auto f = csv_split(line);
    if (f.size() != 9) throw DcmError("strain csv: bad record");
    const ivec3 x{std::stoll(f[0]), std::stoll(f[1]), std::stoll(f[2])};
    const ivec3 h{std::stoll(f[3]), std::stoll(f[4]), std::stoll(f[5])};
    xi.set(x, h, Vec3(std::stod(f[6]), std::stod(f[7]), std::stod(f[8])));
  }
  return xi;
}

inline json strain_to_json(const StrainField& xi) {
  const LatticeRegion& r = *xi.region;
  json j;
  j["eps"] = rat_str(r.eps_exact);
  j["lattice"] = r.crystal->id;
  json bonds = json::array();
  const int np = r.nplus();
  for (std::size_t s = 0; s < r.sites.size(); ++s)
    for (int k = 0; k < np; ++k) {
      if (r.bond_partner[std::int64_t(s) * np + k] < 0) continue;
      const ivec3& x = r.sites[s];
      const ivec3& h = r.crystal->nplus[k];
      const Vec3& v = xi.vals[std::int64_t(s) * np + k];
      bonds.push_back({x[0], x[1], x[2], h[0], h[1], h[2], v[0], v[1], v[2]});
    }
  j["bonds"] = std::move(bonds);
  return j;
}

inline StrainField strain_from_json(const json& j, const LatticeRegion& r) {
  if (rat_parse(j.at("eps").get<std::string>()) != r.eps_exact)
    throw DcmError("strain json: eps mismatch");
  if (j.at("lattice").get<std::string>() != r.crystal->id)
    throw DcmError("strain json: lattice mismatch");
  StrainField xi(r);
  for (const auto& b : j.at("bonds")) {
    const ivec3 x{b[0].get<std::int64_t>(), b[1].get<std::int64_t>(),
                  b[2].get<std::int64_t>()};
    const ivec3 h{b[3].get<std::int64_t>(), b[4].get<std::int64_t>(),
                  b[5].get<std::int64_t>()};
    xi.set(x, h, Vec3(b[6].get<double>(), b[7].get<double>(),
                      b[8].get<double>()));
  }
  return xi;
}

inline json crystal_to_json(const BravaisCrystal& c) {
  json j;
  j["id"] = c.id;
  json basis = json::array();
  for (int col = 0; col < 3; ++col) {
    json gen = json::array();
    for (int row = 0; row < 3; ++row) gen.push_back(rat_str(c.A_exact[row][col]));
    basis.push_back(gen);
  }
  j["basis"] = basis;
  j["bond_cutoff_sq"] = rat_str(c.bond_cutoff_sq);
  j["cluster_cutoff_sq"] = rat_str(c.cluster_cutoff_sq);
  j["neighbor_count"] = c.neighbors.size();
  j["cluster_count"] = c.cluster.size();
  j["has_cover"] = c.has_cover();
  j["d_Tstar"] = c.d_Tstar;
  j["d_cluster"] = c.d_cluster;
  j["k_star"] = c.k_star;
  json nb = json::array();
  for (const auto& h : c.neighbors) nb.push_back({h[0], h[1], h[2]});
  j["neighbors"] = nb;
  return j;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DcmError("cannot open for write: " + path);
  os << text;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DcmError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace dcm
