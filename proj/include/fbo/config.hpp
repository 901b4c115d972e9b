#pragma once

// Flat `key = value` run configuration. Lines starting with '#' are comments,
// list values are comma separated. Unknown keys are errors. See README.md for
// the full key table.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fbo/runner.hpp"

namespace fbo {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::uint64_t parse_u64(const std::string& text, const std::string& key) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    throw ValidationError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  try {
    return std::stoull(text);
  } catch (const std::exception&) {
    throw ValidationError(key + ": integer out of range '" + text + "'");
  }
}

inline std::size_t parse_count(const std::string& text, const std::string& key) {
  return static_cast<std::size_t>(parse_u64(text, key));
}

template <class T, class Parse>
std::string join(const std::vector<T>& xs, Parse&& fmt) {
  std::string out;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (k) out += ',';
    out += fmt(xs[k]);
  }
  return out;
}

struct StepPreset {
  const char* name;
  double y, v, x;
};

// Named stepsize sets for (y, v, x); local and server values coincide in each.
inline constexpr StepPreset kStepPresets[] = {
    {"mnist_mlp", 0.2, 0.1, 0.05},
    {"cifar_cnn", 0.1, 0.05, 0.03},
    {"heterogeneous", 0.03, 0.02, 0.01},
};

}  // namespace detail

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "algorithm", "instance", "instance_file", "instance_seed", "n", "d_x", "d_y", "mu_g", "L1", "heterogeneity",
      "weight_profile", "P", "T", "tau_profile", "tau", "tau_lo", "tau_hi", "tau_list", "coef_kind", "alpha_min",
      "alpha_max", "coef_ratio", "eta_y", "eta_v", "eta_x", "gamma_y", "gamma_v", "gamma_x", "step_decay",
      "stepsize_preset", "gamma_scale", "noise", "sigma_f", "sigma_g", "sigma_gg", "Lf_cap", "seed", "output_dir",
      "metrics_every", "x0", "y0", "sweep_param", "sweep_values", "sweep_seeds"};
  return keys;
}

/// Parses and validates a config. Every error names the offending key.
inline RunConfig parse_config(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (!known_config_keys().count(key)) throw ValidationError(key + ": unknown config key (line " + std::to_string(lineno) + ")");
    if (kv.count(key)) throw ValidationError(key + ": duplicate key (line " + std::to_string(lineno) + ")");
    kv[key] = value;
  }

  auto has = [&](const char* k) { return kv.count(k) > 0; };
  auto num = [&](const char* k, double fallback) { return has(k) ? parse_double(kv[k], k) : fallback; };
  auto count = [&](const char* k, std::size_t fallback) { return has(k) ? detail::parse_count(kv[k], k) : fallback; };
  auto require = [&](const char* k) {
    if (!has(k)) throw ValidationError(std::string(k) + ": required key is missing");
  };

  RunConfig cfg;
  require("algorithm");
  if (kv["algorithm"] == "simfbo") cfg.algorithm = Algorithm::kSimFBO;
  else if (kv["algorithm"] == "shrofbo") cfg.algorithm = Algorithm::kShroFBO;
  else throw ValidationError("algorithm: must be simfbo or shrofbo (got '" + kv["algorithm"] + "')");

  const std::string source = has("instance") ? kv["instance"] : "synthetic";
  auto& spec = cfg.instance.spec;
  if (source == "synthetic") {
    cfg.instance.kind = InstanceSource::Kind::kSynthetic;
    require("n");
  } else if (source == "canonical_1d") {
    cfg.instance.kind = InstanceSource::Kind::kCanonical1d;
  } else if (source == "file") {
    cfg.instance.kind = InstanceSource::Kind::kFile;
    require("instance_file");
  } else {
    throw ValidationError("instance: must be synthetic, canonical_1d or file (got '" + source + "')");
  }
  if (has("instance_file") && cfg.instance.kind != InstanceSource::Kind::kFile) {
    throw ValidationError("instance_file: only valid with instance = file");
  }
  cfg.instance.file = has("instance_file") ? kv["instance_file"] : "";
  cfg.instance.seed = has("instance_seed") ? detail::parse_u64(kv["instance_seed"], "instance_seed") : 0;
  spec.n = count("n", 1);
  spec.d_x = count("d_x", 1);
  spec.d_y = count("d_y", 1);
  spec.mu_g_target = num("mu_g", 1.0);
  spec.L1_target = num("L1", 4.0);
  spec.heterogeneity = num("heterogeneity", 0.5);
  const std::string wp = has("weight_profile") ? kv["weight_profile"] : "uniform";
  if (wp == "uniform") spec.weight_profile = WeightProfile::kUniform;
  else if (wp == "random") spec.weight_profile = WeightProfile::kRandom;
  else throw ValidationError("weight_profile: must be uniform or random");
  if (cfg.instance.kind == InstanceSource::Kind::kCanonical1d) {
    if (has("n") && spec.n != 1) throw ValidationError("n: canonical_1d has exactly one client");
    spec = InstanceSpec{1, 1, 1, 2.0, 2.0, 0.0, WeightProfile::kUniform};
    cfg.instance.seed = 0;
  }

  require("P");
  require("T");
  cfg.P = count("P", 1);
  cfg.T = count("T", 1);

  const std::string tp = has("tau_profile") ? kv["tau_profile"] : "fixed";
  if (tp == "fixed") {
    cfg.tau = TauProfile::fixed(count("tau", 1));
  } else if (tp == "uniform") {
    require("tau_lo");
    require("tau_hi");
    cfg.tau = TauProfile::uniform(count("tau_lo", 1), count("tau_hi", 1));
  } else if (tp == "per_client") {
    require("tau_list");
    std::vector<std::size_t> taus;
    for (const auto& s : detail::split_list(kv["tau_list"])) taus.push_back(detail::parse_count(s, "tau_list"));
    cfg.tau = TauProfile::listed(std::move(taus));
  } else {
    throw ValidationError("tau_profile: must be fixed, uniform or per_client");
  }

  const std::string ck = has("coef_kind") ? kv["coef_kind"] : "constant";
  if (ck == "constant") cfg.coef.kind = CoefficientSchedule::Kind::kConstant;
  else if (ck == "geometric") cfg.coef.kind = CoefficientSchedule::Kind::kGeometric;
  else throw ValidationError("coef_kind: must be constant or geometric");
  cfg.coef.alpha_max = num("alpha_max", 1.0);
  cfg.coef.alpha_min = num("alpha_min", cfg.coef.kind == CoefficientSchedule::Kind::kConstant ? cfg.coef.alpha_max : 1.0);
  cfg.coef.ratio = num("coef_ratio", 1.0);

  // Stepsizes: preset first, then a γ scale, then explicit keys override.
  auto& st = cfg.steps;
  bool have_eta = false, have_gamma = false;
  if (has("stepsize_preset")) {
    bool found = false;
    for (const auto& pr : detail::kStepPresets) {
      if (kv["stepsize_preset"] == pr.name) {
        st.eta_y = st.gamma_y = pr.y;
        st.eta_v = st.gamma_v = pr.v;
        st.eta_x = st.gamma_x = pr.x;
        found = have_eta = have_gamma = true;
      }
    }
    if (!found) throw ValidationError("stepsize_preset: must be mnist_mlp, cifar_cnn or heterogeneous");
  }
  if (has("gamma_scale")) {
    if (cfg.tau.kind == TauProfile::Kind::kPerClient && cfg.tau.per_client.empty()) throw ValidationError("tau_list: empty");
    double tau_bar = 1.0;
    switch (cfg.tau.kind) {
      case TauProfile::Kind::kFixed: tau_bar = static_cast<double>(cfg.tau.tau); break;
      case TauProfile::Kind::kUniform: tau_bar = 0.5 * static_cast<double>(cfg.tau.lo + cfg.tau.hi); break;
      case TauProfile::Kind::kPerClient: {
        double s = 0.0;
        for (auto t : cfg.tau.per_client) s += static_cast<double>(t);
        tau_bar = s / static_cast<double>(cfg.tau.per_client.size());
        break;
      }
    }
    if (!(tau_bar >= 1.0) || cfg.T < 1) throw ValidationError("gamma_scale: needs valid tau and T");
    const double g = default_gamma_x(num("gamma_scale", 1.0), cfg.P, tau_bar, cfg.T);
    st.gamma_x = st.gamma_y = st.gamma_v = g;
    have_gamma = true;
  }
  const char* eta_keys[] = {"eta_y", "eta_v", "eta_x"};
  const char* gamma_keys[] = {"gamma_y", "gamma_v", "gamma_x"};
  double* eta_vals[] = {&st.eta_y, &st.eta_v, &st.eta_x};
  double* gamma_vals[] = {&st.gamma_y, &st.gamma_v, &st.gamma_x};
  for (int k = 0; k < 3; ++k) {
    if (has(eta_keys[k])) *eta_vals[k] = num(eta_keys[k], 0.0);
    else if (!have_eta) throw ValidationError(std::string(eta_keys[k]) + ": required (or set stepsize_preset)");
    if (has(gamma_keys[k])) *gamma_vals[k] = num(gamma_keys[k], 0.0);
    else if (!have_gamma) throw ValidationError(std::string(gamma_keys[k]) + ": required (or set stepsize_preset / gamma_scale)");
  }
  st.decay = num("step_decay", 0.0);

  cfg.noise.sigma_f = num("sigma_f", 0.0);
  cfg.noise.sigma_g = num("sigma_g", 0.0);
  cfg.noise.sigma_gg = num("sigma_gg", 0.0);
  if (has("noise")) {
    if (kv["noise"] == "on") cfg.noise.enabled = true;
    else if (kv["noise"] == "off") cfg.noise.enabled = false;
    else throw ValidationError("noise: must be on or off");
  } else {
    cfg.noise.enabled = cfg.noise.sigma_f > 0.0 || cfg.noise.sigma_g > 0.0 || cfg.noise.sigma_gg > 0.0;
  }

  if (has("Lf_cap") && kv["Lf_cap"] != "auto") {
    cfg.Lf_cap = parse_double(kv["Lf_cap"], "Lf_cap");
    if (!(cfg.Lf_cap > 0.0)) throw ValidationError("Lf_cap: must be > 0 (or auto)");
  }
  cfg.seed = has("seed") ? detail::parse_u64(kv["seed"], "seed") : 0;
  cfg.output_dir = has("output_dir") ? kv["output_dir"] : "";
  cfg.metrics_every = count("metrics_every", 1);
  if (has("x0")) for (const auto& s : detail::split_list(kv["x0"])) cfg.x0.push_back(parse_double(s, "x0"));
  if (has("y0")) for (const auto& s : detail::split_list(kv["y0"])) cfg.y0.push_back(parse_double(s, "y0"));
  if (cfg.instance.kind != InstanceSource::Kind::kFile) {
    if (!cfg.x0.empty() && cfg.x0.size() != spec.d_x) throw ValidationError("x0: expected " + std::to_string(spec.d_x) + " entries");
    if (!cfg.y0.empty() && cfg.y0.size() != spec.d_y) throw ValidationError("y0: expected " + std::to_string(spec.d_y) + " entries");
  }

  if (has("sweep_param")) {
    cfg.sweep_param = kv["sweep_param"];
    if (cfg.sweep_param != "P" && cfg.sweep_param != "T" && cfg.sweep_param != "sigma" && cfg.sweep_param != "tau") {
      throw ValidationError("sweep_param: must be one of P, T, sigma, tau");
    }
  }
  if (has("sweep_values")) for (const auto& s : detail::split_list(kv["sweep_values"])) cfg.sweep_values.push_back(parse_double(s, "sweep_values"));
  if (has("sweep_seeds")) for (const auto& s : detail::split_list(kv["sweep_seeds"])) cfg.sweep_seeds.push_back(detail::parse_u64(s, "sweep_seeds"));

  validate_config(cfg);
  return cfg;
}

inline RunConfig parse_config_string(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("config: cannot open " + path.string());
  return parse_config(is);
}

/// Canonical text form; parse_config(to_config_text(c)) == c.
inline std::string to_config_text(const RunConfig& cfg) {
  std::ostringstream os;
  auto f = [](double v) { return format_double(v); };
  const auto& spec = cfg.instance.spec;
  os << "algorithm = " << (cfg.algorithm == Algorithm::kSimFBO ? "simfbo" : "shrofbo") << '\n';
  switch (cfg.instance.kind) {
    case InstanceSource::Kind::kSynthetic: os << "instance = synthetic\n"; break;
    case InstanceSource::Kind::kCanonical1d: os << "instance = canonical_1d\n"; break;
    case InstanceSource::Kind::kFile: os << "instance = file\ninstance_file = " << cfg.instance.file << '\n'; break;
  }
  if (cfg.instance.kind != InstanceSource::Kind::kCanonical1d) {
    os << "instance_seed = " << cfg.instance.seed << '\n';
    os << "n = " << spec.n << "\nd_x = " << spec.d_x << "\nd_y = " << spec.d_y << '\n';
    os << "mu_g = " << f(spec.mu_g_target) << "\nL1 = " << f(spec.L1_target) << '\n';
    os << "heterogeneity = " << f(spec.heterogeneity) << '\n';
    os << "weight_profile = " << (spec.weight_profile == WeightProfile::kUniform ? "uniform" : "random") << '\n';
  }
  os << "P = " << cfg.P << "\nT = " << cfg.T << '\n';
  switch (cfg.tau.kind) {
    case TauProfile::Kind::kFixed: os << "tau_profile = fixed\ntau = " << cfg.tau.tau << '\n'; break;
    case TauProfile::Kind::kUniform: os << "tau_profile = uniform\ntau_lo = " << cfg.tau.lo << "\ntau_hi = " << cfg.tau.hi << '\n'; break;
    case TauProfile::Kind::kPerClient:
      os << "tau_profile = per_client\ntau_list = " << detail::join(cfg.tau.per_client, [](std::size_t t) { return std::to_string(t); }) << '\n';
      break;
  }
  os << "coef_kind = " << (cfg.coef.kind == CoefficientSchedule::Kind::kConstant ? "constant" : "geometric") << '\n';
  os << "alpha_min = " << f(cfg.coef.alpha_min) << "\nalpha_max = " << f(cfg.coef.alpha_max) << "\ncoef_ratio = " << f(cfg.coef.ratio) << '\n';
  const auto& st = cfg.steps;
  os << "eta_y = " << f(st.eta_y) << "\neta_v = " << f(st.eta_v) << "\neta_x = " << f(st.eta_x) << '\n';
  os << "gamma_y = " << f(st.gamma_y) << "\ngamma_v = " << f(st.gamma_v) << "\ngamma_x = " << f(st.gamma_x) << '\n';
  os << "step_decay = " << f(st.decay) << '\n';
  os << "noise = " << (cfg.noise.enabled ? "on" : "off") << '\n';
  os << "sigma_f = " << f(cfg.noise.sigma_f) << "\nsigma_g = " << f(cfg.noise.sigma_g) << "\nsigma_gg = " << f(cfg.noise.sigma_gg) << '\n';
  os << "Lf_cap = " << (cfg.Lf_cap > 0.0 ? f(cfg.Lf_cap) : std::string("auto")) << '\n';
  os << "seed = " << cfg.seed << '\n';
  if (!cfg.output_dir.empty()) os << "output_dir = " << cfg.output_dir << '\n';
  os << "metrics_every = " << cfg.metrics_every << '\n';
  if (!cfg.x0.empty()) os << "x0 = " << detail::join(cfg.x0, f) << '\n';
  if (!cfg.y0.empty()) os << "y0 = " << detail::join(cfg.y0, f) << '\n';
  if (!cfg.sweep_param.empty()) os << "sweep_param = " << cfg.sweep_param << '\n';
  if (!cfg.sweep_values.empty()) os << "sweep_values = " << detail::join(cfg.sweep_values, f) << '\n';
  if (!cfg.sweep_seeds.empty()) {
    os << "sweep_seeds = " << detail::join(cfg.sweep_seeds, [](std::uint64_t s) { return std::to_string(s); }) << '\n';
  }
  return os.str();
}

}  // namespace fbo
