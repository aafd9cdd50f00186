#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doppler/common.hpp"

namespace doppler::config {

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error(m) {}
};

// Sectioned key = value configuration (TOML-compatible subset: sections,
// scalars, '#' comments). Unknown keys are rejected; serialization emits a
// normalized canonical form so a resolved config re-reads identically.
struct RunConfig {
  uint64_t seed = 1;
  int threads = 2;

  struct Env {
    double dt = 0.1;
    double damping = 0.99;
    double max_force = 1.0;
    double max_speed = 3.0;
    double pd_kp = 1.5;
    double pd_kd = 1.2;
    std::string walls;    // optional row-major layout override, rows joined by '|'
    std::string regions;  // optional "prop:cx:cy:halfwidth" list, ',' separated
  } env;

  struct Dataset {
    int episodes = 1000;
    int horizon = 500;
    double waypoint_tol = 0.3;
    int waypoint_max_steps = 100;
    double noise_scale = 0.3;
  } dataset;

  struct Diffusion {
    int steps = 48;          // N
    double beta_min = 0.0;   // 0 = derive from steps
    double beta_max = 0.0;
    int horizon = 8;         // option length k
    int hidden = 256;
    int depth = 4;
    int time_embed = 32;
    double lr = 2e-4;
    int batch_size = 64;
    int train_steps = 16000;
    double zeta0 = 0.2;
    double ridge = 1e-3;
  } diffusion;

  struct Critic {
    double gamma = 0.99;
    int batch = 32;
    int steps = 20000;
    int proposals = 8;
    int target_period = 2;
    double polyak = 0.005;
    double lr = 3e-4;
    double target_noise = 0.1;
    double noise_clip = 0.25;
    int hidden = 256;
    int depth = 3;
    int embed_dim = 32;
    int rgc_rounds = 3;
    int pool = 6144;
  } critic;

  struct Planner {
    int proposals = 6;
    int budget = 600;
    std::string guidance = "diversity";  // none | diversity | q
  } planner;

  struct Eval {
    int tasks = 20;
    int task_depth = 2;
    int starts = 10;
    int heldout_tasks = 10;
    bool perturb = false;
    std::string fixed_start;  // optional "x,y" overriding random starts
  } eval;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

struct Setter {
  enum Type { U64, Int, Double, Bool, Str } type;
  void* target;
};

inline void apply(const Setter& s, const std::string& raw, const std::string& where) {
  try {
    switch (s.type) {
      case Setter::U64: *static_cast<uint64_t*>(s.target) = std::stoull(raw); break;
      case Setter::Int: *static_cast<int*>(s.target) = std::stoi(raw); break;
      case Setter::Double: *static_cast<double*>(s.target) = std::stod(raw); break;
      case Setter::Bool: {
        if (raw == "true")
          *static_cast<bool*>(s.target) = true;
        else if (raw == "false")
          *static_cast<bool*>(s.target) = false;
        else
          throw ConfigError("expected true/false");
        break;
      }
      case Setter::Str: *static_cast<std::string*>(s.target) = unquote(raw); break;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("bad value '" + raw + "' for " + where);
  }
}

// Single schema used by both the parser and the serializer.
inline std::map<std::string, Setter> schema(RunConfig& c) {
  using S = Setter;
  return {
      {".seed", {S::U64, &c.seed}},
      {".threads", {S::Int, &c.threads}},
      {"env.dt", {S::Double, &c.env.dt}},
      {"env.damping", {S::Double, &c.env.damping}},
      {"env.max_force", {S::Double, &c.env.max_force}},
      {"env.max_speed", {S::Double, &c.env.max_speed}},
      {"env.pd_kp", {S::Double, &c.env.pd_kp}},
      {"env.pd_kd", {S::Double, &c.env.pd_kd}},
      {"env.walls", {S::Str, &c.env.walls}},
      {"env.regions", {S::Str, &c.env.regions}},
      {"dataset.episodes", {S::Int, &c.dataset.episodes}},
      {"dataset.horizon", {S::Int, &c.dataset.horizon}},
      {"dataset.waypoint_tol", {S::Double, &c.dataset.waypoint_tol}},
      {"dataset.waypoint_max_steps", {S::Int, &c.dataset.waypoint_max_steps}},
      {"dataset.noise_scale", {S::Double, &c.dataset.noise_scale}},
      {"diffusion.steps", {S::Int, &c.diffusion.steps}},
      {"diffusion.beta_min", {S::Double, &c.diffusion.beta_min}},
      {"diffusion.beta_max", {S::Double, &c.diffusion.beta_max}},
      {"diffusion.horizon", {S::Int, &c.diffusion.horizon}},
      {"diffusion.hidden", {S::Int, &c.diffusion.hidden}},
      {"diffusion.depth", {S::Int, &c.diffusion.depth}},
      {"diffusion.time_embed", {S::Int, &c.diffusion.time_embed}},
      {"diffusion.lr", {S::Double, &c.diffusion.lr}},
      {"diffusion.batch_size", {S::Int, &c.diffusion.batch_size}},
      {"diffusion.train_steps", {S::Int, &c.diffusion.train_steps}},
      {"diffusion.zeta0", {S::Double, &c.diffusion.zeta0}},
      {"diffusion.ridge", {S::Double, &c.diffusion.ridge}},
      {"critic.gamma", {S::Double, &c.critic.gamma}},
      {"critic.batch", {S::Int, &c.critic.batch}},
      {"critic.steps", {S::Int, &c.critic.steps}},
      {"critic.proposals", {S::Int, &c.critic.proposals}},
      {"critic.target_period", {S::Int, &c.critic.target_period}},
      {"critic.polyak", {S::Double, &c.critic.polyak}},
      {"critic.lr", {S::Double, &c.critic.lr}},
      {"critic.target_noise", {S::Double, &c.critic.target_noise}},
      {"critic.noise_clip", {S::Double, &c.critic.noise_clip}},
      {"critic.hidden", {S::Int, &c.critic.hidden}},
      {"critic.depth", {S::Int, &c.critic.depth}},
      {"critic.embed_dim", {S::Int, &c.critic.embed_dim}},
      {"critic.rgc_rounds", {S::Int, &c.critic.rgc_rounds}},
      {"critic.pool", {S::Int, &c.critic.pool}},
      {"planner.proposals", {S::Int, &c.planner.proposals}},
      {"planner.budget", {S::Int, &c.planner.budget}},
      {"planner.guidance", {S::Str, &c.planner.guidance}},
      {"eval.tasks", {S::Int, &c.eval.tasks}},
      {"eval.task_depth", {S::Int, &c.eval.task_depth}},
      {"eval.starts", {S::Int, &c.eval.starts}},
      {"eval.heldout_tasks", {S::Int, &c.eval.heldout_tasks}},
      {"eval.perturb", {S::Bool, &c.eval.perturb}},
      {"eval.fixed_start", {S::Str, &c.eval.fixed_start}},
  };
}

}  // namespace detail

inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  auto sch = detail::schema(cfg);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const std::string full = section + "." + key;
    auto it = sch.find(full);
    if (it == sch.end())
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + full + "'");
    detail::apply(it->second, value, full);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_config(in);
}

inline std::string serialize_config(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;  // schema takes non-const pointers
  auto sch = detail::schema(cfg);
  std::ostringstream out;
  out.precision(17);
  std::string section = ".";
  auto emit = [&](const std::string& full, const detail::Setter& s) {
    const std::string key = full.substr(full.find('.') + 1);
    switch (s.type) {
      case detail::Setter::U64: out << key << " = " << *static_cast<uint64_t*>(s.target); break;
      case detail::Setter::Int: out << key << " = " << *static_cast<int*>(s.target); break;
      case detail::Setter::Double: out << key << " = " << *static_cast<double*>(s.target); break;
      case detail::Setter::Bool:
        out << key << " = " << (*static_cast<bool*>(s.target) ? "true" : "false");
        break;
      case detail::Setter::Str:
        out << key << " = \"" << *static_cast<std::string*>(s.target) << "\"";
        break;
    }
    out << "\n";
  };
  // top-level keys first, then sections in schema (alphabetical) order
  for (const auto& [full, s] : sch)
    if (full.front() == '.') emit(full, s);
  for (const auto& [full, s] : sch) {
    if (full.front() == '.') continue;
    const std::string sec = full.substr(0, full.find('.'));
    if (sec != section) {
      out << "\n[" << sec << "]\n";
      section = sec;
    }
    emit(full, s);
  }
  return out.str();
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config '" + path + "'");
  out << serialize_config(cfg);
}

}  // namespace doppler::config
