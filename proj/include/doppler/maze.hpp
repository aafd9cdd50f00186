#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "doppler/common.hpp"
#include "doppler/rng.hpp"
#include "doppler/tensor.hpp"

#include <json.hpp>

namespace doppler::maze {

// 2D continuous point mass in a cell-grid maze. One world unit = one cell.

template <typename T>
struct StateT {
  T x = 0, y = 0, vx = 0, vy = 0;
};
template <typename T>
struct ActionT {
  T fx = 0, fy = 0;
};

using State = StateT<double>;
using Action = ActionT<double>;
using StateF = StateT<float>;
using ActionF = ActionT<float>;

struct Region {
  int prop = 0;      // proposition index
  int cx = 0, cy = 0;  // center cell
  double half_width = 0.35;
};

struct MazeSpec {
  int width = 0, height = 0;
  std::vector<uint8_t> walls;  // x + y * width, 1 = wall
  std::vector<Region> regions;
  double dt = 0.1;
  double damping = 0.99;
  double max_force = 1.0;
  double max_speed = 3.0;
  double pd_kp = 1.5;
  double pd_kd = 1.2;

  bool wall_at(int cx, int cy) const {
    if (cx < 0 || cy < 0 || cx >= width || cy >= height) return true;
    return walls[static_cast<size_t>(cx) + static_cast<size_t>(cy) * width] != 0;
  }
  template <typename T>
  bool wall_at_pos(T x, T y) const {
    return wall_at(static_cast<int>(std::floor(x)), static_cast<int>(std::floor(y)));
  }
  int num_props() const { return static_cast<int>(regions.size()); }

  std::vector<std::pair<int, int>> free_cells() const {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (!wall_at(x, y)) out.emplace_back(x, y);
    return out;
  }

  void validate() const {
    if (width <= 0 || height <= 0) throw Error("maze: empty grid");
    std::vector<int> seen(regions.size(), 0);
    for (const Region& r : regions) {
      if (r.prop < 0 || r.prop >= num_props() || seen[r.prop]++)
        throw Error("maze: region propositions must be exactly 0..n-1");
      if (wall_at(r.cx, r.cy)) throw Error("maze: region center in a wall cell");
      if (r.half_width <= 0 || r.half_width > 0.5)
        throw Error("maze: region must lie inside its free cell");
    }
    for (size_t i = 0; i < regions.size(); ++i)
      for (size_t j = i + 1; j < regions.size(); ++j) {
        const double dx = std::abs((regions[i].cx + 0.5) - (regions[j].cx + 0.5));
        const double dy = std::abs((regions[i].cy + 0.5) - (regions[j].cy + 0.5));
        if (dx <= regions[i].half_width + regions[j].half_width &&
            dy <= regions[i].half_width + regions[j].half_width)
          throw Error("maze: regions overlap");
      }
  }
};

// Parse a maze layout from rows of '#' (wall) and '.' (free), top row first.
inline MazeSpec maze_from_rows(const std::vector<std::string>& rows) {
  MazeSpec spec;
  spec.height = static_cast<int>(rows.size());
  spec.width = static_cast<int>(rows.at(0).size());
  spec.walls.assign(static_cast<size_t>(spec.width) * spec.height, 0);
  for (int y = 0; y < spec.height; ++y) {
    const std::string& row = rows[spec.height - 1 - y];  // rows given top-down
    if (static_cast<int>(row.size()) != spec.width) throw Error("maze: ragged rows");
    for (int x = 0; x < spec.width; ++x)
      spec.walls[x + y * spec.width] = row[x] == '#' ? 1 : 0;
  }
  return spec;
}

// Default 7x7 maze: border walls plus four interior pillars forming two
// corridor rings. Six disjoint propositional regions sit in separate
// openings; every region cell has a detour around it, so avoidance tasks
// stay satisfiable.
inline MazeSpec default_maze() {
  MazeSpec spec = maze_from_rows({
      "#######",
      "#.....#",
      "#.#.#.#",
      "#.....#",
      "#.#.#.#",
      "#.....#",
      "#######",
  });
  spec.regions = {
      {0, 1, 1, 0.35}, {1, 5, 1, 0.35}, {2, 1, 5, 0.35},
      {3, 5, 5, 0.35}, {4, 3, 4, 0.35}, {5, 3, 2, 0.35},
  };
  spec.validate();
  return spec;
}

inline constexpr double kCollisionMargin = 1e-4;

// Double-integrator update with axis-separated wall collision: the colliding
// axis has its velocity zeroed and position clamped at the wall face.
template <typename T>
StateT<T> step(const MazeSpec& spec, const StateT<T>& s, const ActionT<T>& a) {
  const T fmax = static_cast<T>(spec.max_force);
  const T dt = static_cast<T>(spec.dt);
  const T damping = static_cast<T>(spec.damping);
  const T ax = std::clamp(a.fx, -fmax, fmax);
  const T ay = std::clamp(a.fy, -fmax, fmax);

  T vx = damping * s.vx + dt * ax;
  T vy = damping * s.vy + dt * ay;
  const T speed = std::sqrt(vx * vx + vy * vy);
  const T vmax = static_cast<T>(spec.max_speed);
  if (speed > vmax) {
    vx *= vmax / speed;
    vy *= vmax / speed;
  }

  StateT<T> out;
  // x axis
  T nx = s.x + dt * vx;
  const int row = static_cast<int>(std::floor(s.y));
  if (spec.wall_at(static_cast<int>(std::floor(nx)), row)) {
    const int target = static_cast<int>(std::floor(nx));
    nx = vx > 0 ? static_cast<T>(target - kCollisionMargin)
                : static_cast<T>(target + 1 + kCollisionMargin);
    vx = 0;
  }
  // y axis (x already updated)
  T ny = s.y + dt * vy;
  const int col = static_cast<int>(std::floor(nx));
  if (spec.wall_at(col, static_cast<int>(std::floor(ny)))) {
    const int target = static_cast<int>(std::floor(ny));
    ny = vy > 0 ? static_cast<T>(target - kCollisionMargin)
                : static_cast<T>(target + 1 + kCollisionMargin);
    vy = 0;
  }
  out.x = nx;
  out.y = ny;
  out.vx = vx;
  out.vy = vy;
  return out;
}

// Labeling function L(s, a): proposition p holds iff the position lies in
// region p's closed square. Actions never affect labels in this environment.
template <typename T, typename Assign>
Assign label_as(const MazeSpec& spec, const StateT<T>& s, const ActionT<T>& /*a*/) {
  Assign sigma(0, spec.num_props());
  for (const Region& r : spec.regions) {
    const double cx = r.cx + 0.5, cy = r.cy + 0.5;
    if (std::abs(static_cast<double>(s.x) - cx) <= r.half_width &&
        std::abs(static_cast<double>(s.y) - cy) <= r.half_width)
      sigma.set(r.prop, true);
  }
  return sigma;
}

// ---------------------------------------------------------------------------
// Offline dataset

struct Episode {
  std::vector<StateF> states;   // length n + 1
  std::vector<ActionF> actions; // length n
};

struct NormStats {
  // columns 0..3 = state dims, 4..5 = action dims
  std::array<double, 6> mean{};
  std::array<double, 6> scale{};
};

struct DatasetGenConfig {
  int episodes = 1000;
  int horizon = 500;
  double waypoint_tol = 0.3;
  int waypoint_max_steps = 100;
  double noise_scale = 0.3;  // times max force
};

struct EpisodeDataset {
  MazeSpec spec;
  std::vector<Episode> episodes;
  NormStats stats;
  bool has_stats = false;
  uint64_t seed = 0;
  DatasetGenConfig gen;

  const NormStats& require_stats() const {
    if (!has_stats) throw Error("dataset: normalization stats undefined (empty dataset?)");
    return stats;
  }
};

inline NormStats compute_stats(const std::vector<Episode>& episodes) {
  NormStats st;
  std::array<double, 6> sum{}, sum2{};
  size_t ns = 0, na = 0;
  for (const Episode& ep : episodes) {
    for (const StateF& s : ep.states) {
      const double v[4] = {s.x, s.y, s.vx, s.vy};
      for (int c = 0; c < 4; ++c) {
        sum[c] += v[c];
        sum2[c] += v[c] * v[c];
      }
      ++ns;
    }
    for (const ActionF& a : ep.actions) {
      const double v[2] = {a.fx, a.fy};
      for (int c = 0; c < 2; ++c) {
        sum[4 + c] += v[c];
        sum2[4 + c] += v[c] * v[c];
      }
      ++na;
    }
  }
  if (ns == 0 || na == 0) throw Error("compute_stats: empty dataset");
  for (int c = 0; c < 6; ++c) {
    const double n = static_cast<double>(c < 4 ? ns : na);
    st.mean[c] = sum[c] / n;
    const double var = std::max(0.0, sum2[c] / n - st.mean[c] * st.mean[c]);
    st.scale[c] = std::max(std::sqrt(var), 1e-6);
  }
  return st;
}

template <typename T>
StateT<double> random_free_state(const MazeSpec& spec, Rng& rng,
                                 const std::vector<std::pair<int, int>>& free_cells) {
  const auto& [cx, cy] = free_cells[rng.uniform_int(free_cells.size())];
  StateT<double> s;
  s.x = cx + rng.uniform(0.05, 0.95);
  s.y = cy + rng.uniform(0.05, 0.95);
  return s;
}

inline State random_free_state(const MazeSpec& spec, Rng& rng) {
  const auto cells = spec.free_cells();
  return random_free_state<double>(spec, rng, cells);
}

// Teleport to a uniformly random free pose at least min_dist away, at rest.
inline State perturb(const MazeSpec& spec, const State& s, Rng& rng, double min_dist = 2.0) {
  const auto cells = spec.free_cells();
  for (int attempt = 0; attempt < 100000; ++attempt) {
    State cand = random_free_state<double>(spec, rng, cells);
    const double dx = cand.x - s.x, dy = cand.y - s.y;
    if (dx * dx + dy * dy >= min_dist * min_dist) return cand;
  }
  throw Error("perturb: no free pose at the requested distance");
}

// Non-expert behavior: drive a PD controller toward uniformly random free
// waypoints with Gaussian action noise, re-sampling the waypoint when reached
// or stale. All arithmetic is f32 so stored episodes replay bit-exactly.
inline Episode generate_episode(const MazeSpec& spec, const DatasetGenConfig& cfg, Rng& rng,
                                const std::vector<std::pair<int, int>>& free_cells) {
  Episode ep;
  ep.states.reserve(cfg.horizon + 1);
  ep.actions.reserve(cfg.horizon);

  StateF s;
  {
    const State s0 = random_free_state<double>(spec, rng, free_cells);
    s = StateF{static_cast<float>(s0.x), static_cast<float>(s0.y), 0.0f, 0.0f};
  }
  float wx = 0, wy = 0;
  int waypoint_age = -1;  // -1 = need a new waypoint
  const float kp = static_cast<float>(spec.pd_kp);
  const float kd = static_cast<float>(spec.pd_kd);
  const float fmax = static_cast<float>(spec.max_force);
  const float sigma = static_cast<float>(cfg.noise_scale * spec.max_force);

  for (int t = 0; t < cfg.horizon; ++t) {
    const float dx = wx - s.x, dy = wy - s.y;
    if (waypoint_age < 0 || waypoint_age >= cfg.waypoint_max_steps ||
        std::sqrt(dx * dx + dy * dy) < cfg.waypoint_tol) {
      const auto& [cx, cy] = free_cells[rng.uniform_int(free_cells.size())];
      wx = cx + 0.5f;
      wy = cy + 0.5f;
      waypoint_age = 0;
    }
    double n1, n2;
    rng.normal_pair(n1, n2);
    ActionF a;
    a.fx = std::clamp(kp * (wx - s.x) - kd * s.vx + sigma * static_cast<float>(n1), -fmax, fmax);
    a.fy = std::clamp(kp * (wy - s.y) - kd * s.vy + sigma * static_cast<float>(n2), -fmax, fmax);
    ep.states.push_back(s);
    ep.actions.push_back(a);
    s = step<float>(spec, s, a);
    ++waypoint_age;
  }
  ep.states.push_back(s);
  return ep;
}

inline EpisodeDataset generate_dataset(const MazeSpec& spec, uint64_t seed,
                                       const DatasetGenConfig& cfg) {
  EpisodeDataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.gen = cfg;
  ds.episodes.resize(cfg.episodes);
  const auto free_cells = spec.free_cells();
  parallel_for(static_cast<size_t>(cfg.episodes), [&](size_t i) {
    Rng rng = Rng::derive(seed, 0xDA7Aull, i);
    ds.episodes[i] = generate_episode(spec, cfg, rng, free_cells);
  });
  if (cfg.episodes > 0) {
    ds.stats = compute_stats(ds.episodes);
    ds.has_stats = true;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset file, magic DPLRDS1, little-endian; sidecar JSON carries seed,
// generation config and normalization stats.

struct DatasetError : Error {
  explicit DatasetError(const std::string& m) : Error(m) {}
};

inline constexpr char kDatasetMagic[] = "DPLRDS1";

inline void save_dataset(const EpisodeDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot open '" + path + "' for writing");
  using namespace doppler::detail;
  os.write(kDatasetMagic, 7);
  put_u32(os, 1);  // version
  put_u32(os, static_cast<uint32_t>(ds.spec.num_props()));
  put_u32(os, static_cast<uint32_t>(ds.spec.width));
  put_u32(os, static_cast<uint32_t>(ds.spec.height));
  put_f64(os, ds.spec.dt);
  put_f64(os, ds.spec.damping);
  put_f64(os, ds.spec.max_force);
  put_f64(os, ds.spec.max_speed);
  put_f64(os, ds.spec.pd_kp);
  put_f64(os, ds.spec.pd_kd);
  put_u32(os, static_cast<uint32_t>(ds.spec.regions.size()));
  for (const Region& r : ds.spec.regions) {
    put_u32(os, static_cast<uint32_t>(r.prop));
    put_u32(os, static_cast<uint32_t>(r.cx));
    put_u32(os, static_cast<uint32_t>(r.cy));
    put_f64(os, r.half_width);
  }
  os.write(reinterpret_cast<const char*>(ds.spec.walls.data()),
           static_cast<std::streamsize>(ds.spec.walls.size()));
  put_u64(os, ds.episodes.size());
  for (const Episode& ep : ds.episodes) {
    put_u32(os, static_cast<uint32_t>(ep.actions.size()));
    for (const StateF& s : ep.states) {
      put_f32(os, s.x);
      put_f32(os, s.y);
      put_f32(os, s.vx);
      put_f32(os, s.vy);
    }
    for (const ActionF& a : ep.actions) {
      put_f32(os, a.fx);
      put_f32(os, a.fy);
    }
  }
  if (!os) throw DatasetError("write failure on '" + path + "'");

  nlohmann::json meta;
  meta["seed"] = ds.seed;
  meta["episodes"] = ds.gen.episodes;
  meta["horizon"] = ds.gen.horizon;
  meta["waypoint_tol"] = ds.gen.waypoint_tol;
  meta["waypoint_max_steps"] = ds.gen.waypoint_max_steps;
  meta["noise_scale"] = ds.gen.noise_scale;
  if (ds.has_stats) {
    meta["stats"]["mean"] = ds.stats.mean;
    meta["stats"]["scale"] = ds.stats.scale;
  }
  std::ofstream ms(path + ".meta.json");
  if (!ms) throw DatasetError("cannot open sidecar metadata for writing");
  ms << meta.dump(2) << "\n";
}

inline EpisodeDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot open '" + path + "'");
  using namespace doppler::detail;
  char magic[7];
  if (!is.read(magic, 7) || std::memcmp(magic, kDatasetMagic, 7) != 0)
    throw DatasetError("bad magic: not a DPLRDS1 dataset");
  const uint32_t version = get_u32(is);
  if (version != 1) throw DatasetError("unsupported dataset version");
  EpisodeDataset ds;
  const uint32_t num_props = get_u32(is);
  ds.spec.width = static_cast<int>(get_u32(is));
  ds.spec.height = static_cast<int>(get_u32(is));
  ds.spec.dt = get_f64(is);
  ds.spec.damping = get_f64(is);
  ds.spec.max_force = get_f64(is);
  ds.spec.max_speed = get_f64(is);
  ds.spec.pd_kp = get_f64(is);
  ds.spec.pd_kd = get_f64(is);
  const uint32_t num_regions = get_u32(is);
  if (num_regions != num_props) throw DatasetError("region table inconsistent with |P|");
  ds.spec.regions.resize(num_regions);
  for (Region& r : ds.spec.regions) {
    r.prop = static_cast<int>(get_u32(is));
    r.cx = static_cast<int>(get_u32(is));
    r.cy = static_cast<int>(get_u32(is));
    r.half_width = get_f64(is);
  }
  ds.spec.walls.resize(static_cast<size_t>(ds.spec.width) * ds.spec.height);
  if (!is.read(reinterpret_cast<char*>(ds.spec.walls.data()),
               static_cast<std::streamsize>(ds.spec.walls.size())))
    throw DatasetError("truncated wall table");
  const uint64_t num_episodes = get_u64(is);
  ds.episodes.resize(num_episodes);
  for (Episode& ep : ds.episodes) {
    const uint32_t n = get_u32(is);
    ep.states.resize(n + 1);
    ep.actions.resize(n);
    for (StateF& s : ep.states) {
      s.x = get_f32(is);
      s.y = get_f32(is);
      s.vx = get_f32(is);
      s.vy = get_f32(is);
    }
    for (ActionF& a : ep.actions) {
      a.fx = get_f32(is);
      a.fy = get_f32(is);
    }
  }
  ds.spec.validate();

  std::ifstream ms(path + ".meta.json");
  if (ms) {
    nlohmann::json meta = nlohmann::json::parse(ms, nullptr, true, true);
    ds.seed = meta.value("seed", uint64_t(0));
    ds.gen.episodes = meta.value("episodes", static_cast<int>(num_episodes));
    ds.gen.horizon = meta.value("horizon", 0);
    ds.gen.waypoint_tol = meta.value("waypoint_tol", 0.3);
    ds.gen.waypoint_max_steps = meta.value("waypoint_max_steps", 100);
    ds.gen.noise_scale = meta.value("noise_scale", 0.3);
    if (meta.contains("stats")) {
      for (int c = 0; c < 6; ++c) {
        ds.stats.mean[c] = meta["stats"]["mean"][c].get<double>();
        ds.stats.scale[c] = meta["stats"]["scale"][c].get<double>();
      }
      ds.has_stats = true;
    }
  }
  if (!ds.has_stats && !ds.episodes.empty()) {
    ds.stats = compute_stats(ds.episodes);
    ds.has_stats = true;
  }
  return ds;
}

}  // namespace doppler::maze
