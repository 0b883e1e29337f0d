#pragma once

// Desk-scale tool-placement world. A launcher ball flies under gravity inside
// the unit arena; the agent places tools (line segments with latent angle,
// length, restitution and friction) to deflect it into a target ball, which
// should then reach a goal region.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "aglo/binary_io.hpp"
#include "aglo/common.hpp"
#include "aglo/tape.hpp"

namespace aglo::env {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(Vec2 a, double s) { return {a.x * s, a.y * s}; }
  friend Vec2 operator*(double s, Vec2 a) { return {a.x * s, a.y * s}; }
  friend bool operator==(Vec2 a, Vec2 b) = default;
};

inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::sqrt(dot(a, a)); }

// Latent ranges of the action universe.
inline constexpr double kMinLength = 0.05;
inline constexpr double kMaxLength = 0.3;
inline constexpr double kMinRestitution = 0.3;
inline constexpr double kMaxRestitution = 1.0;
inline constexpr double kMaxFriction = 0.6;

struct ToolSpec {
  int tool_id = 0;
  double angle = 0.0;                // radians, [0, pi)
  double length = 0.1;               // arena units, [0.05, 0.3]
  double restitution = 1.0;          // (0, 1]
  double tangential_friction = 0.0;  // [0, 1]

  friend bool operator==(const ToolSpec&, const ToolSpec&) = default;
};

/// Draws `num_actions` tools with ids 0..num_actions-1. Angle is uniform on
/// [0, pi), length on [0.05, 0.3], restitution on [0.3, 1], friction on [0, 0.6].
inline std::vector<ToolSpec> sample_action_universe(int num_actions, std::uint64_t universe_seed) {
  require(num_actions >= 2, ErrorKind::invalid_argument, "num_actions must be >= 2");
  Rng rng = make_rng(universe_seed, 0x7001);
  std::vector<ToolSpec> tools;
  tools.reserve(static_cast<std::size_t>(num_actions));
  for (int i = 0; i < num_actions; ++i) {
    ToolSpec t;
    t.tool_id = i;
    t.angle = uniform(rng, 0.0, M_PI);
    t.length = uniform(rng, kMinLength, kMaxLength);
    t.restitution = kMaxRestitution - uniform(rng, 0.0, kMaxRestitution - kMinRestitution);
    t.tangential_friction = uniform(rng, 0.0, kMaxFriction);
    tools.push_back(t);
  }
  return tools;
}

struct Ball {
  Vec2 pos;
  Vec2 vel;
  friend bool operator==(const Ball&, const Ball&) = default;
};

/// A reflecting segment as seen by the integrator.
struct Collider {
  Vec2 a;
  Vec2 b;
  double restitution = 1.0;
  double friction = 0.0;
};

struct PlacedTool {
  ToolSpec spec;
  Vec2 center;
  friend bool operator==(const PlacedTool&, const PlacedTool&) = default;
};

inline Collider collider_for(const ToolSpec& tool, Vec2 center) {
  const Vec2 half{0.5 * tool.length * std::cos(tool.angle), 0.5 * tool.length * std::sin(tool.angle)};
  return Collider{center - half, center + half, tool.restitution, tool.tangential_friction};
}

struct PhysicsParams {
  double dt = 0.05;
  Vec2 gravity{0.0, -1.0};
};

/// Splits v into the components normal and tangential to the segment
/// direction; the normal part is reversed and scaled by restitution, the
/// tangential part scaled by (1 - friction).
inline Vec2 reflect_velocity(Vec2 v, Vec2 segment_dir, double restitution, double friction) {
  const double len = norm(segment_dir);
  const Vec2 n{-segment_dir.y / len, segment_dir.x / len};
  const Vec2 normal = n * dot(v, n);
  const Vec2 tangential = v - normal;
  return tangential * (1.0 - friction) - normal * restitution;
}

namespace detail {

// Parameter along [from, to] where it crosses [c.a, c.b], if it does.
inline std::optional<double> crossing(Vec2 from, Vec2 to, const Collider& c) {
  const Vec2 d = to - from;
  const Vec2 e = c.b - c.a;
  const double denom = cross(d, e);
  if (std::abs(denom) < 1e-15) return std::nullopt;
  const Vec2 w = c.a - from;
  const double t = cross(w, e) / denom;
  const double s = cross(w, d) / denom;
  if (t > 1e-12 && t <= 1.0 && s >= 0.0 && s <= 1.0) return t;
  return std::nullopt;
}

inline void reflect_walls(double& p, double& v) {
  if (p < 0.0) {
    p = -p;
    v = -v;
  } else if (p > 1.0) {
    p = 2.0 - p;
    v = -v;
  }
  p = std::clamp(p, 0.0, 1.0);
}

}  // namespace detail

/// One semi-implicit Euler step: v' = v + g dt, x' = x + v' dt. The first
/// segment crossed along the step reflects the ball (one contact per step);
/// arena walls are perfectly elastic.
inline Ball physics_step(Ball ball, std::span<const Collider> colliders, const PhysicsParams& params) {
  Vec2 v = ball.vel + params.gravity * params.dt;
  const Vec2 from = ball.pos;
  const Vec2 to = from + v * params.dt;
  double best_t = 2.0;
  const Collider* hit = nullptr;
  for (const Collider& c : colliders) {
    if (auto t = detail::crossing(from, to, c); t && *t < best_t) {
      best_t = *t;
      hit = &c;
    }
  }
  Vec2 pos = to;
  if (hit) {
    const Vec2 dir = hit->b - hit->a;
    const double len = norm(dir);
    const Vec2 n{-dir.y / len, dir.x / len};
    const double side = dot(from - hit->a, n) >= 0.0 ? 1.0 : -1.0;
    const Vec2 contact = from + (to - from) * best_t;
    v = reflect_velocity(v, dir, hit->restitution, hit->friction);
    pos = contact + n * (side * 1e-9) + v * ((1.0 - best_t) * params.dt);
  }
  detail::reflect_walls(pos.x, v.x);
  detail::reflect_walls(pos.y, v.y);
  return Ball{pos, v};
}

// ---------------------------------------------------------------------------
// Probe observations

inline constexpr std::size_t kStateDim = 4;
inline constexpr Vec2 kProbeCenter{0.5, 0.5};

struct ProbeSettings {
  int record_every = 2;  // physics steps between recorded states
  double launch_distance = 0.25;
  double min_speed = 0.4;
  double max_speed = 0.8;
  double min_direction = M_PI / 8.0;
  double max_direction = 7.0 * M_PI / 8.0;
  double max_aim_offset = 0.02;
  PhysicsParams physics{};
};

/// One probe trajectory: H rows of (x, y, vx, vy).
struct ActionObservation {
  ad::Mat states;
  int initial_condition_id = 0;
};

struct ProbeLaunch {
  Vec2 pos;
  Vec2 vel;
};

/// Initial condition `ic` of an n-point probe grid. Directions are evenly
/// spaced over the approach fan with a seeded sub-cell jitter; speeds cycle
/// through three levels; the aim point is offset along the approach normal so
/// that tool length matters. Independent of the tool being probed.
inline ProbeLaunch probe_launch(int ic, int n, std::uint64_t dataset_seed, const ProbeSettings& s) {
  Rng rng = make_rng(dataset_seed, 0x9000 + static_cast<std::uint64_t>(ic));
  const double cell = (static_cast<double>(ic % n) + 0.5 + uniform(rng, -0.3, 0.3)) / static_cast<double>(n);
  const double direction = s.min_direction + cell * (s.max_direction - s.min_direction);
  const double level = (static_cast<double>(ic % 3) + 0.5 + uniform(rng, -0.3, 0.3)) / 3.0;
  const double speed = s.min_speed + level * (s.max_speed - s.min_speed);
  const double offset = s.max_aim_offset * uniform(rng, -1.0, 1.0);

  const Vec2 out{std::cos(direction), std::sin(direction)};
  const Vec2 start = kProbeCenter + out * s.launch_distance;
  const Vec2 aim = kProbeCenter + Vec2{-out.y, out.x} * offset;
  // Ballistic aim: reach `aim` after travel time tau despite gravity.
  const double tau = s.launch_distance / speed;
  const Vec2 vel = (aim - start) * (1.0 / tau) - s.physics.gravity * (0.5 * tau);
  return ProbeLaunch{start, vel};
}

inline ActionObservation probe_trajectory(const ToolSpec& tool, int ic, int n, int horizon, std::uint64_t dataset_seed,
                                          const ProbeSettings& s = {}) {
  const ProbeLaunch launch = probe_launch(ic, n, dataset_seed, s);
  const std::array<Collider, 1> colliders{collider_for(tool, kProbeCenter)};
  Ball ball{launch.pos, launch.vel};
  ActionObservation obs;
  obs.initial_condition_id = ic;
  obs.states.resize(horizon, static_cast<Eigen::Index>(kStateDim));
  for (int h = 0; h < horizon; ++h) {
    obs.states.row(h) << ball.pos.x, ball.pos.y, ball.vel.x, ball.vel.y;
    for (int k = 0; k < s.record_every; ++k) ball = physics_step(ball, colliders, s.physics);
  }
  return obs;
}

/// n probe trajectories for initial conditions first_ic .. first_ic+n-1.
inline std::vector<ActionObservation> generate_observations(const ToolSpec& tool, int n, int horizon,
                                                            std::uint64_t dataset_seed, int first_ic = 0,
                                                            const ProbeSettings& s = {}) {
  require(n >= 1, ErrorKind::invalid_argument, "observations per action must be >= 1");
  require(horizon >= 1, ErrorKind::invalid_argument, "horizon must be >= 1");
  std::vector<ActionObservation> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) out.push_back(probe_trajectory(tool, first_ic + j, n, horizon, dataset_seed, s));
  return out;
}

// ---------------------------------------------------------------------------
// Observation datasets on disk

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint16_t kBinaryFormat = 1;

struct DatasetManifest {
  std::uint32_t version = kDatasetVersion;
  std::uint32_t state_dim = kStateDim;
  std::uint32_t horizon = 20;
  std::uint32_t n_obs = 5;
  std::vector<int> action_ids;
  std::uint64_t universe_seed = 0;
  std::uint64_t dataset_seed = 0;
  std::vector<ToolSpec> latent;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Observations of a set of actions, stored exactly as written to disk
/// (32-bit floats, row-major n x H x 4 per action).
struct ObservationDataset {
  DatasetManifest manifest;
  std::vector<std::vector<float>> arrays;

  std::size_t num_actions() const { return manifest.action_ids.size(); }

  std::size_t index_of(int action_id) const {
    for (std::size_t i = 0; i < manifest.action_ids.size(); ++i)
      if (manifest.action_ids[i] == action_id) return i;
    fail(ErrorKind::invalid_argument, "action " + std::to_string(action_id) + " not in dataset");
  }

  /// Observation j of the action at position i, widened to double.
  ad::Mat observation(std::size_t i, std::size_t j) const {
    const std::size_t h = manifest.horizon, d = manifest.state_dim;
    ad::Mat m(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(d));
    const float* base = arrays.at(i).data() + j * h * d;
    for (std::size_t k = 0; k < h * d; ++k) m.data()[k] = static_cast<double>(base[k]);
    return m;
  }

  friend bool operator==(const ObservationDataset&, const ObservationDataset&) = default;
};

inline ObservationDataset build_dataset(std::span<const ToolSpec> tools, int n, int horizon, std::uint64_t universe_seed,
                                        std::uint64_t dataset_seed, int first_ic = 0, const ProbeSettings& s = {}) {
  require(n >= 1, ErrorKind::invalid_argument, "observations per action must be >= 1");
  ObservationDataset ds;
  ds.manifest.horizon = static_cast<std::uint32_t>(horizon);
  ds.manifest.n_obs = static_cast<std::uint32_t>(n);
  ds.manifest.universe_seed = universe_seed;
  ds.manifest.dataset_seed = dataset_seed;
  for (const ToolSpec& t : tools) {
    ds.manifest.action_ids.push_back(t.tool_id);
    ds.manifest.latent.push_back(t);
    std::vector<float> flat;
    flat.reserve(static_cast<std::size_t>(n * horizon) * kStateDim);
    for (const ActionObservation& o : generate_observations(t, n, horizon, dataset_seed, first_ic, s))
      for (Eigen::Index k = 0; k < o.states.size(); ++k) flat.push_back(static_cast<float>(o.states.data()[k]));
    ds.arrays.push_back(std::move(flat));
  }
  return ds;
}

/// Restricts a dataset to the listed action ids, in the listed order.
inline ObservationDataset subset(const ObservationDataset& ds, std::span<const int> ids) {
  ObservationDataset out;
  out.manifest = ds.manifest;
  out.manifest.action_ids.clear();
  out.manifest.latent.clear();
  for (int id : ids) {
    const std::size_t i = ds.index_of(id);
    out.manifest.action_ids.push_back(id);
    if (i < ds.manifest.latent.size()) out.manifest.latent.push_back(ds.manifest.latent[i]);
    out.arrays.push_back(ds.arrays[i]);
  }
  return out;
}

namespace detail {

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json latent = nlohmann::json::array();
  for (const ToolSpec& t : m.latent)
    latent.push_back({{"tool_id", t.tool_id},
                      {"angle", t.angle},
                      {"length", t.length},
                      {"restitution", t.restitution},
                      {"tangential_friction", t.tangential_friction}});
  return {{"version", m.version},     {"state_dim", m.state_dim},         {"horizon", m.horizon},
          {"n_obs", m.n_obs},         {"action_ids", m.action_ids},       {"universe_seed", m.universe_seed},
          {"dataset_seed", m.dataset_seed}, {"latent", latent}};
}

template <class T>
T manifest_field(const nlohmann::json& j, const char* name) {
  if (!j.contains(name)) fail(ErrorKind::format_error, std::string("manifest is missing field '") + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::format_error, std::string("manifest field '") + name + "' has the wrong type");
  }
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.version = manifest_field<std::uint32_t>(j, "version");
  if (m.version != kDatasetVersion)
    fail(ErrorKind::format_error, "manifest field 'version': expected " + std::to_string(kDatasetVersion) +
                                      ", found " + std::to_string(m.version));
  m.state_dim = manifest_field<std::uint32_t>(j, "state_dim");
  if (m.state_dim != kStateDim) fail(ErrorKind::format_error, "manifest field 'state_dim' must be 4");
  m.horizon = manifest_field<std::uint32_t>(j, "horizon");
  m.n_obs = manifest_field<std::uint32_t>(j, "n_obs");
  if (m.n_obs == 0 || m.horizon == 0) fail(ErrorKind::format_error, "manifest field 'n_obs'/'horizon' must be positive");
  m.action_ids = manifest_field<std::vector<int>>(j, "action_ids");
  m.universe_seed = manifest_field<std::uint64_t>(j, "universe_seed");
  m.dataset_seed = manifest_field<std::uint64_t>(j, "dataset_seed");
  for (const auto& t : manifest_field<nlohmann::json>(j, "latent")) {
    ToolSpec s;
    s.tool_id = manifest_field<int>(t, "tool_id");
    s.angle = manifest_field<double>(t, "angle");
    s.length = manifest_field<double>(t, "length");
    s.restitution = manifest_field<double>(t, "restitution");
    s.tangential_friction = manifest_field<double>(t, "tangential_friction");
    m.latent.push_back(s);
  }
  return m;
}

inline std::string action_file(int id) { return "action_" + std::to_string(id) + ".bin"; }

}  // namespace detail

inline void save_dataset(const ObservationDataset& ds, const std::filesystem::path& dir) {
  const DatasetManifest& m = ds.manifest;
  require(ds.arrays.size() == m.action_ids.size(), ErrorKind::invalid_argument, "dataset arrays/manifest mismatch");
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.arrays.size(); ++i) {
    require(ds.arrays[i].size() == static_cast<std::size_t>(m.n_obs) * m.horizon * m.state_dim,
            ErrorKind::invalid_argument, "dataset array size disagrees with manifest");
    io::ByteWriter w;
    w.bytes("AGLO");
    w.u16(kBinaryFormat);
    w.u16(static_cast<std::uint16_t>(m.n_obs));
    w.u32(m.horizon);
    w.u32(m.state_dim);
    for (float f : ds.arrays[i]) w.f32(f);
    io::write_file_atomic(dir / detail::action_file(m.action_ids[i]), w.data());
  }
  io::write_file_atomic(dir / "manifest.json", detail::manifest_to_json(m).dump(2) + "\n");
}

inline ObservationDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) fail(ErrorKind::format_error, "missing manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format_error, "manifest is not valid JSON: " + std::string(e.what()));
  }
  ObservationDataset ds;
  ds.manifest = detail::manifest_from_json(j);
  const DatasetManifest& m = ds.manifest;
  for (int id : m.action_ids) {
    const auto path = dir / detail::action_file(id);
    if (!std::filesystem::exists(path)) fail(ErrorKind::format_error, "manifest lists action " + std::to_string(id) +
                                                                          " but " + path.string() + " is missing");
    const std::string bytes = io::read_file(path);
    io::ByteReader r(bytes, path.string());
    if (r.bytes(4, "magic") != "AGLO") fail(ErrorKind::format_error, path.string() + ": bad magic");
    const std::uint16_t format = r.u16();
    if (format != kBinaryFormat)
      fail(ErrorKind::format_error, path.string() + ": format expected " + std::to_string(kBinaryFormat) + ", found " +
                                        std::to_string(format));
    const std::uint16_t n = r.u16();
    const std::uint32_t h = r.u32();
    const std::uint32_t d = r.u32();
    if (n != m.n_obs) fail(ErrorKind::format_error, path.string() + ": field 'n_obs' is " + std::to_string(n) +
                                                     " but manifest says " + std::to_string(m.n_obs));
    if (h != m.horizon) fail(ErrorKind::format_error, path.string() + ": field 'horizon' disagrees with manifest");
    if (d != m.state_dim) fail(ErrorKind::format_error, path.string() + ": field 'state_dim' disagrees with manifest");
    const std::size_t count = static_cast<std::size_t>(n) * h * d;
    if (r.remaining() != count * sizeof(float))
      fail(ErrorKind::format_error, path.string() + ": payload holds " + std::to_string(r.remaining() / sizeof(float)) +
                                        " floats, expected " + std::to_string(count));
    std::vector<float> flat(count);
    for (float& f : flat) f = r.f32();
    ds.arrays.push_back(std::move(flat));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Episodic placement task

struct EnvConfig {
  int horizon = 15;   // T, env steps per episode
  int substeps = 10;  // physics steps per env step
  double dt = 0.05;
  double gravity = 1.0;
  double ball_radius = 0.03;
  double goal_radius = 0.08;
  double reward_target_hit = 1.0;
  double reward_goal_hit = 5.0;
  double step_penalty = 0.01;
  bool obstacle = false;

  PhysicsParams physics() const { return PhysicsParams{dt, Vec2{0.0, -gravity}}; }
};

/// Speed above which the target ball counts as moved.
inline constexpr double kTargetMovedSpeed = 1e-6;

struct EnvAction {
  int tool_index = 0;
  Vec2 placement{0.5, 0.5};
  bool noop = false;

  static EnvAction none() { return EnvAction{0, {0.5, 0.5}, true}; }
};

struct EnvState {
  Ball launcher;
  Ball target;
  bool target_free = false;  // pinned in place until first struck
  Vec2 goal_center;
  double goal_radius = 0.08;
  std::vector<ToolSpec> action_set;
  std::vector<PlacedTool> placed;
  std::optional<Collider> obstacle;
  int timestep = 0;
  int horizon = 15;
  bool target_hit = false;
  bool goal_hit = false;
  bool done = false;

  friend bool operator==(const EnvState& a, const EnvState& b) {
    return a.launcher == b.launcher && a.target == b.target && a.target_free == b.target_free &&
           a.goal_center == b.goal_center && a.goal_radius == b.goal_radius && a.action_set == b.action_set &&
           a.placed == b.placed && a.obstacle.has_value() == b.obstacle.has_value() && a.timestep == b.timestep &&
           a.horizon == b.horizon && a.target_hit == b.target_hit && a.goal_hit == b.goal_hit && a.done == b.done;
  }
};

/// Default layout. The launcher starts upper-left with a horizontal speed
/// small enough that, without tools, it never travels past x = 0.45 within
/// the horizon; the target hangs at x >= 0.55, so reaching it requires a tool.
inline EnvState env_reset(std::span<const ToolSpec> action_set, std::uint64_t task_seed, const EnvConfig& cfg = {}) {
  require(!action_set.empty(), ErrorKind::invalid_argument, "action set must not be empty");
  require(cfg.horizon >= 1 && cfg.substeps >= 1, ErrorKind::invalid_argument, "horizon and substeps must be >= 1");
  Rng rng = make_rng(task_seed, 0x5e7);
  EnvState s;
  s.action_set.assign(action_set.begin(), action_set.end());
  s.horizon = cfg.horizon;
  const double episode_time = cfg.horizon * cfg.substeps * cfg.dt;
  s.launcher.pos = {uniform(rng, 0.05, 0.15), uniform(rng, 0.75, 0.9)};
  s.launcher.vel = {uniform(rng, 0.0, 0.3 / episode_time), uniform(rng, -0.1, 0.1)};
  s.target.pos = {uniform(rng, 0.55, 0.7), uniform(rng, 0.25, 0.45)};
  s.target.vel = {0.0, 0.0};
  s.goal_center = {uniform(rng, 0.8, 0.92), uniform(rng, 0.08, 0.2)};
  s.goal_radius = cfg.goal_radius;
  if (cfg.obstacle) s.obstacle = Collider{{0.5, 0.0}, {0.5, 0.2}, 1.0, 0.0};
  return s;
}

struct StepResult {
  EnvState state;
  double reward = 0.0;
  bool done = false;
};

namespace detail {

inline void collide_balls(Ball& launcher, Ball& target, double radius) {
  const Vec2 delta = target.pos - launcher.pos;
  const double dist = norm(delta);
  if (dist >= 2.0 * radius || dist <= 0.0) return;
  const Vec2 n = delta * (1.0 / dist);
  const double closing = dot(launcher.vel - target.vel, n);
  if (closing <= 0.0) return;
  // Equal masses, elastic: exchange the normal components.
  launcher.vel = launcher.vel - n * closing;
  target.vel = target.vel + n * closing;
}

}  // namespace detail

/// Places the chosen tool (unless no-op), runs `substeps` physics steps and
/// returns the shaped reward: decrease in target-goal distance, a bonus on
/// the first target hit and on the goal hit, minus a per-step penalty.
inline StepResult env_step(const EnvState& state, const EnvAction& action, const EnvConfig& cfg = {}) {
  if (state.done || state.timestep >= state.horizon)
    fail(ErrorKind::illegal_transition, "step called on a finished episode");
  EnvState s = state;
  if (!action.noop) {
    require(action.tool_index >= 0 && action.tool_index < static_cast<int>(s.action_set.size()),
            ErrorKind::invalid_argument, "tool index outside the episode action set");
    require(action.placement.x >= 0.0 && action.placement.x <= 1.0 && action.placement.y >= 0.0 &&
                action.placement.y <= 1.0,
            ErrorKind::invalid_argument, "placement outside the arena");
    s.placed.push_back(PlacedTool{s.action_set[static_cast<std::size_t>(action.tool_index)], action.placement});
  }
  std::vector<Collider> colliders;
  colliders.reserve(s.placed.size() + 1);
  for (const PlacedTool& p : s.placed) colliders.push_back(collider_for(p.spec, p.center));
  if (s.obstacle) colliders.push_back(*s.obstacle);

  const PhysicsParams physics = cfg.physics();
  const double dist_before = norm(s.target.pos - s.goal_center);
  const bool hit_before = s.target_hit;
  const bool goal_before = s.goal_hit;
  for (int k = 0; k < cfg.substeps; ++k) {
    s.launcher = physics_step(s.launcher, colliders, physics);
    if (s.target_free) s.target = physics_step(s.target, colliders, physics);
    detail::collide_balls(s.launcher, s.target, cfg.ball_radius);
    if (norm(s.target.vel) > kTargetMovedSpeed) {
      s.target_free = true;
      s.target_hit = true;
    }
    if (norm(s.target.pos - s.goal_center) <= s.goal_radius) {
      s.goal_hit = true;
      break;
    }
  }
  s.timestep += 1;
  double reward = dist_before - norm(s.target.pos - s.goal_center) - cfg.step_penalty;
  if (s.target_hit && !hit_before) reward += cfg.reward_target_hit;
  if (s.goal_hit && !goal_before) reward += cfg.reward_goal_hit;
  s.done = s.goal_hit || s.timestep >= s.horizon;
  const bool done = s.done;
  return StepResult{std::move(s), reward, done};
}

inline constexpr std::size_t kFeatureDim = 12;

/// Agent-facing state features. Nothing about the tools' latent parameters
/// is exposed here.
inline std::vector<double> agent_features(const EnvState& s) {
  return {s.launcher.pos.x, s.launcher.pos.y, s.launcher.vel.x, s.launcher.vel.y,
          s.target.pos.x,   s.target.pos.y,   s.target.vel.x,   s.target.vel.y,
          s.goal_center.x,  s.goal_center.y,  static_cast<double>(s.timestep) / s.horizon,
          s.target_free ? 1.0 : 0.0};
}

/// Agent-facing serialization: placed tools appear only by episode slot and
/// position.
inline nlohmann::json agent_view(const EnvState& s) {
  nlohmann::json placed = nlohmann::json::array();
  for (const PlacedTool& p : s.placed) {
    int slot = -1;
    for (std::size_t i = 0; i < s.action_set.size(); ++i)
      if (s.action_set[i].tool_id == p.spec.tool_id) slot = static_cast<int>(i);
    placed.push_back({{"slot", slot}, {"x", p.center.x}, {"y", p.center.y}});
  }
  return {{"launcher", {s.launcher.pos.x, s.launcher.pos.y, s.launcher.vel.x, s.launcher.vel.y}},
          {"target", {s.target.pos.x, s.target.pos.y, s.target.vel.x, s.target.vel.y}},
          {"goal", {s.goal_center.x, s.goal_center.y, s.goal_radius}},
          {"placed", placed},
          {"timestep", s.timestep},
          {"num_actions", s.action_set.size()},
          {"target_hit", s.target_hit},
          {"goal_hit", s.goal_hit}};
}

struct Transition {
  std::vector<double> state;
  EnvAction action;
  double reward = 0.0;
  std::vector<double> next_state;
};

struct EpisodeRecord {
  std::vector<int> action_ids;
  std::vector<Transition> steps;
  bool target_hit = false;
  bool goal_hit = false;
  double discounted_return = 0.0;
};

}  // namespace aglo::env
