#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace vtom {

enum class TaskKind : int { Goal = 0, Belief = 1, Action = 2 };
inline constexpr int kNumTasks = 3;
inline constexpr int kNumOptions = 4;
inline constexpr std::array<TaskKind, 3> kAllTasks = {TaskKind::Goal, TaskKind::Belief, TaskKind::Action};

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::Goal: return "goal";
    case TaskKind::Belief: return "belief";
    case TaskKind::Action: return "action";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  for (auto k : kAllTasks)
    if (s == task_name(k)) return k;
  throw FormatError("unknown task kind: " + s);
}

struct Cell {
  int r = 0;
  int c = 0;
  auto operator<=>(const Cell&) const = default;
};

inline int manhattan(Cell a, Cell b) { return std::abs(a.r - b.r) + std::abs(a.c - b.c); }
inline int chebyshev(Cell a, Cell b) { return std::max(std::abs(a.r - b.r), std::abs(a.c - b.c)); }

// up, down, left, right
inline constexpr std::array<Cell, 4> kMoves = {Cell{-1, 0}, Cell{1, 0}, Cell{0, -1}, Cell{0, 1}};

struct TaskConfig {
  int grid = 6;
  int frames = 8;
  int classes = 6;
  int objects = 3;
  int radius = 2;
  double blur = 1.0;
  double background = 128.0;
  double peak = 255.0;
  // Per-instance sensor noise: sigma drawn uniformly from [0, noise_max], added before rounding.
  double noise_max = 0.0;

  int channels() const { return classes + 1; }
  int frame_values() const { return frames * channels() * grid * grid; }

  bool operator==(const TaskConfig&) const = default;
};

// Token layout shared by generator and model.
struct Vocab {
  int pad = 0;
  int kind0 = 1;
  int ans = 4;
  int class0 = 5;
  int cell0 = 0;
  int dir0 = 0;
  int size = 0;

  explicit Vocab(const TaskConfig& c) {
    cell0 = class0 + c.classes;
    dir0 = cell0 + c.grid * c.grid;
    size = dir0 + 4;
  }
  int kind(TaskKind k) const { return kind0 + static_cast<int>(k); }
  int cls(int c) const { return class0 + c; }
  int cell(Cell p, int grid) const { return cell0 + p.r * grid + p.c; }
  int dir(int d) const { return dir0 + d; }
};

inline ModelConfig model_config_for(const TaskConfig& t, ModelConfig base = {}) {
  base.vocab = Vocab(t).size;
  base.visual_channels = t.channels();
  base.frames = t.frames;
  base.grid = t.grid;
  base.max_text = 4;
  base.pixel_center = t.background;
  base.pixel_scale = t.peak - t.background;
  return base;
}

struct TaskInstance {
  std::string id;
  TaskKind kind = TaskKind::Goal;
  std::vector<double> frames;  // frame, channel, row, col; channel 0 is the agent
  std::vector<int> question;   // kind token, argument token, answer marker
  std::array<int, 4> options{};
  int gold = 0;
  double sigma = 0.0;

  // Prompt text, optionally with one option appended as the completion.
  std::vector<int> text(std::optional<int> answer_option = std::nullopt) const {
    auto t = question;
    if (answer_option) t.push_back(options.at(*answer_option));
    return t;
  }

  bool operator==(const TaskInstance&) const = default;
};

using Dataset = std::vector<TaskInstance>;

namespace detail {

inline std::size_t at(const TaskConfig& c, int f, int ch, int r, int col) {
  return ((static_cast<std::size_t>(f) * c.channels() + ch) * c.grid + r) * c.grid + col;
}

inline int policy(Cell agent, Cell goal) {
  const int dr = goal.r - agent.r, dc = goal.c - agent.c;
  if (std::abs(dr) >= std::abs(dc) && dr != 0) return dr < 0 ? 0 : 1;
  return dc < 0 ? 2 : 3;
}

inline Cell step(Cell p, int d) { return {p.r + kMoves[d].r, p.c + kMoves[d].c}; }

inline Cell random_cell(Rng& rng, int grid) { return {rng.index(grid), rng.index(grid)}; }

struct Scene {
  std::vector<Cell> agent;                // per frame
  std::vector<std::vector<Cell>> objects;  // per object, per frame
  std::vector<int> classes;               // per object
};

inline std::vector<double> render(const TaskConfig& c, const Scene& s) {
  std::vector<double> fr(c.frame_values(), c.background);
  const double amp = c.peak - c.background;
  auto blob = [&](int f, int ch, Cell p) {
    for (int r = 0; r < c.grid; ++r)
      for (int col = 0; col < c.grid; ++col) {
        const double d2 = (r - p.r) * (r - p.r) + (col - p.c) * (col - p.c);
        fr[at(c, f, ch, r, col)] = std::round(c.background + amp * std::exp(-d2 / (2 * c.blur * c.blur)));
      }
  };
  for (int f = 0; f < c.frames; ++f) {
    blob(f, 0, s.agent[f]);
    for (std::size_t k = 0; k < s.objects.size(); ++k) blob(f, 1 + s.classes[k], s.objects[k][f]);
  }
  return fr;
}

struct Decoded {
  std::vector<Cell> agent;
  std::map<int, std::vector<Cell>> objects;  // class -> per-frame location
};

inline Cell argmax_cell(const TaskConfig& c, const std::vector<double>& fr, int f, int ch, double* value = nullptr) {
  Cell best{0, 0};
  double bv = fr[at(c, f, ch, 0, 0)];
  for (int r = 0; r < c.grid; ++r)
    for (int col = 0; col < c.grid; ++col)
      if (fr[at(c, f, ch, r, col)] > bv) {
        bv = fr[at(c, f, ch, r, col)];
        best = {r, col};
      }
  if (value) *value = bv;
  return best;
}

inline Decoded decode(const TaskConfig& c, const std::vector<double>& fr) {
  Decoded d;
  const double present = c.background + 0.5 * (c.peak - c.background);
  for (int f = 0; f < c.frames; ++f) {
    d.agent.push_back(argmax_cell(c, fr, f, 0));
    for (int k = 0; k < c.classes; ++k) {
      double v;
      Cell p = argmax_cell(c, fr, f, 1 + k, &v);
      if (v > present) d.objects[k].push_back(p);
    }
  }
  for (auto it = d.objects.begin(); it != d.objects.end();) {
    if (static_cast<int>(it->second.size()) != c.frames)
      it = d.objects.erase(it);
    else
      ++it;
  }
  return d;
}

// Class whose distance to the agent shrank the most over the episode; nullopt when not unique.
inline std::optional<int> decoded_goal(const Decoded& d) {
  std::optional<int> best;
  int bestv = 0;
  bool unique = false;
  for (const auto& [cls, tr] : d.objects) {
    const int v = manhattan(d.agent.front(), tr.front()) - manhattan(d.agent.back(), tr.back());
    if (!best || v > bestv) {
      best = cls;
      bestv = v;
      unique = true;
    } else if (v == bestv) {
      unique = false;
    }
  }
  if (!unique) return std::nullopt;
  return best;
}

inline std::optional<Cell> decoded_belief(const TaskConfig& c, const Decoded& d, int cls) {
  auto it = d.objects.find(cls);
  if (it == d.objects.end()) return std::nullopt;
  std::optional<Cell> seen;
  for (int f = 0; f < c.frames; ++f)
    if (chebyshev(d.agent[f], it->second[f]) <= c.radius) seen = it->second[f];
  return seen;
}

}  // namespace detail

// Rule-based answer from frames and question alone; -1 when the frames do not determine any option.
inline int oracle_answer(const TaskConfig& c, const TaskInstance& inst) {
  const Vocab voc(c);
  if (static_cast<int>(inst.frames.size()) != c.frame_values()) throw SizeError("frame grid size mismatch");
  const auto d = detail::decode(c, inst.frames);
  int token = -1;
  switch (inst.kind) {
    case TaskKind::Goal: {
      auto g = detail::decoded_goal(d);
      if (g) token = voc.cls(*g);
      break;
    }
    case TaskKind::Action: {
      auto g = detail::decoded_goal(d);
      if (g) token = voc.dir(detail::policy(d.agent.back(), d.objects.at(*g).back()));
      break;
    }
    case TaskKind::Belief: {
      auto b = detail::decoded_belief(c, d, inst.question.at(1) - voc.class0);
      if (b) token = voc.cell(*b, c.grid);
      break;
    }
  }
  for (int i = 0; i < kNumOptions; ++i)
    if (inst.options[i] == token) return i;
  return -1;
}

namespace detail {

struct GoalEpisode {
  Scene scene;
  int goal = 0;  // object index
};

inline GoalEpisode goal_episode(const TaskConfig& c, Rng& rng) {
  while (true) {
    std::vector<int> classes(c.classes);
    for (int i = 0; i < c.classes; ++i) classes[i] = i;
    rng.shuffle(classes);
    classes.resize(c.objects);
    std::vector<Cell> objs;
    std::set<Cell> used;
    while (static_cast<int>(objs.size()) < c.objects) {
      Cell p = random_cell(rng, c.grid);
      if (used.insert(p).second) objs.push_back(p);
    }
    Cell agent = random_cell(rng, c.grid);
    if (used.count(agent)) continue;
    const int g = rng.index(c.objects);
    const int moves = rng.between(3, 5);
    if (manhattan(agent, objs[g]) <= moves) continue;
    std::vector<int> slots(c.frames - 1);
    for (int i = 0; i < c.frames - 1; ++i) slots[i] = i;
    rng.shuffle(slots);
    std::set<int> move_at(slots.begin(), slots.begin() + moves);
    Scene s;
    s.classes = classes;
    s.agent.push_back(agent);
    Cell cur = agent;
    for (int t = 0; t < c.frames - 1; ++t) {
      if (move_at.count(t)) cur = step(cur, policy(cur, objs[g]));
      s.agent.push_back(cur);
    }
    if (std::any_of(s.agent.begin(), s.agent.end(), [&](Cell p) { return used.count(p) > 0; })) continue;
    for (auto o : objs) s.objects.push_back(std::vector<Cell>(c.frames, o));

    // The goal must be the unique object approached the most and the unique nearest one at the end.
    std::vector<int> gain, last;
    for (auto o : objs) {
      gain.push_back(manhattan(agent, o) - manhattan(cur, o));
      last.push_back(manhattan(cur, o));
    }
    const int gmax = *std::max_element(gain.begin(), gain.end());
    const int lmin = *std::min_element(last.begin(), last.end());
    if (gain[g] != gmax || std::count(gain.begin(), gain.end(), gmax) != 1) continue;
    if (last[g] != lmin || std::count(last.begin(), last.end(), lmin) != 1) continue;
    return {s, g};
  }
}

inline std::array<int, 4> place_gold(int gold_token, std::vector<int> wrong, int gold_pos, Rng& rng) {
  rng.shuffle(wrong);
  std::array<int, 4> out{};
  int w = 0;
  for (int i = 0; i < 4; ++i) out[i] = (i == gold_pos) ? gold_token : wrong[w++];
  return out;
}

}  // namespace detail

// Instances cycle the gold slot through 0..3; Belief alternates false and true beliefs.
inline Dataset generate(const TaskConfig& c, int n_per_task, std::uint64_t seed) {
  if (n_per_task < 1) throw ConfigError("n_per_task must be >= 1");
  const Vocab voc(c);
  Rng rng(seed);
  Dataset out;
  for (auto kind : kAllTasks) {
    for (int i = 0; i < n_per_task; ++i) {
      const int gold_pos = i % 4;
      TaskInstance inst;
      inst.kind = kind;
      inst.gold = gold_pos;
      inst.id = std::string(task_name(kind)) + "-" + std::to_string(i);
      detail::Scene scene;
      if (kind == TaskKind::Goal || kind == TaskKind::Action) {
        auto ep = detail::goal_episode(c, rng);
        scene = ep.scene;
        const int gcls = scene.classes[ep.goal];
        if (kind == TaskKind::Goal) {
          std::vector<int> absent;
          for (int k = 0; k < c.classes; ++k)
            if (std::find(scene.classes.begin(), scene.classes.end(), k) == scene.classes.end()) absent.push_back(k);
          std::vector<int> wrong;
          for (int k = 0; k < c.objects; ++k)
            if (k != ep.goal) wrong.push_back(voc.cls(scene.classes[k]));
          wrong.push_back(voc.cls(absent[rng.index(static_cast<int>(absent.size()))]));
          wrong.resize(3);
          inst.options = detail::place_gold(voc.cls(gcls), wrong, gold_pos, rng);
          inst.question = {voc.kind(kind), voc.pad, voc.ans};
        } else {
          const int d = detail::policy(scene.agent.back(), scene.objects[ep.goal].back());
          std::vector<int> wrong;
          for (int k = 0; k < 4; ++k)
            if (k != d) wrong.push_back(voc.dir(k));
          inst.options = detail::place_gold(voc.dir(d), wrong, gold_pos, rng);
          inst.question = {voc.kind(kind), voc.pad, voc.ans};
        }
      } else {
        const bool want_false = (i % 2 == 0);
        while (true) {
          std::vector<int> classes(c.classes);
          for (int k = 0; k < c.classes; ++k) classes[k] = k;
          rng.shuffle(classes);
          classes.resize(c.objects);
          std::vector<Cell> objs;
          std::set<Cell> used;
          while (static_cast<int>(objs.size()) < c.objects) {
            Cell p = detail::random_cell(rng, c.grid);
            if (used.insert(p).second) objs.push_back(p);
          }
          const int tm = rng.between(2, c.frames - 2);
          Cell moved;
          do moved = detail::random_cell(rng, c.grid);
          while (used.count(moved) || manhattan(moved, objs[0]) < 3);
          detail::Scene s;
          s.classes = classes;
          s.objects.assign(c.objects, std::vector<Cell>{});
          for (int f = 0; f < c.frames; ++f) {
            s.objects[0].push_back(f < tm ? objs[0] : moved);
            for (int k = 1; k < c.objects; ++k) s.objects[k].push_back(objs[k]);
          }
          Cell a = detail::random_cell(rng, c.grid);
          s.agent.push_back(a);
          for (int t = 0; t < c.frames - 1; ++t) {
            std::vector<Cell> nxt = {a};
            for (int d = 0; d < 4; ++d) {
              Cell q = detail::step(a, d);
              if (q.r >= 0 && q.r < c.grid && q.c >= 0 && q.c < c.grid) nxt.push_back(q);
            }
            a = nxt[rng.index(static_cast<int>(nxt.size()))];
            s.agent.push_back(a);
          }
          bool collide = false;
          for (int f = 0; f < c.frames; ++f)
            for (int k = 0; k < c.objects; ++k)
              if (s.agent[f] == s.objects[k][f]) collide = true;
          if (collide) continue;
          std::optional<Cell> belief;
          for (int f = 0; f < c.frames; ++f)
            if (chebyshev(s.agent[f], s.objects[0][f]) <= c.radius) belief = s.objects[0][f];
          if (!belief) continue;
          if ((*belief != moved) != want_false) continue;
          std::vector<Cell> cand = {moved, objs[0]};
          std::vector<Cell> others;
          while (others.size() < 4) {
            Cell p = detail::random_cell(rng, c.grid);
            if (std::find(cand.begin(), cand.end(), p) == cand.end() &&
                std::find(others.begin(), others.end(), p) == others.end())
              others.push_back(p);
          }
          std::vector<int> wrong;
          for (const auto& p : cand)
            if (p != *belief) wrong.push_back(voc.cell(p, c.grid));
          for (const auto& p : others)
            if (p != *belief && wrong.size() < 3) wrong.push_back(voc.cell(p, c.grid));
          wrong.resize(3);
          inst.options = detail::place_gold(voc.cell(*belief, c.grid), wrong, gold_pos, rng);
          inst.question = {voc.kind(kind), voc.cls(classes[0]), voc.ans};
          scene = s;
          break;
        }
      }
      const auto clean = detail::render(c, scene);
      inst.frames = clean;
      if (c.noise_max > 0) {
        inst.sigma = rng.uniform(0.0, c.noise_max);
        // Redraw until the rule-based decoder still recovers the gold answer.
        while (true) {
          for (std::size_t j = 0; j < clean.size(); ++j)
            inst.frames[j] = std::clamp(std::round(clean[j] + inst.sigma * rng.normal()), 0.0, 255.0);
          if (oracle_answer(c, inst) == inst.gold) break;
        }
      }
      if (oracle_answer(c, inst) != inst.gold) throw Error("generator produced an instance its oracle rejects");
      out.push_back(std::move(inst));
    }
  }
  return out;
}

struct DatasetSplit {
  Dataset calibration;
  Dataset evaluation;
  std::uint64_t seed = 0;
  double ratio = 0.3;
};

// Stratified by task kind; the calibration total is round(ratio * n), apportioned by largest remainder.
inline DatasetSplit split(const Dataset& data, double ratio, std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("split ratio must lie in (0, 1)");
  if (data.size() < 2) throw SizeError("split needs at least 2 instances");
  std::array<std::vector<std::size_t>, kNumTasks> by_kind;
  for (std::size_t i = 0; i < data.size(); ++i) by_kind[static_cast<int>(data[i].kind)].push_back(i);
  const long total = std::lround(ratio * static_cast<double>(data.size()));
  std::array<long, kNumTasks> quota{};
  std::array<double, kNumTasks> rem{};
  long assigned = 0;
  for (int k = 0; k < kNumTasks; ++k) {
    const double exact = ratio * static_cast<double>(by_kind[k].size());
    quota[k] = static_cast<long>(std::floor(exact));
    rem[k] = exact - static_cast<double>(quota[k]);
    assigned += quota[k];
  }
  std::array<int, kNumTasks> order = {0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int i = 0; assigned < total && i < kNumTasks; ++i) {
    if (quota[order[i]] < static_cast<long>(by_kind[order[i]].size())) {
      ++quota[order[i]];
      ++assigned;
    }
  }
  DatasetSplit s;
  s.seed = seed;
  s.ratio = ratio;
  Rng rng(seed);
  for (int k = 0; k < kNumTasks; ++k) {
    auto idx = by_kind[k];
    rng.shuffle(idx);
    std::vector<std::size_t> cal(idx.begin(), idx.begin() + quota[k]);
    std::vector<std::size_t> ev(idx.begin() + quota[k], idx.end());
    std::sort(cal.begin(), cal.end());
    std::sort(ev.begin(), ev.end());
    for (auto i : cal) s.calibration.push_back(data[i]);
    for (auto i : ev) s.evaluation.push_back(data[i]);
  }
  return s;
}

inline constexpr int kDatasetSchema = 1;

inline nlohmann::json to_json(const TaskConfig& c) {
  return {{"grid", c.grid},         {"frames", c.frames},         {"classes", c.classes},
          {"objects", c.objects},   {"radius", c.radius},         {"blur", c.blur},
          {"background", c.background}, {"peak", c.peak},         {"noise_max", c.noise_max}};
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  c.grid = j.value("grid", c.grid);
  c.frames = j.value("frames", c.frames);
  c.classes = j.value("classes", c.classes);
  c.objects = j.value("objects", c.objects);
  c.radius = j.value("radius", c.radius);
  c.blur = j.value("blur", c.blur);
  c.background = j.value("background", c.background);
  c.peak = j.value("peak", c.peak);
  c.noise_max = j.value("noise_max", c.noise_max);
  return c;
}

inline void save_dataset(const std::string& path, const TaskConfig& c, const Dataset& data) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  os << nlohmann::json{{"schema_version", kDatasetSchema}, {"count", data.size()}, {"task_config", to_json(c)}}.dump()
     << '\n';
  for (const auto& d : data) {
    nlohmann::json j = {{"id", d.id},           {"kind", task_name(d.kind)}, {"question", d.question},
                        {"options", d.options}, {"gold", d.gold},            {"sigma", d.sigma},
                        {"frames", d.frames}};
    os << j.dump() << '\n';
  }
  if (!os) throw FormatError("write failed: " + path);
}

inline std::pair<TaskConfig, Dataset> load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty dataset file");
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad dataset header: ") + e.what());
  }
  if (head.value("schema_version", -1) != kDatasetSchema) throw FormatError("unsupported dataset schema version");
  auto cfg = task_config_from_json(head.at("task_config"));
  Dataset data;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      TaskInstance d;
      d.id = j.at("id").get<std::string>();
      d.kind = parse_task(j.at("kind").get<std::string>());
      d.question = j.at("question").get<std::vector<int>>();
      d.options = j.at("options").get<std::array<int, 4>>();
      d.gold = j.at("gold").get<int>();
      d.sigma = j.at("sigma").get<double>();
      d.frames = j.at("frames").get<std::vector<double>>();
      if (static_cast<int>(d.frames.size()) != cfg.frame_values()) throw FormatError("frame count mismatch in " + d.id);
      data.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad dataset record: ") + e.what());
    }
  }
  if (data.size() != head.at("count").get<std::size_t>()) throw FormatError("dataset record count mismatch");
  return {cfg, std::move(data)};
}

}  // namespace vtom
