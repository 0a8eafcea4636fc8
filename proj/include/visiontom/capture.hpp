#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "adversary.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "model.hpp"
#include "tasks.hpp"

namespace vtom {

enum class Dimension : std::uint8_t { Visual = 0, Text = 1 };
enum class Label : std::uint8_t { Neg = 0, Pos = 1 };

inline const char* dimension_name(Dimension d) { return d == Dimension::Visual ? "visual" : "text"; }
inline Dimension parse_dimension(const std::string& s) {
  if (s == "visual") return Dimension::Visual;
  if (s == "text") return Dimension::Text;
  throw FormatError("unknown dimension: " + s);
}

inline constexpr std::size_t kSampleIdBytes = 48;

// Final-token head outputs of one forward pass plus provenance.
struct HeadActivationMap {
  std::string sample_id;
  Dimension dimension = Dimension::Visual;
  Label label = Label::Pos;
  TaskKind task = TaskKind::Goal;
  int neg_option = -1;  // text negatives: index of the wrong option
  bool attack_failed = false;
  std::uint64_t frames_hash = 0;
  std::uint64_t text_hash = 0;
  int layers = 0, heads = 0, head_dim = 0;
  std::vector<float> values;  // (layer * heads + head) * head_dim + d

  const float* head(int l, int h) const { return values.data() + (static_cast<std::size_t>(l) * heads + h) * head_dim; }
  std::vector<double> head_vec(int l, int h) const {
    const float* p = head(l, h);
    return std::vector<double>(p, p + head_dim);
  }
  std::string key() const {
    return sample_id + "/" + dimension_name(dimension) + "/" + (label == Label::Pos ? "pos" : "neg") + "/" +
           std::to_string(neg_option);
  }
  bool operator==(const HeadActivationMap&) const = default;
};

inline std::uint64_t hash_frames(const std::vector<double>& f) {
  Hasher h;
  h.bytes(f.data(), f.size() * sizeof(double));
  return h.digest();
}

inline std::uint64_t hash_tokens(const std::vector<int>& t) {
  Hasher h;
  for (int v : t) h.value<std::int32_t>(v);
  return h.digest();
}

template <class T>
HeadActivationMap capture(const Model<T>& model, const TaskInstance& inst, const std::vector<double>& frames,
                          std::optional<int> answer_option = std::nullopt) {
  const auto& c = model.config();
  if (static_cast<int>(frames.size()) != c.frame_values()) throw SizeError("capture: frame grid does not fit model");
  if (answer_option && (*answer_option < 0 || *answer_option >= kNumOptions))
    throw SizeError("capture: answer option out of range");
  const auto text = inst.text(answer_option);
  ForwardOutput<T> out;
  try {
    out = model.forward(model.embed(frames, text), std::span<const int>(inst.options.data(), inst.options.size()));
  } catch (const SizeError& e) {
    throw SizeError(std::string("capture: ") + e.what());
  }
  HeadActivationMap m;
  m.sample_id = inst.id;
  m.task = inst.kind;
  m.layers = c.layers;
  m.heads = c.heads;
  m.head_dim = c.head_dim;
  m.frames_hash = hash_frames(frames);
  m.text_hash = hash_tokens(text);
  m.values.resize(out.trace.size());
  for (Eigen::Index i = 0; i < out.trace.size(); ++i) m.values[i] = static_cast<float>(out.trace.data()[i]);
  return m;
}

template <class T>
HeadActivationMap capture(const Model<T>& model, const TaskInstance& inst, std::optional<int> answer_option = std::nullopt) {
  return capture(model, inst, inst.frames, answer_option);
}

class RecordStore {
 public:
  RecordStore() = default;
  RecordStore(int layers, int heads, int head_dim) : layers_(layers), heads_(heads), head_dim_(head_dim) {}

  int layers() const { return layers_; }
  int heads() const { return heads_; }
  int head_dim() const { return head_dim_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::vector<HeadActivationMap>& records() const { return records_; }
  const HeadActivationMap& operator[](std::size_t i) const { return records_[i]; }

  void append(HeadActivationMap r) {
    if (records_.empty() && layers_ == 0) {
      layers_ = r.layers;
      heads_ = r.heads;
      head_dim_ = r.head_dim;
    }
    if (r.layers != layers_ || r.heads != heads_ || r.head_dim != head_dim_ ||
        r.values.size() != static_cast<std::size_t>(layers_) * heads_ * head_dim_)
      throw SizeError("record shape does not match store");
    if (r.sample_id.size() >= kSampleIdBytes) throw SizeError("sample id too long: " + r.sample_id);
    for (float v : r.values)
      if (!std::isfinite(v)) throw NumericError("non-finite activation in record " + r.key());
    if (!keys_.insert(r.key()).second) throw Error("duplicate record " + r.key());
    index_[{r.dimension, r.task, r.label}].insert(r.key());
    pos_[r.key()] = records_.size();
    records_.push_back(std::move(r));
  }

  // Records matching a (dimension, task, label) query, in sample-id order regardless of append order.
  std::vector<const HeadActivationMap*> query(Dimension d, TaskKind t, Label l) const {
    std::vector<const HeadActivationMap*> out;
    auto it = index_.find({d, t, l});
    if (it == index_.end()) return out;
    for (const auto& k : it->second) out.push_back(&records_[pos_.at(k)]);
    return out;
  }

  const HeadActivationMap* find(const std::string& key) const {
    auto it = pos_.find(key);
    return it == pos_.end() ? nullptr : &records_[it->second];
  }

  bool operator==(const RecordStore& o) const {
    return layers_ == o.layers_ && heads_ == o.heads_ && head_dim_ == o.head_dim_ && records_ == o.records_;
  }

 private:
  int layers_ = 0, heads_ = 0, head_dim_ = 0;
  std::vector<HeadActivationMap> records_;
  std::set<std::string> keys_;
  std::map<std::string, std::size_t> pos_;
  std::map<std::tuple<Dimension, TaskKind, Label>, std::set<std::string>> index_;
};

// One clean (pos) and one perturbed (neg) record per instance, question text fixed. perturbed[i]
// belongs to calibration[i].
template <class T>
std::vector<HeadActivationMap> visual_pairs(const Model<T>& model, const Dataset& calibration,
                                            const std::vector<AttackResult>& perturbed) {
  if (perturbed.size() != calibration.size()) throw PairingError("one perturbed input per instance required");
  std::vector<HeadActivationMap> out;
  for (std::size_t i = 0; i < calibration.size(); ++i) {
    const auto& inst = calibration[i];
    auto pos = capture(model, inst, inst.frames);
    pos.dimension = Dimension::Visual;
    pos.label = Label::Pos;
    auto neg = capture(model, inst, perturbed[i].frames);
    neg.dimension = Dimension::Visual;
    neg.label = Label::Neg;
    neg.attack_failed = perturbed[i].failed;
    out.push_back(std::move(pos));
    out.push_back(std::move(neg));
  }
  return out;
}

template <class T>
std::vector<HeadActivationMap> collect_visual_pairs(const Model<T>& model, const Dataset& calibration,
                                                    const AttackConfig& cfg,
                                                    std::vector<AttackResult>* attacks = nullptr) {
  std::vector<AttackResult> adv;
  for (const auto& inst : calibration) adv.push_back(attack(model, inst, cfg));
  auto out = visual_pairs(model, calibration, adv);
  if (attacks) *attacks = std::move(adv);
  return out;
}

// Frames fixed; the gold option appended gives the positive, each wrong option one negative.
template <class T>
std::vector<HeadActivationMap> collect_text_pairs(const Model<T>& model, const Dataset& calibration) {
  std::vector<HeadActivationMap> out;
  for (const auto& inst : calibration) {
    std::set<int> distinct(inst.options.begin(), inst.options.end());
    if (distinct.size() != inst.options.size()) throw Error("options of " + inst.id + " are not distinct");
    for (int o = 0; o < kNumOptions; ++o) {
      auto r = capture(model, inst, inst.frames, o);
      r.dimension = Dimension::Text;
      if (o == inst.gold) {
        r.label = Label::Pos;
      } else {
        r.label = Label::Neg;
        r.neg_option = o;
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline constexpr char kRecordMagic[9] = "VTOMRECS";
inline constexpr std::uint32_t kRecordVersion = 1;

inline void save_records(const std::string& path, const RecordStore& s) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path);
    BinWriter w(os);
    w.magic(kRecordMagic);
    w.put<std::uint32_t>(kRecordVersion);
    w.put<std::int32_t>(s.layers());
    w.put<std::int32_t>(s.heads());
    w.put<std::int32_t>(s.head_dim());
    w.put<std::uint64_t>(s.size());
    for (const auto& r : s.records()) {
      char id[kSampleIdBytes] = {};
      std::memcpy(id, r.sample_id.data(), r.sample_id.size());
      w.put_array(id, kSampleIdBytes);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(r.dimension));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(r.label));
      w.put<std::uint8_t>(static_cast<std::uint8_t>(r.task));
      w.put<std::int8_t>(static_cast<std::int8_t>(r.neg_option));
      w.put<std::uint8_t>(r.attack_failed ? 1 : 0);
      const char pad[3] = {};
      w.put_array(pad, 3);
      w.put<std::uint64_t>(r.frames_hash);
      w.put<std::uint64_t>(r.text_hash);
      w.put_array(r.values.data(), r.values.size());
    }
    if (!os) throw FormatError("write failed: " + path);
  }
  nlohmann::json counts = nlohmann::json::object();
  for (auto d : {Dimension::Visual, Dimension::Text})
    for (auto t : kAllTasks)
      for (auto l : {Label::Pos, Label::Neg}) {
        auto n = s.query(d, t, l).size();
        if (n) counts[std::string(dimension_name(d)) + "/" + task_name(t) + "/" + (l == Label::Pos ? "pos" : "neg")] = n;
      }
  nlohmann::json m = {{"format", "visiontom-records"},
                      {"version", kRecordVersion},
                      {"layers", s.layers()},
                      {"heads", s.heads()},
                      {"head_dim", s.head_dim()},
                      {"count", s.size()},
                      {"counts", counts},
                      {"hash", hex64(hash_file(path))}};
  std::ofstream ms(path + ".json");
  ms << m.dump(2) << '\n';
}

inline RecordStore load_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  BinReader r(is);
  r.expect_magic(kRecordMagic);
  const auto ver = r.get<std::uint32_t>();
  if (ver != kRecordVersion) throw FormatError("record store version " + std::to_string(ver) + " unsupported");
  const int L = r.get<std::int32_t>(), H = r.get<std::int32_t>(), D = r.get<std::int32_t>();
  if (L < 0 || H < 0 || D < 0 || static_cast<long long>(L) * H * D > (1 << 24)) throw FormatError("bad record shape");
  const auto n = r.get<std::uint64_t>();
  RecordStore s(L, H, D);
  for (std::uint64_t i = 0; i < n; ++i) {
    HeadActivationMap m;
    char id[kSampleIdBytes];
    r.get_array(id, kSampleIdBytes);
    m.sample_id.assign(id, strnlen(id, kSampleIdBytes));
    m.dimension = static_cast<Dimension>(r.get<std::uint8_t>());
    m.label = static_cast<Label>(r.get<std::uint8_t>());
    const auto task = r.get<std::uint8_t>();
    if (task >= kNumTasks) throw FormatError("bad task kind in record");
    m.task = static_cast<TaskKind>(task);
    m.neg_option = r.get<std::int8_t>();
    m.attack_failed = r.get<std::uint8_t>() != 0;
    char pad[3];
    r.get_array(pad, 3);
    m.frames_hash = r.get<std::uint64_t>();
    m.text_hash = r.get<std::uint64_t>();
    m.layers = L;
    m.heads = H;
    m.head_dim = D;
    m.values.resize(static_cast<std::size_t>(L) * H * D);
    r.get_array(m.values.data(), m.values.size());
    s.append(std::move(m));
  }
  r.expect_end();
  return s;
}

}  // namespace vtom
