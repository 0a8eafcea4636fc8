#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "visiontom/capture.hpp"
#include "visiontom/separator.hpp"

using namespace vtom;
namespace fs = std::filesystem;

namespace {

ModelConfig task_model(std::uint64_t seed, int layers = 2, int heads = 2, int head_dim = 8) {
  ModelConfig base;
  base.layers = layers;
  base.heads = heads;
  base.head_dim = head_dim;
  base.seed = seed;
  return model_config_for(TaskConfig{}, base);
}

const Dataset& few() {
  static const Dataset d = generate(TaskConfig{}, 4, 23);
  return d;
}

std::string tmp(const std::string& name) { return (fs::temp_directory_path() / name).string(); }

HeadActivationMap synthetic(int i, int L, int H, int D, Rng& rng) {
  HeadActivationMap m;
  m.sample_id = "s" + std::to_string(i / 4);
  m.dimension = Dimension::Text;
  m.task = kAllTasks[i % 3];
  m.label = (i % 4 == 0) ? Label::Pos : Label::Neg;
  m.neg_option = (i % 4 == 0) ? -1 : i % 4;
  m.frames_hash = rng.bits();
  m.text_hash = rng.bits();
  m.layers = L;
  m.heads = H;
  m.head_dim = D;
  for (int k = 0; k < L * H * D; ++k) m.values.push_back(static_cast<float>(rng.normal()));
  return m;
}

RecordStore synthetic_store(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  RecordStore s(2, 2, 4);
  for (std::size_t i = 0; i < n; ++i) s.append(synthetic(static_cast<int>(i), 2, 2, 4, rng));
  return s;
}

}  // namespace

TEST(Capture, Deterministic) {
  Model<double> m(init_weights(task_model(1)));
  EXPECT_EQ(capture(m, few()[0], 1), capture(m, few()[0], 1));
}

TEST(Capture, SingleHeadEqualsForwardTrace) {
  Model<double> m(init_weights(task_model(2, 1, 1, 8)));
  const auto& x = few()[3];
  auto rec = capture(m, x, x.gold);
  auto out = m.forward(m.embed(x.frames, x.text(x.gold)), x.options);
  ASSERT_EQ(rec.values.size(), 8u);
  for (int d = 0; d < 8; ++d) EXPECT_EQ(rec.values[d], static_cast<float>(out.trace(0, d)));
}

TEST(Capture, AnswerTokenReachesLaterLayers) {
  Model<double> m(init_weights(task_model(3)));
  const auto& x = few()[5];
  auto a = capture(m, x, 0), b = capture(m, x, 1);
  for (int h = 0; h < 2; ++h) EXPECT_NE(a.head_vec(1, h), b.head_vec(1, h)) << h;
  EXPECT_NE(a.text_hash, b.text_hash);
  EXPECT_EQ(a.frames_hash, b.frames_hash);
}

TEST(Capture, ShapeMismatch) {
  Model<double> m(init_weights(task_model(4)));
  auto x = few()[0];
  x.frames.pop_back();
  EXPECT_THROW(capture(m, x), SizeError);
  EXPECT_THROW(capture(m, few()[0], 4), SizeError);
}

TEST(VisualPairs, ZeroEpsilonGivesIdenticalPairs) {
  Model<double> m(init_weights(task_model(5)));
  AttackConfig a;
  a.epsilon = 0;
  a.iters = 3;
  auto recs = collect_visual_pairs(m, few(), a);
  ASSERT_EQ(recs.size(), 2 * few().size());
  for (std::size_t i = 0; i < recs.size(); i += 2) {
    EXPECT_EQ(recs[i].sample_id, recs[i + 1].sample_id);
    EXPECT_EQ(recs[i].label, Label::Pos);
    EXPECT_EQ(recs[i + 1].label, Label::Neg);
    EXPECT_EQ(recs[i].values, recs[i + 1].values);
    EXPECT_TRUE(recs[i + 1].attack_failed);
  }
}

TEST(VisualPairs, BoundedFramesAndNonzeroOffsets) {
  Model<double> m(init_weights(task_model(6)));
  AttackConfig a;
  a.epsilon = 8;
  a.iters = 10;
  std::vector<AttackResult> adv;
  auto recs = collect_visual_pairs(m, few(), a, &adv);
  ASSERT_EQ(adv.size(), few().size());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    double linf = 0;
    for (std::size_t j = 0; j < adv[i].frames.size(); ++j)
      linf = std::max(linf, std::abs(adv[i].frames[j] - few()[i].frames[j]));
    EXPECT_LE(linf, 8.0);
    // Visual pairs differ only in frames.
    EXPECT_EQ(recs[2 * i].text_hash, recs[2 * i + 1].text_hash);
    EXPECT_NE(recs[2 * i].frames_hash, recs[2 * i + 1].frames_hash);
  }
  const auto& c = m.config();
  int nonzero = 0;
  for (int l = 0; l < c.layers; ++l)
    for (int h = 0; h < c.heads; ++h) {
      std::vector<double> mean(c.head_dim, 0.0);
      for (std::size_t i = 0; i < recs.size(); i += 2) {
        auto p = recs[i].head_vec(l, h), n = recs[i + 1].head_vec(l, h);
        for (int d = 0; d < c.head_dim; ++d) mean[d] += p[d] - n[d];
      }
      nonzero += std::any_of(mean.begin(), mean.end(), [](double v) { return v != 0.0; });
    }
  EXPECT_GE(nonzero, 0.9 * c.layers * c.heads);
  EXPECT_THROW(visual_pairs(m, few(), std::vector<AttackResult>(1)), PairingError);
}

TEST(TextPairs, FourRecordsPerInstance) {
  Model<double> m(init_weights(task_model(7)));
  auto recs = collect_text_pairs(m, few());
  ASSERT_EQ(recs.size(), 4 * few().size());
  for (std::size_t i = 0; i < few().size(); ++i) {
    const auto& x = few()[i];
    int pos = 0;
    std::set<int> negs;
    std::set<std::uint64_t> texts;
    for (int k = 0; k < 4; ++k) {
      const auto& r = recs[4 * i + k];
      EXPECT_EQ(r.sample_id, x.id);
      EXPECT_EQ(r.dimension, Dimension::Text);
      EXPECT_EQ(r.frames_hash, hash_frames(x.frames));
      texts.insert(r.text_hash);
      if (r.label == Label::Pos) {
        ++pos;
        EXPECT_EQ(r.neg_option, -1);
      } else {
        negs.insert(r.neg_option);
      }
    }
    EXPECT_EQ(pos, 1);
    EXPECT_EQ(negs.size(), 3u);
    EXPECT_EQ(negs.count(x.gold), 0u);
    EXPECT_EQ(texts.size(), 4u);
  }
  auto dup = few();
  dup[0].options[1] = dup[0].options[0];
  EXPECT_THROW(collect_text_pairs(m, dup), Error);
}

TEST(TextPairs, GoalNegativesAreMultiModal) {
  Model<float> m(init_weights(task_model(8, 4, 8, 16)).cast<float>());
  Dataset goal;
  for (auto& x : generate(TaskConfig{}, 60, 29))
    if (x.kind == TaskKind::Goal) goal.push_back(x);
  auto recs = collect_text_pairs(m, goal);
  // Pool negatives over the last layer's heads.
  Points pts(static_cast<Eigen::Index>(3 * goal.size()), 8 * 16);
  Eigen::Index row = 0;
  for (const auto& r : recs)
    if (r.label == Label::Neg) {
      for (int h = 0; h < 8; ++h)
        for (int d = 0; d < 16; ++d) pts(row, h * 16 + d) = r.head(3, h)[d];
      ++row;
    }
  auto km = kmeans(pts, 2, 1);
  EXPECT_GT(silhouette(pts, km.assign), 0.1);
}

TEST(RecordStore, RejectsBadRecords) {
  Rng rng(1);
  RecordStore s;
  s.append(synthetic(0, 2, 2, 4, rng));
  EXPECT_THROW(s.append(synthetic(0, 2, 2, 4, rng)), Error);
  EXPECT_THROW(s.append(synthetic(1, 2, 3, 4, rng)), SizeError);
  auto bad = synthetic(2, 2, 2, 4, rng);
  bad.values[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(s.append(bad), NumericError);
  auto long_id = synthetic(3, 2, 2, 4, rng);
  long_id.sample_id = std::string(kSampleIdBytes, 'x');
  EXPECT_THROW(s.append(long_id), SizeError);
  EXPECT_EQ(s.size(), 1u);
}

TEST(RecordStore, QueryIndependentOfAppendOrder) {
  Rng rng(2);
  std::vector<HeadActivationMap> recs;
  for (int i = 0; i < 40; ++i) recs.push_back(synthetic(i, 2, 2, 4, rng));
  RecordStore a, b;
  for (const auto& r : recs) a.append(r);
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) b.append(*it);
  for (auto t : kAllTasks)
    for (auto l : {Label::Pos, Label::Neg}) {
      auto qa = a.query(Dimension::Text, t, l), qb = b.query(Dimension::Text, t, l);
      ASSERT_EQ(qa.size(), qb.size());
      for (std::size_t i = 0; i < qa.size(); ++i) EXPECT_EQ(*qa[i], *qb[i]);
    }
  EXPECT_TRUE(a.query(Dimension::Visual, TaskKind::Goal, Label::Pos).empty());
}

TEST(RecordStore, RoundTripIsBitExact) {
  const auto path = tmp("vtom_records_rt.bin");
  auto s = synthetic_store(64, 3);
  save_records(path, s);
  EXPECT_EQ(load_records(path), s);
  save_records(path, RecordStore{});
  auto e = load_records(path);
  EXPECT_TRUE(e.empty());
  fs::remove(path);
  fs::remove(path + ".json");
}

TEST(RecordStore, TenThousandRecordChecksumStable) {
  const auto p1 = tmp("vtom_records_a.bin"), p2 = tmp("vtom_records_b.bin");
  save_records(p1, synthetic_store(10000, 4));
  save_records(p2, synthetic_store(10000, 4));
  const auto h = hash_file(p1);
  EXPECT_EQ(h, hash_file(p2));
  save_records(p2, load_records(p1));
  EXPECT_EQ(h, hash_file(p2));
  std::ifstream ms(p1 + ".json");
  EXPECT_EQ(nlohmann::json::parse(ms).at("hash").get<std::string>(), hex64(h));
  for (const auto& p : {p1, p2}) {
    fs::remove(p);
    fs::remove(p + ".json");
  }
}

TEST(RecordStore, TruncatedAndVersionMismatch) {
  const auto path = tmp("vtom_records_bad.bin");
  save_records(path, synthetic_store(8, 5));
  fs::resize_file(path, fs::file_size(path) - 5);
  EXPECT_THROW(load_records(path), FormatError);
  save_records(path, synthetic_store(8, 5));
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(8);
    const std::uint32_t v = 7;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  EXPECT_THROW(load_records(path), FormatError);
  fs::remove(path);
  fs::remove(path + ".json");
}
