// Copyright (c) 2026 The ModalityBank Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <thread>

#include "mbank/data/toy.hpp"
#include "mbank/federation/audit.hpp"
#include "mbank/federation/nodes.hpp"
#include "mbank/federation/transport.hpp"
#include "mbank/federation/wire.hpp"
#include "mbank/models/persist.hpp"
#include "mbank/nn/adam.hpp"
#include "mbank/nn/init.hpp"
#include "support/random_wire.hpp"

namespace {

namespace fed = mbank::federation;
namespace data = mbank::data;
namespace nn = mbank::nn;
using fed::WireMessage;
using mbank::models::Generator;
using mbank::models::GeneratorConfig;
using mbank::nn::Rng;
using mbank::nn::Shape;
using mbank::nn::Tensor;
using mbank::testing::random_message;

TEST(Wire, RoundTripRandomMessages) {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const WireMessage m = random_message(rng);
    const auto frame = fed::encode_frame(m);
    EXPECT_EQ(fed::decode_frame(frame), m) << "message " << i;
    EXPECT_EQ(fed::encode_frame(fed::decode_frame(frame)), frame);
  }
}

TEST(Wire, FrameHeaderIsVersionAndBigEndianLength) {
  const WireMessage m{fed::kProtocolVersion, 3, fed::Control{fed::ControlOp::kSync, ""}};
  const auto payload = fed::encode_payload(m);
  const auto frame = fed::encode_frame(m);
  ASSERT_EQ(frame.size(), fed::kFrameHeaderBytes + payload.size());
  EXPECT_EQ(frame[0], fed::kProtocolVersion);
  const std::uint32_t n = (std::uint32_t{frame[1]} << 24) | (std::uint32_t{frame[2]} << 16) |
                          (std::uint32_t{frame[3]} << 8) | frame[4];
  EXPECT_EQ(n, payload.size());
  EXPECT_TRUE(std::equal(payload.begin(), payload.end(), frame.begin() + fed::kFrameHeaderBytes));
}

TEST(Wire, RejectsTruncatedAndCorruptFrames) {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const auto frame = fed::encode_frame(random_message(rng));
    for (std::size_t cut : {std::size_t{0}, std::size_t{3}, frame.size() / 2, frame.size() - 1}) {
      std::vector<std::uint8_t> t(frame.begin(), frame.begin() + static_cast<long>(cut));
      EXPECT_THROW(fed::decode_frame(t), mbank::ProtocolError);
    }
    auto longer = frame;
    longer.push_back(0);
    EXPECT_THROW(fed::decode_frame(longer), mbank::ProtocolError);
  }
  auto frame = fed::encode_frame(WireMessage{1, 0, fed::Control{}});
  frame[fed::kFrameHeaderBytes] = 9;  // unknown message kind
  EXPECT_THROW(fed::decode_frame(frame), mbank::ProtocolError);
}

TEST(Wire, RejectsVersionMismatchAndOversizedFrames) {
  auto frame = fed::encode_frame(WireMessage{1, 0, fed::Control{}});
  auto bad = frame;
  bad[0] = 2;
  EXPECT_THROW(fed::decode_frame(bad), mbank::ProtocolError);
  EXPECT_THROW(fed::decode_frame(frame, 4), mbank::ProtocolError);
  fed::SyntheticBatch big{Tensor<float>(Shape{1000}), {}};
  EXPECT_THROW(fed::encode_frame(WireMessage{1, 0, big}, 1000), mbank::ProtocolError);
}

TEST(Wire, BodyAccessChecksKind) {
  const WireMessage m{1, 0, fed::Control{}};
  EXPECT_NO_THROW(fed::body_as<fed::Control>(m, "test"));
  EXPECT_THROW(fed::body_as<fed::FeedbackBatch>(m, "test"), mbank::ProtocolError);
}

class Transport : public ::testing::TestWithParam<fed::TransportKind> {};

TEST_P(Transport, DeliversFramesUnchangedInOrder) {
  auto [a, b] = fed::make_endpoint_pair(GetParam());
  Rng rng(9);
  std::vector<fed::Frame> sent;
  for (int i = 0; i < 20; ++i) sent.push_back(fed::encode_frame(random_message(rng)));
  std::thread t([&, &a = a] {
    for (const auto& f : sent) a->send_frame(f);
  });
  for (const auto& f : sent) {
    auto got = b->recv_frame(fed::Millis(5000));
    ASSERT_TRUE(got.has_value());
    EXPECT_EQ(*got, f);
  }
  t.join();
  EXPECT_FALSE(b->recv_frame(fed::Millis(20)).has_value());
}

TEST_P(Transport, ClosedPeerIsAnError) {
  auto [a, b] = fed::make_endpoint_pair(GetParam());
  a.reset();
  EXPECT_THROW(b->recv_frame(fed::Millis(1000)), mbank::ProtocolError);
}

INSTANTIATE_TEST_SUITE_P(Kinds, Transport,
                         ::testing::Values(fed::TransportKind::kInproc, fed::TransportKind::kSocket));

TEST(Transport, ParsesNames) {
  EXPECT_EQ(fed::parse_transport("inproc"), fed::TransportKind::kInproc);
  EXPECT_EQ(fed::parse_transport("socket"), fed::TransportKind::kSocket);
  EXPECT_THROW(fed::parse_transport("udp"), mbank::ConfigError);
}

WireMessage feedback(const std::string& center, std::uint64_t cases, float grad, std::vector<std::string> mods,
                     std::uint64_t round = 0) {
  fed::FeedbackBatch b;
  b.center_id = center;
  b.case_count = cases;
  b.batch_size = 1;
  for (const auto& m : mods) {
    b.gradients[m] = Tensor<float>(Shape{1, 1, 2, 2}, grad);
    b.g_losses[m] = b.d_losses[m] = 0;
  }
  return WireMessage{1, round, b};
}

TEST(Aggregation, WeightsByCaseShare) {
  const auto w = fed::feedback_weights({88, 102, 20});
  EXPECT_NEAR(w[0], 88.0 / 210, 1e-12);
  EXPECT_NEAR(w[1], 102.0 / 210, 1e-12);
  EXPECT_NEAR(w[2], 20.0 / 210, 1e-12);
  EXPECT_NEAR(w[0], 0.41905, 1e-5);
  EXPECT_NEAR(w[1], 0.48571, 1e-5);
  EXPECT_NEAR(w[2], 0.09524, 1e-5);
  EXPECT_THROW(fed::feedback_weights({0, 0}), mbank::ProtocolError);
}

TEST(Aggregation, ScalesGradientsPerModalityHolders) {
  const auto out = fed::aggregate_feedback({feedback("c1", 88, 1, {"a", "b"}), feedback("c2", 102, 1, {"a", "b"}),
                                            feedback("c3", 20, 1, {"a"})});
  EXPECT_NEAR(out[0].at("a")[0], 88.0 / 210, 1e-6);
  EXPECT_NEAR(out[2].at("a")[0], 20.0 / 210, 1e-6);
  // "b" comes only from the first two centers.
  EXPECT_NEAR(out[0].at("b")[0], 88.0 / 190, 1e-6);
  EXPECT_NEAR(out[1].at("b")[0], 102.0 / 190, 1e-6);
  EXPECT_EQ(out[2].count("b"), 0u);
}

TEST(Aggregation, EqualCentersGiveTheMean) {
  const auto out = fed::aggregate_feedback(
      {feedback("c1", 10, 3, {"a"}), feedback("c2", 10, 6, {"a"}), feedback("c3", 10, 9, {"a"})});
  float sum = 0;
  for (const auto& o : out) sum += o.at("a")[0];
  EXPECT_NEAR(sum, 6.0, 1e-5);
}

TEST(Aggregation, SingleFeedbackIsUnscaled) {
  EXPECT_EQ(fed::feedback_weights({37}), (std::vector<double>{1.0}));
  const auto out = fed::aggregate_feedback({feedback("c1", 37, 0.25f, {"a", "b"})});
  ASSERT_EQ(out.size(), 1u);
  for (const auto& m : {"a", "b"})
    for (float v : out[0].at(m).data()) EXPECT_EQ(v, 0.25f);
}

TEST(Aggregation, ZeroGradientsGiveZeroUpdate) {
  const auto out = fed::aggregate_feedback({feedback("c1", 88, 0, {"a"}), feedback("c2", 102, 0, {"a"})});
  nn::Parameter<float> p("w", Tensor<float>(Shape{1, 1, 2, 2}, 0.3f));
  const auto before = p.value;
  nn::Adam<float> opt;
  for (const auto& o : out) p.accumulate(o.at("a"));
  opt.step({&p});
  EXPECT_EQ(p.value, before);
}

TEST(Aggregation, RejectsMixedRounds) {
  EXPECT_THROW(fed::aggregate_feedback({feedback("c1", 1, 1, {"a"}, 0), feedback("c2", 1, 1, {"a"}, 16)}),
               mbank::ProtocolError);
  EXPECT_THROW(fed::aggregate_feedback({WireMessage{1, 0, fed::Control{}}}), mbank::ProtocolError);
}

GeneratorConfig tiny_generator() {
  GeneratorConfig g;
  g.base_width = 4;
  g.down_stages = 2;
  g.res_blocks = 1;
  return g;
}

fed::FederationConfig tiny_federation(std::size_t rounds) {
  fed::FederationConfig c;
  c.rounds = rounds;
  c.batch_size = 2;
  c.discriminator.base_width = 4;
  c.timeout = fed::Millis(20000);
  return c;
}

std::vector<data::CenterDataset> tiny_centers(std::size_t n = 12, std::uint64_t seed = 3) {
  return data::split_centers(data::sample_cases(n, seed, 16, 16), data::default_render_spec(), {2, 2, 1});
}

TEST(Federation, PretrainSingleCenterReducesLoss) {
  Generator<float> gen(tiny_generator(), 1);
  data::CenterDataset center;
  center.id = "pretrain";
  center.modalities = {"p0"};
  center.cases = data::pretrain_corpus("A", 8, 2, 16, 16);
  auto cfg = tiny_federation(60);
  cfg.generator_opt.lr = 5e-3;
  const auto reports = fed::run_federated(gen, nullptr, fed::Phase::kPretrain, {center}, cfg, 4);
  ASSERT_EQ(reports.size(), 60u);
  double early = 0, late = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    early += reports[i].g_loss.at("p0");
    late += reports[reports.size() - 1 - i].g_loss.at("p0");
  }
  EXPECT_LT(late, 0.8 * early);
}

TEST(Federation, BankPhaseLeavesBaseUntouchedAndTrainsEveryModality) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  for (const auto& m : {"m1", "m2", "m3"}) bank.register_modality(m);
  const auto before = gen.named_tensors();
  const std::string digest = mbank::models::base_digest(gen);
  const auto bank_before = mbank::models::bank_container(gen, bank).tensors;
  auto centers = tiny_centers();
  data::drop_modality(centers[2], "m3");
  fed::WireAuditLog audit;
  const auto reports = fed::run_bank_training(gen, bank, centers, tiny_federation(3), 5, &audit);
  EXPECT_EQ(reports.size(), 3u);
  EXPECT_EQ(gen.named_tensors(), before);
  EXPECT_EQ(mbank::models::base_digest(gen), digest);
  const auto bank_after = mbank::models::bank_container(gen, bank).tensors;
  for (const auto& m : {"m1", "m2", "m3"}) {
    const std::string key = std::string("bank/") + m + "/";
    bool changed = false;
    for (const auto& [name, t] : bank_after)
      if (name.rfind(key, 0) == 0 && !(t == bank_before.at(name))) changed = true;
    EXPECT_TRUE(changed) << m;
  }
  std::uint64_t census = 0;
  for (const auto& [name, t] : bank_after)
    if (name.rfind("bank/", 0) == 0) census += t.size();
  EXPECT_EQ(census, mbank::bank::bank_param_count(gen.architecture()).per_modality * 3);
  EXPECT_EQ(bank.trainable_count(), census);
  // 3 rounds x 3 centers x (sync, request, synthetic, feedback), then 3 shutdowns.
  EXPECT_EQ(audit.records().size(), 39u);
  EXPECT_TRUE(audit.check().ok());
}

TEST(Federation, RejectsBankForDifferentBase) {
  Generator<float> gen(tiny_generator(), 1), other(tiny_generator(), 2);
  auto bank = mbank::models::new_bank(other);
  bank.register_modality("m1");
  bank.register_modality("m2");
  bank.register_modality("m3");
  EXPECT_THROW(fed::run_bank_training(gen, bank, tiny_centers(), tiny_federation(1), 1), mbank::BankError);
}

TEST(Federation, RejectsUnregisteredModality) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  bank.register_modality("m1");
  EXPECT_THROW(fed::run_bank_training(gen, bank, tiny_centers(), tiny_federation(1), 1), mbank::BankError);
}

std::map<std::string, Tensor<float>> train_bank(fed::TransportKind kind, bool deterministic, std::uint64_t seed) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  for (const auto& m : {"m1", "m2", "m3"}) bank.register_modality(m);
  auto cfg = tiny_federation(2);
  cfg.transport = kind;
  cfg.deterministic = deterministic;
  fed::run_bank_training(gen, bank, tiny_centers(), cfg, seed);
  return mbank::models::bank_container(gen, bank).tensors;
}

TEST(Federation, TransportsAndSchedulingGiveIdenticalResults) {
  const auto ref = train_bank(fed::TransportKind::kInproc, true, 11);
  EXPECT_EQ(train_bank(fed::TransportKind::kInproc, true, 11), ref);
  EXPECT_EQ(train_bank(fed::TransportKind::kSocket, true, 11), ref);
  EXPECT_EQ(train_bank(fed::TransportKind::kSocket, false, 11), ref);
  EXPECT_NE(train_bank(fed::TransportKind::kInproc, true, 12), ref);
}

TEST(Federation, InjectedLeakIsDetected) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  for (const auto& m : {"m1", "m2", "m3"}) bank.register_modality(m);
  auto cfg = tiny_federation(2);
  cfg.inject_leak = true;
  fed::WireAuditLog audit;
  fed::run_bank_training(gen, bank, tiny_centers(), cfg, 5, &audit);
  const auto rep = audit.check();
  EXPECT_EQ(rep.violations, 1u);
  ASSERT_EQ(rep.details.size(), 1u);
  EXPECT_NE(rep.details[0].find("FeedbackBatch center1->generator round 0"), std::string::npos);

  const auto dir = std::filesystem::temp_directory_path() / "mbank_audit_test";
  std::filesystem::remove_all(dir);
  audit.save(dir);
  EXPECT_EQ(fed::WireAuditLog::check_files(dir).violations, 1u);
  std::filesystem::remove_all(dir);
}

// A center that ignores its first sync, forcing one retry.
TEST(Federation, TimeoutTriggersOneRetryThenAborts) {
  for (int ignored : {1, 2}) {
    Generator<float> gen(tiny_generator(), 1);
    auto cfg = tiny_federation(1);
    cfg.timeout = fed::Millis(200);
    auto centers = tiny_centers();
    auto [ga, cb] = fed::make_inproc_pair();
    fed::Link gen_link(std::move(ga), "generator", "center1", nullptr, cfg.max_frame_bytes);
    fed::Link center_link(std::move(cb), "center1", "generator", nullptr, cfg.max_frame_bytes);
    fed::CenterNode node(centers[0], cfg, 3);
    std::atomic<int> syncs{0};
    std::thread t([&] {
      while (true) {
        auto m = center_link.recv(fed::Millis(5000));
        if (!m) return;
        if (const auto* c = std::get_if<fed::Control>(&m->body)) {
          if (c->op == fed::ControlOp::kShutdown) return;
          if (syncs++ < ignored) continue;
          center_link.send(node.request(m->round_id));
        } else if (const auto* s = std::get_if<fed::SyntheticBatch>(&m->body)) {
          center_link.send(node.feedback(m->round_id, *s));
        }
      }
    });
    fed::GeneratorNode g(gen, nullptr, fed::Phase::kPretrain, cfg);
    std::vector<fed::Link*> links{&gen_link};
    if (ignored == 1) {
      const auto rep = g.run_round(links, 0);
      EXPECT_EQ(rep.attempts, 2u);
    } else {
      EXPECT_THROW(g.run_round(links, 0), mbank::TimeoutError);
    }
    gen_link.send(WireMessage{1, 99, fed::Control{fed::ControlOp::kShutdown, ""}});
    t.join();
  }
}

TEST(Federation, CenterFailureSurfacesWithoutWaitingForTimeout) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  for (const auto& m : {"m1", "m2", "m3"}) bank.register_modality(m);
  auto centers = tiny_centers();
  for (auto& c : centers[1].cases) c.images["m2"] = Tensor<float>(Shape{1, 8, 8});  // wrong size
  auto cfg = tiny_federation(1);
  cfg.timeout = fed::Millis(60000);
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(fed::run_bank_training(gen, bank, centers, cfg, 1), mbank::Error);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(20));
}

TEST(Completion, FillsOnlyMissingModalities) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  for (const auto& m : {"m1", "m2", "m3"}) bank.register_modality(m);
  auto centers = tiny_centers();
  auto c = centers[0];
  data::drop_modality(c, "m2");
  const auto done = fed::complete_missing_modalities(gen, bank, c, {"m1", "m2", "m3"});
  EXPECT_EQ(done.modalities, (std::set<std::string>{"m1", "m2", "m3"}));
  for (std::size_t i = 0; i < done.cases.size(); ++i) {
    EXPECT_TRUE(done.cases[i].synthetic.at("m2"));
    EXPECT_FALSE(done.cases[i].synthetic.at("m1"));
    EXPECT_EQ(done.cases[i].images.at("m1"), c.cases[i].images.at("m1"));
    EXPECT_EQ(done.cases[i].images.at("m2").shape(), (Shape{1, 16, 16}));
    auto view = mbank::bank::switch_modality(bank, "m2");
    Tensor<float> mask = c.cases[i].mask.reshaped(Shape{1, 3, 16, 16});
    Tensor<float> direct = gen.synthesize(mask, &view);
    for (std::size_t p = 0; p < direct.size(); ++p) EXPECT_FLOAT_EQ(direct[p], done.cases[i].images.at("m2")[p]);
  }
  EXPECT_THROW(fed::complete_missing_modalities(gen, bank, c, {"m9"}), mbank::BankError);
}

TEST(Completion, FullCenterIsUnchanged) {
  Generator<float> gen(tiny_generator(), 1);
  auto bank = mbank::models::new_bank(gen);
  for (const auto& m : {"m1", "m2", "m3"}) bank.register_modality(m);
  const auto c = tiny_centers()[1];
  const auto done = fed::complete_missing_modalities(gen, bank, c, {"m1", "m2", "m3"});
  EXPECT_EQ(done.modalities, c.modalities);
  ASSERT_EQ(done.cases.size(), c.cases.size());
  for (std::size_t i = 0; i < c.cases.size(); ++i) {
    EXPECT_EQ(done.cases[i].images, c.cases[i].images);
    EXPECT_EQ(done.cases[i].synthetic, c.cases[i].synthetic);
  }
}

}  // namespace
