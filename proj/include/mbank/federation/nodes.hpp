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


#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mbank/bank/modality_bank.hpp"
#include "mbank/data/toy.hpp"
#include "mbank/error.hpp"
#include "mbank/federation/audit.hpp"
#include "mbank/federation/transport.hpp"
#include "mbank/federation/wire.hpp"
#include "mbank/models/discriminator.hpp"
#include "mbank/models/generator.hpp"
#include "mbank/models/losses.hpp"
#include "mbank/models/persist.hpp"
#include "mbank/nn/adam.hpp"
#include "mbank/nn/graph.hpp"

// One central generator node and k center nodes, each center holding a
// private shard and one discriminator per modality it has.
namespace mbank::federation {

using nn::Graph;
using nn::Var;

struct FederationConfig {
  std::size_t rounds = 150;
  std::size_t batch_size = 4;
  nn::AdamConfig generator_opt{2e-3, 0.5, 0.999, 1e-8};
  nn::AdamConfig discriminator_opt{2e-4, 0.5, 0.999, 1e-8};
  double l1_weight = 10;  // center-side reconstruction term; 0 disables it
  models::DiscriminatorConfig discriminator{};
  TransportKind transport = TransportKind::kInproc;
  bool deterministic = true;  // one center at a time
  Millis timeout{60000};
  std::size_t retries = 1;
  std::size_t max_frame_bytes = kDefaultMaxFrameBytes;
  bool inject_leak = false;  // test hook: center 0 ships a real image in round 0
};

enum class Phase {
  kPretrain,  // full-weight training of the base generator
  kBank,      // frozen base, only modality parameters train
};

inline constexpr std::string_view kGeneratorName = "generator";
inline constexpr std::uint64_t kAttemptBits = 4;

/// Round id on the wire: round number and retry attempt.
inline std::uint64_t wire_round_id(std::uint64_t round, std::uint64_t attempt) {
  return (round << kAttemptBits) | attempt;
}

/// Codec + audit tap over one endpoint.
class Link {
 public:
  Link(std::unique_ptr<Endpoint> ep, std::string self, std::string peer, WireAuditLog* audit,
       std::size_t max_frame_bytes)
      : ep_(std::move(ep)), self_(std::move(self)), peer_(std::move(peer)), audit_(audit),
        max_(max_frame_bytes) {}

  void send(const WireMessage& m) {
    const Frame f = encode_frame(m, max_);
    if (audit_) audit_->record(self_, peer_, f, m);
    ep_->send_frame(f);
  }

  std::optional<WireMessage> recv(Millis timeout) {
    auto f = ep_->recv_frame(timeout);
    if (!f) return std::nullopt;
    return decode_frame(*f, max_);
  }

  const std::string& peer() const { return peer_; }

 private:
  std::unique_ptr<Endpoint> ep_;
  std::string self_, peer_;
  WireAuditLog* audit_;
  std::size_t max_;
};

/// Per-center weights n_k / sum(n_j).
inline std::vector<double> feedback_weights(const std::vector<std::uint64_t>& counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total <= 0) throw ProtocolError("feedback weights need a positive case count");
  std::vector<double> w;
  for (auto n : counts) w.push_back(static_cast<double>(n) / total);
  return w;
}

/// Scales each center's image gradients by its share of cases among the
/// centers that returned that modality.
inline std::vector<std::map<std::string, Tensor<float>>> aggregate_feedback(
    const std::vector<WireMessage>& feedbacks) {
  if (feedbacks.empty()) return {};
  const std::uint64_t round = feedbacks.front().round_id;
  std::map<std::string, double> totals;
  for (const auto& m : feedbacks) {
    if (m.round_id != round) {
      throw ProtocolError("feedback round ids differ: " + std::to_string(round) + " vs " +
                          std::to_string(m.round_id));
    }
    const auto& fb = body_as<FeedbackBatch>(m, "aggregate_feedback");
    for (const auto& [mod, _] : fb.gradients) totals[mod] += static_cast<double>(fb.case_count);
  }
  std::vector<std::map<std::string, Tensor<float>>> out;
  for (const auto& m : feedbacks) {
    const auto& fb = std::get<FeedbackBatch>(m.body);
    auto& scaled = out.emplace_back();
    for (const auto& [mod, grad] : fb.gradients) {
      if (totals[mod] <= 0) throw ProtocolError("feedback for '" + mod + "' has zero case count");
      const auto w = static_cast<float>(static_cast<double>(fb.case_count) / totals[mod]);
      Tensor<float> g = grad;
      for (auto& v : g.data()) v *= w;
      scaled.emplace(mod, std::move(g));
    }
  }
  return out;
}

/// Stacks the planes of selected cases into a batch tensor.
inline Tensor<float> stack_planes(const std::vector<const data::Case*>& cases,
                                  const std::function<const Tensor<float>&(const data::Case&)>& pick) {
  const Tensor<float>& first = pick(*cases.front());
  nn::Shape s{cases.size()};
  s.insert(s.end(), first.shape().begin(), first.shape().end());
  Tensor<float> out(s);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Tensor<float>& t = pick(*cases[i]);
    if (t.size() != first.size()) throw DataError("case " + cases[i]->id + " has a mis-sized plane");
    std::copy(t.ptr(), t.ptr() + t.size(), out.ptr() + i * first.size());
  }
  return out;
}

/// A data center: answers sync requests with mask batches and turns the
/// returned synthetic images into losses and image gradients.
class CenterNode {
 public:
  CenterNode(data::CenterDataset shard, const FederationConfig& cfg, std::uint64_t seed)
      : shard_(std::move(shard)), cfg_(cfg), rng_(nn::derive_seed(seed, 0)) {
    if (shard_.cases.empty()) throw DataError(shard_.id + " has no training cases");
    if (shard_.modalities.empty()) throw DataError(shard_.id + " has no modalities");
    std::uint64_t stream = 1;
    for (const auto& m : shard_.modalities) {
      discriminators_.emplace(m, models::Discriminator<float>(cfg.discriminator, nn::derive_seed(seed, stream++),
                                                              "disc/" + shard_.id + "/" + m));
      optimizers_.emplace(m, nn::Adam<float>(cfg.discriminator_opt));
    }
  }

  const data::CenterDataset& shard() const { return shard_; }
  std::map<std::string, models::Discriminator<float>>& discriminators() { return discriminators_; }

  /// Serves until a shutdown control message arrives.
  void serve(Link& link) {
    while (true) {
      auto msg = link.recv(Millis(1000));
      if (!msg) continue;
      if (const auto* c = std::get_if<Control>(&msg->body)) {
        if (c->op == ControlOp::kShutdown) return;
        if (c->op == ControlOp::kSync) link.send(request(msg->round_id));
        continue;
      }
      if (const auto* s = std::get_if<SyntheticBatch>(&msg->body)) {
        if (!pending_ || msg->round_id != *pending_) continue;  // stale attempt
        link.send(feedback(msg->round_id, *s));
        continue;
      }
      throw ProtocolError(shard_.id + ": unexpected " + std::string(kind_name(kind_of(*msg))));
    }
  }

  WireMessage request(std::uint64_t round_id) {
    const std::size_t n = shard_.cases.size(), b = std::min(cfg_.batch_size, n);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < b; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(idx[i], idx[pick(rng_)]);
    }
    batch_.assign(idx.begin(), idx.begin() + static_cast<long>(b));
    pending_ = round_id;
    MaskBatchRequest req;
    req.center_id = shard_.id;
    req.masks = stack_planes(batch_cases(), [](const data::Case& c) -> const Tensor<float>& { return c.mask; });
    req.modalities.assign(shard_.modalities.begin(), shard_.modalities.end());
    return WireMessage{kProtocolVersion, round_id, std::move(req)};
  }

  WireMessage feedback(std::uint64_t round_id, const SyntheticBatch& synth) {
    const auto cases = batch_cases();
    FeedbackBatch fb;
    fb.center_id = shard_.id;
    fb.batch_size = cases.size();
    fb.case_count = shard_.cases.size();
    for (const auto& m : shard_.modalities) {
      auto it = synth.images.find(m);
      if (it == synth.images.end()) throw ProtocolError(shard_.id + ": synthetic batch lacks '" + m + "'");
      const Tensor<float>& fake = it->second;
      const Tensor<float> real =
          stack_planes(cases, [&](const data::Case& c) -> const Tensor<float>& { return c.images.at(m); });
      if (fake.shape() != real.shape()) throw ProtocolError(shard_.id + ": synthetic batch has the wrong shape");
      auto& disc = discriminators_.at(m);
      {
        Graph<float> g;
        Var mask = g.constant(synth.masks);
        Var loss = models::lsgan_d_loss(g, disc.forward(g, g.constant(real), mask, true),
                                        disc.forward(g, g.constant(fake), mask, true));
        fb.d_losses[m] = g.value(loss).item();
        nn::zero_grads(disc.params());
        g.backward(loss);
        optimizers_.at(m).step(disc.params());
      }
      Graph<float> g;
      Var x = g.leaf(fake);
      Var loss = models::lsgan_g_loss(g, disc.forward(g, x, g.constant(synth.masks), false));
      if (cfg_.l1_weight > 0) {
        loss = g.add(loss, g.affine(models::l1_loss(g, x, g.constant(real)), static_cast<float>(cfg_.l1_weight), 0.0f));
      }
      fb.g_losses[m] = g.value(loss).item();
      auto grads = g.backward(loss);
      Tensor<float> grad = grads.at(x.id);
      if (cfg_.inject_leak && shard_.index == 0 && (round_id >> kAttemptBits) == 0 && m == *shard_.modalities.begin()) {
        std::copy(real.ptr(), real.ptr() + real.size() / real.dim(0), grad.ptr());
      }
      fb.gradients[m] = std::move(grad);
    }
    pending_.reset();
    return WireMessage{kProtocolVersion, round_id, std::move(fb)};
  }

 private:
  std::vector<const data::Case*> batch_cases() const {
    std::vector<const data::Case*> out;
    for (auto i : batch_) out.push_back(&shard_.cases[i]);
    return out;
  }

  data::CenterDataset shard_;
  FederationConfig cfg_;
  nn::Rng rng_;
  std::map<std::string, models::Discriminator<float>> discriminators_;
  std::map<std::string, nn::Adam<float>> optimizers_;
  std::vector<std::size_t> batch_;
  std::optional<std::uint64_t> pending_;
};

struct RoundReport {
  std::uint64_t round = 0;
  std::size_t attempts = 1;
  std::map<std::string, double> g_loss;  // per modality, case-weighted over centers
  std::map<std::string, double> d_loss;
};

/// The central generator: never sees real images, only masks and feedback.
class GeneratorNode {
 public:
  GeneratorNode(models::Generator<float>& gen, bank::ParameterBank<float>* bank, Phase phase,
                const FederationConfig& cfg)
      : gen_(gen), bank_(bank), phase_(phase), cfg_(cfg), base_opt_(cfg.generator_opt) {
    if (phase == Phase::kBank && !bank) throw BankError("bank phase needs a parameter bank");
  }

  RoundReport run_round(std::vector<Link*>& centers, std::uint64_t round) {
    for (std::size_t attempt = 0; attempt <= cfg_.retries; ++attempt) {
      try {
        RoundReport r = attempt_round(centers, wire_round_id(round, attempt));
        r.round = round;
        r.attempts = attempt + 1;
        return r;
      } catch (const TimeoutError&) {
        if (attempt == cfg_.retries) throw;
      }
    }
    throw ProtocolError("unreachable");
  }

 private:
  struct Recorded {
    Graph<float> graph;
    Var out;
  };

  WireMessage await(Link& link, std::uint64_t round_id, MessageKind kind) {
    while (true) {
      auto msg = link.recv(cfg_.timeout);
      if (!msg) {
        throw TimeoutError(link.peer() + " sent no " + kind_name(kind) + " for round id " + std::to_string(round_id));
      }
      if (msg->round_id < round_id) continue;  // late reply to an aborted attempt
      if (msg->round_id != round_id) {
        throw ProtocolError(link.peer() + " sent round id " + std::to_string(msg->round_id) + ", expected " +
                            std::to_string(round_id));
      }
      if (kind_of(*msg) != kind) {
        throw ProtocolError(link.peer() + " sent " + kind_name(kind_of(*msg)) + ", expected " + kind_name(kind));
      }
      return *msg;
    }
  }

  WireMessage synthesize(const MaskBatchRequest& req, std::uint64_t round_id, std::map<std::string, Recorded>& rec) {
    SyntheticBatch out;
    out.masks = req.masks;
    for (const auto& m : req.modalities) {
      Recorded r;
      Var mask = r.graph.constant(req.masks);
      if (phase_ == Phase::kPretrain) {
        r.out = gen_.forward(r.graph, mask, models::GenMode::kTrainBase);
      } else {
        auto view = bank::switch_modality(*bank_, m);
        r.out = gen_.forward(r.graph, mask, models::GenMode::kTrainModality, &view);
      }
      out.images[m] = r.graph.value(r.out);
      rec.emplace(m, std::move(r));
    }
    return WireMessage{kProtocolVersion, round_id, std::move(out)};
  }

  RoundReport attempt_round(std::vector<Link*>& centers, std::uint64_t round_id) {
    std::vector<std::map<std::string, Recorded>> recorded(centers.size());
    std::vector<WireMessage> feedbacks(centers.size());
    auto serve_request = [&](std::size_t k) {
      const WireMessage req = await(*centers[k], round_id, MessageKind::kMaskBatchRequest);
      const auto& body = std::get<MaskBatchRequest>(req.body);
      centers[k]->send(synthesize(body, round_id, recorded[k]));
    };
    auto sync = [&](std::size_t k) { centers[k]->send(WireMessage{kProtocolVersion, round_id, Control{ControlOp::kSync, centers[k]->peer()}}); };
    if (cfg_.deterministic) {
      for (std::size_t k = 0; k < centers.size(); ++k) {
        sync(k);
        serve_request(k);
        feedbacks[k] = await(*centers[k], round_id, MessageKind::kFeedbackBatch);
      }
    } else {
      for (std::size_t k = 0; k < centers.size(); ++k) sync(k);
      for (std::size_t k = 0; k < centers.size(); ++k) serve_request(k);
      for (std::size_t k = 0; k < centers.size(); ++k)
        feedbacks[k] = await(*centers[k], round_id, MessageKind::kFeedbackBatch);
    }

    const auto scaled = aggregate_feedback(feedbacks);
    nn::ParamList<float> params = trainable();
    nn::zero_grads(params);
    RoundReport report;
    std::map<std::string, double> weight_sum;
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& fb = std::get<FeedbackBatch>(feedbacks[k].body);
      for (auto& [m, r] : recorded[k]) {
        auto it = scaled[k].find(m);
        if (it == scaled[k].end()) throw ProtocolError(centers[k]->peer() + " returned no gradient for '" + m + "'");
        if (it->second.shape() != r.graph.value(r.out).shape()) {
          throw ProtocolError(centers[k]->peer() + " returned a mis-shaped gradient for '" + m + "'");
        }
        r.graph.backward(r.out, it->second);
        const double n = static_cast<double>(fb.case_count);
        report.g_loss[m] += n * fb.g_losses.at(m);
        report.d_loss[m] += n * fb.d_losses.at(m);
        weight_sum[m] += n;
      }
    }
    for (auto& [m, w] : weight_sum) {
      report.g_loss[m] /= w;
      report.d_loss[m] /= w;
    }
    if (phase_ == Phase::kPretrain) {
      base_opt_.step(params);
    } else {
      for (const auto& [m, _] : weight_sum) {
        auto it = modality_opts_.try_emplace(m, cfg_.generator_opt).first;
        it->second.step(bank_->params(m).params());
      }
    }
    return report;
  }

  nn::ParamList<float> trainable() {
    if (phase_ == Phase::kPretrain) return gen_.base_params();
    nn::ParamList<float> out;
    for (const auto& id : bank_->modalities()) {
      auto p = bank_->params(id).params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  models::Generator<float>& gen_;
  bank::ParameterBank<float>* bank_;
  Phase phase_;
  FederationConfig cfg_;
  nn::Adam<float> base_opt_;
  std::map<std::string, nn::Adam<float>> modality_opts_;
};

/// Runs R synchronous rounds with every center on its own thread.
inline std::vector<RoundReport> run_federated(models::Generator<float>& gen, bank::ParameterBank<float>* bank,
                                              Phase phase, const std::vector<data::CenterDataset>& centers,
                                              const FederationConfig& cfg, std::uint64_t seed,
                                              WireAuditLog* audit = nullptr,
                                              const std::function<void(const RoundReport&)>& on_round = {}) {
  if (centers.empty()) throw DataError("federated training needs at least one center");
  if (phase == Phase::kBank) {
    if (!bank) throw BankError("bank phase needs a parameter bank");
    if (bank->base_digest() != models::base_digest(gen)) {
      throw BankError("base checkpoint digest does not match the bank");
    }
    for (const auto& c : centers)
      for (const auto& m : c.modalities)
        if (!bank->has(m)) throw BankError(c.id + " holds modality '" + m + "' not registered in the bank");
  }
  if (audit) {
    for (const auto& c : centers)
      for (const auto& cs : c.cases)
        for (const auto& [_, img] : cs.images) audit->register_real(img);
  }

  std::vector<std::unique_ptr<Link>> gen_links, center_links;
  std::vector<std::unique_ptr<CenterNode>> nodes;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    auto [a, b] = make_endpoint_pair(cfg.transport, cfg.max_frame_bytes);
    gen_links.push_back(std::make_unique<Link>(std::move(a), std::string(kGeneratorName), centers[k].id, audit,
                                               cfg.max_frame_bytes));
    center_links.push_back(std::make_unique<Link>(std::move(b), centers[k].id, std::string(kGeneratorName), audit,
                                                  cfg.max_frame_bytes));
    nodes.push_back(std::make_unique<CenterNode>(centers[k], cfg, nn::derive_seed(seed, 1000 + k)));
  }
  std::vector<std::exception_ptr> center_errors(centers.size());
  std::vector<std::thread> threads;
  for (std::size_t k = 0; k < centers.size(); ++k) {
    threads.emplace_back([&, k] {
      try {
        nodes[k]->serve(*center_links[k]);
      } catch (...) {
        center_errors[k] = std::current_exception();
        center_links[k].reset();  // wakes the generator instead of letting it time out
      }
    });
  }

  std::vector<Link*> links;
  for (auto& l : gen_links) links.push_back(l.get());
  GeneratorNode node(gen, bank, phase, cfg);
  std::vector<RoundReport> reports;
  std::exception_ptr failure;
  try {
    for (std::size_t r = 0; r < cfg.rounds; ++r) {
      reports.push_back(node.run_round(links, r));
      if (on_round) on_round(reports.back());
    }
  } catch (...) {
    failure = std::current_exception();
  }
  for (std::size_t k = 0; k < centers.size(); ++k) {
    try {
      gen_links[k]->send(WireMessage{kProtocolVersion, wire_round_id(cfg.rounds, 0),
                                     Control{ControlOp::kShutdown, centers[k].id}});
    } catch (const Error&) {
    }
  }
  for (auto& t : threads) t.join();
  for (auto& e : center_errors)
    if (e) std::rethrow_exception(e);
  if (failure) std::rethrow_exception(failure);
  return reports;
}

inline std::vector<RoundReport> run_bank_training(models::Generator<float>& gen, bank::ParameterBank<float>& bank,
                                                  const std::vector<data::CenterDataset>& centers,
                                                  const FederationConfig& cfg, std::uint64_t seed,
                                                  WireAuditLog* audit = nullptr,
                                                  const std::function<void(const RoundReport&)>& on_round = {}) {
  return run_federated(gen, &bank, Phase::kBank, centers, cfg, seed, audit, on_round);
}

/// Synthesizes one modality for every case, in batches.
inline std::vector<Tensor<float>> synthesize_for(models::Generator<float>& gen, bank::ParameterBank<float>& bank,
                                                 const std::string& modality,
                                                 const std::vector<const data::Case*>& cases,
                                                 std::size_t batch = 32) {
  auto view = bank::switch_modality(bank, modality);
  std::vector<Tensor<float>> out;
  for (std::size_t start = 0; start < cases.size(); start += batch) {
    std::vector<const data::Case*> chunk(cases.begin() + static_cast<long>(start),
                                         cases.begin() + static_cast<long>(std::min(cases.size(), start + batch)));
    const Tensor<float> masks = stack_planes(chunk, [](const data::Case& c) -> const Tensor<float>& { return c.mask; });
    const Tensor<float> imgs = gen.synthesize(masks, &view);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      Tensor<float> one = imgs.slice0(i, 1);
      out.push_back(one.reshaped(nn::Shape{1, one.dim(2), one.dim(3)}));
    }
  }
  return out;
}

/// Fills every modality of `required` the center lacks with a synthetic
/// image tagged as such; present modalities are left untouched.
inline data::CenterDataset complete_missing_modalities(models::Generator<float>& gen,
                                                       bank::ParameterBank<float>& bank,
                                                       const data::CenterDataset& center,
                                                       const std::vector<std::string>& required) {
  data::CenterDataset out = center;
  std::vector<const data::Case*> cases;
  for (const auto& c : out.cases) cases.push_back(&c);
  for (const auto& m : required) {
    if (out.modalities.count(m)) continue;
    if (!bank.has(m)) throw BankError("cannot complete '" + m + "': modality not in the bank");
    auto images = synthesize_for(gen, bank, m, cases);
    for (std::size_t i = 0; i < out.cases.size(); ++i) {
      out.cases[i].images[m] = std::move(images[i]);
      out.cases[i].synthetic[m] = true;
    }
    out.modalities.insert(m);
  }
  return out;
}

}  // namespace mbank::federation
