#pragma once

#include <mutex>

#include "coopdet/attack.hpp"
#include "coopdet/dataset.hpp"
#include "coopdet/parallel.hpp"

namespace coopdet {

struct TrainConfig {
  int epochs = 3;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  int agents_min = 2;
  int agents_max = 6;
  int max_scenes = 0;  // 0 = use every record
  int threads = 0;     // 0 = hardware concurrency
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

// Threat model for feature-level adversarial training. The inner
// maximization runs a (weaker) PGD on the task loss with fresh perturbations
// for every sample; a step budget of 5 is the training-time default while
// evaluations use the full 15.
struct ThreatConfig {
  int n_attackers = 0;
  AttackConfig inner = default_inner();
  bool cooperative = true;

  static AttackConfig default_inner() {
    AttackConfig cfg;
    cfg.steps = 5;
    return cfg;
  }
};

struct TrainStats {
  std::vector<double> epoch_mean_loss;
  double initial_batch_loss = 0.0;
  double final_batch_loss = 0.0;
  std::size_t samples_processed = 0;
  std::size_t inner_attacks = 0;  // fresh-delta instrumentation
  std::vector<double> batch_losses;
};

struct TrainOutcome {
  ModelParams params;
  TrainStats stats;
};

namespace detail {

struct ParamAdam {
  std::vector<Tensor> m, v;
  int t = 0;

  explicit ParamAdam(const ModelParams& p) {
    for (const auto& tns : p.tensors) {
      m.emplace_back(tns.dims);
      v.emplace_back(tns.dims);
    }
  }

  void step(ModelParams& p, const std::vector<Tensor>& grads,
            const TrainConfig& cfg) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      for (int j = 0; j < p.tensors[i].size(); ++j) {
        const double gk = grads[i][static_cast<std::size_t>(j)];
        double& mk = m[i][static_cast<std::size_t>(j)];
        double& vk = v[i][static_cast<std::size_t>(j)];
        mk = cfg.adam_beta1 * mk + (1.0 - cfg.adam_beta1) * gk;
        vk = cfg.adam_beta2 * vk + (1.0 - cfg.adam_beta2) * gk * gk;
        p.tensors[i][static_cast<std::size_t>(j)] -=
            cfg.lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.adam_eps);
      }
    }
  }
};

struct SampleResult {
  std::vector<Tensor> grads;
  double loss = 0.0;
  bool attacked = false;
};

// One training sample: render, optionally run the inner attack with the
// current parameters, then differentiate the task loss w.r.t. parameters.
inline SampleResult train_sample(const ModelParams& params, const Dataset& ds,
                                 int rec, int n_agents,
                                 const std::vector<int>& attacker_ids,
                                 const ThreatConfig& threat) {
  SampleResult out;
  const auto obs = ds.observations(rec, n_agents);
  std::vector<AgentPose> senders;
  for (const auto& o : obs) senders.push_back(o.agent_pose);
  const int ego = 0;
  const CellTargets targets = assign_targets(
      ds.records[static_cast<std::size_t>(rec)].scene,
      senders[static_cast<std::size_t>(ego)].position, params.arch);

  // Inner maximization (fresh delta per sample). Skipped entirely when the
  // threat is degenerate so the loop reduces bit-exactly to standard training.
  std::vector<Tensor> deltas;
  std::vector<int> ids;
  if (!attacker_ids.empty() && threat.inner.eps > 0.0 && threat.inner.steps > 0) {
    std::vector<Tensor> messages = encode_all(params, obs);
    AttackConfig inner = threat.inner;
    inner.cooperative = threat.cooperative;
    AttackResult r = run_attack(params, messages, senders, ego, attacker_ids,
                                inner, AttackObjective::kNegTask, &targets);
    deltas = std::move(r.deltas);
    ids = attacker_ids;
    out.attacked = true;
  }

  Graph g;
  ParamVars pv = bind_params(g, params, true);
  std::vector<Var> msgs;
  for (const auto& o : obs)
    msgs.push_back(encode_graph(g, params, pv, g.constant(o.grid)));
  std::map<int, Var> dvars;
  for (std::size_t i = 0; i < ids.size(); ++i)
    dvars[ids[i]] = g.constant(deltas[i]);
  HeadOut ho = pipeline_from_messages(g, params, pv, msgs, senders, ego, dvars);
  Var loss = task_loss_graph(g, ho, targets);
  out.loss = loss->val[0];
  g.backward(loss);
  out.grads.reserve(pv.vars.size());
  for (Var v : pv.vars) {
    if (v->has_grad)
      out.grads.push_back(v->grad);
    else
      out.grads.emplace_back(v->val.dims);
  }
  return out;
}

}  // namespace detail

// Minimizes the mean task loss with Adam. `threat.n_attackers > 0` turns
// this into feature-level adversarial training (fresh inner PGD per sample);
// a zero threat is exactly standard training. Deterministic in `cfg.seed`
// for any thread count (per-sample work is isolated; reduction is ordered).
inline TrainOutcome train_model(const Dataset& ds, TrainConfig cfg,
                                const ThreatConfig& threat = {},
                                ArchConfig arch = {}) {
  check_arg(ds.size() > 0, "train: dataset is empty");
  check_arg(threat.n_attackers >= 0 && threat.n_attackers <= 3,
            "train: supported threat range is 0..3 attackers");
  const int n_scenes =
      cfg.max_scenes > 0 ? std::min(cfg.max_scenes, ds.size()) : ds.size();
  const int max_agents = ds.manifest.n_agents;
  check_arg(cfg.agents_min >= 1 && cfg.agents_max <= max_agents &&
                cfg.agents_min <= cfg.agents_max,
            "train: agent range incompatible with dataset");
  check_arg(threat.n_attackers < cfg.agents_max,
            "train: attackers must be fewer than agents per scene");

  TrainOutcome out;
  out.params = init_model(arch, mix64(cfg.seed, 0x1417ULL));
  detail::ParamAdam adam(out.params);

  std::vector<int> indices(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) indices[static_cast<std::size_t>(i)] = i;

  Rng order_rng(mix64(cfg.seed, 0x0e80cULL));
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(indices);
    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (int start = 0; start < n_scenes; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n_scenes - start);
      std::vector<detail::SampleResult> results(static_cast<std::size_t>(bsz));
      parallel_for(bsz, cfg.threads, [&](int bi) {
        const int rec = indices[static_cast<std::size_t>(start + bi)];
        // Per-sample RNG keyed by (seed, epoch, record) so the draw is
        // independent of batching and thread scheduling.
        Rng srng(mix64(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) |
                                      static_cast<std::uint64_t>(rec)));
        int amin = cfg.agents_min, amax = cfg.agents_max;
        if (threat.n_attackers > 0)
          amin = std::max(amin, threat.n_attackers + 1);
        const int n_agents =
            static_cast<int>(srng.uniform_int(std::min(amin, amax), amax));
        std::vector<int> attackers;
        if (threat.n_attackers > 0) {
          std::vector<int> others;
          for (int a = 1; a < n_agents; ++a) others.push_back(a);
          srng.shuffle(others);
          attackers.assign(others.begin(), others.begin() + threat.n_attackers);
          std::sort(attackers.begin(), attackers.end());
        }
        results[static_cast<std::size_t>(bi)] =
            detail::train_sample(out.params, ds, rec, n_agents, attackers, threat);
      });

      // Ordered reduction: bitwise identical for any thread count.
      std::vector<Tensor> grads;
      for (const auto& t : out.params.tensors) grads.emplace_back(t.dims);
      double batch_loss = 0.0;
      for (const auto& r : results) {
        batch_loss += r.loss;
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += r.grads[i];
        out.stats.samples_processed++;
        if (r.attacked) out.stats.inner_attacks++;
      }
      batch_loss /= bsz;
      for (auto& gt : grads) gt *= 1.0 / bsz;
      if (!std::isfinite(batch_loss))
        throw TrainingError("train: loss diverged (non-finite) at step " +
                            std::to_string(step));
      adam.step(out.params, grads, cfg);
      if (!out.params.all_finite())
        throw TrainingError("train: parameters diverged at step " +
                            std::to_string(step));
      if (step == 0) out.stats.initial_batch_loss = batch_loss;
      out.stats.final_batch_loss = batch_loss;
      out.stats.batch_losses.push_back(batch_loss);
      epoch_loss += batch_loss;
      ++epoch_batches;
      ++step;
    }
    out.stats.epoch_mean_loss.push_back(epoch_loss / epoch_batches);
  }
  return out;
}

// Standard (non-adversarial) training.
inline TrainOutcome train(const Dataset& ds, const TrainConfig& cfg,
                          ArchConfig arch = {}) {
  return train_model(ds, cfg, ThreatConfig{}, arch);
}

// Feature-level adversarial training (min over params of the inner max).
inline TrainOutcome adversarial_train(const Dataset& ds,
                                      const ThreatConfig& threat,
                                      const TrainConfig& cfg,
                                      ArchConfig arch = {}) {
  return train_model(ds, cfg, threat, arch);
}

}  // namespace coopdet
