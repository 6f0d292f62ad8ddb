#pragma once

#include <map>
#include <optional>

#include "coopdet/pipeline.hpp"

namespace coopdet {

struct AttackConfig {
  double eps = 0.1;       // L-inf budget on raw feature values
  int steps = 15;         // PGD iterations
  double alpha = 0.1;     // Adam learning rate / step size
  double lambda = 0.2;    // false-positive branch weight
  double tau_pos = 0.3;   // confidence filter, non-background branch
  double tau_neg = 0.7;   // confidence filter, background branch
  double gamma = 1.0;     // focal exponent
  enum class Optimizer { kAdamPgd, kFgsm } optimizer = Optimizer::kAdamPgd;
  bool cooperative = true;
  // Conventional Adam defaults; the reference only fixes the learning rate.
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    check_arg(eps >= 0.0, "attack: eps must be >= 0");
    check_arg(steps >= 0, "attack: steps must be >= 0");
    check_arg(tau_pos >= 0.0 && tau_pos <= 1.0 && tau_neg >= 0.0 && tau_neg <= 1.0,
              "attack: thresholds must be in [0,1]");
  }
};

// delta plus optimizer state, reusable across frames of an online attack.
struct PerturbationState {
  Tensor delta;
  Tensor adam_m, adam_v;
  int adam_t = 0;
  Tensor best_delta;
  double best_loss = 0.0;
  int frame_id = 0;
};

struct AttackResult {
  std::vector<int> attacker_ids;
  std::vector<Tensor> deltas;  // aligned with attacker_ids
  ProposalGrid clean_grid;
  ProposalGrid perturbed_grid;
  std::vector<double> loss_trace;  // loss_trace[i] = loss after i updates
  double best_loss = 0.0;
};

// --------------------------------------------------------------------------
// Adversarial loss
// --------------------------------------------------------------------------

// Target class for manufacturing a false positive: the most confident
// non-background class of the clean proposal; ties go to the lowest index.
inline int select_target_class(const Proposal& z) {
  const int k = static_cast<int>(z.scores.size()) - 1;
  int v = 0;
  for (int i = 1; i < k; ++i)
    if (z.scores[static_cast<std::size_t>(i)] > z.scores[static_cast<std::size_t>(v)]) v = i;
  return v;
}

namespace detail {

inline int argmax_all(const Proposal& z) {
  int u = 0;
  for (std::size_t i = 1; i < z.scores.size(); ++i)
    if (z.scores[i] > z.scores[static_cast<std::size_t>(u)]) u = static_cast<int>(i);
  return u;
}

}  // namespace detail

// Adversarial loss of a perturbed grid against the clean (unperturbed) grid.
// Confident objects get their confidence and localization pulled down;
// confident background cells are handled by the focal branch on the clean
// grid's favourite non-background class.
inline double adv_loss(const ProposalGrid& perturbed, const ProposalGrid& clean,
                       const AttackConfig& cfg) {
  check_arg(perturbed.proposals.size() == clean.proposals.size(),
            "adv_loss: grids not aligned");
  const int k = static_cast<int>(clean.proposals.front().scores.size()) - 1;
  double acc = 0.0;
  for (std::size_t cell = 0; cell < clean.proposals.size(); ++cell) {
    const Proposal& z = clean.proposals[cell];
    const Proposal& zp = perturbed.proposals[cell];
    const int u = detail::argmax_all(z);
    const double zu = z.scores[static_cast<std::size_t>(u)];
    if (u != k && zu > cfg.tau_pos) {
      const double s = std::min(zp.scores[static_cast<std::size_t>(u)], 1.0 - 1e-12);
      acc += -std::log(1.0 - s) * iou(zp.decoded, z.decoded);
    } else if (u == k && zu > cfg.tau_neg) {
      const int v = select_target_class(z);
      const double s = std::min(zp.scores[static_cast<std::size_t>(v)], 1.0 - 1e-12);
      acc += -cfg.lambda * std::pow(s, cfg.gamma) * std::log(1.0 - s);
    }
  }
  return acc;
}

// Differentiable version over the perturbed head outputs. Branch conditions
// and target classes come from the clean grid and are constants during the
// optimization; gradients flow through both the log factor and the IoU.
inline Var adv_loss_graph(Graph& g, const HeadOut& ho, const ProposalGrid& clean,
                          const AttackConfig& cfg, const ArchConfig& arch) {
  const int n = arch.h_f;
  const int k = arch.num_classes;
  std::vector<int> u_map(static_cast<std::size_t>(n) * n, 0);
  std::vector<int> v_map(static_cast<std::size_t>(n) * n, 0);
  Tensor fn_mask({n, n}), fp_mask({n, n});
  Tensor gcx({n, n}), gcy({n, n}), gw({n, n}), gh({n, n});
  for (int cell = 0; cell < n * n; ++cell) {
    const Proposal& z = clean.proposals[static_cast<std::size_t>(cell)];
    const int u = detail::argmax_all(z);
    const double zu = z.scores[static_cast<std::size_t>(u)];
    u_map[static_cast<std::size_t>(cell)] = u;
    v_map[static_cast<std::size_t>(cell)] = select_target_class(z);
    // Far-away unit placeholders where the IoU factor is unused.
    gcx[static_cast<std::size_t>(cell)] = 4.0 * arch.window_extent;
    gcy[static_cast<std::size_t>(cell)] = 4.0 * arch.window_extent;
    gw[static_cast<std::size_t>(cell)] = 1.0;
    gh[static_cast<std::size_t>(cell)] = 1.0;
    if (u != k && zu > cfg.tau_pos) {
      fn_mask[static_cast<std::size_t>(cell)] = 1.0;
      gcx[static_cast<std::size_t>(cell)] = z.decoded.cx;
      gcy[static_cast<std::size_t>(cell)] = z.decoded.cy;
      gw[static_cast<std::size_t>(cell)] = z.decoded.w;
      gh[static_cast<std::size_t>(cell)] = z.decoded.h;
    } else if (u == k && zu > cfg.tau_neg) {
      fp_mask[static_cast<std::size_t>(cell)] = 1.0;
    }
  }
  // False-negative branch: -log(1 - s'_u) * IoU(z', z).
  Var su = gather_ch(g, ho.scores, u_map);
  Var log_om_u = vlog(g, clamp(g, sub(g, g.constant(Tensor::full({n, n}, 1.0)), su),
                               1e-12, 1.0));
  Var iou_g = iou_grid_graph(g, ho, gcx, gcy, gw, gh);
  Var fn = sum(g, cmul(g, mul(g, neg(g, log_om_u), iou_g), fn_mask));
  // False-positive branch: -lambda * s'^gamma * log(1 - s').
  Var sv = gather_ch(g, ho.scores, v_map);
  Var log_om_v = vlog(g, clamp(g, sub(g, g.constant(Tensor::full({n, n}, 1.0)), sv),
                               1e-12, 1.0));
  Var focal = (cfg.gamma == 1.0) ? sv : pow_const(g, sv, cfg.gamma);
  Var fp = sum(g, cmul(g, mulc(g, mul(g, focal, log_om_v), -cfg.lambda), fp_mask));
  return add(g, fn, fp);
}

// --------------------------------------------------------------------------
// Attack optimization core
// --------------------------------------------------------------------------

enum class AttackObjective { kAdvLoss, kNegTask };

namespace detail {

struct DeltaAdam {
  std::vector<Tensor> m, v;
  int t = 0;

  void init(const std::vector<Tensor>& deltas) {
    for (const auto& d : deltas) {
      m.emplace_back(d.dims);
      v.emplace_back(d.dims);
    }
  }

  void step(std::vector<Tensor>& deltas, const std::vector<Tensor>& grads,
            const AttackConfig& cfg) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      for (int j = 0; j < deltas[i].size(); ++j) {
        const double gk = grads[i][static_cast<std::size_t>(j)];
        double& mk = m[i][static_cast<std::size_t>(j)];
        double& vk = v[i][static_cast<std::size_t>(j)];
        mk = cfg.adam_beta1 * mk + (1.0 - cfg.adam_beta1) * gk;
        vk = cfg.adam_beta2 * vk + (1.0 - cfg.adam_beta2) * gk * gk;
        const double upd = cfg.alpha * (mk / bc1) / (std::sqrt(vk / bc2) + cfg.adam_eps);
        double& dk = deltas[i][static_cast<std::size_t>(j)];
        dk = std::clamp(dk - upd, -cfg.eps, cfg.eps);
      }
    }
  }
};

}  // namespace detail

// Runs the projected-gradient attack. `carry`, when given, supplies the
// initial delta and persistent optimizer state for online (per-frame)
// attacks; `return_best` selects best-iterate (PGD convention) vs
// final-iterate (online convention) for the reported deltas.
inline AttackResult run_attack(const ModelParams& params,
                               const std::vector<Tensor>& messages,
                               const std::vector<AgentPose>& senders,
                               int ego_index, std::vector<int> attacker_ids,
                               const AttackConfig& cfg,
                               AttackObjective objective = AttackObjective::kAdvLoss,
                               const CellTargets* targets = nullptr,
                               PerturbationState* carry = nullptr,
                               bool return_best = true, int frame_id = 0) {
  cfg.validate();
  const int n = static_cast<int>(messages.size());
  check_arg(!attacker_ids.empty(), "attack: need at least one attacker");
  check_arg(static_cast<int>(attacker_ids.size()) < n,
            "attack: all agents are attackers, no victim left");
  for (int id : attacker_ids) {
    check_arg(id >= 0 && id < n, "attack: attacker id out of range");
    check_arg(id != ego_index, "attack: the ego agent cannot attack itself");
  }
  check_arg(objective != AttackObjective::kNegTask || targets != nullptr,
            "attack: negative-task objective requires cell targets");
  check_arg(carry == nullptr || attacker_ids.size() == 1,
            "attack: carried state is single-attacker only");

  AttackResult res;
  res.attacker_ids = attacker_ids;
  res.clean_grid =
      forward_from_messages(params, messages, senders, ego_index, {}, frame_id);

  const std::vector<int> shape = {params.arch.c_f, params.arch.h_f, params.arch.h_f};
  std::vector<Tensor> deltas;
  for (std::size_t i = 0; i < attacker_ids.size(); ++i) {
    if (carry && carry->delta.size() > 0)
      deltas.push_back(carry->delta);
    else
      deltas.emplace_back(shape);
  }

  detail::DeltaAdam adam;
  adam.init(deltas);
  if (carry && carry->adam_m.size() > 0) {
    adam.m[0] = carry->adam_m;
    adam.v[0] = carry->adam_v;
    adam.t = carry->adam_t;
  }

  std::vector<Tensor> best_deltas = deltas;
  double best = 0.0;
  bool have_best = false;

  const int steps = cfg.optimizer == AttackConfig::Optimizer::kFgsm
                        ? std::min(cfg.steps, 1)
                        : cfg.steps;

  for (int it = 0; it <= steps; ++it) {
    Graph g;
    ParamVars pv = bind_params(g, params, false);
    std::vector<Var> msg_vars;
    msg_vars.reserve(messages.size());
    for (const auto& m : messages) msg_vars.push_back(g.constant(m));
    std::map<int, Var> dvars;
    std::vector<Var> dleaves;
    for (std::size_t i = 0; i < attacker_ids.size(); ++i) {
      Var d = g.leaf(deltas[i], true);
      dvars[attacker_ids[i]] = d;
      dleaves.push_back(d);
    }
    HeadOut ho = pipeline_from_messages(g, params, pv, msg_vars, senders,
                                        ego_index, dvars);
    Var loss = objective == AttackObjective::kAdvLoss
                   ? adv_loss_graph(g, ho, res.clean_grid, cfg, params.arch)
                   : neg(g, task_loss_graph(g, ho, *targets));
    const double lval = loss->val[0];
    res.loss_trace.push_back(lval);
    if (!have_best || lval < best) {
      best = lval;
      best_deltas = deltas;
      have_best = true;
    }
    if (it == steps) break;

    g.backward(loss);
    if (cfg.optimizer == AttackConfig::Optimizer::kFgsm) {
      for (std::size_t i = 0; i < deltas.size(); ++i) {
        const Tensor& gr = g.grad(dleaves[i]);
        for (int j = 0; j < deltas[i].size(); ++j) {
          const double gk = gr[static_cast<std::size_t>(j)];
          deltas[i][static_cast<std::size_t>(j)] =
              gk > 0.0 ? -cfg.eps : (gk < 0.0 ? cfg.eps : 0.0);
        }
      }
    } else {
      std::vector<Tensor> grads;
      grads.reserve(deltas.size());
      for (Var d : dleaves) grads.push_back(g.grad(d));
      adam.step(deltas, grads, cfg);
    }
  }

  res.best_loss = best;
  const std::vector<Tensor>& reported = return_best ? best_deltas : deltas;
  res.deltas = reported;

  if (carry) {
    carry->delta = deltas[0];  // online attacks continue from the last iterate
    carry->adam_m = adam.m[0];
    carry->adam_v = adam.v[0];
    carry->adam_t = adam.t;
    carry->best_delta = best_deltas[0];
    carry->best_loss = best;
    carry->frame_id = frame_id;
  }

  bool all_zero = true;
  for (const auto& d : reported)
    if (d.max_abs() != 0.0) all_zero = false;
  if (all_zero) {
    // Bit-exact degenerate case: no perturbation applied at all.
    res.perturbed_grid = res.clean_grid;
  } else {
    std::map<int, const Tensor*> dmap;
    for (std::size_t i = 0; i < attacker_ids.size(); ++i)
      dmap[attacker_ids[i]] = &reported[i];
    res.perturbed_grid =
        forward_from_messages(params, messages, senders, ego_index, dmap, frame_id);
  }
  return res;
}

// --------------------------------------------------------------------------
// Spec-level entry points
// --------------------------------------------------------------------------

inline AttackResult pgd_attack(const ModelParams& params,
                               const std::vector<ObservationRaster>& obs,
                               int ego_index, std::vector<int> attacker_ids,
                               AttackConfig cfg) {
  cfg.optimizer = AttackConfig::Optimizer::kAdamPgd;
  std::vector<Tensor> messages = encode_all(params, obs);
  std::vector<AgentPose> senders;
  for (const auto& o : obs) senders.push_back(o.agent_pose);
  return run_attack(params, messages, senders, ego_index,
                    std::move(attacker_ids), cfg);
}

inline AttackResult fgsm_step(const ModelParams& params,
                              const std::vector<ObservationRaster>& obs,
                              int ego_index, std::vector<int> attacker_ids,
                              AttackConfig cfg) {
  cfg.optimizer = AttackConfig::Optimizer::kFgsm;
  cfg.steps = 1;
  std::vector<Tensor> messages = encode_all(params, obs);
  std::vector<AgentPose> senders;
  for (const auto& o : obs) senders.push_back(o.agent_pose);
  return run_attack(params, messages, senders, ego_index,
                    std::move(attacker_ids), cfg, AttackObjective::kAdvLoss,
                    nullptr, nullptr, /*return_best=*/false);
}

// Cooperative attackers optimize one joint loss; non-cooperative attackers
// are blind to each other: each optimizes against everyone-else-clean, and
// the resulting deltas are applied simultaneously for evaluation.
inline AttackResult multi_attacker_attack(const ModelParams& params,
                                          const std::vector<Tensor>& messages,
                                          const std::vector<AgentPose>& senders,
                                          int ego_index,
                                          const std::vector<int>& attacker_ids,
                                          bool cooperative, AttackConfig cfg) {
  const int n = static_cast<int>(messages.size());
  check_arg(static_cast<int>(attacker_ids.size()) <= n - 1,
            "multi_attacker_attack: all agents are attackers, no victim");
  cfg.cooperative = cooperative;
  if (cooperative || attacker_ids.size() == 1)
    return run_attack(params, messages, senders, ego_index, attacker_ids, cfg);

  AttackResult res;
  res.attacker_ids = attacker_ids;
  res.clean_grid = forward_from_messages(params, messages, senders, ego_index, {});
  std::map<int, const Tensor*> dmap;
  for (int id : attacker_ids) {
    AttackResult single =
        run_attack(params, messages, senders, ego_index, {id}, cfg);
    res.deltas.push_back(std::move(single.deltas[0]));
  }
  for (std::size_t i = 0; i < attacker_ids.size(); ++i)
    dmap[attacker_ids[i]] = &res.deltas[i];
  res.perturbed_grid =
      forward_from_messages(params, messages, senders, ego_index, dmap);
  res.loss_trace.push_back(adv_loss(res.clean_grid, res.clean_grid, cfg));
  res.loss_trace.push_back(adv_loss(res.perturbed_grid, res.clean_grid, cfg));
  res.best_loss = res.loss_trace.back();
  return res;
}

// --------------------------------------------------------------------------
// Perturbation warping and online attacks
// --------------------------------------------------------------------------

// Reseats a perturbation under the attacker's egomotion H (frame t -> t+1),
// with the same bilinear resampling as message warping, then re-clips.
// Interpolation cannot exceed the budget, but the clip guards numeric drift.
inline Tensor warp_perturbation(const Tensor& delta, const FrameTransform& H,
                                const GridSpec& spec, double eps) {
  Tensor out = warp_tensor(delta, H.inverse(), spec);
  for (auto& x : out.v) x = std::clamp(x, -eps, eps);
  return out;
}

// Online attack over a sequence: one gradient update per frame, previous
// perturbation warped by the attacker's egomotion as initialization.
// `warp_reuse` disables the rigid warp (the reuse-only ablation);
// `reuse=false` treats frames independently.
inline std::vector<AttackResult> online_attack(const SequenceLog& seq,
                                               const ModelParams& params,
                                               int ego_index, int attacker_id,
                                               AttackConfig cfg,
                                               bool reuse = true,
                                               bool warp_reuse = true) {
  check_arg(cfg.steps == 1, "online_attack: step budget per frame is 1");
  std::vector<AttackResult> per_frame;
  PerturbationState state;
  const GridSpec spec = feature_grid(params.arch);
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto& frame = seq.frames[t];
    std::vector<Tensor> messages = encode_all(params, frame.observations);
    std::vector<AgentPose> senders;
    for (const auto& o : frame.observations) senders.push_back(o.agent_pose);
    if (!reuse) {
      state = PerturbationState{};
    } else if (t > 0 && state.delta.size() > 0 && warp_reuse) {
      const FrameTransform H = egomotion_transform(
          seq.frames[t - 1].poses[static_cast<std::size_t>(attacker_id)],
          frame.poses[static_cast<std::size_t>(attacker_id)]);
      state.delta = warp_perturbation(state.delta, H, spec, cfg.eps);
    }
    AttackResult r = run_attack(params, messages, senders, ego_index,
                                {attacker_id}, cfg, AttackObjective::kAdvLoss,
                                nullptr, &state, /*return_best=*/false,
                                static_cast<int>(t));
    per_frame.push_back(std::move(r));
  }
  return per_frame;
}

// epsilon-bounded uniform noise baseline.
inline Tensor uniform_noise_baseline(const std::vector<int>& shape, double eps,
                                     std::uint64_t seed) {
  check_arg(eps >= 0.0, "uniform_noise_baseline: eps must be >= 0");
  Tensor d(shape);
  Rng rng(mix64(seed, 0x0153eULL));
  for (auto& x : d.v) x = rng.uniform(-eps, eps);
  return d;
}

}  // namespace coopdet
