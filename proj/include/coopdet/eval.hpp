#pragma once

#include "coopdet/attack.hpp"
#include "coopdet/dataset.hpp"
#include "coopdet/metrics.hpp"
#include "coopdet/parallel.hpp"

namespace coopdet {

enum class PerturbKind {
  kNone,        // clean inference
  kUniform,     // eps-bounded uniform noise on attacker messages
  kWhiteBox,    // PGD on the adversarial loss against the victim
  kNegTask,     // PGD ascending the task loss (loss-ablation baseline)
  kFgsm,        // single sign step on the adversarial loss
  kTransfer,    // PGD against a surrogate, deltas applied to the victim
};

struct PerturbSpec {
  PerturbKind kind = PerturbKind::kNone;
  std::vector<int> attackers = {1};
  bool cooperative = true;
  AttackConfig atk;
  const ModelParams* surrogate = nullptr;  // required for kTransfer
};

struct EvalOptions {
  int n_agents = 2;
  int max_scenes = 0;  // 0 = every record
  double nms_iou = 0.5;
  double nms_score = 0.05;
  double ap_iou = 0.7;
  int threads = 0;
  std::uint64_t seed = 7;
};

struct EvalOutput {
  double ap = 0.0;
  std::vector<Detection> detections;
  std::vector<GtRecord> ground_truth;
};

namespace detail {

inline std::vector<Detection> grid_detections(const ProposalGrid& grid,
                                              double nms_iou, double nms_score,
                                              int scene_id) {
  std::vector<Detection> out;
  for (const auto& pr : nms(grid, nms_iou, nms_score)) {
    Detection d;
    d.scene_id = scene_id;
    d.cell = pr.cell;
    d.class_id = pr.best_class;
    d.confidence = pr.confidence;
    d.box = Box{pr.decoded.cx + grid.ego_position.x,
                pr.decoded.cy + grid.ego_position.y, pr.decoded.w, pr.decoded.h};
    out.push_back(d);
  }
  return out;
}

inline ProposalGrid perturbed_forward(const ModelParams& victim,
                                      const Dataset& ds, int rec,
                                      const std::vector<ObservationRaster>& obs,
                                      const std::vector<AgentPose>& senders,
                                      const PerturbSpec& spec,
                                      std::uint64_t scene_seed) {
  const int ego = 0;
  switch (spec.kind) {
    case PerturbKind::kNone:
      return forward_pipeline(victim, obs, ego);
    case PerturbKind::kUniform: {
      std::vector<Tensor> noise;
      std::map<int, const Tensor*> dmap;
      noise.reserve(spec.attackers.size());
      for (std::size_t i = 0; i < spec.attackers.size(); ++i)
        noise.push_back(uniform_noise_baseline(
            {victim.arch.c_f, victim.arch.h_f, victim.arch.h_f}, spec.atk.eps,
            mix64(scene_seed, static_cast<std::uint64_t>(spec.attackers[i]))));
      for (std::size_t i = 0; i < spec.attackers.size(); ++i)
        dmap[spec.attackers[i]] = &noise[i];
      std::vector<Tensor> messages = encode_all(victim, obs);
      return forward_from_messages(victim, messages, senders, ego, dmap);
    }
    case PerturbKind::kWhiteBox: {
      std::vector<Tensor> messages = encode_all(victim, obs);
      return multi_attacker_attack(victim, messages, senders, ego,
                                   spec.attackers, spec.cooperative, spec.atk)
          .perturbed_grid;
    }
    case PerturbKind::kNegTask: {
      std::vector<Tensor> messages = encode_all(victim, obs);
      const CellTargets targets =
          assign_targets(ds.records[static_cast<std::size_t>(rec)].scene,
                         senders[0].position, victim.arch);
      return run_attack(victim, messages, senders, ego, spec.attackers,
                        spec.atk, AttackObjective::kNegTask, &targets)
          .perturbed_grid;
    }
    case PerturbKind::kFgsm: {
      AttackConfig cfg = spec.atk;
      cfg.optimizer = AttackConfig::Optimizer::kFgsm;
      cfg.steps = 1;
      std::vector<Tensor> messages = encode_all(victim, obs);
      return run_attack(victim, messages, senders, ego, spec.attackers, cfg,
                        AttackObjective::kAdvLoss, nullptr, nullptr,
                        /*return_best=*/false)
          .perturbed_grid;
    }
    case PerturbKind::kTransfer: {
      check_arg(spec.surrogate != nullptr, "eval: transfer needs a surrogate");
      if (spec.surrogate->arch_hash() != victim.arch_hash())
        throw ArchitectureError(
            "transfer: surrogate/victim architecture mismatch");
      std::vector<Tensor> sur_messages = encode_all(*spec.surrogate, obs);
      AttackResult r = multi_attacker_attack(*spec.surrogate, sur_messages,
                                             senders, ego, spec.attackers,
                                             spec.cooperative, spec.atk);
      std::vector<Tensor> vic_messages = encode_all(victim, obs);
      std::map<int, const Tensor*> dmap;
      for (std::size_t i = 0; i < spec.attackers.size(); ++i)
        dmap[spec.attackers[i]] = &r.deltas[i];
      return forward_from_messages(victim, vic_messages, senders, ego, dmap);
    }
  }
  throw ArgumentError("eval: unknown perturbation kind");
}

}  // namespace detail

// Evaluates AP at `ap_iou` over the (static-scene) dataset under the given
// perturbation. Scene work runs in parallel; detections merge in scene order
// so the result is deterministic for any thread count.
inline EvalOutput evaluate_model(const ModelParams& victim, const Dataset& ds,
                                 const EvalOptions& opt,
                                 const PerturbSpec& spec = {}) {
  check_arg(opt.n_agents >= 1 && opt.n_agents <= ds.manifest.n_agents,
            "eval: n_agents exceeds dataset poses");
  for (int a : spec.attackers)
    check_arg(a >= 1 || spec.kind == PerturbKind::kNone,
              "eval: attacker 0 is the ego agent");
  const int n =
      opt.max_scenes > 0 ? std::min(opt.max_scenes, ds.size()) : ds.size();
  std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(n));
  std::vector<std::vector<GtRecord>> gts(static_cast<std::size_t>(n));
  parallel_for(n, opt.threads, [&](int rec) {
    const auto obs = ds.observations(rec, opt.n_agents);
    std::vector<AgentPose> senders;
    for (const auto& o : obs) senders.push_back(o.agent_pose);
    ProposalGrid grid = detail::perturbed_forward(
        victim, ds, rec, obs, senders, spec,
        mix64(opt.seed, static_cast<std::uint64_t>(rec)));
    dets[static_cast<std::size_t>(rec)] =
        detail::grid_detections(grid, opt.nms_iou, opt.nms_score, rec);
    gts[static_cast<std::size_t>(rec)] =
        gt_in_window(ds.records[static_cast<std::size_t>(rec)].scene,
                     senders[0].position, victim.arch.window_extent, rec);
  });
  EvalOutput out;
  for (int i = 0; i < n; ++i) {
    out.detections.insert(out.detections.end(), dets[static_cast<std::size_t>(i)].begin(),
                          dets[static_cast<std::size_t>(i)].end());
    out.ground_truth.insert(out.ground_truth.end(), gts[static_cast<std::size_t>(i)].begin(),
                            gts[static_cast<std::size_t>(i)].end());
  }
  out.ap = compute_ap(out.detections, out.ground_truth, opt.ap_iou);
  return out;
}

// --------------------------------------------------------------------------
// Sequence (online) evaluation
// --------------------------------------------------------------------------

enum class OnlineMode {
  kClean,
  kOnline,        // reuse + warp, one step per frame
  kOnlineNoWarp,  // reuse without egomotion compensation
  kIndependent,   // fresh single-step FGSM per frame
};

// Pooled AP over every frame of every sequence under an online attack mode.
inline EvalOutput evaluate_online(const ModelParams& victim, const Dataset& ds,
                                  const EvalOptions& opt, OnlineMode mode,
                                  AttackConfig atk, int attacker_id = 1) {
  check_arg(ds.manifest.type == "sequences", "evaluate_online: need sequences");
  const int n =
      opt.max_scenes > 0 ? std::min(opt.max_scenes, ds.size()) : ds.size();
  std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(n));
  std::vector<std::vector<GtRecord>> gts(static_cast<std::size_t>(n));
  atk.steps = 1;
  parallel_for(n, opt.threads, [&](int rec) {
    const SequenceLog seq = ds.sequence(rec);
    const int frames = static_cast<int>(seq.frames.size());
    std::vector<ProposalGrid> grids;
    if (mode == OnlineMode::kClean) {
      for (int t = 0; t < frames; ++t) {
        const auto& fr = seq.frames[static_cast<std::size_t>(t)];
        grids.push_back(forward_pipeline(victim, fr.observations, 0, {}, t));
      }
    } else if (mode == OnlineMode::kIndependent) {
      AttackConfig cfg = atk;
      cfg.optimizer = AttackConfig::Optimizer::kFgsm;
      for (int t = 0; t < frames; ++t) {
        const auto& fr = seq.frames[static_cast<std::size_t>(t)];
        std::vector<Tensor> messages = encode_all(victim, fr.observations);
        std::vector<AgentPose> senders;
        for (const auto& o : fr.observations) senders.push_back(o.agent_pose);
        grids.push_back(run_attack(victim, messages, senders, 0, {attacker_id},
                                   cfg, AttackObjective::kAdvLoss, nullptr,
                                   nullptr, /*return_best=*/false, t)
                            .perturbed_grid);
      }
    } else {
      const bool warp = mode == OnlineMode::kOnline;
      auto results = online_attack(seq, victim, 0, attacker_id, atk,
                                   /*reuse=*/true, /*warp_reuse=*/warp);
      for (auto& r : results) grids.push_back(std::move(r.perturbed_grid));
    }
    for (int t = 0; t < frames; ++t) {
      const int frame_scene_id = rec * 1000 + t;
      auto d = detail::grid_detections(grids[static_cast<std::size_t>(t)],
                                       opt.nms_iou, opt.nms_score, frame_scene_id);
      auto& dst = dets[static_cast<std::size_t>(rec)];
      dst.insert(dst.end(), d.begin(), d.end());
      auto gg = gt_in_window(
          seq.scene,
          seq.frames[static_cast<std::size_t>(t)].poses[0].position,
          victim.arch.window_extent, frame_scene_id);
      auto& gdst = gts[static_cast<std::size_t>(rec)];
      gdst.insert(gdst.end(), gg.begin(), gg.end());
    }
  });
  EvalOutput out;
  for (int i = 0; i < n; ++i) {
    out.detections.insert(out.detections.end(), dets[static_cast<std::size_t>(i)].begin(),
                          dets[static_cast<std::size_t>(i)].end());
    out.ground_truth.insert(out.ground_truth.end(), gts[static_cast<std::size_t>(i)].begin(),
                            gts[static_cast<std::size_t>(i)].end());
  }
  out.ap = compute_ap(out.detections, out.ground_truth, opt.ap_iou);
  return out;
}

}  // namespace coopdet
