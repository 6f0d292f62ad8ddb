#pragma once

#include <map>
#include <optional>

#include "coopdet/autodiff.hpp"
#include "coopdet/model.hpp"
#include "coopdet/render.hpp"

namespace coopdet {

// An agent's transmitted intermediate feature map. The attack surface.
struct FeatureMessage {
  Tensor features;  // (c_f, h_f, h_f)
  AgentPose sender_pose;
  int frame_id = 0;
  int sender_id = 0;
};

// One dense detection proposal (per feature-grid cell).
struct Proposal {
  std::vector<double> scores;  // k+1 simplex entries, background last
  double dx = 0, dy = 0, log_w = 0, log_h = 0;
  int cell = 0;
  Box decoded;  // ego-window local coords
  int best_class = 0;     // argmax over non-background classes
  double confidence = 0;  // max non-background score
};

struct ProposalGrid {
  std::vector<Proposal> proposals;  // h_f * h_f entries, row-major by cell
  int ego_id = 0;
  int frame_id = 0;
  Vec2 ego_position;  // detection frame: ego-centered, world-axis-aligned
  GridSpec grid;
};

inline GridSpec feature_grid(const ArchConfig& arch) {
  return {arch.h_f, arch.window_extent};
}

inline GridSpec raster_grid(const ArchConfig& arch) {
  return {arch.h_in, arch.window_extent};
}

// The frame all messages are warped into before fusion: centered on the ego
// agent, axes aligned with the world. Keeping the detection frame
// world-aligned is what lets boxes stay axis-aligned end to end.
inline AgentPose detection_frame(const AgentPose& ego_pose) {
  return AgentPose{ego_pose.position, 0.0, {0.0, 0.0}};
}

// --------------------------------------------------------------------------
// Parameter binding
// --------------------------------------------------------------------------

struct ParamVars {
  std::vector<Var> vars;  // aligned with ModelParams::tensors

  Var operator()(const ModelParams& p, const std::string& name) const {
    return vars[static_cast<std::size_t>(p.index(name))];
  }
};

inline ParamVars bind_params(Graph& g, const ModelParams& p,
                             bool requires_grad) {
  ParamVars pv;
  for (const auto& t : p.tensors) pv.vars.push_back(g.leaf(t, requires_grad));
  return pv;
}

// --------------------------------------------------------------------------
// Encoder
// --------------------------------------------------------------------------

inline Var encode_graph(Graph& g, const ModelParams& p, const ParamVars& pv,
                        Var obs) {
  const auto& arch = p.arch;
  check_shape(obs->val, {arch.c_in, arch.h_in, arch.h_in}, "encode: observation");
  Var h = relu(g, conv2d(g, obs, pv(p, "enc.conv1.w"), pv(p, "enc.conv1.b"), 1, 1));
  h = relu(g, conv2d(g, h, pv(p, "enc.conv2.w"), pv(p, "enc.conv2.b"), 2, 1));
  h = conv2d(g, h, pv(p, "enc.conv3.w"), pv(p, "enc.conv3.b"), 1, 1);
  return h;
}

// The spec-facing encode: deterministic, value-only.
inline FeatureMessage encode(const ObservationRaster& obs, const ModelParams& p,
                             int sender_id = 0) {
  Graph g;
  ParamVars pv = bind_params(g, p, false);
  Var m = encode_graph(g, p, pv, g.constant(obs.grid));
  return FeatureMessage{m->val, obs.agent_pose, obs.frame_id, sender_id};
}

inline std::vector<Tensor> encode_all(const ModelParams& p,
                                      const std::vector<ObservationRaster>& obs) {
  std::vector<Tensor> out;
  out.reserve(obs.size());
  for (const auto& o : obs) {
    Graph g;
    ParamVars pv = bind_params(g, p, false);
    out.push_back(encode_graph(g, p, pv, g.constant(o.grid))->val);
  }
  return out;
}

// --------------------------------------------------------------------------
// Message warping
// --------------------------------------------------------------------------

// Warps a feature message from its sender's local frame into the target
// frame, with bilinear resampling and zero padding. Identity poses are an
// exact identity.
inline Tensor warp_message(const FeatureMessage& msg, const AgentPose& target,
                           const ArchConfig& arch) {
  return warp_tensor(msg.features, src_from_dst(msg.sender_pose, target),
                     feature_grid(arch));
}

// --------------------------------------------------------------------------
// Fusion
// --------------------------------------------------------------------------

// Fuses warped messages. The GNN variants keep one node per agent, update
// all nodes for `rounds` iterations from [own state ; cross-agent reduction],
// and read out the ego node. `ego_index` refers to a position in `warped`.
inline Var fuse_graph(Graph& g, const ModelParams& p, const ParamVars& pv,
                      const std::vector<Var>& warped, int ego_index) {
  check_arg(!warped.empty(), "fuse: empty message list");
  check_arg(ego_index >= 0 && ego_index < static_cast<int>(warped.size()),
            "fuse: ego index out of range");
  const auto& arch = p.arch;
  for (Var m : warped)
    check_shape(m->val, {arch.c_f, arch.h_f, arch.h_f}, "fuse: message");

  if (arch.fusion == FusionVariant::kMeanPool) {
    Var m = reduce_mean(g, warped);
    m = relu(g, conv2d(g, m, pv(p, "fus.post1.w"), pv(p, "fus.post1.b"), 1, 1));
    return conv2d(g, m, pv(p, "fus.post2.w"), pv(p, "fus.post2.b"), 1, 1);
  }

  auto reduce = [&](const std::vector<Var>& xs) -> Var {
    switch (arch.fusion) {
      case FusionVariant::kGnnMean: return reduce_mean(g, xs);
      case FusionVariant::kGnnMedian: return reduce_median(g, xs);
      case FusionVariant::kGnnSoftMedian:
        return reduce_softmedian(g, xs, arch.softmed_temp);
      default: throw ArchitectureError("fuse: bad variant");
    }
  };

  std::vector<Var> states = warped;
  for (int round = 0; round < arch.gnn_rounds; ++round) {
    Var agg = reduce(states);
    std::vector<Var> next;
    next.reserve(states.size());
    for (Var h : states)
      next.push_back(relu(g, conv2d(g, concat_ch(g, h, agg), pv(p, "fus.msg.w"),
                                    pv(p, "fus.msg.b"), 1, 1)));
    states = std::move(next);
  }
  return conv2d(g, states[static_cast<std::size_t>(ego_index)],
                pv(p, "fus.out.w"), pv(p, "fus.out.b"), 1, 1);
}

// --------------------------------------------------------------------------
// Detection head
// --------------------------------------------------------------------------

struct HeadOut {
  Var scores;  // (k+1, h, w), softmax-normalized per cell
  Var cx, cy, bw, bh;  // (h, w) decoded box parameters, local window coords
  Var raw_dx, raw_dy;  // pre-decode offsets (for inspection)
};

namespace detail {

inline void cell_center_tensors(const GridSpec& spec, Tensor& cx, Tensor& cy) {
  cx = Tensor({spec.n, spec.n});
  cy = Tensor({spec.n, spec.n});
  for (int r = 0; r < spec.n; ++r)
    for (int c = 0; c < spec.n; ++c) {
      const Vec2 q = spec.center(r, c);
      cx.at(r, c) = q.x;
      cy.at(r, c) = q.y;
    }
}

}  // namespace detail

inline HeadOut detect_graph(Graph& g, const ModelParams& p, const ParamVars& pv,
                            Var fused) {
  const auto& arch = p.arch;
  check_shape(fused->val, {arch.c_f, arch.h_f, arch.h_f}, "detect: fused input");
  Var h = relu(g, conv2d(g, fused, pv(p, "head.conv1.w"), pv(p, "head.conv1.b"), 1, 1));
  Var raw = conv2d(g, h, pv(p, "head.conv2.w"), pv(p, "head.conv2.b"), 1, 1);
  const int k1 = arch.num_classes + 1;
  HeadOut out;
  out.scores = softmax_ch(g, slice_ch(g, raw, 0, k1));
  const int n = arch.h_f;
  Var dx = reshape(g, slice_ch(g, raw, k1, k1 + 1), {n, n});
  Var dy = reshape(g, slice_ch(g, raw, k1 + 1, k1 + 2), {n, n});
  Var lw = reshape(g, slice_ch(g, raw, k1 + 2, k1 + 3), {n, n});
  Var lh = reshape(g, slice_ch(g, raw, k1 + 3, k1 + 4), {n, n});
  Tensor ccx, ccy;
  detail::cell_center_tensors(feature_grid(arch), ccx, ccy);
  out.cx = add(g, dx, g.constant(ccx));
  out.cy = add(g, dy, g.constant(ccy));
  out.bw = vexp(g, lw);
  out.bh = vexp(g, lh);
  out.raw_dx = dx;
  out.raw_dy = dy;
  return out;
}

inline ProposalGrid extract_grid(const HeadOut& ho, const ArchConfig& arch,
                                 const AgentPose& ego_pose, int ego_id,
                                 int frame_id) {
  ProposalGrid grid;
  grid.ego_id = ego_id;
  grid.frame_id = frame_id;
  grid.ego_position = ego_pose.position;
  grid.grid = feature_grid(arch);
  const int n = arch.h_f, k1 = arch.num_classes + 1;
  grid.proposals.resize(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      Proposal& pr = grid.proposals[static_cast<std::size_t>(r) * n + c];
      pr.cell = r * n + c;
      pr.scores.resize(static_cast<std::size_t>(k1));
      for (int i = 0; i < k1; ++i) pr.scores[static_cast<std::size_t>(i)] = ho.scores->val.at(i, r, c);
      pr.dx = ho.raw_dx->val.at(r, c);
      pr.dy = ho.raw_dy->val.at(r, c);
      pr.decoded = Box{ho.cx->val.at(r, c), ho.cy->val.at(r, c),
                       ho.bw->val.at(r, c), ho.bh->val.at(r, c)};
      pr.log_w = std::log(pr.decoded.w);
      pr.log_h = std::log(pr.decoded.h);
      pr.best_class = 0;
      for (int i = 1; i < k1 - 1; ++i)
        if (pr.scores[static_cast<std::size_t>(i)] > pr.scores[static_cast<std::size_t>(pr.best_class)])
          pr.best_class = i;
      pr.confidence = pr.scores[static_cast<std::size_t>(pr.best_class)];
    }
  return grid;
}

// --------------------------------------------------------------------------
// Full pipeline
// --------------------------------------------------------------------------

// Builds encode -> (+delta) -> warp -> fuse -> detect over message Vars.
// `deltas` maps agent index -> perturbation Var added in the sender's own
// message frame, before warping.
inline HeadOut pipeline_from_messages(Graph& g, const ModelParams& p,
                                      const ParamVars& pv,
                                      const std::vector<Var>& messages,
                                      const std::vector<AgentPose>& senders,
                                      int ego_index,
                                      const std::map<int, Var>& deltas) {
  const int n = static_cast<int>(messages.size());
  check_arg(n >= 1 && n <= 7, "pipeline: need 1..7 agents");
  check_arg(ego_index >= 0 && ego_index < n, "pipeline: bad ego index");
  for (const auto& [id, d] : deltas) {
    check_arg(id >= 0 && id < n, "pipeline: attacker id not in agent list");
    (void)d;
  }
  const AgentPose ego_frame = detection_frame(senders[static_cast<std::size_t>(ego_index)]);
  const GridSpec spec = feature_grid(p.arch);
  std::vector<Var> warped;
  warped.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Var m = messages[static_cast<std::size_t>(i)];
    auto it = deltas.find(i);
    if (it != deltas.end()) m = add(g, m, it->second);
    warped.push_back(warp_bilinear(
        g, m, src_from_dst(senders[static_cast<std::size_t>(i)], ego_frame), spec));
  }
  Var fused = fuse_graph(g, p, pv, warped, ego_index);
  return detect_graph(g, p, pv, fused);
}

// Value-level forward pass. With no perturbations this *is* clean inference;
// a perturbation map with zero tensors follows the identical code path.
inline ProposalGrid forward_from_messages(
    const ModelParams& p, const std::vector<Tensor>& messages,
    const std::vector<AgentPose>& senders, int ego_index,
    const std::map<int, const Tensor*>& deltas = {}, int frame_id = 0) {
  Graph g;
  ParamVars pv = bind_params(g, p, false);
  std::vector<Var> msg_vars;
  msg_vars.reserve(messages.size());
  for (const auto& m : messages) msg_vars.push_back(g.constant(m));
  std::map<int, Var> delta_vars;
  for (const auto& [id, d] : deltas) delta_vars[id] = g.constant(*d);
  HeadOut ho = pipeline_from_messages(g, p, pv, msg_vars, senders, ego_index,
                                      delta_vars);
  return extract_grid(ho, p.arch, senders[static_cast<std::size_t>(ego_index)],
                      ego_index, frame_id);
}

inline ProposalGrid forward_pipeline(
    const ModelParams& p, const std::vector<ObservationRaster>& observations,
    int ego_index, const std::map<int, const Tensor*>& deltas = {},
    int frame_id = 0) {
  std::vector<Tensor> messages = encode_all(p, observations);
  std::vector<AgentPose> senders;
  senders.reserve(observations.size());
  for (const auto& o : observations) senders.push_back(o.agent_pose);
  return forward_from_messages(p, messages, senders, ego_index, deltas, frame_id);
}

// --------------------------------------------------------------------------
// Non-maximum suppression
// --------------------------------------------------------------------------

// Greedy NMS on max-non-background confidence; ties broken by ascending cell
// index. Suppression is class-agnostic.
inline std::vector<Proposal> nms(const ProposalGrid& grid,
                                 double iou_threshold = 0.5,
                                 double score_threshold = 0.05) {
  check_arg(iou_threshold >= 0.0 && iou_threshold <= 1.0 &&
                score_threshold >= 0.0 && score_threshold <= 1.0,
            "nms: thresholds must be in [0,1]");
  std::vector<const Proposal*> cand;
  for (const auto& pr : grid.proposals)
    if (pr.confidence >= score_threshold) cand.push_back(&pr);
  std::sort(cand.begin(), cand.end(), [](const Proposal* a, const Proposal* b) {
    if (a->confidence != b->confidence) return a->confidence > b->confidence;
    return a->cell < b->cell;
  });
  std::vector<Proposal> kept;
  std::vector<bool> dead(cand.size(), false);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(*cand[i]);
    for (std::size_t j = i + 1; j < cand.size(); ++j)
      if (!dead[j] && iou(cand[i]->decoded, cand[j]->decoded) > iou_threshold)
        dead[j] = true;
  }
  return kept;
}

// --------------------------------------------------------------------------
// Ground-truth assignment and task loss
// --------------------------------------------------------------------------

// Cell targets for the dense head: a cell is positive iff a ground-truth box
// center falls inside it (nearest center wins a shared cell); all other
// cells are background.
struct CellTargets {
  std::vector<int> labels;  // per cell, 0..k (k = background)
  Tensor gt_cx, gt_cy, gt_w, gt_h;  // per cell, valid where pos_mask == 1
  Tensor pos_mask;
  int n_pos = 0;
};

inline CellTargets assign_targets(const WorldScene& scene, const Vec2& ego_pos,
                                  const ArchConfig& arch) {
  const GridSpec spec = feature_grid(arch);
  const int n = spec.n;
  CellTargets t;
  t.labels.assign(static_cast<std::size_t>(n) * n, arch.num_classes);
  t.gt_cx = Tensor({n, n});
  t.gt_cy = Tensor({n, n});
  // Unit far-away placeholders keep the IoU grid well-defined everywhere.
  t.gt_w = Tensor::full({n, n}, 1.0);
  t.gt_h = Tensor::full({n, n}, 1.0);
  for (auto& x : t.gt_cx.v) x = 4.0 * spec.extent;
  for (auto& x : t.gt_cy.v) x = 4.0 * spec.extent;
  t.pos_mask = Tensor({n, n});
  std::vector<double> dist(static_cast<std::size_t>(n) * n, 1e30);
  for (const auto& obj : scene.objects) {
    const Vec2 local{obj.box.cx - ego_pos.x, obj.box.cy - ego_pos.y};
    if (!spec.inside(local)) continue;
    const Vec2 rc = spec.to_rc(local);
    const int r = std::clamp(static_cast<int>(std::lround(rc.x)), 0, n - 1);
    const int c = std::clamp(static_cast<int>(std::lround(rc.y)), 0, n - 1);
    const Vec2 cc = spec.center(r, c);
    const double d = (local - cc).norm();
    const std::size_t cell = static_cast<std::size_t>(r) * n + c;
    if (d >= dist[cell]) continue;
    dist[cell] = d;
    if (t.pos_mask.at(r, c) == 0.0) ++t.n_pos;
    t.labels[cell] = obj.class_id;
    t.pos_mask.at(r, c) = 1.0;
    t.gt_cx.at(r, c) = local.x;
    t.gt_cy.at(r, c) = local.y;
    t.gt_w.at(r, c) = obj.box.w;
    t.gt_h.at(r, c) = obj.box.h;
  }
  return t;
}

// IoU between per-cell predicted boxes and constant target boxes, as a
// differentiable (h, w) grid.
inline Var iou_grid_graph(Graph& g, const HeadOut& ho, const Tensor& gcx,
                          const Tensor& gcy, const Tensor& gw, const Tensor& gh) {
  Var x1 = sub(g, ho.cx, mulc(g, ho.bw, 0.5));
  Var x2 = add(g, ho.cx, mulc(g, ho.bw, 0.5));
  Var y1 = sub(g, ho.cy, mulc(g, ho.bh, 0.5));
  Var y2 = add(g, ho.cy, mulc(g, ho.bh, 0.5));
  Tensor gx1 = gcx, gx2 = gcx, gy1 = gcy, gy2 = gcy;
  for (int i = 0; i < gx1.size(); ++i) {
    gx1[static_cast<std::size_t>(i)] -= 0.5 * gw[static_cast<std::size_t>(i)];
    gx2[static_cast<std::size_t>(i)] += 0.5 * gw[static_cast<std::size_t>(i)];
    gy1[static_cast<std::size_t>(i)] -= 0.5 * gh[static_cast<std::size_t>(i)];
    gy2[static_cast<std::size_t>(i)] += 0.5 * gh[static_cast<std::size_t>(i)];
  }
  Var iw = relu(g, sub(g, vmin(g, x2, g.constant(gx2)), vmax(g, x1, g.constant(gx1))));
  Var ih = relu(g, sub(g, vmin(g, y2, g.constant(gy2)), vmax(g, y1, g.constant(gy1))));
  Var inter = mul(g, iw, ih);
  Tensor garea(gw.dims);
  for (int i = 0; i < garea.size(); ++i)
    garea[static_cast<std::size_t>(i)] =
        gw[static_cast<std::size_t>(i)] * gh[static_cast<std::size_t>(i)];
  Var uni = sub(g, add(g, mul(g, ho.bw, ho.bh), g.constant(garea)), inter);
  return vdiv(g, inter, uni);
}

// Scene task loss (summed over cells): -log s_y - IoU on positive cells,
// -log s_bg on background cells.
inline Var task_loss_graph(Graph& g, const HeadOut& ho, const CellTargets& t) {
  Var sel = gather_ch(g, ho.scores, t.labels);
  Var cls = neg(g, sum(g, vlog(g, clamp(g, sel, 1e-12, 1.0))));
  Var iou_g = iou_grid_graph(g, ho, t.gt_cx, t.gt_cy, t.gt_w, t.gt_h);
  Var iou_pos = sum(g, cmul(g, iou_g, t.pos_mask));
  return sub(g, cls, iou_pos);
}

// Per-proposal task loss, plain-value form.
inline double task_loss(const Proposal& z, int y, const Box* gt_box,
                        int num_classes) {
  check_arg(y >= 0 && y <= num_classes, "task_loss: label out of range");
  const double s = std::max(z.scores[static_cast<std::size_t>(y)], 1e-12);
  if (y == num_classes) return -std::log(s);
  check_arg(gt_box != nullptr, "task_loss: positive cell needs a box");
  return -std::log(s) - iou(z.decoded, *gt_box);
}

// Plain-value scene task loss; mirrors task_loss_graph exactly.
inline double scene_task_loss(const ProposalGrid& grid, const CellTargets& t,
                              int num_classes) {
  double acc = 0.0;
  const int n = grid.grid.n;
  for (int cell = 0; cell < n * n; ++cell) {
    const auto& z = grid.proposals[static_cast<std::size_t>(cell)];
    const int y = t.labels[static_cast<std::size_t>(cell)];
    if (y == num_classes) {
      acc += task_loss(z, y, nullptr, num_classes);
    } else {
      const Box gt{t.gt_cx[static_cast<std::size_t>(cell)],
                   t.gt_cy[static_cast<std::size_t>(cell)],
                   t.gt_w[static_cast<std::size_t>(cell)],
                   t.gt_h[static_cast<std::size_t>(cell)]};
      acc += task_loss(z, y, &gt, num_classes);
    }
  }
  return acc;
}

// Ground truth visible to the ego window, world coordinates.
struct GtRecord {
  int scene_id = 0;
  int class_id = 0;
  Box box;
};

inline std::vector<GtRecord> gt_in_window(const WorldScene& scene,
                                          const Vec2& ego_pos, double extent,
                                          int scene_id) {
  std::vector<GtRecord> out;
  for (const auto& obj : scene.objects) {
    const Vec2 local{obj.box.cx - ego_pos.x, obj.box.cy - ego_pos.y};
    if (std::fabs(local.x) <= extent && std::fabs(local.y) <= extent)
      out.push_back(GtRecord{scene_id, obj.class_id, obj.box});
  }
  return out;
}

}  // namespace coopdet
