#pragma once

#include <functional>

#include "coopdet/eval.hpp"
#include "coopdet/train.hpp"

namespace coopdet {

// --------------------------------------------------------------------------
// Intercepted message corpus
// --------------------------------------------------------------------------

// Messages spied from the victim's communication channel. Features only:
// the threat model gives the attacker no (input, feature) pairs, so no
// observation rasters are ever stored here.
struct MessageCorpus {
  std::vector<Tensor> messages;
  std::uint64_t source_model_hash = 0;

  int size() const { return static_cast<int>(messages.size()); }
};

inline MessageCorpus intercept_messages(const ModelParams& victim,
                                        const Dataset& ds, double fraction,
                                        std::uint64_t seed = 17,
                                        int n_agents = 0) {
  check_arg(ds.size() > 0, "intercept_messages: empty dataset");
  check_arg(fraction > 0.0 && fraction <= 1.0,
            "intercept_messages: fraction must be in (0, 1]");
  if (n_agents <= 0) n_agents = ds.manifest.n_agents;
  const int n_scenes = std::max(
      1, static_cast<int>(std::ceil(fraction * static_cast<double>(ds.size()))));
  std::vector<int> order(static_cast<std::size_t>(ds.size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(mix64(seed, 0x17c09bULL));
  rng.shuffle(order);
  order.resize(static_cast<std::size_t>(n_scenes));
  std::sort(order.begin(), order.end());

  MessageCorpus corpus;
  corpus.source_model_hash = victim.arch_hash();
  std::vector<std::vector<Tensor>> per_scene(order.size());
  parallel_for(static_cast<int>(order.size()), 0, [&](int i) {
    const auto obs = ds.observations(order[static_cast<std::size_t>(i)], n_agents);
    per_scene[static_cast<std::size_t>(i)] = encode_all(victim, obs);
  });
  for (auto& msgs : per_scene)
    for (auto& m : msgs) corpus.messages.push_back(std::move(m));
  return corpus;
}

inline constexpr std::uint32_t kCorpusMagic = 0x4f434443u;  // "CDCO"

inline void save_corpus(const MessageCorpus& c, const std::filesystem::path& p,
                        int c_f, int h_f) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  check(f.good(), "save_corpus: cannot open " + p.string());
  auto put = [&f](const void* d, std::size_t n) {
    f.write(static_cast<const char*>(d), static_cast<std::streamsize>(n));
  };
  const std::uint32_t magic = kCorpusMagic, count = static_cast<std::uint32_t>(c.messages.size());
  const std::uint32_t cf = static_cast<std::uint32_t>(c_f), hf = static_cast<std::uint32_t>(h_f);
  put(&magic, 4);
  put(&c.source_model_hash, 8);
  put(&cf, 4);
  put(&hf, 4);
  put(&count, 4);
  for (const auto& m : c.messages) put(m.v.data(), m.v.size() * sizeof(double));
  check(f.good(), "save_corpus: write failed");
}

inline MessageCorpus load_corpus(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f.good()) throw LoadError("load_corpus: cannot open " + p.string());
  auto get = [&f](void* d, std::size_t n) {
    f.read(static_cast<char*>(d), static_cast<std::streamsize>(n));
    if (!f.good()) throw LoadError("load_corpus: truncated");
  };
  std::uint32_t magic, cf, hf, count;
  MessageCorpus c;
  get(&magic, 4);
  if (magic != kCorpusMagic) throw LoadError("load_corpus: bad magic");
  get(&c.source_model_hash, 8);
  get(&cf, 4);
  get(&hf, 4);
  get(&count, 4);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t({static_cast<int>(cf), static_cast<int>(hf), static_cast<int>(hf)});
    get(t.v.data(), t.v.size() * sizeof(double));
    c.messages.push_back(std::move(t));
  }
  return c;
}

// --------------------------------------------------------------------------
// Discriminator with spectral normalization
// --------------------------------------------------------------------------

struct DiscriminatorParams {
  int c_f = 16;
  int h_f = 16;
  bool use_sn = true;
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  std::vector<Tensor> sn_u;  // power-iteration state; empty for biases

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw ArchitectureError("discriminator: unknown parameter " + name);
  }
};

inline DiscriminatorParams init_discriminator(int c_f, int h_f,
                                              std::uint64_t seed,
                                              bool use_sn = true) {
  DiscriminatorParams d;
  d.c_f = c_f;
  d.h_f = h_f;
  d.use_sn = use_sn;
  Rng rng(mix64(seed, 0xd15cULL));
  auto add = [&](const std::string& name, std::vector<int> dims, bool weight) {
    Tensor t(dims);
    if (weight) {
      double fan_in = 1.0;
      for (std::size_t i = 1; i < dims.size(); ++i) fan_in *= dims[i];
      const double stddev = std::sqrt(2.0 / fan_in);
      for (auto& x : t.v) x = rng.normal(0.0, stddev);
    }
    d.names.push_back(name);
    d.tensors.push_back(std::move(t));
    Tensor u;
    if (weight) {
      u = Tensor({dims[0]});
      for (auto& x : u.v) x = rng.normal(0.0, 1.0);
      double nrm = 0.0;
      for (double x : u.v) nrm += x * x;
      nrm = std::sqrt(nrm);
      for (auto& x : u.v) x /= nrm;
    }
    d.sn_u.push_back(std::move(u));
  };
  add("d.conv1.w", {c_f, c_f, 3, 3}, true);
  add("d.conv1.b", {c_f}, false);
  add("d.conv2.w", {c_f, c_f, 3, 3}, true);
  add("d.conv2.b", {c_f}, false);
  add("d.fc.w", {1, c_f}, true);
  add("d.fc.b", {1}, false);
  return d;
}

namespace detail {

// Largest singular value of the (rows = dims[0]) reshaped weight matrix,
// estimated by power iteration on `u` (updated in place).
inline double sn_sigma(const Tensor& w, Tensor& u, int iters) {
  const int rows = w.dims[0];
  const int cols = w.size() / rows;
  std::vector<double> v(static_cast<std::size_t>(cols), 0.0);
  for (int it = 0; it < iters; ++it) {
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int r = 0; r < rows; ++r)
        acc += w[static_cast<std::size_t>(r) * cols + c] * u[static_cast<std::size_t>(r)];
      v[static_cast<std::size_t>(c)] = acc;
    }
    double nv = 0.0;
    for (double x : v) nv += x * x;
    nv = std::sqrt(nv) + 1e-12;
    for (auto& x : v) x /= nv;
    for (int r = 0; r < rows; ++r) {
      double acc = 0.0;
      const double* wr = w.v.data() + static_cast<std::size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) acc += wr[c] * v[static_cast<std::size_t>(c)];
      u[static_cast<std::size_t>(r)] = acc;
    }
    double nu = 0.0;
    for (double x : u.v) nu += x * x;
    nu = std::sqrt(nu) + 1e-12;
    for (auto& x : u.v) x /= nu;
  }
  // sigma = u^T W v
  double sigma = 0.0;
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    const double* wr = w.v.data() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) acc += wr[c] * v[static_cast<std::size_t>(c)];
    sigma += u[static_cast<std::size_t>(r)] * acc;
  }
  return std::max(sigma, 1e-12);
}

// Per-tensor spectral norms. The training variant advances the stored
// power-iteration state; the inference variant works on a scratch copy.
inline std::vector<double> disc_sigmas_train(DiscriminatorParams& d, int iters) {
  std::vector<double> sig(d.tensors.size(), 1.0);
  if (!d.use_sn) return sig;
  for (std::size_t i = 0; i < d.tensors.size(); ++i)
    if (d.sn_u[i].size() > 0) sig[i] = sn_sigma(d.tensors[i], d.sn_u[i], iters);
  return sig;
}

inline std::vector<double> disc_sigmas_infer(const DiscriminatorParams& d,
                                             int iters) {
  std::vector<double> sig(d.tensors.size(), 1.0);
  if (!d.use_sn) return sig;
  for (std::size_t i = 0; i < d.tensors.size(); ++i)
    if (d.sn_u[i].size() > 0) {
      Tensor u = d.sn_u[i];
      sig[i] = sn_sigma(d.tensors[i], u, iters);
    }
  return sig;
}

}  // namespace detail

// Builds the discriminator logit for one message. `leaves` holds the raw
// parameter nodes (constants during generator steps); spectral normalization
// divides by the detached sigma estimates.
inline Var discriminator_logit_graph(Graph& g, const DiscriminatorParams& d,
                                     const std::vector<Var>& leaves,
                                     const std::vector<double>& sigma, Var msg) {
  auto eff = [&](const char* name) {
    const int i = d.index(name);
    Var w = leaves[static_cast<std::size_t>(i)];
    return sigma[static_cast<std::size_t>(i)] != 1.0
               ? mulc(g, w, 1.0 / sigma[static_cast<std::size_t>(i)])
               : w;
  };
  Var h = leaky_relu(g, conv2d(g, msg, eff("d.conv1.w"),
                               leaves[static_cast<std::size_t>(d.index("d.conv1.b"))], 2, 1));
  h = leaky_relu(g, conv2d(g, h, eff("d.conv2.w"),
                           leaves[static_cast<std::size_t>(d.index("d.conv2.b"))], 2, 1));
  Var pooled = global_mean_ch(g, h);
  Var logit = dense(g, pooled, eff("d.fc.w"),
                    leaves[static_cast<std::size_t>(d.index("d.fc.b"))]);
  return clamp(g, logit, -30.0, 30.0);
}

// Probability that `features` came from the victim's channel. Output lies in
// the open interval (0, 1). Does not mutate power-iteration state.
inline double discriminator_forward(const Tensor& features,
                                    const DiscriminatorParams& d) {
  check_shape(features, {d.c_f, d.h_f, d.h_f}, "discriminator_forward");
  Graph g;
  std::vector<Var> leaves;
  for (const auto& t : d.tensors) leaves.push_back(g.constant(t));
  auto sig = detail::disc_sigmas_infer(d, 2);
  Var logit = discriminator_logit_graph(g, d, leaves, sig, g.constant(features));
  return 1.0 / (1.0 + std::exp(-logit->val[0]));
}

// --------------------------------------------------------------------------
// Discriminator training step (binary cross entropy)
// --------------------------------------------------------------------------

namespace detail {

struct DiscAdam {
  std::vector<Tensor> m, v;
  int t = 0;

  explicit DiscAdam(const DiscriminatorParams& d) {
    for (const auto& tns : d.tensors) {
      m.emplace_back(tns.dims);
      v.emplace_back(tns.dims);
    }
  }

  void step(DiscriminatorParams& d, const std::vector<Tensor>& grads, double lr) {
    ++t;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < d.tensors.size(); ++i)
      for (int j = 0; j < d.tensors[i].size(); ++j) {
        const double gk = grads[i][static_cast<std::size_t>(j)];
        double& mk = m[i][static_cast<std::size_t>(j)];
        double& vk = v[i][static_cast<std::size_t>(j)];
        mk = b1 * mk + (1.0 - b1) * gk;
        vk = b2 * vk + (1.0 - b2) * gk * gk;
        d.tensors[i][static_cast<std::size_t>(j)] -=
            lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps);
      }
  }
};

// One maximization step on log D(real) + log(1 - D(fake)); returns the BCE.
inline double disc_train_step(DiscriminatorParams& d, DiscAdam& adam,
                              const std::vector<const Tensor*>& real,
                              const std::vector<const Tensor*>& fake,
                              double lr) {
  check_arg(!real.empty() && !fake.empty(), "disc step: empty batch");
  auto sig = disc_sigmas_train(d, 1);
  Graph g;
  std::vector<Var> leaves;
  for (const auto& t : d.tensors) leaves.push_back(g.leaf(t, true));
  std::vector<Var> terms;
  for (const Tensor* m : real) {
    Var p = sigmoid(g, discriminator_logit_graph(g, d, leaves, sig, g.constant(*m)));
    terms.push_back(mulc(g, vlog(g, clamp(g, p, 1e-12, 1.0)),
                         -1.0 / static_cast<double>(real.size())));
  }
  for (const Tensor* m : fake) {
    Var p = sigmoid(g, discriminator_logit_graph(g, d, leaves, sig, g.constant(*m)));
    Var om = sub(g, g.constant(Tensor::full({1}, 1.0)), p);
    terms.push_back(mulc(g, vlog(g, clamp(g, om, 1e-12, 1.0)),
                         -1.0 / static_cast<double>(fake.size())));
  }
  Var loss = add_scalars(g, terms);
  const double lval = loss->val[0];
  g.backward(loss);
  std::vector<Tensor> grads;
  for (Var leaf : leaves) {
    if (leaf->has_grad)
      grads.push_back(leaf->grad);
    else
      grads.emplace_back(leaf->val.dims);
  }
  adam.step(d, grads, lr);
  return lval;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Surrogate training
// --------------------------------------------------------------------------

// Vanilla surrogate: same architecture, dataset, and schedule as the victim,
// differing only by seed.
inline TrainOutcome train_surrogate_vanilla(const Dataset& ds, TrainConfig cfg,
                                            const ArchConfig& arch) {
  return train(ds, cfg, arch);
}

struct DATrainConfig {
  double beta = 0.01;
  double lr_model = 0.001;
  double lr_disc = 0.0005;
  int epochs = 3;
  int batch_size = 16;
  std::uint64_t seed = 1234;
  int agents_min = 2;
  int agents_max = 6;
  int max_scenes = 0;
  int threads = 0;

  void validate() const {
    check_arg(lr_model > 0.0 && lr_disc > 0.0, "da: learning rates must be > 0");
    check_arg(lr_model != lr_disc,
              "da: two-time update rule needs distinct learning rates");
  }
};

struct DAOutcome {
  ModelParams surrogate;
  DiscriminatorParams disc;
  TrainStats stats;
  std::vector<double> disc_losses;
  std::vector<std::string> warnings;
};

// Domain-adapted surrogate training: alternating min-max of
//   L_task + beta * [ log D(m_victim) + log(1 - D(F'(x))) ].
// The discriminator maximizes its term (one step per model step, own rate);
// the surrogate minimizes task loss plus beta * log(1 - D(F'(x))).
inline DAOutcome train_surrogate_da(const Dataset& ds, const MessageCorpus& corpus,
                                    const DATrainConfig& da,
                                    const ArchConfig& arch) {
  da.validate();
  check_arg(corpus.size() > 0, "da: empty message corpus");
  check_arg(corpus.source_model_hash == arch.hash(),
            "da: corpus was intercepted from a different architecture");
  DAOutcome out;
  out.surrogate = init_model(arch, mix64(da.seed, 0x5a11ULL));
  out.disc = init_discriminator(arch.c_f, arch.h_f, mix64(da.seed, 0xd00dULL));
  TrainConfig base;
  base.lr = da.lr_model;
  base.batch_size = da.batch_size;
  detail::ParamAdam model_adam(out.surrogate);
  detail::DiscAdam disc_adam(out.disc);

  const int n_scenes =
      da.max_scenes > 0 ? std::min(da.max_scenes, ds.size()) : ds.size();
  std::vector<int> indices(static_cast<std::size_t>(n_scenes));
  for (int i = 0; i < n_scenes; ++i) indices[static_cast<std::size_t>(i)] = i;
  Rng order_rng(mix64(da.seed, 0xda7aULL));
  Rng corpus_rng(mix64(da.seed, 0xc0deULL));
  int collapse_streak = 0;
  bool collapse_reported = false;
  long step = 0;

  struct SceneOut {
    std::vector<Tensor> grads;
    double loss = 0.0;
    std::vector<Tensor> messages;  // detached F'(x), reused as fakes
  };

  for (int epoch = 0; epoch < da.epochs; ++epoch) {
    order_rng.shuffle(indices);
    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (int start = 0; start < n_scenes; start += da.batch_size) {
      const int bsz = std::min(da.batch_size, n_scenes - start);
      // --- model step (discriminator frozen as constants) ---
      auto sig = detail::disc_sigmas_infer(out.disc, 1);
      std::vector<SceneOut> results(static_cast<std::size_t>(bsz));
      parallel_for(bsz, da.threads, [&](int bi) {
        const int rec = indices[static_cast<std::size_t>(start + bi)];
        Rng srng(mix64(da.seed, (static_cast<std::uint64_t>(epoch) << 32) |
                                     static_cast<std::uint64_t>(rec)));
        const int n_agents =
            static_cast<int>(srng.uniform_int(da.agents_min, da.agents_max));
        const auto obs = ds.observations(rec, n_agents);
        std::vector<AgentPose> senders;
        for (const auto& o : obs) senders.push_back(o.agent_pose);
        const CellTargets targets = assign_targets(
            ds.records[static_cast<std::size_t>(rec)].scene,
            senders[0].position, arch);
        Graph g;
        ParamVars pv = bind_params(g, out.surrogate, true);
        std::vector<Var> disc_leaves;
        for (const auto& t : out.disc.tensors) disc_leaves.push_back(g.constant(t));
        std::vector<Var> msgs;
        std::vector<Var> da_terms;
        for (const auto& o : obs) {
          Var m = encode_graph(g, out.surrogate, pv, g.constant(o.grid));
          msgs.push_back(m);
          Var p = sigmoid(g, discriminator_logit_graph(g, out.disc, disc_leaves, sig, m));
          Var om = sub(g, g.constant(Tensor::full({1}, 1.0)), p);
          da_terms.push_back(mulc(g, vlog(g, clamp(g, om, 1e-12, 1.0)),
                                  1.0 / static_cast<double>(obs.size())));
        }
        HeadOut ho = pipeline_from_messages(g, out.surrogate, pv, msgs, senders, 0, {});
        Var loss = add(g, task_loss_graph(g, ho, targets),
                       mulc(g, add_scalars(g, da_terms), da.beta));
        auto& res = results[static_cast<std::size_t>(bi)];
        res.loss = loss->val[0];
        g.backward(loss);
        for (Var v : pv.vars) {
          if (v->has_grad)
            res.grads.push_back(v->grad);
          else
            res.grads.emplace_back(v->val.dims);
        }
        for (Var m : msgs) res.messages.push_back(m->val);
      });

      std::vector<Tensor> grads;
      for (const auto& t : out.surrogate.tensors) grads.emplace_back(t.dims);
      double batch_loss = 0.0;
      std::vector<const Tensor*> fakes;
      for (const auto& r : results) {
        batch_loss += r.loss;
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += r.grads[i];
        for (const auto& m : r.messages) fakes.push_back(&m);
        out.stats.samples_processed++;
      }
      batch_loss /= bsz;
      for (auto& gt : grads) gt *= 1.0 / bsz;
      if (!std::isfinite(batch_loss))
        throw TrainingError("da: model loss diverged at step " + std::to_string(step));
      model_adam.step(out.surrogate, grads, base);
      if (step == 0) out.stats.initial_batch_loss = batch_loss;
      out.stats.final_batch_loss = batch_loss;
      out.stats.batch_losses.push_back(batch_loss);
      epoch_loss += batch_loss;
      ++epoch_batches;

      // --- discriminator step (surrogate frozen, detached fakes) ---
      std::vector<const Tensor*> reals;
      const int n_real = static_cast<int>(fakes.size());
      for (int i = 0; i < n_real; ++i)
        reals.push_back(&corpus.messages[static_cast<std::size_t>(
            corpus_rng.uniform_int(0, corpus.size() - 1))]);
      const double dloss =
          detail::disc_train_step(out.disc, disc_adam, reals, fakes, da.lr_disc);
      out.disc_losses.push_back(dloss);
      if (dloss < 1e-4) {
        if (++collapse_streak >= 100 && !collapse_reported) {
          out.warnings.push_back("discriminator collapse at step " +
                                 std::to_string(step) + " (loss < 1e-4 for 100 steps)");
          collapse_reported = true;
        }
      } else {
        collapse_streak = 0;
      }
      ++step;
    }
    out.stats.epoch_mean_loss.push_back(epoch_loss / epoch_batches);
  }
  return out;
}

// --------------------------------------------------------------------------
// Post-hoc separability probe
// --------------------------------------------------------------------------

// Trains a fresh unconstrained discriminator to tell `a` (label 1) from `b`
// (label 0) on a 70/30 split and reports held-out accuracy. Used to
// operationalize "same/different feature distribution" claims.
inline double probe_separability(const std::vector<Tensor>& a,
                                 const std::vector<Tensor>& b,
                                 std::uint64_t seed, int steps = 400) {
  check_arg(a.size() >= 10 && b.size() >= 10, "probe: need at least 10 samples each");
  const int c_f = a[0].dims[0], h_f = a[0].dims[1];
  DiscriminatorParams probe = init_discriminator(c_f, h_f, mix64(seed, 0x9e0bULL),
                                                 /*use_sn=*/false);
  detail::DiscAdam adam(probe);
  Rng rng(mix64(seed, 0x90cbaULL));
  auto split = [&](const std::vector<Tensor>& xs) {
    std::vector<int> idx(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx);
    const int n_train = static_cast<int>(0.7 * static_cast<double>(xs.size()));
    return std::pair<std::vector<int>, std::vector<int>>(
        {idx.begin(), idx.begin() + n_train}, {idx.begin() + n_train, idx.end()});
  };
  auto [a_train, a_test] = split(a);
  auto [b_train, b_test] = split(b);
  const int batch = 16;
  for (int it = 0; it < steps; ++it) {
    std::vector<const Tensor*> reals, fakes;
    for (int i = 0; i < batch; ++i) {
      reals.push_back(&a[static_cast<std::size_t>(a_train[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(a_train.size()) - 1))])]);
      fakes.push_back(&b[static_cast<std::size_t>(b_train[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(b_train.size()) - 1))])]);
    }
    detail::disc_train_step(probe, adam, reals, fakes, 1e-3);
  }
  int correct = 0, total = 0;
  for (int i : a_test) {
    correct += discriminator_forward(a[static_cast<std::size_t>(i)], probe) > 0.5;
    ++total;
  }
  for (int i : b_test) {
    correct += discriminator_forward(b[static_cast<std::size_t>(i)], probe) <= 0.5;
    ++total;
  }
  return static_cast<double>(correct) / total;
}

// --------------------------------------------------------------------------
// Feature alignment score (Frechet-style)
// --------------------------------------------------------------------------

namespace detail {

// Cyclic Jacobi eigensolver for small symmetric matrices.
inline void sym_eig(std::vector<double>& a, int n, std::vector<double>& evals,
                    std::vector<double>& evecs) {
  evecs.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) evecs[static_cast<std::size_t>(i) * n + i] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q)
        off += a[static_cast<std::size_t>(p) * n + q] * a[static_cast<std::size_t>(p) * n + q];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[static_cast<std::size_t>(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double app = a[static_cast<std::size_t>(p) * n + p];
        const double aqq = a[static_cast<std::size_t>(q) * n + q];
        const double theta = 0.5 * (aqq - app) / apq;
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < n; ++i) {
          const double aip = a[static_cast<std::size_t>(i) * n + p];
          const double aiq = a[static_cast<std::size_t>(i) * n + q];
          a[static_cast<std::size_t>(i) * n + p] = c * aip - s * aiq;
          a[static_cast<std::size_t>(i) * n + q] = s * aip + c * aiq;
        }
        for (int i = 0; i < n; ++i) {
          const double api = a[static_cast<std::size_t>(p) * n + i];
          const double aqi = a[static_cast<std::size_t>(q) * n + i];
          a[static_cast<std::size_t>(p) * n + i] = c * api - s * aqi;
          a[static_cast<std::size_t>(q) * n + i] = s * api + c * aqi;
        }
        for (int i = 0; i < n; ++i) {
          const double vip = evecs[static_cast<std::size_t>(i) * n + p];
          const double viq = evecs[static_cast<std::size_t>(i) * n + q];
          evecs[static_cast<std::size_t>(i) * n + p] = c * vip - s * viq;
          evecs[static_cast<std::size_t>(i) * n + q] = s * vip + c * viq;
        }
      }
  }
  evals.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) evals[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i) * n + i];
}

// Symmetric PSD square root via eigen decomposition.
inline std::vector<double> sym_sqrt(std::vector<double> a, int n) {
  std::vector<double> evals, v;
  sym_eig(a, n, evals, v);
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k)
        acc += v[static_cast<std::size_t>(i) * n + k] *
               std::sqrt(std::max(0.0, evals[static_cast<std::size_t>(k)])) *
               v[static_cast<std::size_t>(j) * n + k];
      out[static_cast<std::size_t>(i) * n + j] = acc;
    }
  return out;
}

inline std::vector<double> mat_mul(const std::vector<double>& a,
                                   const std::vector<double>& b, int n) {
  std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      const double aik = a[static_cast<std::size_t>(i) * n + k];
      if (aik == 0.0) continue;
      for (int j = 0; j < n; ++j)
        out[static_cast<std::size_t>(i) * n + j] += aik * b[static_cast<std::size_t>(k) * n + j];
    }
  return out;
}

struct Gaussian {
  std::vector<double> mean;
  std::vector<double> cov;  // n x n
};

inline Gaussian fit_channel_gaussian(const std::vector<Tensor>& msgs) {
  const int n = msgs[0].dims[0];
  const int plane = msgs[0].dims[1] * msgs[0].dims[2];
  std::vector<std::vector<double>> feats;
  feats.reserve(msgs.size());
  for (const auto& m : msgs) {
    std::vector<double> f(static_cast<std::size_t>(n), 0.0);
    for (int c = 0; c < n; ++c) {
      double acc = 0.0;
      for (int p = 0; p < plane; ++p) acc += m.v[static_cast<std::size_t>(c) * plane + p];
      f[static_cast<std::size_t>(c)] = acc / plane;
    }
    feats.push_back(std::move(f));
  }
  Gaussian gsn;
  gsn.mean.assign(static_cast<std::size_t>(n), 0.0);
  for (const auto& f : feats)
    for (int c = 0; c < n; ++c) gsn.mean[static_cast<std::size_t>(c)] += f[static_cast<std::size_t>(c)];
  for (auto& x : gsn.mean) x /= static_cast<double>(feats.size());
  gsn.cov.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (const auto& f : feats)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        gsn.cov[static_cast<std::size_t>(i) * n + j] +=
            (f[static_cast<std::size_t>(i)] - gsn.mean[static_cast<std::size_t>(i)]) *
            (f[static_cast<std::size_t>(j)] - gsn.mean[static_cast<std::size_t>(j)]);
  for (auto& x : gsn.cov) x /= static_cast<double>(feats.size() - 1);
  for (int i = 0; i < n; ++i) gsn.cov[static_cast<std::size_t>(i) * n + i] += 1e-6;
  return gsn;
}

}  // namespace detail

// Frechet-style distance between the per-channel statistics of two message
// sets: |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2). Zero for
// identical sample sets; symmetric; order-invariant up to float roundoff.
inline double feature_alignment_score(const std::vector<Tensor>& a,
                                      const std::vector<Tensor>& b) {
  check_arg(a.size() >= 100 && b.size() >= 100,
            "feature_alignment_score: need at least 100 samples each");
  check_arg(a[0].dims == b[0].dims, "feature_alignment_score: shape mismatch");
  const int n = a[0].dims[0];
  const auto ga = detail::fit_channel_gaussian(a);
  const auto gb = detail::fit_channel_gaussian(b);
  double d2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = ga.mean[static_cast<std::size_t>(i)] - gb.mean[static_cast<std::size_t>(i)];
    d2 += d * d;
  }
  const auto s1h = detail::sym_sqrt(ga.cov, n);
  auto inner = detail::mat_mul(detail::mat_mul(s1h, gb.cov, n), s1h, n);
  // Symmetrize against roundoff before the eigensolve.
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double m = 0.5 * (inner[static_cast<std::size_t>(i) * n + j] +
                              inner[static_cast<std::size_t>(j) * n + i]);
      inner[static_cast<std::size_t>(i) * n + j] = m;
      inner[static_cast<std::size_t>(j) * n + i] = m;
    }
  std::vector<double> evals, evecs;
  detail::sym_eig(inner, n, evals, evecs);
  double tr_sqrt = 0.0;
  for (double l : evals) tr_sqrt += std::sqrt(std::max(0.0, l));
  double trace = 0.0;
  for (int i = 0; i < n; ++i)
    trace += ga.cov[static_cast<std::size_t>(i) * n + i] +
             gb.cov[static_cast<std::size_t>(i) * n + i];
  return std::max(0.0, d2 + trace - 2.0 * tr_sqrt);
}

// --------------------------------------------------------------------------
// Transfer attack
// --------------------------------------------------------------------------

// The victim appears to this module only as an opaque evaluator; surrogate
// training never touches victim parameters.
using VictimEvaluator = std::function<EvalOutput(const PerturbSpec&)>;

inline VictimEvaluator make_victim_evaluator(const ModelParams& victim,
                                             const Dataset& ds,
                                             const EvalOptions& opt) {
  return [&victim, &ds, opt](const PerturbSpec& spec) {
    return evaluate_model(victim, ds, opt, spec);
  };
}

struct TransferOutcome {
  double surrogate_clean_ap = 0.0;
  double surrogate_attacked_ap = 0.0;  // deltas applied to the surrogate itself
  double victim_clean_ap = 0.0;
  double victim_attacked_ap = 0.0;  // deltas transferred to the victim
};

// Generates white-box perturbations against the surrogate and applies them
// unchanged to the victim's messages.
inline TransferOutcome transfer_attack(const ModelParams& surrogate,
                                       const VictimEvaluator& victim_eval,
                                       const Dataset& ds, const EvalOptions& opt,
                                       const AttackConfig& atk,
                                       const std::vector<int>& attackers = {1}) {
  TransferOutcome out;
  PerturbSpec clean;
  out.victim_clean_ap = victim_eval(clean).ap;
  out.surrogate_clean_ap = evaluate_model(surrogate, ds, opt, clean).ap;
  PerturbSpec self;
  self.kind = PerturbKind::kWhiteBox;
  self.attackers = attackers;
  self.atk = atk;
  out.surrogate_attacked_ap = evaluate_model(surrogate, ds, opt, self).ap;
  PerturbSpec xfer;
  xfer.kind = PerturbKind::kTransfer;
  xfer.attackers = attackers;
  xfer.atk = atk;
  xfer.surrogate = &surrogate;
  out.victim_attacked_ap = victim_eval(xfer).ap;
  return out;
}

}  // namespace coopdet
