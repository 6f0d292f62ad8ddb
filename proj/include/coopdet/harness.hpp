#pragma once

#include <chrono>
#include <fstream>
#include <set>

#include "coopdet/defense.hpp"
#include "coopdet/transfer.hpp"

#ifndef COOPDET_GIT_HASH
#define COOPDET_GIT_HASH "unknown"
#endif

namespace coopdet {

inline std::string version_string() {
  return std::string(kVersion) + "+" + COOPDET_GIT_HASH;
}

// --------------------------------------------------------------------------
// Declarative experiment configuration
// --------------------------------------------------------------------------

struct ExperimentConfig {
  std::string recipe;  // fig5 | table1 | ... | table7
  std::string dataset;
  std::string sequences;  // table6 only
  std::map<std::string, std::string> models;  // role -> checkpoint path
  std::vector<int> agent_counts = {2, 3, 4, 5, 6};
  std::vector<int> attacker_counts = {1, 2, 3};
  AttackConfig attack;
  int eval_scenes = 300;
  double nms_score = 0.05;
  int threads = 0;
  std::uint64_t seed = 7;
  std::string out_dir;
};

inline const std::set<std::string>& known_recipes() {
  static const std::set<std::string> r = {"fig5",   "table1", "table2", "table3",
                                          "table4", "table5", "table6", "table7"};
  return r;
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    cfg.recipe = j.at("recipe").get<std::string>();
    if (!known_recipes().count(cfg.recipe))
      throw ConfigError("unknown recipe: " + cfg.recipe);
    cfg.dataset = j.at("dataset").get<std::string>();
    cfg.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("sequences")) cfg.sequences = j.at("sequences").get<std::string>();
    if (j.contains("models"))
      for (const auto& [k, v] : j.at("models").items())
        cfg.models[k] = v.get<std::string>();
    if (j.contains("agent_counts"))
      cfg.agent_counts = j.at("agent_counts").get<std::vector<int>>();
    if (j.contains("attacker_counts"))
      cfg.attacker_counts = j.at("attacker_counts").get<std::vector<int>>();
    if (j.contains("eval_scenes")) cfg.eval_scenes = j.at("eval_scenes").get<int>();
    if (j.contains("nms_score")) cfg.nms_score = j.at("nms_score").get<double>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("attack")) {
      const auto& a = j.at("attack");
      if (a.contains("eps")) cfg.attack.eps = a.at("eps").get<double>();
      if (a.contains("steps")) cfg.attack.steps = a.at("steps").get<int>();
      if (a.contains("alpha")) cfg.attack.alpha = a.at("alpha").get<double>();
      if (a.contains("lambda")) cfg.attack.lambda = a.at("lambda").get<double>();
      if (a.contains("tau_pos")) cfg.attack.tau_pos = a.at("tau_pos").get<double>();
      if (a.contains("tau_neg")) cfg.attack.tau_neg = a.at("tau_neg").get<double>();
      if (a.contains("gamma")) cfg.attack.gamma = a.at("gamma").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return cfg;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["recipe"] = cfg.recipe;
  j["dataset"] = cfg.dataset;
  if (!cfg.sequences.empty()) j["sequences"] = cfg.sequences;
  j["models"] = cfg.models;
  j["agent_counts"] = cfg.agent_counts;
  j["attacker_counts"] = cfg.attacker_counts;
  j["eval_scenes"] = cfg.eval_scenes;
  j["nms_score"] = cfg.nms_score;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  j["attack"] = {{"eps", cfg.attack.eps},       {"steps", cfg.attack.steps},
                 {"alpha", cfg.attack.alpha},   {"lambda", cfg.attack.lambda},
                 {"tau_pos", cfg.attack.tau_pos}, {"tau_neg", cfg.attack.tau_neg},
                 {"gamma", cfg.attack.gamma}};
  return j;
}

// --------------------------------------------------------------------------
// Result records
// --------------------------------------------------------------------------

struct ResultRecord {
  std::string recipe;
  nlohmann::json config;
  std::map<std::string, double> ap;  // setting name -> AP in [0, 1]
  std::map<std::string, std::vector<std::array<double, 3>>> curves;  // p, r, thr
  double runtime_sec = 0.0;
  std::string version = version_string();
};

inline nlohmann::json record_to_json(const ResultRecord& r) {
  nlohmann::json j;
  j["recipe"] = r.recipe;
  j["config"] = r.config;
  j["ap"] = r.ap;
  j["curves"] = r.curves;
  j["runtime_sec"] = r.runtime_sec;
  j["version"] = r.version;
  return j;
}

inline ResultRecord record_from_json(const nlohmann::json& j) {
  ResultRecord r;
  try {
    r.recipe = j.at("recipe").get<std::string>();
    r.config = j.at("config");
    r.ap = j.at("ap").get<std::map<std::string, double>>();
    if (j.contains("curves"))
      r.curves = j.at("curves")
                     .get<std::map<std::string, std::vector<std::array<double, 3>>>>();
    r.runtime_sec = j.at("runtime_sec").get<double>();
    r.version = j.at("version").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("result record: ") + e.what());
  }
  return r;
}

inline void write_record(const ResultRecord& r, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), "write_record: cannot open " + path.string());
  f << record_to_json(r).dump(2) << "\n";
}

inline ResultRecord read_record(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f.good()) throw LoadError("read_record: cannot open " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("read_record: ") + e.what());
  }
  return record_from_json(j);
}

namespace detail {

inline std::vector<std::array<double, 3>> decimate_curve(const PRCurve& c,
                                                         std::size_t max_pts = 512) {
  std::vector<std::array<double, 3>> out;
  const std::size_t n = c.points.size();
  const std::size_t stride = n > max_pts ? (n + max_pts - 1) / max_pts : 1;
  for (std::size_t i = 0; i < n; i += stride)
    out.push_back({c.points[i].precision, c.points[i].recall, c.points[i].threshold});
  if (n > 0 && (n - 1) % stride != 0)
    out.push_back({c.points[n - 1].precision, c.points[n - 1].recall,
                   c.points[n - 1].threshold});
  return out;
}

}  // namespace detail

// --------------------------------------------------------------------------
// Recipes
// --------------------------------------------------------------------------

namespace detail {

struct RecipeContext {
  const ExperimentConfig& cfg;
  Dataset val;
  Dataset seqs;  // table6 only
  std::map<std::string, ModelParams> models;

  const ModelParams& model(const std::string& role) const {
    auto it = models.find(role);
    if (it == models.end())
      throw ConfigError("recipe " + cfg.recipe + " is missing model '" + role + "'");
    return it->second;
  }

  EvalOptions opts(int n_agents) const {
    EvalOptions o;
    o.n_agents = n_agents;
    o.max_scenes = cfg.eval_scenes;
    o.nms_score = cfg.nms_score;
    o.threads = cfg.threads;
    o.seed = cfg.seed;
    return o;
  }
};

inline PerturbSpec whitebox_spec(const AttackConfig& atk, int n_attackers = 1,
                                 bool coop = true) {
  PerturbSpec s;
  s.kind = PerturbKind::kWhiteBox;
  s.atk = atk;
  s.cooperative = coop;
  s.attackers.clear();
  for (int a = 1; a <= n_attackers; ++a) s.attackers.push_back(a);
  return s;
}

inline void run_fig5(RecipeContext& ctx, ResultRecord& rec) {
  const auto& victim = ctx.model("victim");
  const auto& surrogate = ctx.model("surrogate");
  for (int n : ctx.cfg.agent_counts) {
    const auto opt = ctx.opts(n);
    const auto tag = "a" + std::to_string(n);
    auto clean = evaluate_model(victim, ctx.val, opt);
    rec.ap["clean/" + tag] = clean.ap;
    rec.curves["clean/" + tag] =
        decimate_curve(pr_curve(clean.detections, clean.ground_truth));
    PerturbSpec uni;
    uni.kind = PerturbKind::kUniform;
    uni.atk = ctx.cfg.attack;
    rec.ap["uniform/" + tag] = evaluate_model(victim, ctx.val, opt, uni).ap;
    auto wb = evaluate_model(victim, ctx.val, opt, whitebox_spec(ctx.cfg.attack));
    rec.ap["whitebox/" + tag] = wb.ap;
    rec.curves["whitebox/" + tag] =
        decimate_curve(pr_curve(wb.detections, wb.ground_truth));
    PerturbSpec xfer;
    xfer.kind = PerturbKind::kTransfer;
    xfer.atk = ctx.cfg.attack;
    xfer.surrogate = &surrogate;
    rec.ap["transfer/" + tag] = evaluate_model(victim, ctx.val, opt, xfer).ap;
  }
}

inline void run_table1(RecipeContext& ctx, ResultRecord& rec) {
  const int n = 4;
  const auto opt = ctx.opts(n);
  for (const auto& role : {std::string("original"), std::string("adv_trained")}) {
    const auto& m = ctx.model(role);
    rec.ap[role + "/clean"] = evaluate_model(m, ctx.val, opt).ap;
    rec.ap[role + "/perturbed"] =
        evaluate_model(m, ctx.val, opt, whitebox_spec(ctx.cfg.attack)).ap;
  }
}

inline void run_table2(RecipeContext& ctx, ResultRecord& rec) {
  const int n = 4;
  const auto opt = ctx.opts(n);
  for (const auto& role : {std::string("mean-pool"), std::string("gnn-mean"),
                           std::string("gnn-median"), std::string("gnn-softmedian")}) {
    const auto& m = ctx.model(role);
    rec.ap[role + "/clean"] = evaluate_model(m, ctx.val, opt).ap;
    rec.ap[role + "/perturbed"] =
        evaluate_model(m, ctx.val, opt, whitebox_spec(ctx.cfg.attack)).ap;
  }
}

inline void run_table3(RecipeContext& ctx, ResultRecord& rec) {
  const auto& victim = ctx.model("victim");
  const int n = 4;
  const auto opt = ctx.opts(n);
  rec.ap["clean"] = evaluate_model(victim, ctx.val, opt).ap;
  for (int c : ctx.cfg.attacker_counts) {
    check_arg(c <= n - 1, "table3: attacker count too large for 4 agents");
    rec.ap["coop/" + std::to_string(c)] =
        evaluate_model(victim, ctx.val, opt, whitebox_spec(ctx.cfg.attack, c, true)).ap;
    rec.ap["noncoop/" + std::to_string(c)] =
        evaluate_model(victim, ctx.val, opt, whitebox_spec(ctx.cfg.attack, c, false)).ap;
  }
}

inline void run_table4(RecipeContext& ctx, ResultRecord& rec) {
  const int n = 4;
  std::vector<const ModelParams*> models;
  std::vector<std::string> names;
  for (int t = 0; t <= 3; ++t) {
    names.push_back("train" + std::to_string(t));
    models.push_back(&ctx.model(names.back()));
  }
  RobustnessTable table = evaluate_robustness(models, names, {0, 1, 2, 3},
                                              ctx.val, ctx.opts(n), ctx.cfg.attack);
  for (std::size_t m = 0; m < names.size(); ++m)
    for (std::size_t c = 0; c < table.eval_counts.size(); ++c)
      rec.ap[names[m] + "/eval" + std::to_string(table.eval_counts[c])] =
          table.ap[m][c];
}

inline void run_table5(RecipeContext& ctx, ResultRecord& rec) {
  const auto& victim = ctx.model("victim");
  const auto& vanilla = ctx.model("surrogate_vanilla");
  const auto& da = ctx.model("surrogate_da");
  const int n = 2;
  const auto opt = ctx.opts(n);
  auto victim_eval = make_victim_evaluator(victim, ctx.val, opt);
  const auto van = transfer_attack(vanilla, victim_eval, ctx.val, opt, ctx.cfg.attack);
  const auto dat = transfer_attack(da, victim_eval, ctx.val, opt, ctx.cfg.attack);
  rec.ap["victim/clean"] = van.victim_clean_ap;
  rec.ap["victim/transfer_vanilla"] = van.victim_attacked_ap;
  rec.ap["victim/transfer_da"] = dat.victim_attacked_ap;
  rec.ap["surrogate_vanilla/clean"] = van.surrogate_clean_ap;
  rec.ap["surrogate_vanilla/self_attack"] = van.surrogate_attacked_ap;
  rec.ap["surrogate_da/clean"] = dat.surrogate_clean_ap;
  rec.ap["surrogate_da/self_attack"] = dat.surrogate_attacked_ap;
  // Feature-space diagnostics: probe separability and alignment score.
  const double frac =
      std::min(1.0, 300.0 / std::max(1, ctx.val.size()));
  MessageCorpus mv = intercept_messages(victim, ctx.val, frac, ctx.cfg.seed, 2);
  MessageCorpus ms_v = intercept_messages(vanilla, ctx.val, frac, ctx.cfg.seed, 2);
  MessageCorpus ms_d = intercept_messages(da, ctx.val, frac, ctx.cfg.seed, 2);
  rec.ap["probe/vanilla"] =
      probe_separability(mv.messages, ms_v.messages, ctx.cfg.seed);
  rec.ap["probe/da"] = probe_separability(mv.messages, ms_d.messages, ctx.cfg.seed);
  rec.ap["alignment/vanilla"] = feature_alignment_score(mv.messages, ms_v.messages);
  rec.ap["alignment/da"] = feature_alignment_score(mv.messages, ms_d.messages);
}

inline void run_table6(RecipeContext& ctx, ResultRecord& rec) {
  const auto& victim = ctx.model("victim");
  check_arg(ctx.seqs.size() > 0, "table6: sequence dataset required");
  const auto opt = ctx.opts(2);
  AttackConfig atk = ctx.cfg.attack;
  atk.steps = 1;
  rec.ap["clean"] = evaluate_online(victim, ctx.seqs, opt, OnlineMode::kClean, atk).ap;
  rec.ap["online"] =
      evaluate_online(victim, ctx.seqs, opt, OnlineMode::kOnline, atk).ap;
  rec.ap["no_warp"] =
      evaluate_online(victim, ctx.seqs, opt, OnlineMode::kOnlineNoWarp, atk).ap;
  rec.ap["independent"] =
      evaluate_online(victim, ctx.seqs, opt, OnlineMode::kIndependent, atk).ap;
}

inline void run_table7(RecipeContext& ctx, ResultRecord& rec) {
  const auto& victim = ctx.model("victim");
  for (int n : ctx.cfg.agent_counts) {
    const auto opt = ctx.opts(n);
    const auto tag = "a" + std::to_string(n);
    rec.ap["adv_loss/" + tag] =
        evaluate_model(victim, ctx.val, opt, whitebox_spec(ctx.cfg.attack)).ap;
    PerturbSpec neg;
    neg.kind = PerturbKind::kNegTask;
    neg.atk = ctx.cfg.attack;
    rec.ap["neg_task/" + tag] = evaluate_model(victim, ctx.val, opt, neg).ap;
  }
}

}  // namespace detail

// Executes a declarative experiment end to end and persists the result
// record plus a human-readable CSV. Pure function of (config, seed, artifact
// files); reruns produce identical records modulo the runtime field.
inline ResultRecord run_experiment(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  detail::RecipeContext ctx{cfg, {}, {}, {}};
  if (!std::filesystem::exists(cfg.dataset))
    throw ConfigError("run_experiment: dataset not found: " + cfg.dataset);
  ctx.val = read_dataset(cfg.dataset);
  if (cfg.recipe == "table6") {
    if (cfg.sequences.empty() || !std::filesystem::exists(cfg.sequences))
      throw ConfigError("run_experiment: table6 needs a sequence dataset");
    ctx.seqs = read_dataset(cfg.sequences);
  }
  for (const auto& [role, path] : cfg.models) {
    if (!std::filesystem::exists(path))
      throw ConfigError("run_experiment: model '" + role + "' not found: " + path);
    ctx.models.emplace(role, load_checkpoint(path));
  }

  ResultRecord rec;
  rec.recipe = cfg.recipe;
  rec.config = experiment_config_to_json(cfg);
  if (cfg.recipe == "fig5") detail::run_fig5(ctx, rec);
  else if (cfg.recipe == "table1") detail::run_table1(ctx, rec);
  else if (cfg.recipe == "table2") detail::run_table2(ctx, rec);
  else if (cfg.recipe == "table3") detail::run_table3(ctx, rec);
  else if (cfg.recipe == "table4") detail::run_table4(ctx, rec);
  else if (cfg.recipe == "table5") detail::run_table5(ctx, rec);
  else if (cfg.recipe == "table6") detail::run_table6(ctx, rec);
  else if (cfg.recipe == "table7") detail::run_table7(ctx, rec);
  else throw ConfigError("run_experiment: unknown recipe " + cfg.recipe);

  rec.runtime_sec = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - t0).count();
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    write_record(rec, std::filesystem::path(cfg.out_dir) / (cfg.recipe + ".json"));
  }
  return rec;
}

// --------------------------------------------------------------------------
// Reporting: CSV tables + SVG plot
// --------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline double get_ap(const ResultRecord& r, const std::string& key) {
  auto it = r.ap.find(key);
  if (it == r.ap.end())
    throw LoadError("report: record missing setting '" + key + "'");
  return it->second;
}

inline void write_csv(const std::filesystem::path& path,
                      const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), "report: cannot open " + path.string());
  for (std::size_t i = 0; i < header.size(); ++i)
    f << (i ? "," : "") << header[i];
  f << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
    f << "\n";
  }
}

inline std::vector<int> record_agent_counts(const ResultRecord& r) {
  return r.config.at("agent_counts").get<std::vector<int>>();
}

// Minimal grouped-bar chart (static SVG).
inline void write_fig5_svg(const ResultRecord& r,
                           const std::filesystem::path& path) {
  const std::vector<int> agents = record_agent_counts(r);
  const std::vector<std::pair<std::string, std::string>> series = {
      {"clean", "#4878cf"}, {"uniform", "#6acc65"},
      {"transfer", "#d65f5f"}, {"whitebox", "#956cb4"}};
  const double W = 760, H = 420, ml = 60, mb = 60, mt = 40, mr = 20;
  const double plot_w = W - ml - mr, plot_h = H - mt - mb;
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), "report: cannot open " + path.string());
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
    << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" "
       "font-family=\"sans-serif\" font-size=\"16\">AP at 0.7 by agent count"
       "</text>\n";
  // Axes and gridlines.
  for (int tick = 0; tick <= 5; ++tick) {
    const double v = tick / 5.0;
    const double y = mt + plot_h * (1.0 - v);
    f << "<line x1=\"" << ml << "\" y1=\"" << y << "\" x2=\"" << W - mr
      << "\" y2=\"" << y << "\" stroke=\"#dddddd\"/>\n";
    f << "<text x=\"" << ml - 8 << "\" y=\"" << y + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << tick * 20 << "</text>\n";
  }
  const double group_w = plot_w / agents.size();
  const double bar_w = group_w / (series.size() + 1.2);
  for (std::size_t gi = 0; gi < agents.size(); ++gi) {
    const double gx = ml + gi * group_w;
    for (std::size_t si = 0; si < series.size(); ++si) {
      const double ap = get_ap(r, series[si].first + "/a" + std::to_string(agents[gi]));
      const double bh = plot_h * std::clamp(ap, 0.0, 1.0);
      f << "<rect x=\"" << gx + bar_w * (si + 0.6) << "\" y=\"" << mt + plot_h - bh
        << "\" width=\"" << bar_w * 0.9 << "\" height=\"" << bh << "\" fill=\""
        << series[si].second << "\"/>\n";
    }
    f << "<text x=\"" << gx + group_w / 2 << "\" y=\"" << H - mb + 18
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
      << agents[gi] << " agents</text>\n";
  }
  for (std::size_t si = 0; si < series.size(); ++si) {
    const double lx = ml + si * 150.0;
    f << "<rect x=\"" << lx << "\" y=\"" << H - 22 << "\" width=\"12\" height=\"12\" fill=\""
      << series[si].second << "\"/>\n";
    f << "<text x=\"" << lx + 16 << "\" y=\"" << H - 12
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << series[si].first
      << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace detail

// Emits one CSV per paper-table analog and the fig5 grouped-bar SVG. Values
// come straight from the records; nothing is recomputed.
inline void report(const std::vector<ResultRecord>& records,
                   const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.recipe).second)
      throw ConfigError("report: multiple records for recipe '" + r.recipe +
                        "' cannot merge into one table");
  }
  using detail::fmt;
  using detail::get_ap;
  for (const auto& r : records) {
    if (r.recipe == "fig5") {
      std::vector<std::vector<std::string>> rows;
      for (int n : detail::record_agent_counts(r)) {
        const std::string tag = "a" + std::to_string(n);
        rows.push_back({std::to_string(n), fmt(get_ap(r, "clean/" + tag)),
                        fmt(get_ap(r, "uniform/" + tag)),
                        fmt(get_ap(r, "transfer/" + tag)),
                        fmt(get_ap(r, "whitebox/" + tag))});
      }
      detail::write_csv(out_dir / "fig5.csv",
                        {"agents", "clean", "uniform", "transfer", "whitebox"}, rows);
      detail::write_fig5_svg(r, out_dir / "fig5.svg");
    } else if (r.recipe == "table1") {
      std::vector<std::vector<std::string>> rows;
      for (const auto& m : {std::string("original"), std::string("adv_trained")})
        rows.push_back({m, fmt(get_ap(r, m + "/clean")), fmt(get_ap(r, m + "/perturbed"))});
      detail::write_csv(out_dir / "table1.csv", {"model", "clean", "perturbed"}, rows);
    } else if (r.recipe == "table2") {
      std::vector<std::vector<std::string>> rows;
      for (const auto& m : {std::string("mean-pool"), std::string("gnn-mean"),
                            std::string("gnn-median"), std::string("gnn-softmedian")})
        rows.push_back({m, fmt(get_ap(r, m + "/clean")), fmt(get_ap(r, m + "/perturbed"))});
      detail::write_csv(out_dir / "table2.csv", {"fusion", "clean", "perturbed"}, rows);
    } else if (r.recipe == "table3") {
      std::vector<std::vector<std::string>> rows;
      for (const auto& [key, val] : r.ap) {
        if (key.rfind("coop/", 0) == 0) {
          const std::string c = key.substr(5);
          rows.push_back({c, fmt(val), fmt(get_ap(r, "noncoop/" + c))});
        }
      }
      detail::write_csv(out_dir / "table3.csv",
                        {"attackers", "cooperative", "non_cooperative"}, rows);
    } else if (r.recipe == "table4") {
      std::vector<std::vector<std::string>> rows;
      for (int t = 0; t <= 3; ++t) {
        std::vector<std::string> row = {"train" + std::to_string(t)};
        for (int e = 0; e <= 3; ++e)
          row.push_back(fmt(get_ap(r, "train" + std::to_string(t) + "/eval" +
                                       std::to_string(e))));
        rows.push_back(std::move(row));
      }
      detail::write_csv(out_dir / "table4.csv",
                        {"model", "eval0", "eval1", "eval2", "eval3"}, rows);
    } else if (r.recipe == "table5") {
      std::vector<std::vector<std::string>> rows;
      for (const auto& [key, val] : r.ap) rows.push_back({key, fmt(val)});
      detail::write_csv(out_dir / "table5.csv", {"metric", "value"}, rows);
    } else if (r.recipe == "table6") {
      std::vector<std::vector<std::string>> rows;
      for (const auto& m : {std::string("clean"), std::string("online"),
                            std::string("no_warp"), std::string("independent")})
        rows.push_back({m, fmt(get_ap(r, m))});
      detail::write_csv(out_dir / "table6.csv", {"method", "ap"}, rows);
    } else if (r.recipe == "table7") {
      std::vector<std::vector<std::string>> rows;
      for (int n : detail::record_agent_counts(r)) {
        const std::string tag = "a" + std::to_string(n);
        rows.push_back({std::to_string(n), fmt(get_ap(r, "adv_loss/" + tag)),
                        fmt(get_ap(r, "neg_task/" + tag))});
      }
      detail::write_csv(out_dir / "table7.csv", {"agents", "adv_loss", "neg_task"}, rows);
    }
  }
}

}  // namespace coopdet
