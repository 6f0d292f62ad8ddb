// Command-line front end: dataset generation, training, attacks, transfer,
// robustness evaluation, experiment recipes and reporting.

#include <CLI11.hpp>
#include <iostream>

#include "coopdet/harness.hpp"

namespace {

using namespace coopdet;

nlohmann::json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config json: ") + e.what());
  }
  return j;
}

std::pair<TrainConfig, ArchConfig> parse_train_config(const nlohmann::json& j) {
  TrainConfig cfg;
  ArchConfig arch;
  if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("agents_min")) cfg.agents_min = j.at("agents_min").get<int>();
  if (j.contains("agents_max")) cfg.agents_max = j.at("agents_max").get<int>();
  if (j.contains("max_scenes")) cfg.max_scenes = j.at("max_scenes").get<int>();
  if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
  if (j.contains("fusion")) arch.fusion = fusion_from_name(j.at("fusion").get<std::string>());
  if (j.contains("gnn_rounds")) arch.gnn_rounds = j.at("gnn_rounds").get<int>();
  return {cfg, arch};
}

void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check(f.good(), "cannot open output: " + path);
  f << j.dump(2) << "\n";
}

int cmd_gen_data(const std::string& split, int scenes, int agents,
                 std::uint64_t seed, const std::string& out, bool sequences,
                 int frames) {
  DatasetSpec spec;
  spec.split = split;
  spec.count = scenes;
  spec.n_agents = agents;
  spec.seed = seed;
  spec.sequences = sequences;
  spec.n_frames = frames;
  Dataset ds = make_dataset(spec);
  DatasetManifest m = write_dataset(ds, out);
  std::cout << "wrote " << m.count << " " << m.type << " to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& config, const std::string& data,
              const std::string& out) {
  auto [cfg, arch] = parse_train_config(config.empty() ? nlohmann::json::object()
                                                       : load_json(config));
  Dataset ds = read_dataset(data);
  TrainOutcome outcome = train(ds, cfg, arch);
  save_checkpoint(outcome.params, out);
  std::cout << "trained " << fusion_name(arch.fusion) << ": initial batch loss "
            << outcome.stats.initial_batch_loss << ", final "
            << outcome.stats.final_batch_loss << "; checkpoint " << out << "\n";
  return 0;
}

int cmd_adv_train(int attackers, const std::string& config,
                  const std::string& data, const std::string& out,
                  int inner_steps) {
  auto [cfg, arch] = parse_train_config(config.empty() ? nlohmann::json::object()
                                                       : load_json(config));
  Dataset ds = read_dataset(data);
  ThreatConfig threat;
  threat.n_attackers = attackers;
  threat.inner.steps = inner_steps;
  TrainOutcome outcome = adversarial_train(ds, threat, cfg, arch);
  save_checkpoint(outcome.params, out);
  std::cout << "adversarially trained against " << attackers
            << " attacker(s); inner attacks run: " << outcome.stats.inner_attacks
            << "; checkpoint " << out << "\n";
  return 0;
}

int cmd_attack(const std::string& model, const std::string& data, int agents,
               std::vector<int> attackers, const std::string& mode, bool coop,
               double eps, int steps, const std::string& out, int max_scenes) {
  ModelParams params = load_checkpoint(model);
  Dataset ds = read_dataset(data);
  AttackConfig atk;
  atk.eps = eps;
  atk.steps = steps;
  EvalOptions opt;
  opt.n_agents = agents;
  opt.max_scenes = max_scenes;
  nlohmann::json j;
  j["model"] = model;
  j["mode"] = mode;
  j["eps"] = eps;
  j["steps"] = steps;
  j["agents"] = agents;
  j["attackers"] = attackers;
  if (mode == "online") {
    atk.steps = 1;
    j["clean_ap"] = evaluate_online(params, ds, opt, OnlineMode::kClean, atk).ap;
    j["attacked_ap"] =
        evaluate_online(params, ds, opt, OnlineMode::kOnline, atk,
                        attackers.empty() ? 1 : attackers[0]).ap;
  } else {
    PerturbSpec spec;
    spec.kind = mode == "fgsm" ? PerturbKind::kFgsm : PerturbKind::kWhiteBox;
    spec.attackers = attackers.empty() ? std::vector<int>{1} : attackers;
    spec.cooperative = coop;
    spec.atk = atk;
    j["clean_ap"] = evaluate_model(params, ds, opt).ap;
    j["attacked_ap"] = evaluate_model(params, ds, opt, spec).ap;
  }
  write_json(j, out);
  std::cout << "clean AP " << j["clean_ap"] << " -> attacked AP "
            << j["attacked_ap"] << "; wrote " << out << "\n";
  return 0;
}

int cmd_intercept(const std::string& victim, const std::string& data,
                  const std::string& out, double fraction, int agents) {
  ModelParams params = load_checkpoint(victim);
  Dataset ds = read_dataset(data);
  MessageCorpus corpus = intercept_messages(params, ds, fraction, 17, agents);
  save_corpus(corpus, out, params.arch.c_f, params.arch.h_f);
  std::cout << "intercepted " << corpus.size() << " messages to " << out << "\n";
  return 0;
}

int cmd_train_surrogate(const std::string& mode, const std::string& corpus_path,
                        const std::string& config, const std::string& data,
                        const std::string& out) {
  Dataset ds = read_dataset(data);
  auto jcfg = config.empty() ? nlohmann::json::object() : load_json(config);
  auto [cfg, arch] = parse_train_config(jcfg);
  if (mode == "vanilla") {
    TrainOutcome outcome = train_surrogate_vanilla(ds, cfg, arch);
    save_checkpoint(outcome.params, out);
  } else if (mode == "da") {
    check_arg(!corpus_path.empty(), "train-surrogate: da mode needs --corpus");
    MessageCorpus corpus = load_corpus(corpus_path);
    DATrainConfig da;
    da.seed = cfg.seed;
    da.epochs = cfg.epochs;
    da.batch_size = cfg.batch_size;
    da.agents_min = cfg.agents_min;
    da.agents_max = cfg.agents_max;
    da.max_scenes = cfg.max_scenes;
    da.threads = cfg.threads;
    if (jcfg.contains("beta")) da.beta = jcfg.at("beta").get<double>();
    if (jcfg.contains("lr_model")) da.lr_model = jcfg.at("lr_model").get<double>();
    if (jcfg.contains("lr_disc")) da.lr_disc = jcfg.at("lr_disc").get<double>();
    DAOutcome outcome = train_surrogate_da(ds, corpus, da, arch);
    for (const auto& w : outcome.warnings) std::cerr << "warning: " << w << "\n";
    save_checkpoint(outcome.surrogate, out);
  } else {
    throw ArgumentError("train-surrogate: mode must be vanilla or da");
  }
  std::cout << "surrogate (" << mode << ") written to " << out << "\n";
  return 0;
}

int cmd_transfer_attack(const std::string& surrogate, const std::string& victim,
                        const std::string& data, const std::string& out,
                        int max_scenes) {
  ModelParams sur = load_checkpoint(surrogate);
  ModelParams vic = load_checkpoint(victim);
  Dataset ds = read_dataset(data);
  EvalOptions opt;
  opt.n_agents = 2;
  opt.max_scenes = max_scenes;
  AttackConfig atk;
  auto victim_eval = make_victim_evaluator(vic, ds, opt);
  TransferOutcome res = transfer_attack(sur, victim_eval, ds, opt, atk);
  nlohmann::json j;
  j["surrogate_clean_ap"] = res.surrogate_clean_ap;
  j["surrogate_self_attack_ap"] = res.surrogate_attacked_ap;
  j["victim_clean_ap"] = res.victim_clean_ap;
  j["victim_transfer_ap"] = res.victim_attacked_ap;
  write_json(j, out);
  std::cout << "victim AP " << res.victim_clean_ap << " -> "
            << res.victim_attacked_ap << " under transferred deltas\n";
  return 0;
}

int cmd_robust_eval(const std::vector<std::string>& model_paths,
                    const std::vector<int>& counts, const std::string& data,
                    const std::string& out, int agents, int max_scenes) {
  Dataset ds = read_dataset(data);
  std::vector<ModelParams> models;
  std::vector<const ModelParams*> ptrs;
  std::vector<std::string> names;
  for (const auto& p : model_paths) {
    models.push_back(load_checkpoint(p));
    names.push_back(std::filesystem::path(p).stem().string());
  }
  for (const auto& m : models) ptrs.push_back(&m);
  EvalOptions opt;
  opt.n_agents = agents;
  opt.max_scenes = max_scenes;
  AttackConfig atk;
  RobustnessTable table = evaluate_robustness(ptrs, names, counts, ds, opt, atk);
  std::ofstream f(out, std::ios::trunc);
  check(f.good(), "robust-eval: cannot open " + out);
  f << "model";
  for (int c : table.eval_counts) f << ",eval" << c;
  f << "\n";
  for (std::size_t m = 0; m < table.model_names.size(); ++m) {
    f << table.model_names[m];
    for (std::size_t c = 0; c < table.eval_counts.size(); ++c)
      f << "," << table.ap[m][c];
    f << "\n";
  }
  std::cout << "robustness table written to " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& model, const std::string& data, int agents,
             const std::string& out, int max_scenes) {
  ModelParams params = load_checkpoint(model);
  Dataset ds = read_dataset(data);
  EvalOptions opt;
  opt.n_agents = agents;
  opt.max_scenes = max_scenes;
  EvalOutput res = evaluate_model(params, ds, opt);
  std::cout << "clean AP@0.7 with " << agents << " agents: " << res.ap << "\n";
  if (!out.empty()) {
    nlohmann::json j;
    j["ap"] = res.ap;
    j["agents"] = agents;
    j["model"] = model;
    write_json(j, out);
  }
  return 0;
}

int cmd_run(const std::string& config) {
  ExperimentConfig cfg = parse_experiment_config(load_json(config));
  ResultRecord rec = run_experiment(cfg);
  std::cout << "recipe " << rec.recipe << " finished in " << rec.runtime_sec
            << "s; " << rec.ap.size() << " settings\n";
  for (const auto& [k, v] : rec.ap) std::cout << "  " << k << " = " << v << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& record_paths,
               const std::string& out) {
  std::vector<ResultRecord> records;
  for (const auto& p : record_paths) records.push_back(read_record(p));
  report(records, out);
  std::cout << "report written to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-agent cooperative detection testbed"};
  app.require_subcommand(1);

  // gen-data
  std::string split = "train", out_dir;
  int scenes = coopdet::kDefaultTrainScenes, agents = 6, frames = 10;
  std::uint64_t seed = 1;
  bool sequences = false;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--split", split);
  gen->add_option("--scenes", scenes);
  gen->add_option("--agents", agents);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out_dir)->required();
  gen->add_flag("--sequences", sequences);
  gen->add_option("--frames", frames);

  // train
  std::string train_cfg, train_data, train_out;
  auto* tr = app.add_subcommand("train", "train a detection model");
  tr->add_option("--config", train_cfg);
  tr->add_option("--data", train_data)->required();
  tr->add_option("--out", train_out)->required();

  // adv-train
  std::string at_cfg, at_data, at_out;
  int at_attackers = 1, at_inner_steps = 5;
  auto* at = app.add_subcommand("adv-train", "adversarial training");
  at->add_option("--attackers", at_attackers);
  at->add_option("--inner-steps", at_inner_steps);
  at->add_option("--config", at_cfg);
  at->add_option("--data", at_data)->required();
  at->add_option("--out", at_out)->required();

  // attack
  std::string atk_model, atk_data, atk_mode = "pgd", atk_out;
  int atk_agents = 2, atk_steps = 15, atk_scenes = 0;
  std::vector<int> atk_ids = {1};
  std::string atk_coop = "on";
  double atk_eps = 0.1;
  auto* ak = app.add_subcommand("attack", "white-box attack evaluation");
  ak->add_option("--model", atk_model)->required();
  ak->add_option("--data", atk_data)->required();
  ak->add_option("--agents", atk_agents);
  ak->add_option("--attackers", atk_ids);
  ak->add_option("--mode", atk_mode)->check(CLI::IsMember({"pgd", "fgsm", "online"}));
  ak->add_option("--coop", atk_coop)->check(CLI::IsMember({"on", "off"}));
  ak->add_option("--eps", atk_eps);
  ak->add_option("--steps", atk_steps);
  ak->add_option("--max-scenes", atk_scenes);
  ak->add_option("--out", atk_out)->required();

  // intercept
  std::string ic_victim, ic_data, ic_out;
  double ic_fraction = 1.0;
  int ic_agents = 0;
  auto* ic = app.add_subcommand("intercept", "spy on the victim channel");
  ic->add_option("--victim", ic_victim)->required();
  ic->add_option("--data", ic_data)->required();
  ic->add_option("--fraction", ic_fraction);
  ic->add_option("--agents", ic_agents);
  ic->add_option("--out", ic_out)->required();

  // train-surrogate
  std::string ts_mode = "vanilla", ts_corpus, ts_cfg, ts_data, ts_out;
  auto* ts = app.add_subcommand("train-surrogate", "train a surrogate model");
  ts->add_option("--mode", ts_mode)->check(CLI::IsMember({"vanilla", "da"}));
  ts->add_option("--corpus", ts_corpus);
  ts->add_option("--config", ts_cfg);
  ts->add_option("--data", ts_data)->required();
  ts->add_option("--out", ts_out)->required();

  // transfer-attack
  std::string xa_sur, xa_vic, xa_data, xa_out;
  int xa_scenes = 0;
  auto* xa = app.add_subcommand("transfer-attack", "surrogate -> victim attack");
  xa->add_option("--surrogate", xa_sur)->required();
  xa->add_option("--victim", xa_vic)->required();
  xa->add_option("--data", xa_data)->required();
  xa->add_option("--max-scenes", xa_scenes);
  xa->add_option("--out", xa_out)->required();

  // robust-eval
  std::vector<std::string> re_models;
  std::vector<int> re_counts = {0, 1, 2, 3};
  std::string re_data, re_out;
  int re_agents = 4, re_scenes = 0;
  auto* re = app.add_subcommand("robust-eval", "robustness cross-table");
  re->add_option("--models", re_models)->required();
  re->add_option("--attackers-list", re_counts);
  re->add_option("--data", re_data)->required();
  re->add_option("--agents", re_agents);
  re->add_option("--max-scenes", re_scenes);
  re->add_option("--out", re_out)->required();

  // eval
  std::string ev_model, ev_data, ev_out;
  int ev_agents = 2, ev_scenes = 0;
  auto* ev = app.add_subcommand("eval", "clean AP evaluation");
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--agents", ev_agents);
  ev->add_option("--max-scenes", ev_scenes);
  ev->add_option("--out", ev_out);

  // run
  std::string run_cfg;
  auto* rn = app.add_subcommand("run", "run a declarative experiment recipe");
  rn->add_option("--config", run_cfg)->required();

  // report
  std::vector<std::string> rp_records;
  std::string rp_out;
  auto* rp = app.add_subcommand("report", "emit CSV tables and plots");
  rp->add_option("--records", rp_records)->required();
  rp->add_option("--out", rp_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(split, scenes, agents, seed, out_dir, sequences, frames);
    if (tr->parsed()) return cmd_train(train_cfg, train_data, train_out);
    if (at->parsed())
      return cmd_adv_train(at_attackers, at_cfg, at_data, at_out, at_inner_steps);
    if (ak->parsed())
      return cmd_attack(atk_model, atk_data, atk_agents, atk_ids, atk_mode,
                        atk_coop == "on", atk_eps, atk_steps, atk_out, atk_scenes);
    if (ic->parsed())
      return cmd_intercept(ic_victim, ic_data, ic_out, ic_fraction, ic_agents);
    if (ts->parsed())
      return cmd_train_surrogate(ts_mode, ts_corpus, ts_cfg, ts_data, ts_out);
    if (xa->parsed())
      return cmd_transfer_attack(xa_sur, xa_vic, xa_data, xa_out, xa_scenes);
    if (re->parsed())
      return cmd_robust_eval(re_models, re_counts, re_data, re_out, re_agents,
                             re_scenes);
    if (ev->parsed()) return cmd_eval(ev_model, ev_data, ev_agents, ev_out, ev_scenes);
    if (rn->parsed()) return cmd_run(run_cfg);
    if (rp->parsed()) return cmd_report(rp_records, rp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
