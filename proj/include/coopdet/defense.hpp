#pragma once

#include "coopdet/eval.hpp"
#include "coopdet/train.hpp"

namespace coopdet {

// AP cross-table: rows are models (typically trained against different
// attacker counts), columns are evaluation attacker counts; count 0 is clean.
struct RobustnessTable {
  std::vector<std::string> model_names;
  std::vector<int> eval_counts;
  std::vector<std::vector<double>> ap;  // [model][count index]

  double at(int model, int count) const {
    for (std::size_t c = 0; c < eval_counts.size(); ++c)
      if (eval_counts[c] == count) return ap[static_cast<std::size_t>(model)][c];
    throw ArgumentError("RobustnessTable: count not evaluated");
  }
};

// Evaluates every model against cooperative white-box attacks with each
// attacker count. Count 0 reproduces the clean AP exactly (same code path,
// no perturbation).
inline RobustnessTable evaluate_robustness(
    const std::vector<const ModelParams*>& models,
    const std::vector<std::string>& names, const std::vector<int>& counts,
    const Dataset& ds, const EvalOptions& opt, const AttackConfig& eval_atk) {
  check_arg(!models.empty(), "evaluate_robustness: no models");
  check_arg(models.size() == names.size(), "evaluate_robustness: name mismatch");
  for (const auto* m : models)
    check_arg(m->arch_hash() == models[0]->arch_hash(),
              "evaluate_robustness: models must share an architecture");
  for (int c : counts)
    check_arg(c >= 0 && c <= opt.n_agents - 1,
              "evaluate_robustness: attacker count needs agents - 1 >= count");
  RobustnessTable table;
  table.model_names = names;
  table.eval_counts = counts;
  for (const auto* m : models) {
    std::vector<double> row;
    for (int c : counts) {
      PerturbSpec spec;
      if (c == 0) {
        spec.kind = PerturbKind::kNone;
      } else {
        spec.kind = PerturbKind::kWhiteBox;
        spec.cooperative = true;
        spec.atk = eval_atk;
        spec.attackers.clear();
        for (int a = 1; a <= c; ++a) spec.attackers.push_back(a);
      }
      row.push_back(evaluate_model(*m, ds, opt, spec).ap);
    }
    table.ap.push_back(std::move(row));
  }
  return table;
}

}  // namespace coopdet
