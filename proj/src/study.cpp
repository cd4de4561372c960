#include "mtlnet/train.hpp"

#include <algorithm>
#include <fstream>

namespace mtlnet {

std::optional<double> median(std::vector<double> values) {
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : (values[n / 2 - 1] + values[n / 2]) / 2;
}

void to_json(nlohmann::json& j, const StudyConfig& c) {
  j = {{"schema", "mtlnet.study/1"},
       {"base", c.base},
       {"seeds", c.seeds},
       {"columns", c.columns},
       {"dataset_name", c.dataset_name}};
}

void from_json(const nlohmann::json& j, StudyConfig& c) {
  c = StudyConfig{};
  if (j.contains("schema") && j.at("schema") != "mtlnet.study/1") {
    throw std::invalid_argument("unsupported study schema " + j.at("schema").dump());
  }
  nlohmann::json base = j.at("base");
  // Columns fix heads and weights; the base is always a custom experiment.
  base["name"] = "custom";
  base.erase("weights");
  if (base.contains("model")) base["model"].erase("heads");
  c.base = base.get<ExperimentConfig>();
  c.seeds = j.value("seeds", c.seeds);
  c.columns = j.value("columns", c.columns);
  c.dataset_name = j.value("dataset_name", c.dataset_name);
  if (c.seeds.empty()) throw std::invalid_argument("study needs at least one seed");
  for (const auto& col : c.columns) {
    const auto& all = study_columns();
    if (std::find(all.begin(), all.end(), col) == all.end()) {
      throw std::invalid_argument("unknown study column '" + col + "'");
    }
  }
}

namespace {

// Mean of the last (up to) ten logged values; single steps are noisy.
std::optional<double> tail_mean(const std::vector<StepLog>& log, std::optional<double> StepLog::*field) {
  double sum = 0;
  int count = 0;
  for (auto it = log.rbegin(); it != log.rend() && count < 10; ++it) {
    if (!((*it).*field)) return std::nullopt;
    sum += *((*it).*field);
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

std::optional<std::vector<std::optional<double>>> per_class_median(
    const std::vector<const std::vector<std::optional<double>>*>& runs) {
  if (runs.empty()) return std::nullopt;
  std::vector<std::optional<double>> out(runs.front()->size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    std::vector<double> values;
    for (const auto* r : runs) {
      if ((*r)[k]) values.push_back(*(*r)[k]);
    }
    out[k] = median(values);
  }
  return out;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

template <typename Scalar>
StudyResult run_study(const StudyConfig& cfg, const std::vector<Sample>& train_set,
                      const std::vector<Sample>& eval_set, const std::filesystem::path& out_dir) {
  StudyResult result;
  std::map<std::string, ColumnMetrics> columns;
  for (const auto& column : cfg.columns) {
    std::vector<const std::vector<std::optional<double>>*> seg_runs, det_runs;
    std::vector<double> mious, maps;
    const std::size_t first = result.runs.size();
    for (std::uint64_t seed : cfg.seeds) {
      RunSummary run;
      run.column = column;
      run.seed = seed;
      ExperimentConfig exp = cfg.base;
      exp.name = experiment_name_for_column(column);
      exp.apply_preset();
      exp.optimizer.seed = seed;
      const auto dir = out_dir.empty() ? std::filesystem::path()
                                       : out_dir / exp.name / ("seed_" + std::to_string(seed));
      try {
        const TrainResult tr = train<Scalar>(exp, train_set, eval_set, dir);
        run.ok = true;
        run.eval = tr.evals.back().second;
        if (!tr.losses.empty()) {
          run.initial_seg = tr.losses.front().seg;
          run.initial_det = tr.losses.front().det;
          run.final_seg = tail_mean(tr.losses, &StepLog::seg);
          run.final_det = tail_mean(tr.losses, &StepLog::det);
        }
      } catch (const std::exception& e) {
        run.error = e.what();
      }
      result.runs.push_back(std::move(run));
    }
    for (std::size_t i = first; i < result.runs.size(); ++i) {
      const RunSummary& r = result.runs[i];
      if (!r.ok) continue;
      if (r.eval.seg) {
        seg_runs.push_back(&r.eval.seg->per_class);
        if (r.eval.seg->mean) mious.push_back(*r.eval.seg->mean);
      }
      if (r.eval.det) {
        det_runs.push_back(&r.eval.det->per_class);
        if (r.eval.det->mean) maps.push_back(*r.eval.det->mean);
      }
    }
    ColumnMetrics m;
    m.seg_iou = per_class_median(seg_runs);
    m.det_ap = per_class_median(det_runs);
    if (m.seg_iou || m.det_ap) columns[column] = m;
    result.median_miou[column] = median(mious);
    result.median_map[column] = median(maps);
  }
  result.table = report_table(columns, cfg.base.model.seg_classes, cfg.base.model.det_classes, cfg.dataset_name);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream csv(out_dir / "results.csv");
    write_results_csv(csv, result.table);
    std::ofstream json(out_dir / "results.json");
    json << study_json(result).dump(2) << '\n';
  }
  return result;
}

nlohmann::json study_json(const StudyResult& result) {
  nlohmann::json j = results_json(result.table);
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : result.runs) {
    nlohmann::json run = {{"column", r.column}, {"seed", r.seed}, {"ok", r.ok}};
    if (!r.ok) run["error"] = r.error;
    if (r.eval.seg) run["mean_iou"] = opt_json(r.eval.seg->mean);
    if (r.eval.det) run["mean_ap"] = opt_json(r.eval.det->mean);
    run["initial_L_seg"] = opt_json(r.initial_seg);
    run["initial_L_det"] = opt_json(r.initial_det);
    run["final_L_seg"] = opt_json(r.final_seg);
    run["final_L_det"] = opt_json(r.final_det);
    if (r.initial_seg && r.initial_det && *r.initial_det > 0) {
      run["initial_seg_det_ratio"] = *r.initial_seg / *r.initial_det;
    }
    if (r.final_seg && r.final_det && *r.final_det > 0) run["final_seg_det_ratio"] = *r.final_seg / *r.final_det;
    runs.push_back(run);
  }
  j["runs"] = runs;
  nlohmann::json med_iou = nlohmann::json::object(), med_ap = nlohmann::json::object();
  for (const auto& [c, v] : result.median_miou) med_iou[c] = opt_json(v);
  for (const auto& [c, v] : result.median_map) med_ap[c] = opt_json(v);
  j["median_mean_iou"] = med_iou;
  j["median_mean_ap"] = med_ap;
  return j;
}

template StudyResult run_study<float>(const StudyConfig&, const std::vector<Sample>&,
                                      const std::vector<Sample>&, const std::filesystem::path&);
template StudyResult run_study<double>(const StudyConfig&, const std::vector<Sample>&,
                                       const std::vector<Sample>&, const std::filesystem::path&);

}  // namespace mtlnet
