#include "dyrep/logs.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

namespace dyrep {

using nlohmann::json;
namespace fs = std::filesystem;

void RunPaths::prepare() const {
  fs::create_directories(checkpoints());
}

void write_manifest(const ResolvedConfig& cfg, const RunPaths& paths) {
  json m;
  m["artifact_version"] = kArtifactVersion;
  m["config_hash"] = cfg.hash();
  m["config"] = cfg.canonical_text();
  m["layout"] = {{"metrics", "metrics.jsonl"},
                 {"structure", "structure.jsonl"},
                 {"scores", "scores.csv"},
                 {"checkpoints", "checkpoints/"}};
  std::ofstream out(paths.manifest(), std::ios::trunc);
  require(out.good(), "cannot write manifest: " + paths.manifest());
  out << m.dump(2) << "\n";
}

void write_metrics(const std::vector<EpochRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write metrics log: " + path);
  for (const auto& r : rows) {
    json j{{"epoch", r.epoch},        {"train_loss", r.train_loss}, {"eval_acc", r.eval_acc},
           {"eval_loss", r.eval_loss}, {"params", r.params},         {"flops", r.flops},
           {"events", r.events}};
    out << j.dump() << "\n";
  }
}

void write_structure(const std::vector<StructEvent>& events, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write structure log: " + path);
  for (const auto& e : events) {
    json j{{"epoch", e.epoch}, {"event", e.event}, {"id", e.id}, {"kinds", e.kinds}};
    if (!e.importances.empty()) j["importance"] = e.importances;
    out << j.dump() << "\n";
  }
}

namespace {

std::string fmt_score(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void write_scores(const std::vector<ScoreRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write score report: " + path);
  out << "interval,op_id,metric,score\n";
  for (const auto& r : rows)
    out << r.interval << "," << r.id << "," << r.metric << "," << fmt_score(r.score) << "\n";
}

std::vector<ScoreTableRow> read_scores(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open score report: " + path);
  std::vector<ScoreTableRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      require(line == "interval,op_id,metric,score", "unexpected score csv header: " + line);
      continue;
    }
    ScoreTableRow r;
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    r.interval = std::stoi(field);
    std::getline(ss, r.id, ',');
    std::getline(ss, r.metric, ',');
    std::getline(ss, field, ',');
    r.score = std::stod(field);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string render_score_report(const std::vector<ScoreTableRow>& rows) {
  std::ostringstream os;
  if (rows.empty()) return "";
  // interval -> metric -> (id -> score)
  std::map<int, std::map<std::string, std::map<std::string, double>>> table;
  for (const auto& r : rows) table[r.interval][r.metric][r.id] = r.score;
  for (const auto& [interval, metrics] : table) {
    os << "interval " << interval << "\n";
    for (const auto& [metric, scores] : metrics) {
      std::string best;
      double best_v = 0.0;
      for (const auto& [id, v] : scores)
        if (best.empty() || v > best_v) {
          best = id;
          best_v = v;
        }
      for (const auto& [id, v] : scores)
        os << "  " << std::left << std::setw(10) << metric << " " << std::setw(40) << id << " "
           << std::setprecision(6) << v << (id == best ? "  <- argmax" : "") << "\n";
    }
  }
  return os.str();
}

}  // namespace dyrep
