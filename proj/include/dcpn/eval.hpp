#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dcpn/fewshot.hpp"

#include "json.hpp"

namespace dcpn {

// ---------------------------------------------------------------------------
// confusion counts and classification metrics
// ---------------------------------------------------------------------------

struct ConfusionCounts {
  int n_way = 0;
  std::vector<long> tp, tn, fp, fn;  // one-vs-rest, per class
};

inline ConfusionCounts confusion(const std::vector<int>& preds,
                                 const std::vector<int>& labels, int n_way) {
  if (preds.size() != labels.size())
    throw std::invalid_argument("confusion: length mismatch");
  ConfusionCounts c;
  c.n_way = n_way;
  c.tp.assign(n_way, 0);
  c.tn.assign(n_way, 0);
  c.fp.assign(n_way, 0);
  c.fn.assign(n_way, 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    int p = preds[i], l = labels[i];
    if (p < 0 || p >= n_way || l < 0 || l >= n_way)
      throw std::out_of_range("confusion: label " + std::to_string(l) +
                              "/prediction " + std::to_string(p) +
                              " outside 0.." + std::to_string(n_way - 1));
    for (int k = 0; k < n_way; ++k) {
      bool pred_k = (p == k), true_k = (l == k);
      if (pred_k && true_k)
        c.tp[k]++;
      else if (pred_k && !true_k)
        c.fp[k]++;
      else if (!pred_k && true_k)
        c.fn[k]++;
      else
        c.tn[k]++;
    }
  }
  return c;
}

struct MetricsReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, auc = 0;
  int n_episodes = 0;
  double mean_accuracy = 0, ci95 = 0;
};

// accuracy from pooled one-vs-rest counts; precision/recall/F1 macro-averaged,
// degenerate denominators score 0 for that class with a warning
inline MetricsReport metrics(const ConfusionCounts& c) {
  MetricsReport r;
  long tp = 0, tn = 0, fp = 0, fn = 0;
  for (int k = 0; k < c.n_way; ++k) {
    tp += c.tp[k];
    tn += c.tn[k];
    fp += c.fp[k];
    fn += c.fn[k];
  }
  long total = tp + tn + fp + fn;
  r.accuracy = total == 0 ? 0.0 : double(tp + tn) / double(total);
  for (int k = 0; k < c.n_way; ++k) {
    double prec = 0, rec = 0, f1 = 0;
    if (c.tp[k] + c.fp[k] == 0) {
      std::cerr << "warning: class " << k
                << " was never predicted; precision set to 0\n";
    } else {
      prec = double(c.tp[k]) / double(c.tp[k] + c.fp[k]);
    }
    if (c.tp[k] + c.fn[k] == 0) {
      std::cerr << "warning: class " << k
                << " has no true samples; recall set to 0\n";
    } else {
      rec = double(c.tp[k]) / double(c.tp[k] + c.fn[k]);
    }
    if (prec + rec > 0) f1 = 2.0 * prec * rec / (prec + rec);
    r.precision += prec / c.n_way;
    r.recall += rec / c.n_way;
    r.f1 += f1 / c.n_way;
  }
  return r;
}

// macro one-vs-rest rank-based AUC; tied scores contribute 1/2
inline double auc(const std::vector<std::vector<double>>& prob_matrix,
                  const std::vector<int>& labels) {
  if (prob_matrix.size() != labels.size() || prob_matrix.empty())
    throw std::invalid_argument("auc: size mismatch");
  int n_way = static_cast<int>(prob_matrix[0].size());
  if (*std::min_element(labels.begin(), labels.end()) ==
      *std::max_element(labels.begin(), labels.end()))
    throw std::runtime_error("auc: labels contain a single class, ROC is "
                             "undefined");
  double total = 0;
  int used = 0;
  for (int k = 0; k < n_way; ++k) {
    std::vector<std::pair<double, int>> scored;  // (score, is_positive)
    long pos = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      bool p = labels[i] == k;
      pos += p;
      scored.push_back({prob_matrix[i][k], p});
    }
    long neg = static_cast<long>(scored.size()) - pos;
    if (pos == 0 || neg == 0) continue;  // class absent in this batch
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) {
                       return a.first < b.first;
                     });
    // average ranks over tie groups
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < scored.size()) {
      size_t j = i;
      while (j < scored.size() && scored[j].first == scored[i].first) ++j;
      double avg_rank = (double(i + 1) + double(j)) / 2.0;  // ranks are 1-based
      for (size_t t = i; t < j; ++t)
        if (scored[t].second) rank_sum_pos += avg_rank;
      i = j;
    }
    total += (rank_sum_pos - double(pos) * (pos + 1) / 2.0) /
             (double(pos) * double(neg));
    ++used;
  }
  if (used == 0)
    throw std::runtime_error("auc: no class had both positives and negatives");
  return total / used;
}

// ---------------------------------------------------------------------------
// episodic evaluation protocol
// ---------------------------------------------------------------------------

struct EpisodeResult {
  int episode_id = 0;
  double accuracy = 0, loss = 0;
};

// n_tasks episodes with q queries each; every episode draws from its own rng
// stream so results are independent of evaluation order
inline MetricsReport evaluate_protocol(
    DcpnModel& model, const Dataset& novel, const EpisodeSpec& spec,
    int n_tasks, std::uint64_t seed,
    const std::filesystem::path& episode_log = {},
    const std::function<void(const EpisodeResult&)>& on_episode = nullptr) {
  std::ofstream log;
  if (!episode_log.empty()) {
    log.open(episode_log);
    if (!log)
      throw std::runtime_error("cannot write episode log: " +
                               episode_log.string());
    log << "episode_id,accuracy,loss\n";
  }
  std::vector<int> all_preds, all_labels;
  std::vector<std::vector<double>> all_probs;
  std::vector<double> episode_acc;
  for (int e = 0; e < n_tasks; ++e) {
    Rng rng(seed, static_cast<std::uint64_t>(e));
    Episode ep = sample_episode(novel, spec, rng);
    auto results = classify_episode(model, novel, ep);
    int correct = 0;
    for (size_t i = 0; i < results.size(); ++i) {
      int pred = classify(results[i]);
      if (pred == ep.query_label[i]) ++correct;
      all_preds.push_back(pred);
      all_labels.push_back(ep.query_label[i]);
      all_probs.push_back(results[i].probs);
    }
    EpisodeResult er;
    er.episode_id = e;
    er.accuracy = double(correct) / double(results.size());
    er.loss = episode_loss(results, ep.query_label);
    episode_acc.push_back(er.accuracy);
    if (log) log << er.episode_id << "," << er.accuracy << "," << er.loss << "\n";
    if (on_episode) on_episode(er);
  }
  MetricsReport r = metrics(confusion(all_preds, all_labels, spec.n_way));
  r.auc = auc(all_probs, all_labels);
  r.n_episodes = n_tasks;
  r.mean_accuracy =
      std::accumulate(episode_acc.begin(), episode_acc.end(), 0.0) / n_tasks;
  double var = 0;
  for (double a : episode_acc)
    var += (a - r.mean_accuracy) * (a - r.mean_accuracy);
  var /= n_tasks;
  r.ci95 = 1.96 * std::sqrt(var) / std::sqrt(double(n_tasks));
  return r;
}

// ---------------------------------------------------------------------------
// results reporting
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string task;
  int n_way = 0, k_shot = 0;
  std::string scales;  // e.g. "global+local+mix"
  std::string metric;  // "euclidean" or "cosine"
  bool pretrained = false;
  double mean_acc = 0, ci95 = 0;
};

enum class ReportFormat { csv, json };

inline void write_report(const std::vector<ReportRow>& rows,
                         ReportFormat format,
                         const std::filesystem::path& path) {
  if (rows.empty()) throw std::invalid_argument("write_report: no rows");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report: " + path.string());
  if (format == ReportFormat::csv) {
    out << "task,n_way,k_shot,scales,metric,pretrained,mean_acc,ci95\n";
    out.precision(17);
    for (const auto& r : rows)
      out << r.task << "," << r.n_way << "," << r.k_shot << "," << r.scales
          << "," << r.metric << "," << (r.pretrained ? "Y" : "N") << ","
          << r.mean_acc << "," << r.ci95 << "\n";
  } else {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows)
      j.push_back({{"task", r.task},
                   {"n_way", r.n_way},
                   {"k_shot", r.k_shot},
                   {"scales", r.scales},
                   {"metric", r.metric},
                   {"pretrained", r.pretrained},
                   {"mean_acc", r.mean_acc},
                   {"ci95", r.ci95}});
    out << j.dump(2) << "\n";
  }
}

inline std::vector<ReportRow> read_report(const std::filesystem::path& path,
                                          ReportFormat format) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read report: " + path.string());
  std::vector<ReportRow> rows;
  if (format == ReportFormat::csv) {
    std::string line;
    std::getline(in, line);
    if (line != "task,n_way,k_shot,scales,metric,pretrained,mean_acc,ci95")
      throw std::runtime_error("unexpected report header in " + path.string());
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string field;
      ReportRow r;
      std::getline(ss, r.task, ',');
      std::getline(ss, field, ',');
      r.n_way = std::stoi(field);
      std::getline(ss, field, ',');
      r.k_shot = std::stoi(field);
      std::getline(ss, r.scales, ',');
      std::getline(ss, r.metric, ',');
      std::getline(ss, field, ',');
      r.pretrained = (field == "Y");
      std::getline(ss, field, ',');
      r.mean_acc = std::stod(field);
      std::getline(ss, field, ',');
      r.ci95 = std::stod(field);
      rows.push_back(r);
    }
  } else {
    nlohmann::json j;
    in >> j;
    for (const auto& e : j) {
      ReportRow r;
      r.task = e.at("task").get<std::string>();
      r.n_way = e.at("n_way").get<int>();
      r.k_shot = e.at("k_shot").get<int>();
      r.scales = e.at("scales").get<std::string>();
      r.metric = e.at("metric").get<std::string>();
      r.pretrained = e.at("pretrained").get<bool>();
      r.mean_acc = e.at("mean_acc").get<double>();
      r.ci95 = e.at("ci95").get<double>();
      rows.push_back(r);
    }
  }
  return rows;
}

}  // namespace dcpn
