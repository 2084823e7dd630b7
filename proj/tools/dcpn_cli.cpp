// Command-line driver: synthetic corpus generation, masked pretraining,
// embedding extraction, episodic meta-training, protocol evaluation, and
// end-to-end pipeline orchestration. Exit codes: 0 success, 1 runtime
// failure, 2 configuration failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dcpn/checkpoint.hpp"
#include "dcpn/config.hpp"
#include "dcpn/eval.hpp"
#include "dcpn/fewshot.hpp"
#include "dcpn/pretrain.hpp"

#include "CLI11.hpp"

namespace fs = std::filesystem;
using namespace dcpn;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "runs";
  bool force = false;
};

struct RunContext {
  ExperimentConfig cfg;
  fs::path run_dir;
  bool force = false;
};

RunContext make_context(const GlobalArgs& g) {
  RunContext ctx;
  ctx.cfg = g.config_path.empty() ? ExperimentConfig{}
                                  : load_config(g.config_path);
  if (g.seed) ctx.cfg.seed = *g.seed;
  ctx.cfg.validate();
  ctx.force = g.force;
  ctx.run_dir = fs::path(g.out_dir) / ("run-" + config_hash(ctx.cfg));
  fs::create_directories(ctx.run_dir);
  std::ofstream cfg_out(ctx.run_dir / "config.json");
  cfg_out << config_to_json(ctx.cfg).dump(2) << "\n";
  return ctx;
}

// one pipeline per run directory
class RunLock {
 public:
  explicit RunLock(const fs::path& run_dir) : path_(run_dir / "lock") {
    if (fs::exists(path_))
      throw std::runtime_error(
          "run directory is locked (another pipeline in progress?): " +
          path_.string());
    std::ofstream(path_) << "pid unknown\n";
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }

 private:
  fs::path path_;
};

bool stage_done(const RunContext& ctx, const std::string& stage) {
  return !ctx.force && fs::exists(ctx.run_dir / (stage + ".done"));
}

void mark_done(const RunContext& ctx, const std::string& stage) {
  std::ofstream(ctx.run_dir / (stage + ".done")) << "ok\n";
}

Dataset load_split(const RunContext& ctx, Split split) {
  DatasetSpec spec;
  spec.name = "synthetic";
  spec.root = ctx.run_dir / "corpus" / to_string(split);
  spec.split = split;
  if (!fs::exists(spec.root))
    throw std::runtime_error("corpus split not found (run synth first): " +
                             spec.root.string());
  return load_dataset(spec, ctx.cfg.data.image_size);
}

void do_synth(RunContext& ctx) {
  if (stage_done(ctx, "synth")) {
    std::cout << "synth: already complete, skipping\n";
    return;
  }
  const auto& d = ctx.cfg.data;
  Dataset train = generate_synthetic_corpus(d.synth_classes,
                                            d.synth_train_per_class,
                                            d.image_size, ctx.cfg.seed);
  Dataset test = generate_synthetic_corpus(d.synth_classes,
                                           d.synth_test_per_class,
                                           d.image_size, ctx.cfg.seed + 1);
  write_corpus(train, ctx.run_dir / "corpus" / "train", ctx.cfg.seed);
  write_corpus(test, ctx.run_dir / "corpus" / "test", ctx.cfg.seed + 1);
  mark_done(ctx, "synth");
  std::cout << "synth: wrote " << train.samples.size() << " train and "
            << test.samples.size() << " test images\n";
}

void do_pretrain(RunContext& ctx) {
  if (stage_done(ctx, "pretrain")) {
    std::cout << "pretrain: already complete, skipping\n";
    return;
  }
  Dataset train = load_split(ctx, Split::train);
  Rng init(ctx.cfg.seed, 100);
  Pretrainer trainer(ctx.cfg.pyramid, ctx.cfg.pretrain.decoder, init);
  PretrainSettings s;
  s.batch_size = ctx.cfg.pretrain.batch_size;
  s.steps = ctx.cfg.pretrain.steps;
  s.lr = ctx.cfg.pretrain.lr;
  s.beta1 = ctx.cfg.pretrain.beta1;
  s.beta2 = ctx.cfg.pretrain.beta2;
  s.weight_decay = ctx.cfg.pretrain.weight_decay;
  s.sm_ratio = ctx.cfg.pretrain.sm_ratio;
  s.loss_scope = ctx.cfg.loss_scope();

  std::ofstream loss_csv(ctx.run_dir / "pretrain_loss.csv");
  loss_csv << "step,loss,lr\n";
  Rng rng(ctx.cfg.seed, 101);
  pretrain_loop(trainer, train, s, rng, [&](int step, double loss, double lr) {
    loss_csv << step << "," << loss << "," << lr << "\n";
    if (step % 50 == 0)
      std::cout << "pretrain step " << step << " loss " << loss << "\n";
  });

  StateDict sd;
  trainer.state(sd);
  save_checkpoint(ctx.run_dir / "pretrain.ckpt", sd,
                  {{"kind", "pretrain"}, {"config_hash", config_hash(ctx.cfg)}});
  mark_done(ctx, "pretrain");
  std::cout << "pretrain: checkpoint written\n";
}

std::string checkpoint_checksum(const fs::path& ckpt) {
  std::ifstream in(ckpt, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + ckpt.string());
  nlohmann::json header = read_checkpoint_header(in, ckpt.string());
  return header.at("blob_checksum").get<std::string>();
}

void extract_one(RunContext& ctx, DualEncoder& enc, const Dataset& ds,
                 Split split, const std::string& ckpt_checksum) {
  std::vector<int> all(ds.samples.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = int(i);
  auto [zg, zl] = extract_features(enc, ds, all);
  std::string tag = to_string(split);
  save_embeddings(ctx.run_dir / ("embeddings_" + tag + "_global.bin"), zg,
                  ds.name, tag, ckpt_checksum, "global");
  save_embeddings(ctx.run_dir / ("embeddings_" + tag + "_local.bin"), zl,
                  ds.name, tag, ckpt_checksum, "local");
}

void do_extract(RunContext& ctx, const std::string& ckpt_arg) {
  if (stage_done(ctx, "extract")) {
    std::cout << "extract: already complete, skipping\n";
    return;
  }
  Rng init(ctx.cfg.seed, 200);
  DualEncoder enc(ctx.cfg.pyramid, ctx.cfg.conv, init);
  fs::path ckpt = ckpt_arg.empty() ? ctx.run_dir / "pretrain.ckpt"
                                   : fs::path(ckpt_arg);
  std::string checksum = "none";
  if (fs::exists(ckpt)) {
    StateDict sd;
    enc.state(sd);
    nlohmann::json meta = checkpoint_meta(ckpt);
    // a pretrain checkpoint only covers the pyramid channel
    std::string prefix =
        meta.value("kind", "") == "pretrain" ? "global" : "";
    load_checkpoint(ckpt, sd, prefix);
    checksum = checkpoint_checksum(ckpt);
  } else if (!ckpt_arg.empty()) {
    throw std::runtime_error("checkpoint not found: " + ckpt.string());
  }
  for (Split split : {Split::train, Split::test})
    extract_one(ctx, enc, load_split(ctx, split), split, checksum);
  mark_done(ctx, "extract");
  std::cout << "extract: embeddings written\n";
}

nlohmann::json pca_to_json(const PCAProjector& p) {
  return {{"in_dim", p.in_dim},     {"out_dim", p.out_dim},
          {"mean_g", p.mean_g},     {"mean_l", p.mean_l},
          {"comp_g", p.comp_g},     {"comp_l", p.comp_l},
          {"fit_provenance", p.fit_provenance}};
}

PCAProjector pca_from_json(const nlohmann::json& j) {
  PCAProjector p;
  p.in_dim = j.at("in_dim").get<int>();
  p.out_dim = j.at("out_dim").get<int>();
  p.mean_g = j.at("mean_g").get<std::vector<double>>();
  p.mean_l = j.at("mean_l").get<std::vector<double>>();
  p.comp_g = j.at("comp_g").get<std::vector<double>>();
  p.comp_l = j.at("comp_l").get<std::vector<double>>();
  p.fit_provenance = j.value("fit_provenance", "");
  return p;
}

void do_meta_train(RunContext& ctx, const std::string& pretrained_ckpt) {
  if (stage_done(ctx, "meta-train")) {
    std::cout << "meta-train: already complete, skipping\n";
    return;
  }
  Dataset base = load_split(ctx, Split::train);
  Rng init(ctx.cfg.seed, 200);
  DualEncoder model(ctx.cfg.pyramid, ctx.cfg.conv, init);

  fs::path ckpt = pretrained_ckpt.empty() ? ctx.run_dir / "pretrain.ckpt"
                                          : fs::path(pretrained_ckpt);
  bool pretrained = fs::exists(ckpt);
  if (!pretrained_ckpt.empty() && !pretrained)
    throw std::runtime_error("pretrained checkpoint not found: " +
                             ckpt.string());
  if (pretrained) {
    StateDict sd;
    model.state(sd);
    load_checkpoint(ckpt, sd, "global");
    std::cout << "meta-train: initialized pyramid channel from "
              << ckpt.string() << "\n";
  }

  MetaTrainSettings s;
  s.n_way = ctx.cfg.fewshot.n_way;
  s.k_shot = ctx.cfg.fewshot.k_shot;
  s.q_queries = ctx.cfg.fewshot.q_queries;
  s.epochs = ctx.cfg.fewshot.epochs;
  s.episodes_per_epoch = ctx.cfg.fewshot.episodes_per_epoch;
  s.lr = ctx.cfg.fewshot.lr;
  s.pca_bank_cap = ctx.cfg.fewshot.pca_bank_cap;
  s.head = ctx.cfg.head();

  std::ofstream log_csv(ctx.run_dir / "meta_train_log.csv");
  log_csv << "episode,loss,acc\n";
  Rng rng(ctx.cfg.seed, 201);
  PCAProjector pca;
  meta_train(model, base, s, rng, pca,
             [&](int episode, double loss, double acc) {
               log_csv << episode << "," << loss << "," << acc << "\n";
               if (episode % 25 == 0)
                 std::cout << "meta-train episode " << episode << " loss "
                           << loss << " acc " << acc << "\n";
             });

  StateDict sd;
  model.state(sd);
  nlohmann::json meta;
  meta["kind"] = "fewshot";
  meta["config_hash"] = config_hash(ctx.cfg);
  meta["pretrained"] = pretrained;
  meta["pca"] = pca_to_json(pca);
  save_checkpoint(ctx.run_dir / "fewshot.ckpt", sd, meta);
  mark_done(ctx, "meta-train");
  std::cout << "meta-train: checkpoint written\n";
}

void do_evaluate(RunContext& ctx, const std::string& ckpt_arg,
                 const std::string& out_arg) {
  if (stage_done(ctx, "evaluate")) {
    std::cout << "evaluate: already complete, skipping\n";
    return;
  }
  Dataset novel = load_split(ctx, Split::test);
  Rng init(ctx.cfg.seed, 200);
  DcpnModel model{DualEncoder(ctx.cfg.pyramid, ctx.cfg.conv, init),
                  PCAProjector{}, ctx.cfg.head()};
  fs::path ckpt = ckpt_arg.empty() ? ctx.run_dir / "fewshot.ckpt"
                                   : fs::path(ckpt_arg);
  StateDict sd;
  model.encoder.state(sd);
  nlohmann::json meta = load_checkpoint(ckpt, sd);
  if (meta.contains("pca")) model.pca = pca_from_json(meta["pca"]);
  if (model.head.use_mix && !model.pca.valid())
    throw std::runtime_error(
        "mix scale requested but the checkpoint has no PCA projector");

  EpisodeSpec spec{ctx.cfg.fewshot.n_way, ctx.cfg.fewshot.k_shot,
                   ctx.cfg.eval.q};
  MetricsReport r =
      evaluate_protocol(model, novel, spec, ctx.cfg.eval.n_tasks, ctx.cfg.seed,
                        ctx.run_dir / "episodes.csv");

  std::string scales;
  if (model.head.use_global) scales += "global";
  if (model.head.use_local) scales += scales.empty() ? "local" : "+local";
  if (model.head.use_mix) scales += scales.empty() ? "mix" : "+mix";
  nlohmann::json out;
  out["task"] = "same";
  out["n_way"] = spec.n_way;
  out["k_shot"] = spec.k_shot;
  out["scales"] = scales;
  out["metric"] = ctx.cfg.fewshot.metric;
  out["pretrained"] = meta.value("pretrained", false);
  out["accuracy"] = r.accuracy;
  out["precision"] = r.precision;
  out["recall"] = r.recall;
  out["f1"] = r.f1;
  out["auc"] = r.auc;
  out["n_episodes"] = r.n_episodes;
  out["mean_accuracy"] = r.mean_accuracy;
  out["ci95"] = r.ci95;
  fs::path out_path = out_arg.empty() ? ctx.run_dir / "metrics.json"
                                      : fs::path(out_arg);
  std::ofstream(out_path) << out.dump(2) << "\n";
  mark_done(ctx, "evaluate");
  std::cout << "evaluate: mean accuracy " << r.mean_accuracy << " +/- "
            << r.ci95 << " over " << r.n_episodes << " episodes\n";
}

void do_report(RunContext& ctx, const std::string& format) {
  if (stage_done(ctx, "report")) {
    std::cout << "report: already complete, skipping\n";
    return;
  }
  fs::path metrics_path = ctx.run_dir / "metrics.json";
  if (!fs::exists(metrics_path))
    throw std::runtime_error("no metrics found (run evaluate first): " +
                             metrics_path.string());
  nlohmann::json m;
  std::ifstream(metrics_path) >> m;
  ReportRow row;
  row.task = m.at("task").get<std::string>();
  row.n_way = m.at("n_way").get<int>();
  row.k_shot = m.at("k_shot").get<int>();
  row.scales = m.at("scales").get<std::string>();
  row.metric = m.at("metric").get<std::string>();
  row.pretrained = m.at("pretrained").get<bool>();
  row.mean_acc = m.at("mean_accuracy").get<double>();
  row.ci95 = m.at("ci95").get<double>();
  ReportFormat fmt = format == "json" ? ReportFormat::json : ReportFormat::csv;
  fs::path out = ctx.run_dir / (fmt == ReportFormat::json ? "report.json"
                                                          : "report.csv");
  write_report({row}, fmt, out);
  mark_done(ctx, "report");
  std::cout << "report: wrote " << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-channel prototype network toolkit"};
  app.require_subcommand(1);

  GlobalArgs g;
  std::uint64_t seed_arg = 0;
  app.add_option("--config", g.config_path, "experiment config file (JSON)");
  auto* seed_opt =
      app.add_option("--seed", seed_arg, "override the config seed");
  app.add_option("--out-dir", g.out_dir, "root directory for run artifacts");
  app.add_flag("--force", g.force, "redo stages even if marked complete");

  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus");
  auto* pretrain =
      app.add_subcommand("pretrain", "masked-image pretraining of the pyramid "
                                     "channel");
  std::string loss_scope_flag;
  pretrain->add_option("--loss-scope", loss_scope_flag,
                       "reconstruction loss scope: missing or dropped-only");
  auto* extract =
      app.add_subcommand("extract", "cache embeddings for both channels");
  std::string extract_ckpt;
  extract->add_option("--ckpt", extract_ckpt,
                      "checkpoint to load (default: this run's pretrain)");
  auto* meta =
      app.add_subcommand("meta-train", "episodic training of the full model");
  std::string pretrained_ckpt;
  std::string task_flag = "same";
  int n_way_flag = 0, k_shot_flag = 0;
  std::string scales_flag, metric_flag;
  meta->add_option("--pretrained-ckpt", pretrained_ckpt,
                   "pyramid-channel checkpoint to start from");
  meta->add_option("--task", task_flag, "domain task: same, near or mixture");
  meta->add_option("--n-way", n_way_flag, "classes per episode");
  meta->add_option("--k-shot", k_shot_flag, "support samples per class");
  meta->add_option("--scales", scales_flag,
                   "comma-separated subset of global,local,mix");
  meta->add_option("--metric", metric_flag, "euclidean or cosine");
  auto* evaluate =
      app.add_subcommand("evaluate", "run the episodic evaluation protocol");
  std::string eval_ckpt, eval_out;
  int n_tasks_flag = 0, q_flag = 0;
  evaluate->add_option("--ckpt", eval_ckpt, "few-shot checkpoint to evaluate");
  evaluate->add_option("--task", task_flag, "domain task label for the report");
  evaluate->add_option("--k-shot", k_shot_flag, "support samples per class");
  evaluate->add_option("--n-tasks", n_tasks_flag, "number of meta-test tasks");
  evaluate->add_option("--q", q_flag, "query samples per class");
  evaluate->add_option("--out", eval_out, "metrics output file");
  auto* report = app.add_subcommand("report", "summarize metrics as a table");
  std::string report_format = "csv";
  report->add_option("--format", report_format, "csv or json");
  auto* pipeline =
      app.add_subcommand("pipeline", "run all stages in order");
  std::vector<std::string> stages{"synth",      "pretrain", "extract",
                                  "meta-train", "evaluate", "report"};
  pipeline->add_option("--stages", stages, "subset of stages to run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (seed_opt->count()) g.seed = seed_arg;
    RunContext ctx = make_context(g);

    // flag overrides on top of the config file
    if (!loss_scope_flag.empty()) ctx.cfg.pretrain.loss_scope = loss_scope_flag;
    if (task_flag != "same" && task_flag != "near" && task_flag != "mixture")
      throw ConfigError("unknown task '" + task_flag + "'");
    if (n_way_flag > 0) ctx.cfg.fewshot.n_way = n_way_flag;
    if (k_shot_flag > 0) ctx.cfg.fewshot.k_shot = k_shot_flag;
    if (n_tasks_flag > 0) ctx.cfg.eval.n_tasks = n_tasks_flag;
    if (q_flag > 0) ctx.cfg.eval.q = q_flag;
    if (!metric_flag.empty()) ctx.cfg.fewshot.metric = metric_flag;
    if (!scales_flag.empty()) {
      ctx.cfg.fewshot.scales.clear();
      std::stringstream ss(scales_flag);
      std::string tok;
      while (std::getline(ss, tok, ','))
        ctx.cfg.fewshot.scales.push_back(tok);
    }
    ctx.cfg.validate();

    RunLock lock(ctx.run_dir);
    if (synth->parsed()) do_synth(ctx);
    if (pretrain->parsed()) do_pretrain(ctx);
    if (extract->parsed()) do_extract(ctx, extract_ckpt);
    if (meta->parsed()) do_meta_train(ctx, pretrained_ckpt);
    if (evaluate->parsed()) do_evaluate(ctx, eval_ckpt, eval_out);
    if (report->parsed()) do_report(ctx, report_format);
    if (pipeline->parsed()) {
      for (const auto& stage : stages) {
        if (stage == "synth")
          do_synth(ctx);
        else if (stage == "pretrain")
          do_pretrain(ctx);
        else if (stage == "extract")
          do_extract(ctx, "");
        else if (stage == "meta-train")
          do_meta_train(ctx, "");
        else if (stage == "evaluate")
          do_evaluate(ctx, "", "");
        else if (stage == "report")
          do_report(ctx, "csv");
        else
          throw ConfigError("unknown pipeline stage '" + stage + "'");
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
