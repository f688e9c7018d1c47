#include "muxvit/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "muxvit/checkpoint.hpp"
#include "muxvit/dataset.hpp"
#include "muxvit/diagnostics.hpp"
#include "muxvit/distill.hpp"
#include "muxvit/run_config.hpp"
#include "muxvit/trainer.hpp"

namespace muxvit {

namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Tracks files created by a command so a failure never leaves partial output.
struct OutputGuard {
  std::vector<std::string> paths;
  bool committed = false;
  std::string claim(const std::string& p) {
    paths.push_back(p);
    return p;
  }
  ~OutputGuard() {
    if (committed) return;
    for (const auto& p : paths) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }
};

void write_text(const std::string& path, const std::string& text) {
  fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("short write to " + path);
}

std::string metrics_csv(const MetricsLog& log) {
  std::string s = "# groups:";
  for (std::size_t i = 0; i < log.grad_labels.size(); ++i)
    s += (i ? "," : " ") + log.grad_labels[i];
  s += "\n";
  s += "step,epoch,loss_total,loss_pred,loss_attn,loss_hddn,lr,test_acc";
  for (std::size_t i = 0; i < log.grad_labels.size(); ++i)
    s += ",grad_norm_g" + std::to_string(i);
  s += "\n";
  for (const auto& r : log.rows) {
    s += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt(r.loss_total) + "," +
         fmt(r.loss_pred) + "," + fmt(r.loss_attn) + "," + fmt(r.loss_hddn) + "," + fmt(r.lr) + ",";
    if (r.test_acc >= 0) s += fmt(r.test_acc);
    for (double n : r.grad_norms) s += "," + fmt(n);
    s += "\n";
  }
  return s;
}

Json param_report_json(const ParamReport& r) {
  return Json{{"shared_core", r.shared_core},
              {"per_layer_norm", r.per_layer_norm},
              {"transforms", r.transforms},
              {"blocks", r.blocks},
              {"embed_head", r.embed_head},
              {"total", r.total},
              {"baseline_blocks", r.baseline_blocks},
              {"baseline_total", r.baseline_total},
              {"ratio_blocks", r.ratio_blocks},
              {"ratio_total", r.ratio_total}};
}

// Optional overrides applied on top of --config. Flag names mirror the
// config fields; a handful of shorthands cover the common knobs.
struct Overrides {
  std::optional<int> image_size, patch_size, in_channels, num_classes;
  std::optional<double> drop_path_rate;
  std::optional<std::string> stages_json;
  std::optional<std::string> share_mode;
  std::optional<int> share_k;
  std::optional<std::string> transform;  // none | msa | mlp | both
  std::optional<bool> transforms_msa, transforms_mlp;
  std::optional<int> kernel;
  std::optional<double> temperature, beta, gamma, gt_weight;
  std::optional<bool> hetero_teacher;
  std::optional<double> lr, lr_min, weight_decay, beta1, beta2, adam_eps;
  std::optional<int> epochs, batch;
  std::optional<std::string> schedule;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> data_seed;
  std::optional<int> num_train, num_test, data_image_size, classes;
  std::optional<double> noise_sigma;
  std::optional<std::string> out_dir;

  void apply(RunConfig& rc) const {
    auto set = [](auto& dst, const auto& src) {
      if (src) dst = *src;
    };
    set(rc.model.image_size, image_size);
    set(rc.model.patch_size, patch_size);
    set(rc.model.in_channels, in_channels);
    set(rc.model.num_classes, num_classes);
    set(rc.model.drop_path_rate, drop_path_rate);
    if (stages_json) {
      Json j = Json::parse(*stages_json);
      Json wrap{{"model", Json{{"stages", j}}}};
      RunConfig tmp = run_config_from_json(wrap);
      rc.model.stages = tmp.model.stages;
    }
    if (share_mode) rc.sharing.mode = share_mode_from(*share_mode);
    set(rc.sharing.k, share_k);
    if (transform) {
      if (*transform == "none") {
        rc.transforms.msa = rc.transforms.mlp = false;
      } else if (*transform == "msa") {
        rc.transforms.msa = true;
        rc.transforms.mlp = false;
      } else if (*transform == "mlp") {
        rc.transforms.msa = false;
        rc.transforms.mlp = true;
      } else if (*transform == "both") {
        rc.transforms.msa = rc.transforms.mlp = true;
      } else {
        throw ConfigError("unknown --transform value '" + *transform + "'");
      }
    }
    set(rc.transforms.msa, transforms_msa);
    set(rc.transforms.mlp, transforms_mlp);
    set(rc.transforms.kernel, kernel);
    set(rc.distill.temperature, temperature);
    set(rc.distill.beta, beta);
    set(rc.distill.gamma, gamma);
    set(rc.distill.gt_weight, gt_weight);
    set(rc.distill.hetero_teacher, hetero_teacher);
    set(rc.optim.lr, lr);
    set(rc.optim.lr_min, lr_min);
    set(rc.optim.weight_decay, weight_decay);
    set(rc.optim.beta1, beta1);
    set(rc.optim.beta2, beta2);
    set(rc.optim.eps, adam_eps);
    set(rc.optim.epochs, epochs);
    set(rc.optim.batch, batch);
    set(rc.optim.schedule, schedule);
    set(rc.optim.seed, seed);
    set(rc.data.seed, data_seed);
    set(rc.data.num_train, num_train);
    set(rc.data.num_test, num_test);
    set(rc.data.image_size, data_image_size);
    set(rc.data.classes, classes);
    set(rc.data.noise_sigma, noise_sigma);
    set(rc.output.dir, out_dir);
  }
};

void add_override_flags(CLI::App* app, Overrides& o) {
  app->add_option("--model.image_size", o.image_size);
  app->add_option("--model.patch_size", o.patch_size);
  app->add_option("--model.in_channels", o.in_channels);
  app->add_option("--model.num_classes", o.num_classes);
  app->add_option("--model.drop_path_rate", o.drop_path_rate);
  app->add_option("--model.stages", o.stages_json, "stage list as JSON");
  app->add_option("--sharing.mode,--share", o.share_mode, "none | every_k | all");
  app->add_option("--sharing.k,--share-k", o.share_k);
  app->add_option("--transform", o.transform, "none | msa | mlp | both");
  app->add_option("--transforms.msa", o.transforms_msa);
  app->add_option("--transforms.mlp", o.transforms_mlp);
  app->add_option("--transforms.kernel,--kernel", o.kernel);
  app->add_option("--distill.temperature", o.temperature);
  app->add_option("--distill.beta", o.beta);
  app->add_option("--distill.gamma", o.gamma);
  app->add_option("--distill.gt_weight", o.gt_weight);
  app->add_option("--distill.hetero_teacher", o.hetero_teacher);
  app->add_option("--optim.lr,--lr", o.lr);
  app->add_option("--optim.lr_min", o.lr_min);
  app->add_option("--optim.weight_decay", o.weight_decay);
  app->add_option("--optim.beta1", o.beta1);
  app->add_option("--optim.beta2", o.beta2);
  app->add_option("--optim.eps", o.adam_eps);
  app->add_option("--optim.epochs,--epochs", o.epochs);
  app->add_option("--optim.batch,--batch", o.batch);
  app->add_option("--optim.schedule", o.schedule);
  app->add_option("--optim.seed,--seed", o.seed);
  app->add_option("--data.seed", o.data_seed);
  app->add_option("--data.num_train", o.num_train);
  app->add_option("--data.num_test", o.num_test);
  app->add_option("--data.image_size", o.data_image_size);
  app->add_option("--data.classes", o.classes);
  app->add_option("--data.noise_sigma", o.noise_sigma);
  app->add_option("--output.dir,--out-dir", o.out_dir);
}

RunConfig effective_config(const std::string& config_path, const Overrides& o) {
  RunConfig rc = config_path.empty() ? default_run_config() : load_run_config(config_path);
  o.apply(rc);
  rc.validate();
  return rc;
}

DatasetCache train_split(const RunConfig& rc) {
  return build_dataset(rc.data.spec(), 0, rc.data.num_train);
}
DatasetCache test_split(const RunConfig& rc) {
  return build_dataset(rc.data.spec(), static_cast<std::uint64_t>(rc.data.num_train),
                       rc.data.num_test);
}

int cmd_train_teacher(const RunConfig& rc) {
  RunConfig teacher_rc = rc;
  teacher_rc.sharing.mode = ShareMode::none;
  teacher_rc.transforms.msa = teacher_rc.transforms.mlp = false;
  Model<float> model = build_vanilla_model<float>(teacher_rc.model, teacher_rc.optim.seed);
  DatasetCache train = train_split(teacher_rc), test = test_split(teacher_rc);
  MetricsLog log = train_supervised(model, train, &test, teacher_rc.optim);

  OutputGuard guard;
  const std::string dir = teacher_rc.output.dir;
  fs::create_directories(dir);
  save_checkpoint(model, teacher_rc, guard.claim(dir + "/teacher.ckpt"));
  write_text(guard.claim(dir + "/teacher_metrics.csv"), metrics_csv(log));
  guard.committed = true;
  std::cout << "wrote " << dir << "/teacher.ckpt and teacher_metrics.csv\n";
  return 0;
}

int cmd_compress(const RunConfig& rc, const std::string& teacher_path) {
  LoadedCheckpoint teacher = load_checkpoint(teacher_path);
  RunConfig out_rc = rc;
  out_rc.model = teacher.run_config.model;  // the student keeps the teacher architecture
  out_rc.validate();
  SharingPlan plan = out_rc.plan();
  Model<float> student = build_compact_model(teacher.model, plan, out_rc.transforms);

  OutputGuard guard;
  const std::string dir = out_rc.output.dir;
  fs::create_directories(dir);
  save_checkpoint(student, out_rc, guard.claim(dir + "/student_init.ckpt"));
  write_text(guard.claim(dir + "/param_report.json"),
             param_report_json(param_report(student)).dump(2) + "\n");
  guard.committed = true;
  std::cout << param_report_json(param_report(student)).dump(2) << "\n";
  return 0;
}

int cmd_distill(const RunConfig& rc, const std::string& teacher_path,
                const std::string& student_init_path) {
  LoadedCheckpoint teacher = load_checkpoint(teacher_path);
  LoadedCheckpoint student = load_checkpoint(student_init_path);
  DatasetCache train = train_split(rc), test = test_split(rc);
  MetricsLog log =
      train_distill(student.model, teacher.model, train, &test, rc.optim, rc.distill);

  OutputGuard guard;
  const std::string dir = rc.output.dir;
  fs::create_directories(dir);
  // The checkpoint keeps the construction-time config from student-init so
  // the file describes how the model is built; run settings live in the CSV.
  save_checkpoint(student.model, student.run_config, guard.claim(dir + "/student.ckpt"));
  write_text(guard.claim(dir + "/student_metrics.csv"), metrics_csv(log));
  guard.committed = true;
  std::cout << "wrote " << dir << "/student.ckpt and student_metrics.csv\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const Overrides& o) {
  LoadedCheckpoint lc = load_checkpoint(checkpoint_path);
  RunConfig rc = lc.run_config;
  if (!config_path.empty()) rc = load_run_config(config_path);
  o.apply(rc);
  DatasetCache test = test_split(rc);
  const double acc = evaluate_accuracy(lc.model, test);
  std::cout << Json{{"top1", acc}}.dump() << "\n";
  return 0;
}

int cmd_diagnose_cka(const std::string& a_path, const std::string& b_path,
                     const std::string& out_path) {
  LoadedCheckpoint a = load_checkpoint(a_path);
  LoadedCheckpoint b = load_checkpoint(b_path);
  // fixed probe: 64 held-out samples from model a's data settings
  const RunConfig& rc = a.run_config;
  DatasetCache probe = build_dataset(rc.data.spec(),
                                     static_cast<std::uint64_t>(rc.data.num_train), 64);
  std::vector<int> order(64);
  for (int i = 0; i < 64; ++i) order[static_cast<std::size_t>(i)] = i;
  auto [images, labels] = gather_batch<float>(probe, order, 0, 64);
  (void)labels;
  SimilarityCurve curve = layer_similarity(a.model, b.model, images, 64);

  OutputGuard guard;
  std::string csv = "# activation: " + curve.activation + "\nlayer,cka\n";
  for (std::size_t l = 0; l < curve.cka.size(); ++l)
    csv += std::to_string(l) + "," + fmt(curve.cka[l]) + "\n";
  write_text(guard.claim(out_path), csv);
  guard.committed = true;
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_diagnose_gradnorm(const RunConfig& rc, const std::string& checkpoint_path,
                          const std::string& teacher_path, int steps,
                          const std::string& out_path) {
  LoadedCheckpoint student = load_checkpoint(checkpoint_path);
  std::optional<LoadedCheckpoint> teacher;
  if (!teacher_path.empty()) teacher = load_checkpoint(teacher_path);

  RunConfig run = rc;
  run.optim.epochs = 1;
  DatasetCache train = train_split(run);
  const int need = steps * run.optim.batch;
  if (need > train.n)
    throw ConfigError("not enough training samples for " + std::to_string(steps) + " steps");
  train.n = need;  // run exactly the requested steps
  train.images.resize(static_cast<std::size_t>(need) * train.image_size * train.image_size *
                      train.channels);
  train.labels.resize(static_cast<std::size_t>(need));

  DistillConfig dc = run.distill;
  MetricsLog log;
  if (teacher)
    log = train_distill(student.model, teacher->model, train, nullptr, run.optim, dc);
  else {
    log = train_supervised(student.model, train, nullptr, run.optim);
  }

  OutputGuard guard;
  std::string csv = "step";
  for (const auto& label : log.grad_labels) csv += "," + label;
  csv += "\n";
  for (const auto& r : log.rows) {
    csv += std::to_string(r.step);
    for (double n : r.grad_norms) csv += "," + fmt(n);
    csv += "\n";
  }
  write_text(guard.claim(out_path), csv);
  guard.committed = true;
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

int cmd_report_params(const RunConfig& rc) {
  ParamReport r = param_report(rc.model, rc.plan(), rc.transforms);
  std::cout << param_report_json(r).dump(2) << "\n";
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"weight-multiplexed vision transformer compression pipeline"};
  app.require_subcommand(1);

  std::string config_path, teacher_path, student_init_path, checkpoint_path;
  std::string a_path, b_path, out_path = "cka.csv";
  int steps = 50;
  Overrides o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration JSON");
    add_override_flags(sub, o);
  };

  CLI::App* train_teacher = app.add_subcommand("train-teacher", "train the baseline model");
  add_common(train_teacher);

  CLI::App* compress = app.add_subcommand("compress", "phase 1: build the compact student");
  add_common(compress);
  compress->add_option("--teacher", teacher_path, "teacher checkpoint")->required();

  CLI::App* distill = app.add_subcommand("distill", "phase 2: train the student by distillation");
  add_common(distill);
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill->add_option("--student-init", student_init_path, "student checkpoint from compress")
      ->required();

  CLI::App* eval = app.add_subcommand("eval", "top-1 accuracy on the held-out split");
  eval->add_option("--checkpoint", checkpoint_path)->required();
  eval->add_option("--config", config_path, "override the embedded data settings");
  add_override_flags(eval, o);

  CLI::App* cka = app.add_subcommand("diagnose-cka", "per-layer CKA between two checkpoints");
  cka->add_option("--a", a_path)->required();
  cka->add_option("--b", b_path)->required();
  cka->add_option("--out", out_path);

  CLI::App* gradnorm =
      app.add_subcommand("diagnose-gradnorm", "per-group gradient norms over training steps");
  add_common(gradnorm);
  gradnorm->add_option("--checkpoint", checkpoint_path)->required();
  gradnorm->add_option("--teacher", teacher_path, "teacher checkpoint (omit for label-CE steps)");
  gradnorm->add_option("--steps", steps);
  gradnorm->add_option("--out", out_path)->required();

  CLI::App* report = app.add_subcommand("report-params", "parameter accounting as JSON");
  add_common(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train_teacher->parsed()) return cmd_train_teacher(effective_config(config_path, o));
    if (compress->parsed()) return cmd_compress(effective_config(config_path, o), teacher_path);
    if (distill->parsed())
      return cmd_distill(effective_config(config_path, o), teacher_path, student_init_path);
    if (eval->parsed()) return cmd_eval(checkpoint_path, config_path, o);
    if (cka->parsed()) return cmd_diagnose_cka(a_path, b_path, out_path);
    if (gradnorm->parsed())
      return cmd_diagnose_gradnorm(effective_config(config_path, o), checkpoint_path, teacher_path,
                                   steps, out_path);
    if (report->parsed()) return cmd_report_params(effective_config(config_path, o));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace muxvit
