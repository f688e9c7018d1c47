#include "muxvit/run_config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace muxvit {

namespace {

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <class T>
void get_if(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  transforms.validate();
  distill.validate();
  optim.validate();
  if (data.num_train <= 0 || data.num_test <= 0) throw ConfigError("dataset sizes must be positive");
  data.spec().validate();
  if (model.image_size != data.image_size)
    throw ConfigError("model image_size " + std::to_string(model.image_size) +
                      " differs from data image_size " + std::to_string(data.image_size));
  if (model.num_classes != data.classes)
    throw ConfigError("model num_classes " + std::to_string(model.num_classes) +
                      " differs from data classes " + std::to_string(data.classes));
  plan();  // throws on an invalid sharing setting
}

RunConfig default_run_config() {
  RunConfig rc;
  rc.model.stages = {StageConfig{8, 64, 4, 128, false}};
  rc.model.image_size = 32;
  rc.model.patch_size = 4;
  rc.model.in_channels = 1;
  rc.model.num_classes = 10;
  return rc;
}

Json run_config_to_json(const RunConfig& rc) {
  Json j;
  Json stages = Json::array();
  for (const auto& st : rc.model.stages)
    stages.push_back(Json{{"layers", st.num_layers},
                          {"dim", st.embed_dim},
                          {"heads", st.num_heads},
                          {"mlp_dim", st.mlp_dim},
                          {"merge", st.merge_tokens}});
  j["model"] = Json{{"image_size", rc.model.image_size},
                    {"patch_size", rc.model.patch_size},
                    {"in_channels", rc.model.in_channels},
                    {"num_classes", rc.model.num_classes},
                    {"drop_path_rate", rc.model.drop_path_rate},
                    {"stages", stages}};
  j["sharing"] = Json{{"mode", share_mode_name(rc.sharing.mode)}, {"k", rc.sharing.k}};
  j["transforms"] =
      Json{{"msa", rc.transforms.msa}, {"mlp", rc.transforms.mlp}, {"kernel", rc.transforms.kernel}};
  j["distill"] = Json{{"temperature", rc.distill.temperature},
                      {"beta", rc.distill.beta},
                      {"gamma", rc.distill.gamma},
                      {"gt_weight", rc.distill.gt_weight},
                      {"hetero_teacher", rc.distill.hetero_teacher}};
  j["optim"] = Json{{"lr", rc.optim.lr},
                    {"lr_min", rc.optim.lr_min},
                    {"weight_decay", rc.optim.weight_decay},
                    {"beta1", rc.optim.beta1},
                    {"beta2", rc.optim.beta2},
                    {"eps", rc.optim.eps},
                    {"epochs", rc.optim.epochs},
                    {"batch", rc.optim.batch},
                    {"schedule", rc.optim.schedule},
                    {"seed", rc.optim.seed}};
  j["data"] = Json{{"seed", rc.data.seed},
                   {"num_train", rc.data.num_train},
                   {"num_test", rc.data.num_test},
                   {"image_size", rc.data.image_size},
                   {"classes", rc.data.classes},
                   {"noise_sigma", rc.data.noise_sigma}};
  j["output"] = Json{{"dir", rc.output.dir}};
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  check_keys(j, {"model", "sharing", "transforms", "distill", "optim", "data", "output"},
             "run config");
  RunConfig rc = default_run_config();
  if (j.contains("model")) {
    const Json& m = j.at("model");
    check_keys(m, {"image_size", "patch_size", "in_channels", "num_classes", "drop_path_rate",
                   "stages"},
               "model");
    get_if(m, "image_size", rc.model.image_size);
    get_if(m, "patch_size", rc.model.patch_size);
    get_if(m, "in_channels", rc.model.in_channels);
    get_if(m, "num_classes", rc.model.num_classes);
    get_if(m, "drop_path_rate", rc.model.drop_path_rate);
    if (m.contains("stages")) {
      rc.model.stages.clear();
      for (const Json& sj : m.at("stages")) {
        check_keys(sj, {"layers", "dim", "heads", "mlp_dim", "merge"}, "stage");
        StageConfig st;
        get_if(sj, "layers", st.num_layers);
        get_if(sj, "dim", st.embed_dim);
        get_if(sj, "heads", st.num_heads);
        get_if(sj, "mlp_dim", st.mlp_dim);
        get_if(sj, "merge", st.merge_tokens);
        rc.model.stages.push_back(st);
      }
    }
  }
  if (j.contains("sharing")) {
    const Json& s = j.at("sharing");
    check_keys(s, {"mode", "k"}, "sharing");
    if (s.contains("mode")) rc.sharing.mode = share_mode_from(s.at("mode").get<std::string>());
    get_if(s, "k", rc.sharing.k);
  }
  if (j.contains("transforms")) {
    const Json& t = j.at("transforms");
    check_keys(t, {"msa", "mlp", "kernel"}, "transforms");
    get_if(t, "msa", rc.transforms.msa);
    get_if(t, "mlp", rc.transforms.mlp);
    get_if(t, "kernel", rc.transforms.kernel);
  }
  if (j.contains("distill")) {
    const Json& d = j.at("distill");
    check_keys(d, {"temperature", "beta", "gamma", "gt_weight", "hetero_teacher"}, "distill");
    get_if(d, "temperature", rc.distill.temperature);
    get_if(d, "beta", rc.distill.beta);
    get_if(d, "gamma", rc.distill.gamma);
    get_if(d, "gt_weight", rc.distill.gt_weight);
    get_if(d, "hetero_teacher", rc.distill.hetero_teacher);
  }
  if (j.contains("optim")) {
    const Json& o = j.at("optim");
    check_keys(o, {"lr", "lr_min", "weight_decay", "beta1", "beta2", "eps", "epochs", "batch",
                   "schedule", "seed"},
               "optim");
    get_if(o, "lr", rc.optim.lr);
    get_if(o, "lr_min", rc.optim.lr_min);
    get_if(o, "weight_decay", rc.optim.weight_decay);
    get_if(o, "beta1", rc.optim.beta1);
    get_if(o, "beta2", rc.optim.beta2);
    get_if(o, "eps", rc.optim.eps);
    get_if(o, "epochs", rc.optim.epochs);
    get_if(o, "batch", rc.optim.batch);
    get_if(o, "schedule", rc.optim.schedule);
    get_if(o, "seed", rc.optim.seed);
  }
  if (j.contains("data")) {
    const Json& d = j.at("data");
    check_keys(d, {"seed", "num_train", "num_test", "image_size", "classes", "noise_sigma"},
               "data");
    get_if(d, "seed", rc.data.seed);
    get_if(d, "num_train", rc.data.num_train);
    get_if(d, "num_test", rc.data.num_test);
    get_if(d, "image_size", rc.data.image_size);
    get_if(d, "classes", rc.data.classes);
    get_if(d, "noise_sigma", rc.data.noise_sigma);
  }
  if (j.contains("output")) {
    const Json& o = j.at("output");
    check_keys(o, {"dir"}, "output");
    get_if(o, "dir", rc.output.dir);
  }
  return rc;
}

Json sharing_plan_to_json(const SharingPlan& plan) {
  Json groups = Json::array();
  for (const auto& g : plan.groups)
    groups.push_back(Json{{"stage", g.stage}, {"first_layer", g.first_layer}, {"count", g.count}});
  return Json{{"mode", share_mode_name(plan.mode)}, {"k", plan.k}, {"groups", groups}};
}

SharingPlan sharing_plan_from_json(const Json& j) {
  check_keys(j, {"mode", "k", "groups"}, "sharing plan");
  SharingPlan plan;
  plan.mode = share_mode_from(j.at("mode").get<std::string>());
  plan.k = j.at("k").get<int>();
  for (const Json& gj : j.at("groups")) {
    check_keys(gj, {"stage", "first_layer", "count"}, "sharing group");
    plan.groups.push_back({gj.at("stage").get<int>(), gj.at("first_layer").get<int>(),
                           gj.at("count").get<int>()});
  }
  return plan;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  Json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& rc, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write config file " + path);
  out << run_config_to_json(rc).dump(2) << "\n";
}

}  // namespace muxvit
