#include "pldet/config.hpp"

#include <fstream>
#include <set>

#include "json.hpp"
#include "pldet/errors.hpp"

namespace pldet {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& context) {
  if (!j.is_object()) throw ValueError("config: '" + context + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ValueError("config: unknown key '" + key + "' in " + context);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

// ---- scene ----

ordered_json scene_to_json(const SceneSpec& s) {
  return {{"image_size", s.image_size},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"num_classes", s.num_classes},
          {"min_extent", s.min_extent},
          {"max_extent", s.max_extent},
          {"background_noise", s.background_noise},
          {"max_overlap_iou", s.max_overlap_iou},
          {"placement_retries", s.placement_retries}};
}

SceneSpec scene_from_json(const json& j) {
  check_keys(j,
             {"image_size", "min_objects", "max_objects", "num_classes", "min_extent",
              "max_extent", "background_noise", "max_overlap_iou", "placement_retries"},
             "scene");
  SceneSpec s;
  read(j, "image_size", s.image_size);
  read(j, "min_objects", s.min_objects);
  read(j, "max_objects", s.max_objects);
  read(j, "num_classes", s.num_classes);
  read(j, "min_extent", s.min_extent);
  read(j, "max_extent", s.max_extent);
  read(j, "background_noise", s.background_noise);
  read(j, "max_overlap_iou", s.max_overlap_iou);
  read(j, "placement_retries", s.placement_retries);
  return s;
}

// ---- detector ----

ordered_json detector_to_json(const DetectorConfig& c) {
  return {{"image_size", c.image_size},
          {"num_fg_classes", c.num_fg_classes},
          {"stride", c.stride},
          {"backbone_channels", c.backbone_channels},
          {"anchor_scales", c.anchor_scales},
          {"roi_size", c.roi_size},
          {"proposal_dim", c.proposal_dim},
          {"top_n_train", c.top_n_train},
          {"top_n_infer", c.top_n_infer},
          {"delta_clamp", c.delta_clamp}};
}

DetectorConfig detector_from_json(const json& j) {
  check_keys(j,
             {"image_size", "num_fg_classes", "stride", "backbone_channels", "anchor_scales",
              "roi_size", "proposal_dim", "top_n_train", "top_n_infer", "delta_clamp"},
             "detector");
  DetectorConfig c;
  read(j, "image_size", c.image_size);
  read(j, "num_fg_classes", c.num_fg_classes);
  read(j, "stride", c.stride);
  read(j, "backbone_channels", c.backbone_channels);
  read(j, "anchor_scales", c.anchor_scales);
  read(j, "roi_size", c.roi_size);
  read(j, "proposal_dim", c.proposal_dim);
  read(j, "top_n_train", c.top_n_train);
  read(j, "top_n_infer", c.top_n_infer);
  read(j, "delta_clamp", c.delta_clamp);
  return c;
}

// ---- sspl ----

ordered_json sspl_to_json(const SsplConfig& c, bool include_proposal_dim = false) {
  ordered_json j = {{"hidden_loc", c.hidden_loc}, {"embed_dim", c.embed_dim}};
  if (include_proposal_dim) j["proposal_dim"] = c.proposal_dim;
  return j;
}

SsplConfig sspl_from_json(const json& j) {
  check_keys(j, {"hidden_loc", "embed_dim"}, "sspl");
  SsplConfig c;
  read(j, "hidden_loc", c.hidden_loc);
  read(j, "embed_dim", c.embed_dim);
  return c;
}

// ---- noise ----

ordered_json noise_to_json(const NoiseSpec& n) {
  ordered_json j;
  j["kind"] = n.kind == NoiseKind::kDropBlock ? "dropblock" : "spatial_dropout";
  if (n.kind == NoiseKind::kDropBlock) {
    j["block_size"] = n.block_size;
    j["drop_prob"] = n.drop_prob;
  } else {
    j["channel_ratio"] = n.channel_ratio;
  }
  j["rescale"] = n.rescale;
  return j;
}

NoiseSpec noise_from_json(const json& j) {
  check_keys(j, {"kind", "block_size", "drop_prob", "channel_ratio", "rescale"}, "noise spec");
  NoiseSpec n;
  std::string kind = j.at("kind").get<std::string>();
  if (kind == "dropblock")
    n.kind = NoiseKind::kDropBlock;
  else if (kind == "spatial_dropout")
    n.kind = NoiseKind::kSpatialDropout;
  else
    throw ValueError("config: unknown noise kind '" + kind + "'");
  read(j, "block_size", n.block_size);
  read(j, "drop_prob", n.drop_prob);
  read(j, "channel_ratio", n.channel_ratio);
  read(j, "rescale", n.rescale);
  return n;
}

// ---- hyperparams ----

const std::set<std::string> kHyperKeys = {
    "lambda_self_loc", "lambda_self_cont", "lambda_cons_cls", "lambda_cons_reg",
    "tau", "k_variants", "noise", "base_lr", "momentum", "weight_decay",
    "warmup_iters", "milestones", "warm_epochs", "epochs", "steps_per_epoch",
    "score_thresh", "positive_iou", "fswa_last_epochs"};

ordered_json hyper_to_json(const HyperParams& hp, bool include_derived) {
  ordered_json j;
  j["lambda_self_loc"] = hp.lambda_self_loc;
  j["lambda_self_cont"] = hp.lambda_self_cont;
  j["lambda_cons_cls"] = hp.lambda_cons_cls;
  j["lambda_cons_reg"] = hp.lambda_cons_reg;
  j["tau"] = hp.tau;
  j["k_variants"] = hp.k_variants;
  auto noise = ordered_json::array();
  for (const auto& n : hp.noise_specs) noise.push_back(noise_to_json(n));
  j["noise"] = noise;
  j["base_lr"] = hp.base_lr;
  j["momentum"] = hp.momentum;
  j["weight_decay"] = hp.weight_decay;
  j["warmup_iters"] = hp.warmup_iters;
  j["milestones"] = hp.milestones;
  j["warm_epochs"] = hp.warm_epochs;
  j["epochs"] = hp.epochs;
  j["steps_per_epoch"] = hp.steps_per_epoch;
  j["score_thresh"] = hp.score_thresh;
  j["positive_iou"] = hp.positive_iou;
  j["fswa_last_epochs"] = hp.fswa_last_epochs;
  if (include_derived) {
    j["variant"] = hp.variant == ObjectiveVariant::kEq3 ? "eq3" : "eq2";
    j["use_fswa"] = hp.use_fswa;
  }
  return j;
}

HyperParams hyper_from_json(const json& j, bool allow_derived) {
  auto allowed = kHyperKeys;
  if (allow_derived) {
    allowed.insert("variant");
    allowed.insert("use_fswa");
  }
  check_keys(j, allowed, "hyperparams");
  HyperParams hp;
  read(j, "lambda_self_loc", hp.lambda_self_loc);
  read(j, "lambda_self_cont", hp.lambda_self_cont);
  read(j, "lambda_cons_cls", hp.lambda_cons_cls);
  read(j, "lambda_cons_reg", hp.lambda_cons_reg);
  read(j, "tau", hp.tau);
  read(j, "k_variants", hp.k_variants);
  if (j.contains("noise")) {
    hp.noise_specs.clear();
    for (const auto& n : j.at("noise")) hp.noise_specs.push_back(noise_from_json(n));
  }
  read(j, "base_lr", hp.base_lr);
  read(j, "momentum", hp.momentum);
  read(j, "weight_decay", hp.weight_decay);
  read(j, "warmup_iters", hp.warmup_iters);
  read(j, "milestones", hp.milestones);
  read(j, "warm_epochs", hp.warm_epochs);
  read(j, "epochs", hp.epochs);
  read(j, "steps_per_epoch", hp.steps_per_epoch);
  read(j, "score_thresh", hp.score_thresh);
  read(j, "positive_iou", hp.positive_iou);
  read(j, "fswa_last_epochs", hp.fswa_last_epochs);
  if (allow_derived) {
    if (j.contains("variant")) {
      std::string v = j.at("variant").get<std::string>();
      if (v == "eq2")
        hp.variant = ObjectiveVariant::kEq2;
      else if (v == "eq3")
        hp.variant = ObjectiveVariant::kEq3;
      else
        throw ValueError("config: unknown objective variant '" + v + "'");
    }
    read(j, "use_fswa", hp.use_fswa);
  }
  return hp;
}

// ---- toggles / eval / distill ----

ordered_json toggles_to_json(const LossToggles& t) {
  return {{"self_loc", t.self_loc},   {"self_cont", t.self_cont},
          {"cons_cls", t.cons_cls},   {"cons_reg", t.cons_reg},
          {"pl_on_labeled", t.pl_on_labeled}, {"fswa", t.fswa},
          {"distill", t.distill}};
}

LossToggles toggles_from_json(const json& j) {
  check_keys(j, {"self_loc", "self_cont", "cons_cls", "cons_reg", "pl_on_labeled", "fswa",
                 "distill"},
             "toggles");
  LossToggles t;
  read(j, "self_loc", t.self_loc);
  read(j, "self_cont", t.self_cont);
  read(j, "cons_cls", t.cons_cls);
  read(j, "cons_reg", t.cons_reg);
  read(j, "pl_on_labeled", t.pl_on_labeled);
  read(j, "fswa", t.fswa);
  read(j, "distill", t.distill);
  return t;
}

}  // namespace

void validate(const ExperimentConfig& cfg) {
  validate(cfg.scene);
  validate(effective_hyperparams(cfg));
  if (cfg.n_labeled < 1) throw ValueError("config: need at least one labeled example");
  if (cfg.n_unlabeled < 0) throw ValueError("config: negative unlabeled pool size");
  if (cfg.n_test < 1) throw ValueError("config: need a labeled test pool");
  if (cfg.detector.image_size != cfg.scene.image_size)
    throw ValueError("config: detector image_size must match the scene spec");
  if (cfg.detector.num_fg_classes != cfg.scene.num_classes)
    throw ValueError("config: detector class count must match the scene spec");
  if (cfg.detector.image_size % cfg.detector.stride != 0)
    throw ValueError("config: image size must be divisible by the stride");
  if (cfg.distill.score_thresh <= 0 || cfg.distill.score_thresh > 1)
    throw ValueError("config: distill score threshold out of range");
}

HyperParams effective_hyperparams(const ExperimentConfig& cfg) {
  HyperParams hp = cfg.hyper;
  if (!cfg.toggles.self_loc) hp.lambda_self_loc = 0.0;
  if (!cfg.toggles.self_cont) hp.lambda_self_cont = 0.0;
  if (!cfg.toggles.cons_cls) hp.lambda_cons_cls = 0.0;
  if (!cfg.toggles.cons_reg) hp.lambda_cons_reg = 0.0;
  hp.variant = cfg.toggles.pl_on_labeled ? ObjectiveVariant::kEq3 : ObjectiveVariant::kEq2;
  hp.use_fswa = cfg.toggles.fswa;
  return hp;
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValueError(std::string("config: JSON parse error: ") + e.what());
  }
  check_keys(j,
             {"scene", "pools", "detector", "sspl", "hyperparams", "toggles", "eval", "distill",
              "seed", "out_dir"},
             "config root");
  ExperimentConfig cfg;
  try {
    if (j.contains("scene")) cfg.scene = scene_from_json(j.at("scene"));
    if (j.contains("pools")) {
      check_keys(j.at("pools"), {"labeled", "unlabeled", "test"}, "pools");
      read(j.at("pools"), "labeled", cfg.n_labeled);
      read(j.at("pools"), "unlabeled", cfg.n_unlabeled);
      read(j.at("pools"), "test", cfg.n_test);
    }
    if (j.contains("detector")) cfg.detector = detector_from_json(j.at("detector"));
    if (j.contains("sspl")) cfg.sspl = sspl_from_json(j.at("sspl"));
    if (j.contains("hyperparams")) cfg.hyper = hyper_from_json(j.at("hyperparams"), false);
    if (j.contains("toggles")) cfg.toggles = toggles_from_json(j.at("toggles"));
    if (j.contains("eval")) {
      check_keys(j.at("eval"), {"score_thresh", "nms_iou"}, "eval");
      read(j.at("eval"), "score_thresh", cfg.eval.score_thresh);
      read(j.at("eval"), "nms_iou", cfg.eval.nms_iou);
    }
    if (j.contains("distill")) {
      check_keys(j.at("distill"), {"score_thresh", "nms_iou"}, "distill");
      read(j.at("distill"), "score_thresh", cfg.distill.score_thresh);
      read(j.at("distill"), "nms_iou", cfg.distill.nms_iou);
    }
    read(j, "seed", cfg.seed);
    read(j, "out_dir", cfg.out_dir);
  } catch (const json::exception& e) {
    throw ValueError(std::string("config: ") + e.what());
  }
  cfg.sspl.proposal_dim = cfg.detector.proposal_dim;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValueError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_json_text(text);
}

std::string config_to_json_text(const ExperimentConfig& cfg) {
  ordered_json j;
  j["scene"] = scene_to_json(cfg.scene);
  j["pools"] = {{"labeled", cfg.n_labeled}, {"unlabeled", cfg.n_unlabeled}, {"test", cfg.n_test}};
  j["detector"] = detector_to_json(cfg.detector);
  j["sspl"] = sspl_to_json(cfg.sspl);
  j["hyperparams"] = hyper_to_json(cfg.hyper, false);
  j["toggles"] = toggles_to_json(cfg.toggles);
  j["eval"] = {{"score_thresh", cfg.eval.score_thresh}, {"nms_iou", cfg.eval.nms_iou}};
  j["distill"] = {{"score_thresh", cfg.distill.score_thresh}, {"nms_iou", cfg.distill.nms_iou}};
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  return j.dump(2);
}

std::string hyperparams_to_json_text(const HyperParams& hp) {
  return hyper_to_json(hp, true).dump();
}

HyperParams hyperparams_from_json_text(const std::string& text) {
  return hyper_from_json(json::parse(text), true);
}

std::string detector_config_to_json_text(const DetectorConfig& cfg) {
  return detector_to_json(cfg).dump();
}

DetectorConfig detector_config_from_json_text(const std::string& text) {
  return detector_from_json(json::parse(text));
}

std::string sspl_config_to_json_text(const SsplConfig& cfg) {
  return sspl_to_json(cfg, true).dump();
}

SsplConfig sspl_config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  check_keys(j, {"hidden_loc", "embed_dim", "proposal_dim"}, "sspl");
  SsplConfig c;
  read(j, "hidden_loc", c.hidden_loc);
  read(j, "embed_dim", c.embed_dim);
  read(j, "proposal_dim", c.proposal_dim);
  return c;
}

}  // namespace pldet
