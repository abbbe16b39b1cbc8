#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "mona/acr.hpp"
#include "mona/augment.hpp"
#include "mona/datakit.hpp"
#include "mona/nets.hpp"
#include "mona/optim.hpp"
#include "mona/pretrain.hpp"

namespace mona {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  ZipfSpec synth;
  std::string root;  // dataset directory; empty = generate synth in memory
  double label_ratio = 0.05;
  double val_frac = 0.1;
  double test_frac = 0.2;
};

struct OptimConfig {
  SgdConfig sgd;
  int batch_labeled = 3;
  int batch_unlabeled = 3;
};

struct TheoryConfig {
  int instances = 20;
  int n = 20;
  int steps = 10;
  double width = 0.07;
  double eps_rel = 1e-3;
  double noise = 0.1;
};

/// Every tunable of the pipeline; defaults follow the published setup.
struct TrainConfig {
  DataConfig data;
  NetSpec net;
  OptimConfig optim;
  double ema_momentum = 0.99;
  int pretrain_epochs = 100;
  PretrainOptions pretrain;
  int finetune_epochs = 200;
  bool finetune_from_scratch = false;
  FinetuneOptions finetune;
  AugmentParams augment;
  TheoryConfig theory;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string eval_split = "test";

  /// Options handed to the stage steps, with the shared augmentation ranges.
  PretrainOptions pretrain_options() const {
    PretrainOptions p = pretrain;
    p.augment = augment;
    return p;
  }
  FinetuneOptions finetune_options() const {
    FinetuneOptions f = finetune;
    f.augment = augment;
    return f;
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <class N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

template <class N, class Ref>
Field number_field(std::string key, Ref ref) {
  Field f;
  f.key = key;
  f.get = [ref](const TrainConfig& c) {
    const N v = ref(const_cast<TrainConfig&>(c));
    if constexpr (std::is_floating_point_v<N>) return format_double(v);
    else return std::to_string(v);
  };
  f.set = [ref, key](TrainConfig& c, const std::string& v) { ref(c) = parse_number<N>(key, v); };
  return f;
}

template <class Ref>
Field bool_field(std::string key, Ref ref) {
  Field f;
  f.key = key;
  f.get = [ref](const TrainConfig& c) { return std::string(ref(const_cast<TrainConfig&>(c)) ? "true" : "false"); };
  f.set = [ref, key](TrainConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); };
  return f;
}

template <class Ref>
Field string_field(std::string key, Ref ref) {
  Field f;
  f.key = key;
  f.get = [ref](const TrainConfig& c) { return std::string(ref(const_cast<TrainConfig&>(c))); };
  f.set = [ref](TrainConfig& c, const std::string& v) { ref(c) = v; };
  return f;
}

#define MONA_REF(expr) [](TrainConfig& c) -> auto& { return c.expr; }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> t;
    t.push_back(number_field<int>("data.foreground_classes", MONA_REF(data.synth.foreground_classes)));
    t.push_back(number_field<double>("data.exponent", MONA_REF(data.synth.exponent)));
    t.push_back(number_field<int>("data.height", MONA_REF(data.synth.height)));
    t.push_back(number_field<int>("data.width", MONA_REF(data.synth.width)));
    t.push_back(number_field<int>("data.num_patients", MONA_REF(data.synth.num_patients)));
    t.push_back(number_field<int>("data.slices_per_patient", MONA_REF(data.synth.slices_per_patient)));
    {
      Field f;
      f.key = "data.shape_family";
      f.get = [](const TrainConfig& c) { return to_string(c.data.synth.shape_family); };
      f.set = [](TrainConfig& c, const std::string& v) {
        try {
          c.data.synth.shape_family = parse_shape_family(v);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(std::string("config key 'data.shape_family': ") + e.what());
        }
      };
      t.push_back(f);
    }
    t.push_back(number_field<std::uint64_t>("data.synth_seed", MONA_REF(data.synth.seed)));
    t.push_back(number_field<double>("data.foreground_fraction", MONA_REF(data.synth.foreground_fraction)));
    t.push_back(number_field<double>("data.noise_sigma", MONA_REF(data.synth.noise_sigma)));
    t.push_back(number_field<double>("data.gamma_spread", MONA_REF(data.synth.patient_gamma_spread)));
    t.push_back(number_field<double>("data.bias_field", MONA_REF(data.synth.bias_field)));
    t.push_back(string_field("data.root", MONA_REF(data.root)));
    t.push_back(number_field<double>("data.label_ratio", MONA_REF(data.label_ratio)));
    t.push_back(number_field<double>("data.val_frac", MONA_REF(data.val_frac)));
    t.push_back(number_field<double>("data.test_frac", MONA_REF(data.test_frac)));

    t.push_back(number_field<int>("net.base_width", MONA_REF(net.base_width)));
    t.push_back(number_field<int>("net.levels", MONA_REF(net.levels)));
    t.push_back(number_field<int>("net.m_embed", MONA_REF(net.m_embed)));
    t.push_back(number_field<int>("net.m_rep", MONA_REF(net.m_rep)));
    t.push_back(number_field<int>("net.head_hidden", MONA_REF(net.head_hidden)));

    t.push_back(number_field<double>("optim.lr", MONA_REF(optim.sgd.lr)));
    t.push_back(number_field<double>("optim.momentum", MONA_REF(optim.sgd.momentum)));
    t.push_back(number_field<double>("optim.weight_decay", MONA_REF(optim.sgd.weight_decay)));
    t.push_back(number_field<int>("optim.lr_step", MONA_REF(optim.sgd.lr_step)));
    t.push_back(number_field<double>("optim.lr_decay", MONA_REF(optim.sgd.lr_decay)));
    t.push_back(number_field<double>("optim.clip_norm", MONA_REF(optim.sgd.clip_norm)));
    t.push_back(number_field<int>("optim.batch_labeled", MONA_REF(optim.batch_labeled)));
    t.push_back(number_field<int>("optim.batch_unlabeled", MONA_REF(optim.batch_unlabeled)));
    t.push_back(number_field<double>("ema.momentum", MONA_REF(ema_momentum)));

    t.push_back(number_field<int>("pretrain.epochs", MONA_REF(pretrain_epochs)));
    t.push_back(number_field<double>("pretrain.tau_theta", MONA_REF(pretrain.tau_student)));
    t.push_back(number_field<double>("pretrain.tau_xi", MONA_REF(pretrain.tau_teacher)));
    t.push_back(number_field<int>("pretrain.mined_views", MONA_REF(pretrain.mined_views)));
    t.push_back(number_field<int>("pretrain.local_crops", MONA_REF(pretrain.local_crops)));
    t.push_back(number_field<int>("pretrain.local_crop_size", MONA_REF(pretrain.local_crop_size)));
    t.push_back(bool_field("pretrain.instance_losses", MONA_REF(pretrain.instance_losses)));

    t.push_back(number_field<int>("finetune.epochs", MONA_REF(finetune_epochs)));
    t.push_back(bool_field("finetune.from_scratch", MONA_REF(finetune_from_scratch)));
    t.push_back(number_field<double>("finetune.tau", MONA_REF(finetune.tau)));
    t.push_back(number_field<double>("finetune.delta_theta", MONA_REF(finetune.delta_theta)));
    t.push_back(number_field<int>("finetune.n_q", MONA_REF(finetune.n_q)));
    t.push_back(number_field<int>("finetune.n_k", MONA_REF(finetune.n_k)));
    t.push_back(number_field<int>("finetune.knn", MONA_REF(finetune.knn)));
    t.push_back(number_field<int>("finetune.bank_capacity", MONA_REF(finetune.bank_capacity)));
    t.push_back(bool_field("finetune.bank_raw_pixels", MONA_REF(finetune.bank_raw_pixels)));
    t.push_back(number_field<int>("finetune.bank_pixels_per_step", MONA_REF(finetune.bank_pixels_per_step)));
    t.push_back(bool_field("finetune.strong_student", MONA_REF(finetune.strong_student)));
    t.push_back(number_field<double>("finetune.lambda_contrast", MONA_REF(finetune.lambda.contrast)));
    t.push_back(number_field<double>("finetune.lambda_eqv", MONA_REF(finetune.lambda.eqv)));
    t.push_back(number_field<double>("finetune.lambda_unsup", MONA_REF(finetune.lambda.unsup)));
    t.push_back(number_field<double>("finetune.lambda_nn", MONA_REF(finetune.lambda.nn)));

    t.push_back(number_field<double>("augment.rotation_deg", MONA_REF(augment.rotation_deg)));
    t.push_back(number_field<double>("augment.crop_scale_min", MONA_REF(augment.crop_scale_min)));
    t.push_back(number_field<double>("augment.hflip_prob", MONA_REF(augment.hflip_prob)));
    t.push_back(number_field<double>("augment.contrast", MONA_REF(augment.contrast)));
    t.push_back(number_field<double>("augment.brightness", MONA_REF(augment.brightness)));
    t.push_back(number_field<double>("augment.cutmix_prob", MONA_REF(augment.cutmix_prob)));
    t.push_back(number_field<double>("augment.cutmix_area_min", MONA_REF(augment.cutmix_area_min)));
    t.push_back(number_field<double>("augment.cutmix_area_max", MONA_REF(augment.cutmix_area_max)));
    t.push_back(number_field<double>("augment.warp_sigma", MONA_REF(augment.warp_sigma)));
    t.push_back(number_field<double>("augment.warp_alpha", MONA_REF(augment.warp_alpha)));

    t.push_back(number_field<int>("theory.instances", MONA_REF(theory.instances)));
    t.push_back(number_field<int>("theory.n", MONA_REF(theory.n)));
    t.push_back(number_field<int>("theory.steps", MONA_REF(theory.steps)));
    t.push_back(number_field<double>("theory.width", MONA_REF(theory.width)));
    t.push_back(number_field<double>("theory.eps_rel", MONA_REF(theory.eps_rel)));
    t.push_back(number_field<double>("theory.noise", MONA_REF(theory.noise)));

    t.push_back(number_field<std::uint64_t>("run.seed", MONA_REF(seed)));
    t.push_back(string_field("run.checkpoint", MONA_REF(checkpoint)));
    t.push_back(string_field("run.eval_split", MONA_REF(eval_split)));
    return t;
  }();
  return table;
}

#undef MONA_REF

}  // namespace detail

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      f.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const TrainConfig& c, const std::string& key) {
  for (const auto& f : detail::fields())
    if (f.key == key) return f.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

/// Throws ConfigError naming the first offending key.
inline void validate(const TrainConfig& c) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("config key '" + key + "': " + why);
  };
  auto in01 = [&](double v, const std::string& key) {
    if (!(v >= 0.0 && v <= 1.0)) fail(key, "must be in [0, 1] (got " + detail::format_double(v) + ")");
  };
  auto positive = [&](double v, const std::string& key) {
    if (!(v > 0.0)) fail(key, "must be > 0 (got " + detail::format_double(v) + ")");
  };
  auto at_least = [&](long long v, long long lo, const std::string& key) {
    if (v < lo) fail(key, "must be >= " + std::to_string(lo) + " (got " + std::to_string(v) + ")");
  };
  const auto& d = c.data;
  at_least(d.synth.foreground_classes, 2, "data.foreground_classes");
  if (!(d.synth.exponent >= 0.0)) fail("data.exponent", "must be >= 0");
  at_least(d.synth.height, 1, "data.height");
  at_least(d.synth.width, 1, "data.width");
  if (d.synth.height != d.synth.width) fail("data.width", "images must be square");
  at_least(d.synth.num_patients, 1, "data.num_patients");
  at_least(d.synth.slices_per_patient, 1, "data.slices_per_patient");
  if (!(d.synth.foreground_fraction > 0 && d.synth.foreground_fraction < 0.5)) fail("data.foreground_fraction", "must be in (0, 0.5)");
  if (!(d.label_ratio > 0 && d.label_ratio <= 1)) fail("data.label_ratio", "must be in (0, 1]");
  in01(d.val_frac, "data.val_frac");
  in01(d.test_frac, "data.test_frac");
  if (d.val_frac + d.test_frac >= 1) fail("data.test_frac", "val_frac + test_frac must be < 1");

  at_least(c.net.base_width, 1, "net.base_width");
  at_least(c.net.levels, 1, "net.levels");
  at_least(c.net.m_embed, 1, "net.m_embed");
  at_least(c.net.m_rep, 0, "net.m_rep");
  at_least(c.net.head_hidden, 1, "net.head_hidden");
  if (d.synth.height % (1 << (c.net.levels - 1)) != 0) fail("net.levels", "image size must be divisible by 2^(levels-1)");

  positive(c.optim.sgd.lr, "optim.lr");
  in01(c.optim.sgd.momentum, "optim.momentum");
  if (!(c.optim.sgd.weight_decay >= 0)) fail("optim.weight_decay", "must be >= 0");
  if (!(c.optim.sgd.clip_norm >= 0)) fail("optim.clip_norm", "must be >= 0");
  at_least(c.optim.batch_labeled, 1, "optim.batch_labeled");
  at_least(c.optim.batch_unlabeled, 0, "optim.batch_unlabeled");
  if (!(c.ema_momentum >= 0 && c.ema_momentum < 1)) fail("ema.momentum", "must be in [0, 1)");

  at_least(c.pretrain_epochs, 0, "pretrain.epochs");
  positive(c.pretrain.tau_student, "pretrain.tau_theta");
  positive(c.pretrain.tau_teacher, "pretrain.tau_xi");
  at_least(c.pretrain.mined_views, 2, "pretrain.mined_views");
  at_least(c.pretrain.local_crops, 1, "pretrain.local_crops");
  at_least(c.pretrain.local_crop_size, 1, "pretrain.local_crop_size");
  if (c.pretrain.local_crop_size > d.synth.height) fail("pretrain.local_crop_size", "larger than the image");

  at_least(c.finetune_epochs, 0, "finetune.epochs");
  positive(c.finetune.tau, "finetune.tau");
  in01(c.finetune.delta_theta, "finetune.delta_theta");
  at_least(c.finetune.n_q, 1, "finetune.n_q");
  at_least(c.finetune.n_k, 1, "finetune.n_k");
  at_least(c.finetune.knn, 1, "finetune.knn");
  at_least(c.finetune.bank_capacity, 1, "finetune.bank_capacity");
  at_least(c.finetune.bank_pixels_per_step, 1, "finetune.bank_pixels_per_step");
  const auto& l = c.finetune.lambda;
  if (!(l.contrast >= 0)) fail("finetune.lambda_contrast", "must be >= 0");
  if (!(l.eqv >= 0)) fail("finetune.lambda_eqv", "must be >= 0");
  if (!(l.unsup >= 0)) fail("finetune.lambda_unsup", "must be >= 0");
  if (!(l.nn >= 0)) fail("finetune.lambda_nn", "must be >= 0");

  const auto& a = c.augment;
  if (!(a.rotation_deg >= 0 && a.rotation_deg <= 180)) fail("augment.rotation_deg", "must be in [0, 180]");
  if (!(a.crop_scale_min > 0 && a.crop_scale_min <= 1)) fail("augment.crop_scale_min", "must be in (0, 1]");
  in01(a.hflip_prob, "augment.hflip_prob");
  if (!(a.contrast >= 0)) fail("augment.contrast", "must be >= 0");
  if (!(a.brightness >= 0)) fail("augment.brightness", "must be >= 0");
  in01(a.cutmix_prob, "augment.cutmix_prob");
  if (!(a.cutmix_area_min >= 0 && a.cutmix_area_min <= a.cutmix_area_max && a.cutmix_area_max <= 1)) {
    fail("augment.cutmix_area_max", "need 0 <= cutmix_area_min <= cutmix_area_max <= 1");
  }
  positive(a.warp_sigma, "augment.warp_sigma");
  if (!(a.warp_alpha >= 0)) fail("augment.warp_alpha", "must be >= 0");

  at_least(c.theory.instances, 1, "theory.instances");
  at_least(c.theory.n, 2, "theory.n");
  at_least(c.theory.steps, 2, "theory.steps");
  positive(c.theory.width, "theory.width");
  positive(c.theory.eps_rel, "theory.eps_rel");
  if (c.eval_split != "test" && c.eval_split != "val") fail("run.eval_split", "must be test or val");
}

/// One "key = value" line per field, in a fixed order.
inline std::string serialize(const TrainConfig& c) {
  std::ostringstream os;
  for (const auto& f : detail::fields()) os << f.key << " = " << f.get(c) << '\n';
  return os.str();
}

/// Applies "key = value" lines on top of `base`. '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline TrainConfig load_config_file(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// "key=value" override.
inline void apply_override(TrainConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
  set_config_value(c, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::uint64_t config_hash(const TrainConfig& c) { return fnv1a64(serialize(c)); }

/// Hash of the keys that fix the parameter layout and the data, used to match
/// checkpoints against a config.
inline std::uint64_t model_hash(const TrainConfig& c) {
  std::string s;
  for (const auto& f : detail::fields())
    if (f.key.rfind("data.", 0) == 0 || f.key.rfind("net.", 0) == 0) s += f.key + "=" + f.get(c) + "\n";
  return fnv1a64(s);
}

/// Network description implied by the config.
inline NetSpec net_spec(const TrainConfig& c) {
  NetSpec s = c.net;
  s.classes = c.data.synth.num_classes();
  s.image_size = c.data.synth.height;
  s.in_channels = 1;
  return s;
}

/// Desk-scale overrides used by the test suite and the example config.
inline TrainConfig toy_config() {
  TrainConfig c;
  c.data.synth.foreground_classes = 3;
  c.data.synth.height = c.data.synth.width = 64;
  c.data.synth.num_patients = 40;
  c.data.synth.slices_per_patient = 5;
  c.net.base_width = 8;
  c.net.levels = 3;
  c.net.m_embed = 32;
  c.net.head_hidden = 64;
  c.optim.batch_labeled = 2;
  c.optim.batch_unlabeled = 4;
  c.optim.sgd.clip_norm = 1.0;
  c.pretrain_epochs = 10;
  c.finetune_epochs = 30;
  c.pretrain.mined_views = 8;
  c.pretrain.local_crops = 4;
  c.pretrain.local_crop_size = 16;
  c.finetune.n_q = 64;
  c.finetune.n_k = 128;
  return c;
}

}  // namespace mona
