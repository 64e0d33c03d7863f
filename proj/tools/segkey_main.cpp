// segkey: dataset generation, keys, training, evaluation and attacks.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "segkey/attacks.hpp"
#include "segkey/checkpoint.hpp"
#include "segkey/error.hpp"
#include "segkey/keying.hpp"
#include "segkey/serialize.hpp"
#include "segkey/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segkey;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Seed for every random choice")->capture_default_str();
  app->add_option("--config", c.config, "JSON config file");
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
}

struct EncOptions {
  std::string method = "cp";
  int tap = 6;
  std::size_t block_size = 4;
  std::string key;
};

void add_enc(CLI::App* app, EncOptions& e, bool with_key) {
  app->add_option("--method", e.method, "shf (input) or cp (feature map)")
      ->check(CLI::IsMember({"shf", "cp"}))
      ->capture_default_str();
  app->add_option("--tap", e.tap, "CP tap point")->check(CLI::Range(1, 6))->capture_default_str();
  app->add_option("--block-size", e.block_size, "SHF block size M")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  if (with_key) app->add_option("--key", e.key, "Key file");
}

EncryptionSpec spec_of(const EncOptions& e) {
  return {parse_encryption_method(e.method), e.tap, e.block_size};
}

std::string read_config(const std::string& path) {
  return path.empty() ? std::string("{}") : read_file_bytes(path);
}

fs::path prepare_out(const std::string& dir) {
  fs::create_directories(dir);
  return fs::path(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path.string(), text);
}

// Records inputs and produced artifacts next to the outputs.
void write_manifest(const fs::path& out, const std::string& command, const Common& c,
                    json inputs, const std::vector<fs::path>& artifacts) {
  json j;
  j["tool"] = "segkey";
  j["tool_version"] = SEGKEY_VERSION;
  j["command"] = command;
  j["seed"] = c.seed;
  j["config"] = c.config.empty() ? json(nullptr) : json(c.config);
  j["inputs"] = std::move(inputs);
  j["artifacts"] = json::array();
  for (const auto& a : artifacts) {
    if (!fs::exists(a)) throw FormatError("artifact missing after run: " + a.string());
    j["artifacts"].push_back(a.string());
  }
  write_text(out / "run.json", j.dump(2) + "\n");
}

std::span<const SegSample> pick_split(const DatasetSplit& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  return s.dev;
}

// --- dataset ----------------------------------------------------------------

int cmd_dataset(const Common& c) {
  ToyDatasetParams p;
  const json cfg = json::parse(read_config(c.config));
  p.train = cfg.value("train", p.train);
  p.val = cfg.value("val", p.val);
  p.dev = cfg.value("dev", p.dev);
  p.size = cfg.value("size", p.size);
  p.num_classes = cfg.value("num_classes", p.num_classes);
  p.seed = c.seed;
  const fs::path out = prepare_out(c.out);
  write_dataset(out.string(), make_toy_split(p), p);
  write_manifest(out, "dataset", c, json::object(), {out / "manifest.json"});
  std::printf("wrote %zu/%zu/%zu samples to %s\n", p.train, p.val, p.dev, out.c_str());
  return kOk;
}

// --- keys -------------------------------------------------------------------

struct KeygenOptions {
  EncOptions enc;
  std::size_t length = 0;
  std::size_t channels = 3;
  std::size_t base_channels = 16;
  bool identity = false;
};

int cmd_keygen(const Common& c, const KeygenOptions& k) {
  const EncryptionSpec spec = spec_of(k.enc);
  std::size_t length = k.length;
  if (length == 0) {
    length = spec.method == EncryptionMethod::kCpTap
                 ? tap_channels_for(k.base_channels)[spec.tap - 1]
                 : k.channels * spec.block_size * spec.block_size;
  }
  const KeyMethod method =
      spec.method == EncryptionMethod::kCpTap ? KeyMethod::kCp : KeyMethod::kShf;
  const PermutationKey key =
      k.identity ? identity_key(length, method) : generate_permutation(length, c.seed, method);
  const fs::path out = prepare_out(c.out);
  save_key(key, (out / "key.json").string());
  write_manifest(out, "keygen", c, {{"method", k.enc.method}, {"length", length}},
                 {out / "key.json"});
  const KeySpace ks = keyspace(length, 1);
  std::printf("%s key of length %zu (key space 2^%.2f) -> %s\n", to_string(method).c_str(),
              length, ks.log2, (out / "key.json").c_str());
  return kOk;
}

int cmd_keyspace(std::size_t channels, std::size_t block) {
  const KeySpace ks = keyspace(channels, block);
  std::cout << "exact: " << ks.exact << "\n";
  std::printf("log2: %.2f\n", ks.log2);
  return kOk;
}

// --- training and evaluation ------------------------------------------------

struct TrainOptions {
  std::string data;
  EncOptions enc;
  std::string variant = "residual";
  std::size_t base_channels = 16;
};

int cmd_train(const Common& c, const TrainOptions& t) {
  const LoadedDataset ds = load_dataset(t.data);
  TrainConfig tc = train_config_from_json(read_config(c.config));
  tc.seed = c.seed;
  ModelConfig mc;
  mc.variant = parse_variant(t.variant);
  mc.base_channels = t.base_channels;
  mc.tap_channels = tap_channels_for(t.base_channels);
  mc.num_classes = ds.params.num_classes;
  mc.init_seed = c.seed;

  std::optional<Encryption> enc;
  if (!t.enc.key.empty()) enc = Encryption{spec_of(t.enc), load_key(t.enc.key)};
  const TrainResult r = train(Model(mc), ds.split, tc, enc ? &*enc : nullptr);

  const fs::path out = prepare_out(c.out);
  save_checkpoint(r.model, (out / "checkpoint.sgck").string());
  write_text(out / "history_iterations.csv", r.history.iterations_csv());
  write_text(out / "history_epochs.csv", r.history.epochs_csv());
  json inputs{{"data", t.data}, {"train_config", json::parse(train_config_to_json(tc))}};
  if (enc) {
    inputs["key"] = t.enc.key;
    inputs["method"] = t.enc.method;
    if (enc->spec.method == EncryptionMethod::kCpTap) {
      inputs["tap"] = t.enc.tap;
    } else {
      inputs["block_size"] = t.enc.block_size;
    }
  }
  write_manifest(out, "train", c, inputs,
                 {out / "checkpoint.sgck", out / "history_iterations.csv",
                  out / "history_epochs.csv"});
  const auto& sel = r.history.epochs[r.history.selected_epoch - 1];
  std::printf("selected epoch %zu (val loss %.6f) -> %s\n", sel.epoch, sel.val_loss,
              (out / "checkpoint.sgck").c_str());
  return kOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::string data;
  std::string split = "dev";
  std::string mode = "correct";
  EncOptions enc;
};

int cmd_eval(const Common& c, const EvalOptions& e) {
  const Model model = load_checkpoint(e.checkpoint);
  const LoadedDataset ds = load_dataset(e.data);
  const KeyCondition cond = parse_key_condition(e.mode);
  EvalMode mode = EvalMode::no_enc();
  if (cond != KeyCondition::kNoEnc) {
    const EncryptionSpec spec = spec_of(e.enc);
    PermutationKey key;
    if (!e.enc.key.empty()) {
      key = load_key(e.enc.key);
    } else if (cond == KeyCondition::kWrongKey) {
      const KeyMethod m =
          spec.method == EncryptionMethod::kCpTap ? KeyMethod::kCp : KeyMethod::kShf;
      key = generate_permutation(key_length_for(model, spec), c.seed, m);
    } else {
      throw UsageError("--mode correct needs --key");
    }
    mode = cond == KeyCondition::kCorrect ? EvalMode::correct_key({spec, key})
                                          : EvalMode::wrong_key({spec, key});
  }
  const EvalReport r = evaluate(model, pick_split(ds.split, e.split), mode);
  const fs::path out = prepare_out(c.out);
  json report = json::parse(r.to_json());
  report["checkpoint"] = fs::absolute(e.checkpoint).lexically_normal().string();
  write_text(out / "eval.json", report.dump(2) + "\n");
  write_text(out / "eval.csv", r.to_csv());
  write_manifest(out, "eval", c,
                 {{"checkpoint", e.checkpoint}, {"data", e.data}, {"split", e.split},
                  {"mode", e.mode}, {"key", e.enc.key.empty() ? json(nullptr) : json(e.enc.key)}},
                 {out / "eval.json", out / "eval.csv"});
  std::printf("%s mIoU %.4f over %zu samples\n", e.mode.c_str(), r.iou.mean, r.samples);
  return kOk;
}

// --- attacks ----------------------------------------------------------------

struct AttackOptions {
  std::string checkpoint;
  std::string data;
  EncOptions enc;
  std::size_t trials = 20;
  double fraction = 0.05;
};

int finish_attack(const Common& c, const AttackReport& r, const std::string& command,
                  json inputs) {
  const fs::path out = prepare_out(c.out);
  write_text(out / "attack.json", r.to_json());
  write_text(out / "trials.csv", r.trials_csv());
  write_manifest(out, command, c, std::move(inputs), {out / "attack.json", out / "trials.csv"});
  std::printf("%s: median mIoU %.4f over %zu trial(s)\n", r.kind.c_str(), r.stats.median,
              r.trials);
  return kOk;
}

int cmd_random_key(const Common& c, const AttackOptions& a) {
  const Model model = load_checkpoint(a.checkpoint);
  const LoadedDataset ds = load_dataset(a.data);
  std::optional<PermutationKey> exclude;
  if (!a.enc.key.empty()) exclude = load_key(a.enc.key);
  const AttackReport r = random_key_attack(model, spec_of(a.enc), ds.split.dev, a.trials, c.seed,
                                           exclude ? &*exclude : nullptr);
  return finish_attack(c, r, "attack random-key",
                       {{"checkpoint", a.checkpoint}, {"data", a.data},
                        {"method", a.enc.method}, {"tap", a.enc.tap}});
}

int cmd_finetune(const Common& c, const AttackOptions& a) {
  const Model model = load_checkpoint(a.checkpoint);
  const LoadedDataset ds = load_dataset(a.data);
  TrainConfig tc = default_finetune_config();
  if (!c.config.empty()) {
    json merged = json::parse(train_config_to_json(tc));
    merged.update(json::parse(read_config(c.config)));
    tc = train_config_from_json(merged.dump());
  }
  tc.seed = c.seed;
  const AttackReport r = fine_tune_attack(model, ds.split, a.fraction, tc);
  return finish_attack(c, r, "attack finetune",
                       {{"checkpoint", a.checkpoint}, {"data", a.data}, {"fraction", a.fraction}});
}

// --- report -----------------------------------------------------------------

std::string fmt_miou(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
  static const char* kColumns[] = {"correct", "no-enc", "wrong-key"};
  struct Row {
    std::string label = "none";
    std::map<std::string, double> cols;
  };
  // Reports of one checkpoint share a row; the keyed ones name it.
  std::map<std::string, Row> by_checkpoint;
  for (const std::string& path : inputs) {
    try {
      const json j = json::parse(read_file_bytes(path));
      const std::string mode = j.at("mode").get<std::string>();
      parse_key_condition(mode);
      Row& row = by_checkpoint[j.value("checkpoint", path)];
      if (!j.at("method").is_null()) {
        row.label = j.at("method").get<std::string>() == "cp"
                        ? "cp-tap" + std::to_string(j.at("tap").get<int>())
                        : "shf-m" + std::to_string(j.at("block_size").get<int>());
      }
      row.cols[mode] = j.at("mean_iou").get<double>();
    } catch (const json::exception& e) {
      throw FormatError(path + ": not an eval report (" + e.what() + ")");
    }
  }
  std::vector<Row> rows;
  for (auto& [ckpt, row] : by_checkpoint) rows.push_back(std::move(row));
  std::stable_sort(rows.begin(), rows.end(),
                   [](const Row& a, const Row& b) { return a.label < b.label; });

  std::ostringstream csv;
  csv << "config,correct,no-enc,wrong-key\n";
  for (const Row& row : rows) {
    csv << row.label;
    for (const char* col : kColumns) {
      csv << ',';
      if (auto it = row.cols.find(col); it != row.cols.end()) csv << fmt_miou(it->second);
    }
    csv << '\n';
  }
  const fs::path out = prepare_out(c.out);
  write_text(out / "report.csv", csv.str());
  write_manifest(out, "report", c, json(inputs), {out / "report.csv"});
  std::cout << csv.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Keyed feature-map encryption for segmentation models"};
  app.set_version_flag("--version", std::string("segkey ") + SEGKEY_VERSION);
  app.require_subcommand(1);

  Common common;

  auto* dataset = app.add_subcommand("dataset", "Generate the toy shapes dataset");
  add_common(dataset, common);

  KeygenOptions keygen;
  auto* keygen_cmd = app.add_subcommand("keygen", "Generate a secret permutation key");
  add_common(keygen_cmd, common);
  add_enc(keygen_cmd, keygen.enc, false);
  keygen_cmd->add_option("--length", keygen.length, "Explicit key length");
  keygen_cmd->add_option("--channels", keygen.channels, "Image channels (SHF)")
      ->capture_default_str();
  keygen_cmd->add_option("--base-channels", keygen.base_channels, "Model width (CP)")
      ->capture_default_str();
  keygen_cmd->add_flag("--identity", keygen.identity, "Identity permutation (no-op key)");

  std::size_t ks_channels = 3, ks_block = 1;
  auto* keyspace_cmd = app.add_subcommand("keyspace", "Print the key-space size (c*M*M)!");
  keyspace_cmd->add_option("--channels,-c", ks_channels, "Channels c")->capture_default_str();
  keyspace_cmd->add_option("--block-size,-M", ks_block, "Block size M")->capture_default_str();

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train a model, optionally with a key");
  add_common(train_cmd, common);
  add_enc(train_cmd, train_opts.enc, true);
  train_cmd->add_option("--data", train_opts.data, "Dataset directory")->required();
  train_cmd->add_option("--variant", train_opts.variant, "residual or plain")
      ->check(CLI::IsMember({"residual", "plain"}))
      ->capture_default_str();
  train_cmd->add_option("--base-channels", train_opts.base_channels, "Model width")
      ->capture_default_str();

  EvalOptions eval_opts;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint under a key condition");
  add_common(eval_cmd, common);
  add_enc(eval_cmd, eval_opts.enc, true);
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_opts.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", eval_opts.split, "train, val or dev")
      ->check(CLI::IsMember({"train", "val", "dev"}))
      ->capture_default_str();
  eval_cmd->add_option("--mode", eval_opts.mode, "correct, no-enc or wrong-key")
      ->check(CLI::IsMember({"correct", "no-enc", "wrong-key"}))
      ->capture_default_str();

  AttackOptions attack_opts;
  auto* attack = app.add_subcommand("attack", "Attacks on a protected model");
  attack->require_subcommand(1);
  auto* random_cmd = attack->add_subcommand("random-key", "Evaluate random wrong keys");
  add_common(random_cmd, common);
  add_enc(random_cmd, attack_opts.enc, true);
  random_cmd->add_option("--checkpoint", attack_opts.checkpoint, "Checkpoint file")->required();
  random_cmd->add_option("--data", attack_opts.data, "Dataset directory")->required();
  random_cmd->add_option("--trials", attack_opts.trials, "Number of keys")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  auto* finetune_cmd = attack->add_subcommand("finetune", "Retrain without the key");
  add_common(finetune_cmd, common);
  finetune_cmd->add_option("--checkpoint", attack_opts.checkpoint, "Checkpoint file")
      ->required();
  finetune_cmd->add_option("--data", attack_opts.data, "Dataset directory")->required();
  finetune_cmd->add_option("--fraction", attack_opts.fraction, "Share of the train split")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();

  std::vector<std::string> report_inputs;
  auto* report_cmd = app.add_subcommand("report", "Tabulate eval reports");
  add_common(report_cmd, common);
  report_cmd->add_option("reports", report_inputs, "eval.json files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*dataset) return cmd_dataset(common);
    if (*keygen_cmd) return cmd_keygen(common, keygen);
    if (*keyspace_cmd) return cmd_keyspace(ks_channels, ks_block);
    if (*train_cmd) return cmd_train(common, train_opts);
    if (*eval_cmd) return cmd_eval(common, eval_opts);
    if (*random_cmd) return cmd_random_key(common, attack_opts);
    if (*finetune_cmd) return cmd_finetune(common, attack_opts);
    if (*report_cmd) return cmd_report(common, report_inputs);
  } catch (const UsageError& e) {
    std::cerr << "segkey: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "segkey: numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const json::exception& e) {
    std::cerr << "segkey: bad JSON: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "segkey: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
