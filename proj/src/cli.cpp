// Copyright 2026 The capdetect Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "capdetect/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "capdetect/checkpoint.hpp"
#include "capdetect/degrade.hpp"
#include "capdetect/errors.hpp"
#include "capdetect/eval.hpp"
#include "capdetect/inject.hpp"
#include "capdetect/kernels.hpp"
#include "capdetect/synth.hpp"
#include "capdetect/trainer.hpp"
#include "json.hpp"

namespace capdetect::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Raised while options are checked, before anything is read or written.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Merges a flat JSON object into the options of `sub`. Keys are long option
// names without dashes; options already given on the command line keep
// their values. Arrays become repeated inputs.
void apply_json_config(CLI::App* sub, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file '" + path + "' must hold a JSON object");
  for (const auto& [key, value] : j.items()) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config" || key == "help") {
      throw UsageError("unknown key '" + key + "' in config file for " + sub->get_name());
    }
    if (opt->count() > 0) continue;
    auto scalar = [&](const json& v) -> std::string {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_number() || v.is_boolean()) return v.dump();
      throw UsageError("config key '" + key + "' must be a string, number, boolean or array");
    };
    std::vector<std::string> inputs;
    if (value.is_array()) {
      for (const auto& v : value) inputs.push_back(scalar(v));
    } else {
      inputs.push_back(scalar(value));
    }
    if (opt->get_expected_max() == 0) {
      // Flag: only true/false make sense.
      if (inputs.size() != 1 || (inputs[0] != "true" && inputs[0] != "false")) {
        throw UsageError("config key '" + key + "' is a flag and needs true or false");
      }
      if (inputs[0] == "false") continue;
      inputs[0] = "true";
    }
    try {
      for (const auto& in : inputs) opt->add_result(in);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config key '" + key + "': " + e.what());
    }
  }
}

bool same_path(const fs::path& a, const fs::path& b) {
  std::error_code ec;
  return fs::weakly_canonical(a, ec) == fs::weakly_canonical(b, ec);
}

void refuse_overwrite(const fs::path& output, const std::vector<fs::path>& inputs) {
  for (const auto& in : inputs) {
    if (same_path(output, in)) throw UsageError("output '" + output.string() + "' coincides with an input");
  }
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Options shared by pretrain and finetune.
struct TrainFlags {
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch = 32;
  std::size_t min_epochs = 1;
  bool no_early_exit = false;
  CLI::Option* lr_opt = nullptr;

  void add(CLI::App* sub) {
    sub->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    lr_opt = sub->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--batch", batch, "Mini-batch size")->capture_default_str();
    sub->add_option("--min-epochs", min_epochs, "Epochs before early exit may trigger")->capture_default_str();
    sub->add_flag("--no-early-exit", no_early_exit, "Run every epoch even at perfect val accuracy");
  }

  void apply(train::TrainConfig& c) const {
    c.epochs = epochs;
    c.learning_rate = lr;
    c.batch_size = batch;
    c.min_epochs = min_epochs;
    c.early_exit = !no_early_exit;
  }
};

struct Job {
  std::function<void()> body;
};

train::Logger stderr_logger(std::ostream& err) {
  return [&err](const std::string& line) { err << line << '\n'; };
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  kernels::configure_threads_from_env();

  CLI::App app{"Caption-based synthetic image detection with low-rank adapters", "capdetect"};
  app.require_subcommand(1, 1);
  app.footer("Environment: BILORA_THREADS caps the worker count.");

  std::uint64_t seed = 0;
  std::string config_path;
  const CLI::App* current = nullptr;
  auto add_common = [&](CLI::App* sub) {
    current = sub;
    sub->add_option("--config", config_path, "JSON file with option values (flags win)");
    sub->add_option("--seed", seed, "Random seed")->capture_default_str();
  };

  // Required options are checked after the config file is merged, so they
  // cannot use CLI11's own required().
  std::map<const CLI::App*, std::vector<const CLI::Option*>> required;
  auto req = [&](CLI::Option* opt) {
    required[current].push_back(opt);
    opt->description(opt->get_description() + " (required)");
    return opt;
  };
  std::map<const CLI::App*, std::function<void()>> prepare;

  Job job;
  auto logger = stderr_logger(err);

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate the procedural real/fake corpus");
  add_common(gen);
  std::string gen_out;
  synth::SplitCounts counts;
  req(gen->add_option("--out", gen_out, "Output directory (must not exist or be empty)"));
  gen->add_option("--train", counts.train, "Images per class in the train split")->capture_default_str();
  gen->add_option("--val", counts.val, "Images per class in the val split")->capture_default_str();
  gen->add_option("--test", counts.test, "Images per class in the test split")->capture_default_str();
  prepare[gen] = [&] {
    job.body = [&] {
      synth::GenOptions o;
      o.seed = seed;
      o.counts = counts;
      const auto m = synth::gen_dataset(o, gen_out);
      err << "wrote " << m.records.size() << " images to " << gen_out << '\n';
    };
  };

  // pretrain ---------------------------------------------------------------
  auto* pre = app.add_subcommand("pretrain", "Train the base captioner on attribute captions");
  add_common(pre);
  std::string pre_manifest, pre_out, pre_families;
  TrainFlags pre_flags;
  req(pre->add_option("--manifest", pre_manifest, "manifest.jsonl"))->check(CLI::ExistingFile);
  req(pre->add_option("--out", pre_out, "Checkpoint to write"));
  pre->add_option("--families", pre_families, "Comma-separated fake families (default: train and pretrain roles)");
  pre_flags.add(pre);
  prepare[pre] = [&] {
    refuse_overwrite(pre_out, {pre_manifest});
    train::TrainConfig cfg;
    cfg.stage = train::Stage::kPretrain;
    cfg.seed = seed;
    pre_flags.apply(cfg);
    cfg.families = split_csv(pre_families);
    cfg.validate();
    job.body = [&, cfg] {
      const auto man = synth::load_manifest(pre_manifest);
      model::ModelConfig mc;
      mc.seed = seed;
      model::CaptionModel m(mc);
      const auto tr = train::load_examples(man, "train", mc, cfg);
      const auto va = train::load_examples(man, "val", mc, cfg);
      const auto r = train::train(m, tr, va, cfg, logger);
      auto ck = train::make_checkpoint(m, cfg, train::Stage::kPretrain);
      ck.extras = {{"best_epoch", r.best_epoch}, {"best_val_accuracy", r.best_val_accuracy}};
      train::save_checkpoint(ck, pre_out);
      err << "pretrain: best epoch " << r.best_epoch << ", val accuracy " << r.best_val_accuracy << '\n';
    };
  };

  // finetune ---------------------------------------------------------------
  auto* fine = app.add_subcommand("finetune", "Train adapters on one fake family over a frozen base");
  add_common(fine);
  std::string ft_base, ft_manifest, ft_family, ft_out, ft_targets = "query,key";
  std::size_t rank = 16;
  double alpha = 32.0, dropout = 0.05;
  bool paper_preset = false;
  TrainFlags ft_flags;
  req(fine->add_option("--base", ft_base, "Pretrained base checkpoint"))->check(CLI::ExistingFile);
  req(fine->add_option("--manifest", ft_manifest, "manifest.jsonl"))->check(CLI::ExistingFile);
  req(fine->add_option("--family", ft_family, "Fake family to train on"));
  req(fine->add_option("--out", ft_out, "Checkpoint to write"));
  fine->add_option("--rank", rank, "Adapter rank")->capture_default_str();
  fine->add_option("--alpha", alpha, "Adapter scale numerator")->capture_default_str();
  fine->add_option("--dropout", dropout, "Adapter input dropout")->capture_default_str();
  fine->add_option("--targets", ft_targets, "Adapted projections (query,key,value,output)")->capture_default_str();
  fine->add_flag("--paper-preset", paper_preset, "Use the large-model learning rate 5e-5 unless --lr is given");
  ft_flags.add(fine);
  prepare[fine] = [&] {
    refuse_overwrite(ft_out, {ft_base, ft_manifest});
    train::TrainConfig cfg = paper_preset ? train::TrainConfig::paper_preset() : train::TrainConfig{};
    const double preset_lr = cfg.learning_rate;
    cfg.stage = train::Stage::kFinetune;
    cfg.seed = seed;
    ft_flags.apply(cfg);
    if (paper_preset && ft_flags.lr_opt->count() == 0) cfg.learning_rate = preset_lr;
    cfg.families = {ft_family};
    cfg.lora.rank = rank;
    cfg.lora.alpha = alpha;
    cfg.lora.dropout = dropout;
    cfg.lora.targets = lora::parse_projection_kinds(ft_targets);
    cfg.validate();
    job.body = [&, cfg] {
      const auto base_ck = train::load_checkpoint(ft_base);
      if (base_ck.stage != train::Stage::kPretrain || !base_ck.adapters.empty()) {
        throw ContractError("--base must be a pretrain checkpoint without adapters");
      }
      auto m = train::restore_model(base_ck);
      const auto man = synth::load_manifest(ft_manifest);
      const auto tr = train::load_examples(man, "train", m.config(), cfg);
      const auto va = train::load_examples(man, "val", m.config(), cfg);
      lora::InjectOptions io;
      io.targets = cfg.lora.targets;
      io.rank = cfg.lora.rank;
      io.alpha = cfg.lora.alpha;
      io.dropout_p = cfg.lora.dropout;
      io.seed = seed;
      lora::inject(m, io);
      const auto r = train::train(m, tr, va, cfg, logger);
      auto ck = train::make_checkpoint(m, cfg, train::Stage::kFinetune);
      ck.extras = {{"family", ft_family},
                   {"best_epoch", r.best_epoch},
                   {"best_val_accuracy", r.best_val_accuracy},
                   {"trainable_params", r.trainable_params},
                   {"base_hash", std::to_string(r.base_hash_after)}};
      train::save_checkpoint(ck, ft_out);
      err << "finetune " << ft_family << ": best epoch " << r.best_epoch << ", val accuracy "
          << r.best_val_accuracy << ", " << r.trainable_params << " trainable parameters\n";
    };
  };

  // eval -------------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Score one checkpoint on one test family");
  add_common(ev);
  std::string ev_ckpt, ev_manifest, ev_family, ev_degrade = "none", ev_degrade_param, ev_out;
  req(ev->add_option("--ckpt", ev_ckpt, "Checkpoint"))->check(CLI::ExistingFile);
  req(ev->add_option("--manifest", ev_manifest, "manifest.jsonl"))->check(CLI::ExistingFile);
  req(ev->add_option("--family", ev_family, "Test family"));
  ev->add_option("--degrade", ev_degrade, "none, lr112, jpeg65 or blur3")->capture_default_str();
  ev->add_option("--degrade-param", ev_degrade_param, "Overrides the factor, quality or sigma of --degrade");
  ev->add_option("--out", ev_out, "Write the JSON result here instead of stdout");
  prepare[ev] = [&] {
    if (!ev_out.empty()) refuse_overwrite(ev_out, {ev_ckpt, ev_manifest});
    const auto spec = degrade::parse_degrade(ev_degrade, ev_degrade_param);
    job.body = [&, spec] {
      const auto m = train::restore_model(train::load_checkpoint(ev_ckpt));
      const auto man = synth::load_manifest(ev_manifest);
      const auto r = eval::eval_subset(m, man, ev_family, spec);
      const json j = {{"family", ev_family}, {"degrade", spec.name()}, {"n", r.counts.total()},
                      {"acc", r.acc},         {"f1", r.f1.value},      {"f1_degenerate", r.f1.degenerate},
                      {"tp", r.counts.tp},    {"fp", r.counts.fp},     {"fn", r.counts.fn},
                      {"tn", r.counts.tn}};
      if (ev_out.empty()) {
        out << j.dump(2) << '\n';
      } else {
        write_text(ev_out, j.dump(2) + "\n");
      }
    };
  };

  // matrix -----------------------------------------------------------------
  auto* mat = app.add_subcommand("matrix", "Cross-family train x test x degradation grid");
  add_common(mat);
  std::vector<std::string> ckpt_pairs;
  std::string mx_manifest, mx_degrade = "none", mx_families, mx_csv, mx_md, mx_json;
  req(mat->add_option("--ckpts", ckpt_pairs, "name=checkpoint pairs (comma-separated or repeated)"))->delimiter(',');
  req(mat->add_option("--manifest", mx_manifest, "manifest.jsonl"))->check(CLI::ExistingFile);
  mat->add_option("--degrade", mx_degrade, "Comma-separated degradations")->capture_default_str();
  mat->add_option("--families", mx_families, "Test families (default: all but pretrain-only)");
  mat->add_option("--csv", mx_csv, "CSV output (default: stdout)");
  mat->add_option("--markdown", mx_md, "Markdown output");
  mat->add_option("--json", mx_json, "Full report as JSON (input for `report`)");
  prepare[mat] = [&] {
    std::vector<std::pair<std::string, std::string>> named;
    std::vector<fs::path> inputs{mx_manifest};
    for (const auto& p : ckpt_pairs) {
      const auto eq = p.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == p.size()) {
        throw UsageError("--ckpts entry '" + p + "' is not name=path");
      }
      named.emplace_back(p.substr(0, eq), p.substr(eq + 1));
      if (!fs::is_regular_file(named.back().second)) throw UsageError("checkpoint '" + named.back().second + "' not found");
      inputs.emplace_back(named.back().second);
    }
    for (const auto* o : {&mx_csv, &mx_md, &mx_json}) {
      if (!o->empty()) refuse_overwrite(*o, inputs);
    }
    const auto specs = degrade::parse_degrade_list(mx_degrade);
    const auto families = split_csv(mx_families);
    job.body = [&, named, specs, families] {
      const auto man = synth::load_manifest(mx_manifest);
      std::vector<model::CaptionModel> models;
      models.reserve(named.size());
      for (const auto& [name, path] : named) models.push_back(train::restore_model(train::load_checkpoint(path)));
      std::vector<eval::NamedModel> refs;
      for (std::size_t i = 0; i < named.size(); ++i) refs.emplace_back(named[i].first, &models[i]);
      auto rep = eval::cross_matrix(refs, man, specs, families);
      json ckpts = json::object();
      for (const auto& [name, path] : named) ckpts[name] = path;
      rep.metadata = {{"checkpoints", ckpts}, {"manifest", mx_manifest}, {"data_seed", man.seed},
                      {"seed", seed},         {"timestamp", utc_timestamp()}};
      const std::string csv = eval::to_csv(rep);
      if (mx_csv.empty()) {
        out << csv;
      } else {
        write_text(mx_csv, csv);
      }
      if (!mx_md.empty()) write_text(mx_md, eval::to_markdown(rep));
      if (!mx_json.empty()) write_text(mx_json, eval::to_json(rep).dump(1) + "\n");
    };
  };

  // report -----------------------------------------------------------------
  auto* rep_cmd = app.add_subcommand("report", "Render a stored matrix report");
  add_common(rep_cmd);
  std::string rp_in, rp_out, rp_format = "markdown";
  req(rep_cmd->add_option("--in", rp_in, "Report JSON written by `matrix --json`"))->check(CLI::ExistingFile);
  rep_cmd->add_option("--out", rp_out, "Output file (default: stdout)");
  rep_cmd->add_option("--format", rp_format, "markdown or csv")
      ->check(CLI::IsMember({"markdown", "csv"}))
      ->capture_default_str();
  prepare[rep_cmd] = [&] {
    if (!rp_out.empty()) refuse_overwrite(rp_out, {rp_in});
    job.body = [&] {
      const auto rep = eval::from_json(read_json(rp_in));
      const std::string text = rp_format == "csv" ? eval::to_csv(rep) : eval::to_markdown(rep);
      if (rp_out.empty()) {
        out << text;
      } else {
        write_text(rp_out, text);
      }
    };
  };

  // Phase 1: parse and validate. Nothing has been read or written yet.
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();  // program name
    app.parse(rev);
    const CLI::App* sub = app.get_subcommands().front();
    if (!config_path.empty()) apply_json_config(app.get_subcommand(sub->get_name()), config_path);
    for (const auto* opt : required[sub]) {
      if (opt->count() == 0) throw UsageError(opt->get_name() + " is required (flag or config key)");
    }
    prepare.at(sub)();
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  // Phase 2: run.
  try {
    job.body();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace capdetect::cli
