#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <optional>

#include "mlqa/blob_io.hpp"
#include "mlqa/config.hpp"
#include "mlqa/data.hpp"
#include "mlqa/errors.hpp"
#include "mlqa/gradcheck.hpp"
#include "mlqa/training.hpp"

namespace mlqa::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  std::string manifest;
  std::string checkpoint;
  std::string task;
  std::string variant;
  std::string split = "test";
  std::string model = "all";
  std::string dtype = "f64";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples;
  std::optional<std::size_t> epochs;
  double step = kGradCheckStep;
};

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw IoError(std::string(what) + " not found: " + path);
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) {
    require_file(o.config_path, "config file");
    cfg = load_run_config(o.config_path);
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.task.empty()) cfg.model.task = parse_task(o.task);
  if (!o.variant.empty()) cfg.model.variant = parse_variant(o.variant);
  if (o.samples) cfg.samples = *o.samples;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  check_variant(cfg.model.task, cfg.model.variant);
  return cfg.resolve();
}

void echo_config(const RunConfig& cfg, const fs::path& dir) { write_file(dir / "config.json", to_json(cfg)); }

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << *v;
  return os.str();
}

Dataset load_dataset(const std::string& manifest) {
  require_file(manifest, "manifest");
  return load_manifest(manifest);
}

int cmd_synth(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir = o.out_dir;
  Dataset ds = cfg.model.task == Task::kPerceptualQuality
                   ? generate_quality_dataset(cfg.samples, cfg.data_seed(), cfg.synth)
                   : generate_correspondence_dataset(cfg.samples, cfg.data_seed(), cfg.synth);
  assign_split(ds, cfg.split);
  save_manifest(ds, dir / "manifest.jsonl");
  echo_config(cfg, dir);
  out << "wrote " << ds.size() << " records (" << ds.indices(Split::kTrain).size() << " train, "
      << ds.indices(Split::kTest).size() << " test) to " << (dir / "manifest.jsonl").string() << '\n';
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const Dataset ds = load_dataset(o.manifest);
  const fs::path dir = o.out_dir;
  const std::string config_text = to_json(cfg);
  echo_config(cfg, dir);
  QualityModel model(cfg.model);
  out << "training " << task_name(cfg.model.task) << " model (" << variant_name(cfg.model.variant) << ", "
      << model.parameters().scalar_count() << " parameters) for " << cfg.train.epochs << " epochs\n";
  const TrainResult res = train(
      model, ds, cfg.train,
      [&](const EpochRecord& r) {
        out << "epoch " << r.epoch << ' ' << split_name(r.split) << " loss " << std::setprecision(6) << r.loss;
        if (r.split == Split::kTest) out << " srcc " << fmt(r.srcc) << " plcc " << fmt(r.plcc);
        if (!r.error.empty()) out << " (" << r.error << ')';
        out << std::endl;
      },
      config_text);
  save_checkpoint(dir / "checkpoint_last.mlck", res.last);
  save_checkpoint(dir / "checkpoint_best.mlck", res.best);
  write_file(dir / "history.jsonl", history_to_jsonl(res.history));
  out << "best epoch " << res.best_epoch << "; artifacts in " << dir.string() << '\n';
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  require_file(o.checkpoint, "checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  RunConfig cfg;
  if (!o.config_path.empty()) {
    cfg = resolve_config(o);
  } else if (!ck.config.empty()) {
    cfg = parse_run_config(ck.config);
    cfg.resolve();
  } else {
    throw ConfigError("checkpoint carries no configuration; pass --config");
  }
  QualityModel model(cfg.model);
  restore(ck, model);
  const Dataset ds = load_dataset(o.manifest);
  std::vector<std::size_t> idx;
  if (o.split == "all") {
    idx.resize(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    idx = ds.indices(parse_split(o.split));
  }
  const Evaluation ev = evaluate(model, ds, idx, cfg.train.eval_batch_size);
  if (!ev.ok()) {
    err << "evaluation failed: " << ev.error << '\n';
    return kNumericalError;
  }
  out << std::fixed << std::setprecision(6) << "split " << o.split << " n " << idx.size() << " srcc " << *ev.srcc
      << " plcc " << *ev.plcc << " mse " << ev.loss << '\n';
  return kOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const Dataset ds = load_dataset(o.manifest);
  const fs::path dir = o.out_dir;
  echo_config(cfg, dir);
  const auto specs = default_ablation_specs(cfg.model.task);
  const AblationReport report = ablate(ds, cfg.model, cfg.train, specs, [&](const AblationRow& r) {
    out << r.label << ": srcc " << fmt(r.srcc) << " plcc " << fmt(r.plcc) << std::endl;
  });
  write_file(dir / "ablation.jsonl", report.to_jsonl());
  write_file(dir / "ablation.txt", report.to_table());
  out << report.to_table();
  return kOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  if (parse_dtype(o.dtype) != DType::kF64) throw ConfigError("gradcheck runs in f64 only");
  if (!(o.step > 0.0)) throw ConfigError("--h must be positive");
  const std::uint64_t seed = o.seed.value_or(0);
  std::vector<std::pair<std::string, GradCheckReport>> reports;
  const bool all = o.model == "all";
  if (all || o.model == "primitives") reports.emplace_back("primitives", gradcheck_primitives(seed, o.step));
  if (all || o.model == "mglf" || o.model == "quality") {
    reports.emplace_back("mglf", gradcheck_model(tiny_model_config(Task::kPerceptualQuality, seed), seed, o.step));
  }
  if (all || o.model == "mpef" || o.model == "correspondence") {
    reports.emplace_back("mpef", gradcheck_model(tiny_model_config(Task::kCorrespondence, seed), seed, o.step));
  }
  if (reports.empty()) throw ConfigError("unknown --model '" + o.model + "' (primitives, mglf, mpef, all)");

  double worst = 0.0;
  for (const auto& [name, rep] : reports) {
    out << name << '\n';
    for (const auto& g : rep.by_group()) {
      out << "  " << std::left << std::setw(20) << g.name << std::right << " elements " << std::setw(6) << g.elements
          << "  max rel error " << std::scientific << std::setprecision(3) << g.max_rel_error << std::defaultfloat
          << '\n';
    }
    worst = std::max(worst, rep.max_rel_error());
  }
  const bool ok = worst <= kGradCheckTolerance;
  out << "max relative error " << std::scientific << std::setprecision(3) << worst << std::defaultfloat
      << (ok ? " (pass, tolerance " : " (FAIL, tolerance ") << kGradCheckTolerance << ")\n";
  return ok ? kOk : kNumericalError;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Multi-level feature fusion quality assessment toolkit", "mlqa"};
  app.require_subcommand(1);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Flat JSON run configuration");
    sub->add_option("--seed", o.seed, "Overrides the configured seed");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset (manifest + image blobs)");
  add_common(synth);
  synth->add_option("--task", o.task, "quality or correspondence");
  synth->add_option("--n", o.samples, "Number of samples");
  synth->add_option("--out", o.out_dir, "Output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a model on a manifest");
  add_common(train_cmd);
  train_cmd->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  train_cmd->add_option("--out", o.out_dir, "Output directory")->required();
  train_cmd->add_option("--task", o.task, "quality (MGLF) or correspondence (MPEF)");
  train_cmd->add_option("--variant", o.variant, "Ablation variant");
  train_cmd->add_option("--epochs", o.epochs, "Overrides the configured epoch count");

  auto* eval_cmd = app.add_subcommand("eval", "Report SRCC/PLCC of a checkpoint on a manifest split");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--split", o.split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every ablation variant and write the report");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--manifest", o.manifest, "Dataset manifest")->required();
  ablate_cmd->add_option("--out", o.out_dir, "Output directory")->required();
  ablate_cmd->add_option("--task", o.task, "quality or correspondence");
  ablate_cmd->add_option("--epochs", o.epochs, "Overrides the configured epoch count");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad_cmd->add_option("--model", o.model, "primitives, mglf, mpef or all");
  grad_cmd->add_option("--dtype", o.dtype, "Must be f64");
  grad_cmd->add_option("--seed", o.seed, "Seed for inputs and initialization");
  grad_cmd->add_option("--step", o.step, "Central-difference step");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kConfigError;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (eval_cmd->parsed()) return cmd_eval(o, out, err);
    if (ablate_cmd->parsed()) return cmd_ablate(o, out);
    if (grad_cmd->parsed()) return cmd_gradcheck(o, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kIoError;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << '\n';
    return kIoError;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kIoError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace mlqa::cli
