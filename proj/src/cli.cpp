#include "syncast/cli.hpp"

#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "syncast/alignment.hpp"
#include "syncast/checkpoint.hpp"
#include "syncast/errors.hpp"
#include "syncast/harness.hpp"
#include "syncast/io.hpp"
#include "syncast/plot.hpp"
#include "syncast/rng.hpp"

namespace syncast::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::string output_dir;
  bool dry_run = false;
  std::map<std::string, std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool with_seed = true) {
  cmd->add_option("--config", c.config, "run configuration file (JSON)");
  cmd->add_option("--output-dir", c.output_dir, "directory that receives every artifact");
  cmd->add_flag("--dry-run", c.dry_run, "validate the configuration and inputs, write nothing");
  auto* group = cmd->add_option_group("config overrides", "any configuration field by its dotted name");
  for (const auto& key : harness::RunConfig::dotted_keys()) {
    if (key == "output_dir" || (key == "seed" && !with_seed)) continue;
    group->add_option("--" + key, c.overrides[key], key);
  }
}

// Invalid flag values; reported like a parse error.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

harness::RunConfig make_config(const Common& c, const CLI::App* cmd) {
  auto cfg = c.config.empty() ? harness::RunConfig() : harness::RunConfig::load(c.config);
  try {
    for (const auto& [key, value] : c.overrides) {
      if (cmd->count("--" + key) > 0) cfg.set(key, value);
    }
    if (!c.output_dir.empty()) cfg.set("output_dir", json(c.output_dir).dump());
    cfg.validate();
  } catch (const ConfigError& e) {
    if (c.config.empty()) throw UsageError(e.what());
    throw;
  }
  return cfg;
}

fs::path under(const fs::path& root, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : root / path;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw IoError(what + " not found: " + p.string());
}

data::Archive open_data(const harness::RunConfig& cfg, const fs::path& data_dir) {
  const auto given = cfg.data_archive();
  const fs::path root = given.empty() ? data_dir : given;
  require_file(root / "manifest.json", "archive manifest");
  data::ArchiveOptions options;
  options.downscale = cfg.doc().at("data").at("downscale").get<int64_t>();
  return data::ingest_archive(root, options);
}

void print_plan(std::ostream& out, const std::string& command, const harness::RunConfig& cfg, const json& extra) {
  json plan = {{"command", command}, {"dry_run", true}, {"config", cfg.doc()}};
  plan.update(extra);
  out << plan.dump(2) << "\n";
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"syncast: conditional diffusion nowcasting with sequential preference alignment", "syncast"};
  app.require_subcommand(1);
  app.fallthrough(false);

  Common c_gen, c_train, c_prefs, c_align, c_eval, c_sample, c_pipe, c_plot;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic advection archive");
  add_common(gen, c_gen, false);
  uint64_t gen_seed = 0;
  int64_t gen_events = 0;
  std::string gen_out = "data";
  gen->add_option("--seed", gen_seed, "data seed (data.seed)");
  gen->add_option("--events", gen_events, "total event count, split 70/10/20 into train/val/test")
      ->check(CLI::Range(int64_t{3}, int64_t{1} << 30));
  gen->add_option("--out", gen_out, "archive directory");

  auto* train = app.add_subcommand("train-base", "train the base policy pi0 (resumes an existing state)");
  add_common(train, c_train);
  std::string train_data = "data";
  train->add_option("--data", train_data, "archive directory");

  auto* prefs = app.add_subcommand("build-prefs", "sample candidates from pi0 and build FAR/CSI preference pairs");
  add_common(prefs, c_prefs);
  std::string prefs_ckpt = "pi0.ckpt", prefs_data = "data", prefs_out = "prefs";
  prefs->add_option("--checkpoint", prefs_ckpt, "base policy checkpoint");
  prefs->add_option("--data", prefs_data, "archive directory");
  prefs->add_option("--out", prefs_out, "pair archive directory");

  auto* align = app.add_subcommand("align", "run one alignment stage: far (DPO vs pi0) or csi (SPO)");
  add_common(align, c_align);
  std::string align_stage, align_pairs = "prefs", align_pi0 = "pi0.ckpt", align_pi_alpha = "pi_alpha.ckpt";
  std::string align_out;
  align->add_option("stage", align_stage, "far | csi")->required()->check(CLI::IsMember({"far", "csi"}));
  align->add_option("--pairs", align_pairs, "pair archive directory");
  align->add_option("--pi0", align_pi0, "base policy checkpoint");
  align->add_option("--pi-alpha", align_pi_alpha, "FAR-aligned checkpoint (csi stage)");
  align->add_option("--out", align_out, "output checkpoint (default pi_alpha.ckpt / pi_beta.ckpt)");

  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a split");
  add_common(eval, c_eval);
  std::string eval_ckpt, eval_data = "data", eval_report;
  eval->add_option("--checkpoint", eval_ckpt, "policy checkpoint")->required();
  eval->add_option("--data", eval_data, "archive directory");
  eval->add_option("--report", eval_report, "report path (default report_<role>.json)");

  auto* samp = app.add_subcommand("sample", "draw forecasts for one event");
  add_common(samp, c_sample);
  std::string samp_ckpt, samp_data = "data", samp_out = "samples";
  int64_t samp_index = 0, samp_members = 4;
  samp->add_option("--checkpoint", samp_ckpt, "policy checkpoint")->required();
  samp->add_option("--data", samp_data, "archive directory");
  samp->add_option("--event", samp_index, "event index within the evaluation split")->check(CLI::NonNegativeNumber);
  samp->add_option("--members", samp_members, "number of forecasts")->check(CLI::PositiveNumber);
  samp->add_option("--out", samp_out, "output directory");

  auto* pipe = app.add_subcommand("pipeline", "gen-data, train-base, build-prefs, align far, align csi, evaluate");
  add_common(pipe, c_pipe);

  auto* plt = app.add_subcommand("plot", "render lead-time curves and stage-comparison bars from reports");
  add_common(plt, c_plot);
  std::vector<std::string> plot_reports;
  std::string plot_out = "plots";
  plt->add_option("--reports", plot_reports, "report files (default report_pi0/pi_alpha/pi_beta.json)");
  plt->add_option("--out", plot_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    err << "\n" << app.help();
    return 2;
  }

  std::string command = app.get_subcommands().front()->get_name();
  try {
    if (gen->parsed()) {
      auto cfg = make_config(c_gen, gen);
      if (gen->count("--seed") > 0) cfg.set("data.seed", std::to_string(gen_seed));
      if (gen_events > 0) {
        const int64_t n_test = std::max<int64_t>(1, gen_events / 5);
        const int64_t n_val = gen_events / 10;
        cfg.set("data.n_test", std::to_string(n_test));
        cfg.set("data.n_val", std::to_string(n_val));
        cfg.set("data.n_train", std::to_string(gen_events - n_test - n_val));
      }
      cfg.validate();
      const fs::path root = under(cfg.output_dir(), gen_out);
      const auto d = cfg.data();
      if (c_gen.dry_run) {
        print_plan(out, command, cfg, {{"archive", root.string()}, {"events", d.n_train + d.n_val + d.n_test}});
        return 0;
      }
      const auto events = data::generate_synthetic_dataset(d);
      if (fs::exists(root)) fs::remove_all(root);
      data::write_archive(root, events, d.context_len, d.horizon, d.value_scale);
      out << "wrote " << events.size() << " events (" << d.n_train << " train, " << d.n_val << " val, " << d.n_test
          << " test) to " << root.string() << "\n";
      return 0;
    }

    if (train->parsed()) {
      const auto cfg = make_config(c_train, train);
      const harness::RunLayout layout{cfg.output_dir()};
      const fs::path data_dir = under(layout.root, train_data);
      if (c_train.dry_run) {
        if (cfg.data_archive().empty()) require_file(data_dir / "manifest.json", "archive manifest");
        print_plan(out, command, cfg, {{"state_dir", layout.base_dir().string()}, {"checkpoint", layout.pi0().string()}});
        return 0;
      }
      const auto archive = open_data(cfg, data_dir);
      io::DirectoryLock lock(layout.root);
      auto res = harness::train_base(cfg, archive, layout.base_dir());
      res.checkpoint.save(layout.pi0());
      out << "trained steps " << res.start_step << ".." << cfg.train().steps << "; checkpoint " << layout.pi0().string()
          << "\n";
      return 0;
    }

    if (prefs->parsed()) {
      const auto cfg = make_config(c_prefs, prefs);
      const fs::path root = cfg.output_dir();
      const auto ckpt = under(root, prefs_ckpt);
      const auto out_dir = under(root, prefs_out);
      require_file(ckpt, "checkpoint");
      if (c_prefs.dry_run) {
        if (cfg.data_archive().empty()) require_file(under(root, prefs_data) / "manifest.json", "archive manifest");
        print_plan(out, command, cfg, {{"checkpoint", ckpt.string()}, {"pairs", out_dir.string()}});
        return 0;
      }
      const auto pi0 = PolicyCheckpoint::load(ckpt);
      const auto archive = open_data(cfg, under(root, prefs_data));
      io::DirectoryLock lock(root);
      if (fs::exists(out_dir)) fs::remove_all(out_dir);
      const auto s = harness::build_prefs(cfg, pi0, archive, out_dir);
      out << "pairs: " << s.n_far_pairs << " FAR, " << s.n_csi_pairs << " CSI from " << s.n_events << " events ("
          << s.n_skipped << " skipped); " << out_dir.string() << "\n";
      return 0;
    }

    if (align->parsed()) {
      command = "align " + align_stage;
      const auto cfg = make_config(c_align, align);
      const fs::path root = cfg.output_dir();
      const auto stage = alignment::parse_stage(align_stage);
      const bool far = stage == alignment::Stage::far_align;
      const auto pairs_dir = under(root, align_pairs);
      const auto pi0_path = under(root, align_pi0);
      const auto alpha_path = under(root, align_pi_alpha);
      const auto out_path = align_out.empty() ? (far ? harness::RunLayout{root}.pi_alpha() : harness::RunLayout{root}.pi_beta())
                                              : under(root, align_out);
      require_file(pi0_path, "checkpoint");
      require_file(pairs_dir / "pairs.json", "pair archive index");
      if (!far) require_file(alpha_path, "checkpoint");
      if (c_align.dry_run) {
        print_plan(out, command, cfg, {{"stage", far ? "far_align" : "csi_align"}, {"output", out_path.string()}});
        return 0;
      }
      alignment::PolicyTriple triple{PolicyCheckpoint::load(pi0_path), std::nullopt, std::nullopt};
      if (!far) triple.pi_alpha = PolicyCheckpoint::load(alpha_path);
      const auto archive = preference::load_pair_archive(pairs_dir);
      io::DirectoryLock lock(root);
      const auto ck = alignment::run_stage(stage, triple, archive, cfg.alignment(stage), cfg.schedule(),
                                           harness::RunLayout{root}.logs() / (far ? "far_align.jsonl" : "csi_align.jsonl"));
      ck.save(out_path);
      out << "wrote " << to_string(ck.role) << " checkpoint " << out_path.string() << "\n";
      return 0;
    }

    if (eval->parsed()) {
      const auto cfg = make_config(c_eval, eval);
      const fs::path root = cfg.output_dir();
      const auto ckpt = under(root, eval_ckpt);
      require_file(ckpt, "checkpoint");
      if (c_eval.dry_run) {
        print_plan(out, command, cfg, {{"checkpoint", ckpt.string()}});
        return 0;
      }
      const auto policy = PolicyCheckpoint::load(ckpt);
      const auto archive = open_data(cfg, under(root, eval_data));
      const auto ec = cfg.evaluation();
      const auto events = archive.load_split(ec.split);
      const auto rep = harness::evaluate(*policy.model, events, archive.manifest().context_len, cfg.schedule(),
                                         cfg.sampler(), cfg.thresholds(), ec);
      const auto report_path = eval_report.empty() ? harness::RunLayout{root}.report(policy.role) : under(root, eval_report);
      fs::create_directories(report_path.parent_path());
      io::write_json(report_path, rep.to_json());
      auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("undefined"); };
      out << to_string(policy.role) << ": CSI-M " << show(rep.csi_m) << ", FAR-M " << show(rep.far_m) << ", HSS "
          << show(rep.hss) << ", CRPS " << show(rep.crps) << "; report " << report_path.string() << "\n";
      return 0;
    }

    if (samp->parsed()) {
      const auto cfg = make_config(c_sample, samp);
      const fs::path root = cfg.output_dir();
      const auto ckpt = under(root, samp_ckpt);
      require_file(ckpt, "checkpoint");
      const auto out_dir = under(root, samp_out);
      if (c_sample.dry_run) {
        print_plan(out, command, cfg, {{"checkpoint", ckpt.string()}, {"out", out_dir.string()}});
        return 0;
      }
      const auto policy = PolicyCheckpoint::load(ckpt);
      const auto archive = open_data(cfg, under(root, samp_data));
      const auto ec = cfg.evaluation();
      const auto refs = archive.events(ec.split);
      if (samp_index >= static_cast<int64_t>(refs.size())) {
        throw ParameterError("event index " + std::to_string(samp_index) + " out of range (split has " +
                             std::to_string(refs.size()) + " events)");
      }
      const auto event = archive.load(refs[static_cast<std::size_t>(samp_index)]);
      const int64_t ctx_len = archive.manifest().context_len;
      const int64_t horizon = archive.manifest().horizon;
      auto ctx = event.sequence.frames().narrow(0, 0, ctx_len).squeeze(1).unsqueeze(0).repeat({samp_members, 1, 1, 1});
      std::vector<uint64_t> seeds;
      const uint64_t event_seed = mix_seed(ec.seed, static_cast<uint64_t>(samp_index));
      for (int64_t m = 0; m < samp_members; ++m) seeds.push_back(mix_seed(event_seed, static_cast<uint64_t>(m)));
      const auto sampler = harness::resolve_sampler(*policy.model, cfg.sampler());
      auto y = diffusion::from_model_space(diffusion::sample(*policy.model, ctx, horizon, cfg.schedule(), sampler, seeds));
      fs::create_directories(out_dir);
      const auto bin = out_dir / (event.event_id + ".bin");
      io::write_f32(bin, y);
      io::write_json(out_dir / (event.event_id + ".json"),
                     {{"event_id", event.event_id},
                      {"shape", y.sizes().vec()},
                      {"policy", std::string(to_string(policy.role))},
                      {"seeds", seeds},
                      {"sampler", std::string(diffusion::to_string(sampler.sampler))}});
      out << "wrote " << samp_members << " forecasts for " << event.event_id << " to " << bin.string() << "\n";
      return 0;
    }

    if (pipe->parsed()) {
      const auto cfg = make_config(c_pipe, pipe);
      if (c_pipe.dry_run) {
        print_plan(out, command, cfg,
                   {{"stages", {"gen-data", "train-base", "build-prefs", "align-far", "align-csi", "evaluate"}}});
        return 0;
      }
      const auto summary = harness::run_pipeline(cfg);
      for (const auto& row : summary.doc.at("policies")) out << row.dump() << "\n";
      out << "summary: " << harness::RunLayout{cfg.output_dir()}.summary().string() << "\n";
      return 0;
    }

    if (plt->parsed()) {
      const auto cfg = make_config(c_plot, plt);
      const fs::path root = cfg.output_dir();
      std::vector<fs::path> paths;
      if (plot_reports.empty()) {
        const harness::RunLayout layout{root};
        for (auto role : {PolicyRole::base, PolicyRole::far_aligned, PolicyRole::csi_aligned}) {
          paths.push_back(layout.report(role));
        }
      } else {
        for (const auto& r : plot_reports) paths.push_back(under(root, r));
      }
      for (const auto& p : paths) require_file(p, "report");
      const auto out_dir = under(root, plot_out);
      if (c_plot.dry_run) {
        print_plan(out, command, cfg, {{"out", out_dir.string()}});
        return 0;
      }
      std::vector<std::pair<std::string, metrics::ScoreReport>> reports;
      for (const auto& p : paths) {
        auto label = p.stem().string();
        if (label.rfind("report_", 0) == 0) label = label.substr(7);
        reports.emplace_back(label, metrics::ScoreReport::from_json(io::read_json(p)));
      }
      for (const auto& f : plot::render_reports(reports, out_dir)) out << "wrote " << f.string() << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << command << ": " << e.what() << "\n";
    return 2;
  } catch (const StageError& e) {
    err << "error: " << command << " failed in stage " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << command << ": " << e.what() << "\n";
    return 1;
  }
  err << app.help();
  return 2;
}

}  // namespace syncast::cli
