#include "tridiff/cli/app.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "tridiff/captionflow/captionflow.hpp"
#include "tridiff/cli/pipeline.hpp"
#include "tridiff/refine/refine.hpp"

namespace tridiff::cli {

namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config_file;
  std::string profile;
  std::vector<std::string> overrides;
  std::string artifacts = "artifacts";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config_file, "Pipeline config file (dotted key = value lines)")->check(CLI::ExistingFile);
  sub->add_option("--profile", o.profile, "Named profile: desk, smoke or full")
      ->check(CLI::IsMember(PipelineConfig::profiles()));
  sub->add_option("--set", o.overrides, "Override a config key, KEY=VALUE (repeatable)");
  sub->add_option("--artifacts", o.artifacts, "Artifact directory")->capture_default_str();
  sub->add_option("--seed", o.seed, "Global seed");
}

PipelineConfig resolve(const CommonOptions& o) {
  if (!o.config_file.empty() && !o.profile.empty()) throw ConfigError("pass either --config or --profile, not both");
  PipelineConfig c = o.config_file.empty() ? PipelineConfig::from_profile(o.profile.empty() ? "desk" : o.profile)
                                           : PipelineConfig::load(o.config_file);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

void copy_out(const fs::path& from, const std::string& to) {
  if (to.empty()) return;
  const fs::path dst(to);
  if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
  fs::copy_file(from, dst, fs::copy_options::overwrite_existing);
}

int run_stage_cmd(const CommonOptions& o, const std::string& stage, std::ostream& out, std::ostream& err) {
  Orchestrator orch(resolve(o), o.artifacts, err);
  const auto rec = orch.ensure(stage);
  out << rec.dir.string() << "\n";
  return 0;
}

// Refines a standalone mesh; its own vertex colors serve as the score mean.
int refine_mesh_file(const PipelineConfig& cfg, const std::string& mesh_path, const std::string& prompt,
                     const std::string& out_path, std::ostream& out, std::ostream& err) {
  const refine::Mesh mesh = refine::read_obj(mesh_path);
  if (mesh.empty()) throw std::runtime_error(mesh_path + " has no faces");
  const auto& rc = cfg.refine;
  const int res = rc.refine.sds.resolution;
  std::vector<refine::ReferenceView> views;
  for (const auto& cam : orbit_cameras(rc.reference_views, 20.0, res)) {
    views.push_back({cam, render_vertex_colors(mesh, cam)});
  }
  auto renderer = [&mesh](const triplane::Camera& cam) { return render_vertex_colors(mesh, cam); };
  const auto sched = diffusion::build_schedule(1000);
  const refine::ReferenceRenderScore pixel(renderer, rc.sigma_d, sched, refine::ScoreMode::PixelSuperRes);
  const refine::ReferenceRenderScore latent(renderer, rc.sigma_d, sched, refine::ScoreMode::Latent,
                                            std::make_shared<refine::AvgPoolCodec>(rc.codec_factor));
  refine::RefineConfig r = rc.refine;
  r.seed = cfg.seed;
  auto progress = [&err, last = std::string()](const std::string& s, int it, int total) mutable {
    if (s != last) err << "[refine] " << s << " (" << total << ")" << std::endl;
    last = s;
    (void)it;
  };
  const auto result = refine::refine_pipeline(mesh, views, prompt, &latent, pixel, r, progress);
  const fs::path dst(out_path);
  if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
  refine::write_obj(dst, result.mesh);
  out << dst.string() << " faces=" << result.mesh.faces.size() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tri-plane latent diffusion pipeline with mesh refinement", "tridiff"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  CommonOptions common;
  std::function<int()> action;

  auto* config_cmd = app.add_subcommand("config", "Print the resolved pipeline config");
  add_common(config_cmd, common);
  std::string config_out;
  config_cmd->add_option("--out", config_out, "Write to a file instead of stdout");
  config_cmd->callback([&] {
    action = [&] {
      const std::string text = resolve(common).to_text();
      if (config_out.empty()) out << text;
      else std::ofstream(config_out) << text;
      return 0;
    };
  });

  const std::vector<std::pair<std::string, std::string>> stage_cmds = {
      {"dataset", "data"}, {"fit", "fit"}, {"train-vae", "vae"}, {"train-ldm", "ldm"}, {"sample", "sample"}};
  const std::map<std::string, std::string> help = {
      {"dataset", "Render the procedural multi-view dataset"},
      {"fit", "Fit the shared decoder and one tri-plane per object"},
      {"train-vae", "Train the tri-plane VAE and cache normalized latents"},
      {"train-ldm", "Train the latent denoiser"},
      {"sample", "Sample tri-planes for sample.prompt with DDIM"}};
  for (const auto& [name, stage] : stage_cmds) {
    auto* sub = app.add_subcommand(name, help.at(name));
    add_common(sub, common);
    sub->callback([&, stage = stage] { action = [&, stage] { return run_stage_cmd(common, stage, out, err); }; });
  }

  auto* refine_cmd = app.add_subcommand("refine", "Refine a mesh (given, or the pipeline's stage-1 sample)");
  add_common(refine_cmd, common);
  std::string mesh_path, prompt, refine_out;
  std::optional<int> latent_iters, pixel_iters;
  bool skip_latent = false;
  refine_cmd->add_option("--mesh", mesh_path, "Input OBJ; omit to refine the pipeline sample")->check(CLI::ExistingFile);
  refine_cmd->add_option("--prompt", prompt, "Text prompt");
  refine_cmd->add_option("--latent-iters", latent_iters, "Latent-space SDS iterations")->check(CLI::NonNegativeNumber);
  refine_cmd->add_option("--pixel-iters", pixel_iters, "Pixel-space SDS iterations")->check(CLI::NonNegativeNumber);
  refine_cmd->add_flag("--skip-latent", skip_latent, "Skip the latent-space phase");
  refine_cmd->add_option("--out", refine_out, "Output OBJ path");
  refine_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = resolve(common);
      if (latent_iters) cfg.refine.refine.latent_iters = *latent_iters;
      if (pixel_iters) cfg.refine.refine.pixel_iters = *pixel_iters;
      if (skip_latent) cfg.refine.refine.skip_latent = true;
      if (!prompt.empty()) cfg.sample.prompt = prompt;
      if (!mesh_path.empty()) {
        if (refine_out.empty()) throw CLI::ValidationError("--out", "required together with --mesh");
        return refine_mesh_file(cfg, mesh_path, cfg.sample.prompt, refine_out, out, err);
      }
      Orchestrator orch(cfg, common.artifacts, err);
      const auto rec = orch.ensure("refine");
      copy_out(rec.dir / "refined.obj", refine_out);
      out << (refine_out.empty() ? (rec.dir / "refined.obj").string() : refine_out) << "\n";
      return 0;
    };
  });

  auto* caption_cmd = app.add_subcommand("caption", "Caption a dataset manifest (caption, simplify, fuse)");
  std::string manifest_path, provider_config, caption_out, log_requests, replay_log;
  bool resume = true, mock = false;
  int concurrency = 0;
  caption_cmd->add_option("--manifest", manifest_path, "Dataset manifest.jsonl")->required()->check(CLI::ExistingFile);
  caption_cmd->add_option("--provider-config", provider_config, "Provider JSON (one config or per-stage)")
      ->check(CLI::ExistingFile);
  caption_cmd->add_option("--out", caption_out, "Output records JSONL")->required();
  caption_cmd->add_flag("--resume,!--no-resume", resume, "Skip ids already fused in --out (default on)");
  caption_cmd->add_flag("--mock", mock, "Use deterministic offline providers");
  caption_cmd->add_option("--replay", replay_log, "Answer from a request log instead of calling providers")
      ->check(CLI::ExistingFile);
  caption_cmd->add_option("--log-requests", log_requests, "Append every request/response pair to this JSONL file");
  caption_cmd->add_option("--concurrency", concurrency, "Cap on in-flight provider calls")->check(CLI::PositiveNumber);
  caption_cmd->callback([&] {
    action = [&] {
      const int modes = static_cast<int>(mock) + static_cast<int>(!replay_log.empty()) +
                        static_cast<int>(!provider_config.empty());
      if (modes != 1) {
        throw CLI::ValidationError("caption", "pass exactly one of --mock, --replay or --provider-config");
      }
      const fs::path mpath(manifest_path);
      const auto manifest = synth::read_manifest(mpath);
      caption::PipelineOptions opts;
      opts.resume = resume;
      std::vector<std::unique_ptr<caption::Provider>> owned;
      caption::Providers providers;
      if (mock) {
        std::map<std::string, std::string> captions;
        for (const auto& e : manifest.entries) captions[e.id] = e.caption;
        for (int i = 0; i < 3; ++i) owned.push_back(std::make_unique<caption::MockProvider>(captions));
      } else if (!replay_log.empty()) {
        for (int i = 0; i < 3; ++i) owned.push_back(std::make_unique<caption::ReplayProvider>(replay_log));
      } else {
        std::ifstream in(provider_config);
        const auto j = nlohmann::json::parse(in);
        auto stage_cfg = [&](const char* name) {
          return caption::ProviderConfig::from_json(j.contains(name) ? j.at(name) : j);
        };
        const auto cap = stage_cfg("caption"), simp = stage_cfg("simplify"), fuse = stage_cfg("fuse");
        opts.caption_model = cap.model;
        opts.simplify_model = simp.model;
        opts.fuse_model = fuse.model;
        opts.temperature = cap.temperature;
        opts.concurrency = cap.concurrency;
        opts.retry = {cap.max_retries, cap.backoff_initial_s, cap.backoff_max_s};
        for (const auto& c : {cap, simp, fuse}) owned.push_back(std::make_unique<caption::HttpProvider>(c));
      }
      if (concurrency > 0) opts.concurrency = concurrency;
      std::vector<std::unique_ptr<caption::LoggingProvider>> logged;
      for (auto& p : owned) {
        if (!log_requests.empty()) logged.push_back(std::make_unique<caption::LoggingProvider>(*p, log_requests));
      }
      auto pick = [&](std::size_t i) -> caption::Provider* {
        return logged.empty() ? owned[i].get() : static_cast<caption::Provider*>(logged[i].get());
      };
      providers = {pick(0), pick(1), pick(2)};
      const auto s = caption::run_pipeline(manifest, mpath.parent_path(), providers, caption_out, opts);
      const auto ds = caption::dataset_stats(caption_out);
      out << nlohmann::json{{"captioned", s.captioned},  {"simplified", s.simplified}, {"fused", s.fused},
                            {"failed", s.failed},        {"skipped", s.skipped},       {"samples", ds.samples},
                            {"mean_length", ds.mean_length}}
                 .dump()
          << "\n";
      return 0;
    };
  });

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate cached artifacts and print a JSON report");
  add_common(eval_cmd, common);
  std::string eval_out;
  eval_cmd->add_option("--out", eval_out, "Also write the report to this file");
  eval_cmd->callback([&] {
    action = [&] {
      Orchestrator orch(resolve(common), common.artifacts, err);
      const auto report = evaluate(orch);
      out << report.dump(2) << "\n";
      if (!eval_out.empty()) std::ofstream(eval_out) << report.dump(2) << "\n";
      return 0;
    };
  });

  auto* e2e_cmd = app.add_subcommand("e2e", "Run every stage from dataset to refined mesh");
  add_common(e2e_cmd, common);
  bool dry_run = false;
  std::string e2e_out;
  e2e_cmd->add_flag("--dry-run", dry_run, "Print the stage plan and exit");
  e2e_cmd->add_option("--out", e2e_out, "Copy the refined OBJ here");
  e2e_cmd->callback([&] {
    action = [&] {
      Orchestrator orch(resolve(common), common.artifacts, err);
      if (dry_run) {
        for (const auto& e : orch.plan("refine")) {
          out << e.stage << "\t" << (e.cached ? "cached" : "run") << "\t"
              << (e.key.empty() ? "pending" : e.key.substr(0, 16)) << "\n";
        }
        return 0;
      }
      const auto rec = orch.ensure("refine");
      copy_out(rec.dir / "refined.obj", e2e_out);
      out << (e2e_out.empty() ? (rec.dir / "refined.obj").string() : e2e_out) << "\n";
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  try {
    return action ? action() : 0;
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tridiff::cli
