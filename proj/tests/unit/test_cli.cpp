#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tridiff/cli/app.hpp"
#include "tridiff/cli/artifacts.hpp"
#include "tridiff/cli/config.hpp"
#include "tridiff/cli/pipeline.hpp"
#include "tridiff/refine/mesh.hpp"

using namespace tridiff;
using namespace tridiff::cli;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("tridiff_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "tridiff");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("every profile validates and round-trips through text") {
  for (const auto& name : PipelineConfig::profiles()) {
    CAPTURE(name);
    const PipelineConfig c = PipelineConfig::from_profile(name);
    CHECK_NOTHROW(c.validate());
    const std::string text = c.to_text();
    const PipelineConfig back = PipelineConfig::from_text(text);
    CHECK(back.to_text() == text);
    for (const auto& k : PipelineConfig::keys()) CHECK(back.get(k) == c.get(k));
  }
  CHECK_THROWS_AS(PipelineConfig::from_profile("huge"), ConfigError);
}

TEST_CASE("config text rejects unknown and duplicate keys") {
  CHECK_THROWS_AS(PipelineConfig::from_text("no.such.key = 1\n"), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_text("seed = 1\nseed = 2\n"), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_text("seed 1\n"), ConfigError);
  try {
    PipelineConfig::from_text("# comment\n\nbogus = 3\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
}

TEST_CASE("config set and get are lossless for strings and floats") {
  PipelineConfig c = PipelineConfig::from_profile("smoke");
  c.set("sample.prompt", "\"a \\\"blue\\\" box, = odd\"");
  c.set("sample.guidance", "0.1");
  const PipelineConfig back = PipelineConfig::from_text(c.to_text());
  CHECK(back.sample.prompt == "a \"blue\" box, = odd");
  CHECK(back.sample.guidance == 0.1);
  CHECK_THROWS_AS(c.set("sample.count", "many"), ConfigError);
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
}

TEST_CASE("derived fields track their sources") {
  PipelineConfig c = PipelineConfig::from_profile("smoke");
  c.set("fit.channels", "6");
  c.set("vae.latent_channels", "3");
  CHECK(c.vae.in_channels == 6);
  CHECK(c.ldm.denoiser.latent_channels == 3);
}

TEST_CASE("stage text isolates each stage's keys") {
  PipelineConfig a = PipelineConfig::from_profile("smoke");
  PipelineConfig b = a;
  b.set("sample.prompt", "\"a blue box\"");
  CHECK(a.stage_text("fit") == b.stage_text("fit"));
  CHECK(a.stage_text("ldm") == b.stage_text("ldm"));
  CHECK(a.stage_text("sample") != b.stage_text("sample"));
}

TEST_CASE("artifact store commits, looks up and detects tampering") {
  const fs::path root = fresh_dir("store");
  ArtifactStore store(root);
  const std::string key = ArtifactStore::stage_key("fit", "cfg", {"up"});
  CHECK(key != ArtifactStore::stage_key("fit", "cfg", {"other"}));
  CHECK(key != ArtifactStore::stage_key("fit", "cfg2", {"up"}));
  CHECK_FALSE(store.lookup(key));

  const fs::path stage = store.staging("fit", key);
  std::ofstream(stage / "a.txt") << "hello";
  fs::create_directories(stage / "sub");
  std::ofstream(stage / "sub" / "b.txt") << "world";
  const ArtifactRecord r = store.commit("fit", key, "cfg", {"up"}, stage, {{"n", 1}});
  CHECK_FALSE(fs::exists(stage));
  CHECK(r.dir == root / "store" / r.content_hash);
  CHECK(r.upstream == std::vector<std::string>{"up"});

  ArtifactStore reopened(root);
  const auto found = reopened.lookup(key);
  REQUIRE(found);
  CHECK(found->content_hash == r.content_hash);
  CHECK(found->config_hash == "cfg");
  CHECK(found->info.at("n") == 1);
  REQUIRE(reopened.latest("fit"));

  std::ofstream(r.dir / "a.txt") << "tampered";
  CHECK_FALSE(reopened.lookup(key));
}

TEST_CASE("smoke pipeline runs, caches and names failing stages") {
  const fs::path root = fresh_dir("e2e");
  const PipelineConfig cfg = PipelineConfig::from_profile("smoke");
  std::ostringstream log;

  {
    Orchestrator orch(cfg, root, log);
    for (const auto& p : orch.plan("refine")) CHECK_FALSE(p.cached);
    const ArtifactRecord r = orch.ensure("refine");
    CHECK(orch.executed() == stage_names());
    const refine::Mesh mesh = refine::read_obj(r.dir / "refined.obj");
    CHECK(mesh.faces.size() > 0);
    CHECK(mesh.faces.size() <= cfg.refine.refine.max_faces);
  }

  SUBCASE("rerun reuses every stage") {
    Orchestrator orch(cfg, root, log);
    for (const auto& p : orch.plan("refine")) CHECK(p.cached);
    orch.ensure("refine");
    CHECK(orch.executed().empty());
    CHECK(orch.reused().size() == stage_names().size());
  }

  SUBCASE("changing the prompt reruns only sampling and refinement") {
    PipelineConfig c2 = cfg;
    c2.set("sample.prompt", "\"a blue box\"");
    Orchestrator orch(c2, root, log);
    orch.ensure("refine");
    CHECK(orch.executed() == std::vector<std::string>{"sample", "refine"});
  }

  SUBCASE("same config gives identical artifact hashes in a fresh store") {
    const fs::path other = fresh_dir("e2e_other");
    Orchestrator a(cfg, root, log), b(cfg, other, log);
    for (const auto& s : stage_names()) CHECK(a.ensure(s).content_hash == b.ensure(s).content_hash);
  }

  SUBCASE("eval report has exactly the documented keys") {
    Orchestrator orch(cfg, root, log);
    const nlohmann::json rep = evaluate(orch);
    std::vector<std::string> keys;
    for (const auto& [k, v] : rep.items()) keys.push_back(k);
    std::vector<std::string> expected = eval_report_keys();
    std::sort(expected.begin(), expected.end());
    CHECK(keys == expected);
    CHECK(rep.at("sampling_deterministic") == true);
    CHECK(rep.at("vae_psnr_threshold") == kVaePsnrThreshold);
    CHECK(rep.at("fitting_psnr").size() == static_cast<std::size_t>(cfg.data.objects));
  }

  SUBCASE("a failing stage is named") {
    PipelineConfig bad = cfg;
    bad.set("refine.sdf_resolution", "8");
    Orchestrator orch(bad, root, log);
    try {
      orch.ensure("refine");
      FAIL("expected a stage error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).rfind("[refine]", 0) == 0);
    }
  }
}

TEST_CASE("eval lists missing artifacts") {
  const fs::path root = fresh_dir("missing");
  std::ostringstream log;
  Orchestrator orch(PipelineConfig::from_profile("smoke"), root, log);
  try {
    evaluate(orch);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    for (const char* s : {"data", "fit", "vae", "ldm"}) CHECK(msg.find(s) != std::string::npos);
  }
}

TEST_CASE("every subcommand has help and rejects bad flags") {
  for (const std::string sub :
       {"config", "dataset", "fit", "train-vae", "train-ldm", "sample", "refine", "caption", "eval", "e2e"}) {
    CAPTURE(sub);
    const CliResult help = run({sub, "--help"});
    CHECK(help.code == 0);
    CHECK(run({sub, "--definitely-not-a-flag"}).code != 0);
  }
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"frobnicate"}).code != 0);
  CHECK(run({"config", "--profile", "nope"}).code != 0);
  CHECK(run({"config", "--set", "bogus=1"}).code != 0);
}

TEST_CASE("config subcommand output loads back") {
  const fs::path dir = fresh_dir("cfgcmd");
  const CliResult r = run({"config", "--profile", "smoke", "--set", "seed=7", "--out", (dir / "c.txt").string()});
  REQUIRE(r.code == 0);
  const PipelineConfig c = PipelineConfig::load(dir / "c.txt");
  CHECK(c.seed == 7);
  CHECK(c.profile == "smoke");
  const CliResult again = run({"config", "--config", (dir / "c.txt").string()});
  CHECK(again.code == 0);
  CHECK(again.out == read_file(dir / "c.txt"));
}

TEST_CASE("e2e dry run plans without building") {
  const fs::path dir = fresh_dir("dry");
  const CliResult r = run({"e2e", "--profile", "smoke", "--artifacts", dir.string(), "--dry-run"});
  CHECK(r.code == 0);
  for (const auto& s : stage_names()) CHECK(r.out.find(s + "\trun") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "index.json"));
}

TEST_CASE("cli e2e, eval, caption and standalone refine") {
  const fs::path dir = fresh_dir("cli");
  const std::string art = (dir / "art").string();
  REQUIRE(run({"e2e", "--profile", "smoke", "--artifacts", art, "--out", (dir / "o.obj").string()}).code == 0);
  CHECK(refine::read_obj(dir / "o.obj").faces.size() <= 500);

  const CliResult dry = run({"e2e", "--profile", "smoke", "--artifacts", art, "--dry-run"});
  for (const auto& s : stage_names()) CHECK(dry.out.find(s + "\tcached") != std::string::npos);

  const CliResult ev = run({"eval", "--profile", "smoke", "--artifacts", art});
  REQUIRE(ev.code == 0);
  CHECK(nlohmann::json::parse(ev.out).size() == eval_report_keys().size());

  fs::path manifest;
  for (const auto& e : fs::recursive_directory_iterator(art)) {
    if (e.path().filename() == "manifest.jsonl") manifest = e.path();
  }
  REQUIRE_FALSE(manifest.empty());
  const std::string caps = (dir / "caps.jsonl").string();
  const CliResult cap = run({"caption", "--manifest", manifest.string(), "--mock", "--out", caps});
  REQUIRE(cap.code == 0);
  const auto stats = nlohmann::json::parse(cap.out);
  CHECK(stats.at("fused") == 2);
  CHECK(stats.at("failed") == 0);
  const CliResult again = run({"caption", "--manifest", manifest.string(), "--mock", "--out", caps});
  CHECK(nlohmann::json::parse(again.out).at("skipped") == 2);

  const std::string refined = (dir / "r.obj").string();
  const CliResult ref = run({"refine", "--profile", "smoke", "--mesh", (dir / "o.obj").string(), "--out", refined});
  CHECK(ref.code == 0);
  CHECK(refine::read_obj(refined).faces.size() > 0);
  CHECK(run({"refine", "--profile", "smoke", "--mesh", (dir / "o.obj").string()}).code != 0);
}
