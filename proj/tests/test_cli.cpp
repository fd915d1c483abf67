#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "syncast/cli.hpp"
#include "syncast/data.hpp"
#include "syncast/io.hpp"

using namespace syncast;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "syncast");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> tiny_flags(const fs::path& dir) {
  return {"--output-dir", dir.string(),
          "--data.n_train", "10", "--data.n_val", "1", "--data.n_test", "2",
          "--data.height", "16", "--data.width", "16", "--data.context_len", "2", "--data.horizon", "3",
          "--model.base_channels", "8", "--model.channel_mults", "[1,2]", "--model.attention_resolutions", "[8]",
          "--model.attention_heads", "2", "--model.cond_embed_dim", "16", "--model.time_embed_dim", "32",
          "--schedule.steps", "100", "--train.steps", "3", "--train.batch_size", "2", "--train.val_every", "0",
          "--sampler.n_steps", "3", "--preference.n_candidates", "3", "--alignment.far_steps", "1",
          "--alignment.csi_steps", "1", "--alignment.batch_size", "2", "--evaluation.ensemble", "2",
          "--evaluation.pools", "[1,4]"};
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(invoke({"frobnicate"}).code == 2);
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"align", "sideways"}).code == 2);
  CHECK(invoke({"train-base", "--train.steps", "abc"}).code == 2);
  const auto r = invoke({"train-base", "--train.bogus", "1"});
  CHECK(r.code == 2);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("help exits with 0") {
  const auto r = invoke({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("pipeline") != std::string::npos);
  CHECK(invoke({"evaluate", "--help"}).code == 0);
}

TEST_CASE("a missing checkpoint is a runtime failure naming the path") {
  test::TempDir dir("cli_missing");
  const auto r = invoke({"evaluate", "--checkpoint", "missing.ckpt", "--output-dir", dir.path().string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("missing.ckpt") != std::string::npos);
}

TEST_CASE("gen-data writes the requested number of events") {
  test::TempDir dir("cli_gen");
  auto args = std::vector<std::string>{"gen-data", "--seed", "0", "--events", "20", "--output-dir", dir.path().string(),
                                       "--data.height", "16", "--data.width", "16"};
  REQUIRE(invoke(args).code == 0);
  const auto archive = data::ingest_archive(dir.path() / "data");
  CHECK(archive.size() == 20);
  CHECK(archive.events(data::Split::test).size() == 4);
  CHECK(archive.events(data::Split::val).size() == 2);
  CHECK(archive.events(data::Split::train).size() == 14);
}

TEST_CASE("dry runs leave the output directory untouched") {
  test::TempDir dir("cli_dry");
  const auto target = dir.path() / "run";
  CHECK(invoke({"gen-data", "--dry-run", "--output-dir", target.string()}).code == 0);
  CHECK(invoke({"pipeline", "--dry-run", "--output-dir", target.string()}).code == 0);
  CHECK_FALSE(fs::exists(target / "data"));
  CHECK((!fs::exists(target) || fs::is_empty(target)));
}

TEST_CASE("pipeline then plot produces figures") {
  test::TempDir dir("cli_pipe");
  auto args = tiny_flags(dir.path());
  args.insert(args.begin(), "pipeline");
  const auto r = invoke(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(dir.path() / "summary.json"));
  const auto p = invoke({"plot", "--output-dir", dir.path().string()});
  REQUIRE_MESSAGE(p.code == 0, p.err);
  for (const char* f : {"lead_time_csi.svg", "lead_time_far.svg", "stage_comparison.svg"}) {
    CHECK(fs::exists(dir.path() / "plots" / f));
    CHECK(io::read_text(dir.path() / "plots" / f).find("<svg") != std::string::npos);
  }
}

TEST_CASE("stages can be run one at a time") {
  test::TempDir dir("cli_stages");
  auto flags = tiny_flags(dir.path());
  auto with = [&](std::vector<std::string> head) {
    head.insert(head.end(), flags.begin(), flags.end());
    return invoke(head);
  };
  REQUIRE(with({"gen-data"}).code == 0);
  REQUIRE(with({"train-base"}).code == 0);
  REQUIRE(with({"build-prefs"}).code == 0);
  REQUIRE(with({"align", "far"}).code == 0);
  REQUIRE(with({"align", "csi"}).code == 0);
  const auto e = with({"evaluate", "--checkpoint", "pi_beta.ckpt"});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  CHECK(fs::exists(dir.path() / "report_pi_beta.json"));
  const auto s = with({"sample", "--checkpoint", "pi0.ckpt", "--members", "2"});
  CHECK_MESSAGE(s.code == 0, s.err);
  // Stage order is enforced: csi alignment needs a FAR-aligned policy.
  fs::remove(dir.path() / "pi_alpha.ckpt");
  CHECK(with({"align", "csi"}).code == 1);
}
