#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "polarquant/codebook.hpp"
#include "polarquant/quantizer.hpp"
#include "polarquant/tensor_io.hpp"

using namespace polarquant;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(POLARQUANT_CLI_PATH) + " " + args + " 2>/dev/null";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  std::size_t got = 0;
  while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

int run_stderr(const std::string& args, std::string& err) {
  const fs::path errfile = fs::temp_directory_path() / "pq_cli_stderr.txt";
  const std::string cmd = std::string(POLARQUANT_CLI_PATH) + " " + args + " >/dev/null 2>" +
                          errfile.string();
  const int status = std::system(cmd.c_str());
  std::ifstream f(errfile);
  std::stringstream ss;
  ss << f.rdbuf();
  err = ss.str();
  fs::remove(errfile);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pq_cli_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("gen, quantize and dequantize agree with the library") {
  TempDir dir;
  const auto x_path = dir / "x.pqt";
  const auto cb_path = dir / "cb.json";
  const auto q_path = dir / "x.pqq";
  const auto y_path = dir / "y.pqt";

  REQUIRE(run("--seed 5 gen --n 40 --d 64 --out " + x_path).code == 0);
  const auto x = load_tensor(x_path);
  CHECK(x == generate_gaussian(40, 64, 5));

  REQUIRE(run("--seed 6 codebook --codebook-mode online --in " + x_path + " --out " + cb_path).code == 0);
  REQUIRE(run("--seed 7 quantize --in " + x_path + " --codebooks " + cb_path + " --out " + q_path).code == 0);
  REQUIRE(run("dequantize --in " + q_path + " --codebooks " + cb_path + " --out " + y_path).code == 0);

  const auto cs = load_codebooks(cb_path);
  QuantizerConfig config;
  config.rotation_seed = 7;
  const auto rotation = build_rotation(64, 7);
  const auto batch = encode_batch(x, rotation, cs, config);
  CHECK(serialize_batch(batch) == serialize_batch(load_quantized(q_path)));
  CHECK(load_tensor(y_path) == decode_batch(batch, rotation, cs));
}

TEST_CASE("online codebook command matches build_online") {
  TempDir dir;
  REQUIRE(run("--seed 1 gen --n 64 --d 32 --out " + (dir / "x.pqt")).code == 0);
  REQUIRE(run("--seed 2 codebook --levels 3 --bits 3,2,2 --in " + (dir / "x.pqt") + " --out " +
              (dir / "cb.json")).code == 0);
  const auto x = load_tensor(dir / "x.pqt");
  const auto y = apply(x, build_rotation(32, 2));
  std::vector<std::vector<double>> angles(3);
  for (const auto& rep : to_polar_batch(y, 3)) {
    for (std::size_t l = 0; l < 3; ++l) angles[l].insert(angles[l].end(), rep.angles[l].begin(), rep.angles[l].end());
  }
  CHECK(load_codebooks(dir / "cb.json") == build_online(angles, BitWidthConfig{{3, 2, 2}, 16}, 2));
}

TEST_CASE("stats: rotation flattens heavy-tailed level-1 angles") {
  TempDir dir;
  REQUIRE(run("--seed 3 gen --heavy-tailed --n 2000 --d 64 --out " + (dir / "h.pqt")).code == 0);
  const auto r = run("--seed 4 --format json stats --in " + (dir / "h.pqt"));
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("tool_version") == POLARQUANT_VERSION);
  CHECK(j.at("seed") == 4);
  CHECK(j.contains("config"));
  double ks[2] = {0, 0};
  for (const auto& v : j.at("variants")) {
    const int idx = v.at("variant") == "rotated" ? 1 : 0;
    ks[idx] = v.at("levels").at(0).at("ks").get<double>();
  }
  CHECK(ks[1] < ks[0]);

  const auto csv = run("--format csv stats --levels 2 --bins 8 --in " + (dir / "h.pqt"));
  REQUIRE(csv.code == 0);
  CHECK(csv.out.rfind("# polarquant stats csv v1", 0) == 0);
  // Header comment + column row + 2 variants x 2 levels x 8 bins.
  CHECK(std::count(csv.out.begin(), csv.out.end(), '\n') == 2 + 2 * 2 * 8);
}

TEST_CASE("reports are deterministic in the seed") {
  TempDir dir;
  const std::string k = dir / "k.pqt";
  const std::string v = dir / "v.pqt";
  const std::string q = dir / "q.pqt";
  REQUIRE(run("--seed 1 gen --n 64 --d 32 --out " + k).code == 0);
  REQUIRE(run("--seed 2 gen --n 64 --d 32 --out " + v).code == 0);
  REQUIRE(run("--seed 3 gen --n 5 --d 32 --out " + q).code == 0);
  const std::string args = "--seed 9 attend --keys " + k + " --values " + v + " --queries " + q;
  const auto a = run(args);
  REQUIRE(a.code == 0);
  CHECK(a.out == run(args).out);
  const auto j = nlohmann::json::parse(a.out);
  CHECK(j.at("queries").size() == 5);
  for (const auto& row : j.at("queries")) {
    CHECK(std::abs(row.at("score_sum").get<double>() - 1.0) <= 1e-5);
  }

  const auto sep = run("--seed 2 validate separability --d 8 --samples 2000");
  REQUIRE(sep.code == 0);
  CHECK(nlohmann::json::parse(sep.out).at("report").contains("max_angle_corr"));
}

TEST_CASE("exit codes") {
  std::string err;
  CHECK(run_stderr("frobnicate", err) == 2);
  CHECK(nlohmann::json::parse(err).at("error") == "usage");
  CHECK(run_stderr("", err) == 2);
  CHECK(run_stderr("gen --n 4", err) == 2);
  CHECK(run_stderr("gen --n 4 --d 4 --bogus 1", err) == 2);
  CHECK(run_stderr("--format xml stats --in nothing", err) == 2);
  CHECK(run_stderr("quantize --bits 4,2 --levels 4 --in a --codebooks b --out c", err) == 2);

  CHECK(run_stderr("dequantize --in /nonexistent/file --codebooks x --out y", err) == 1);
  const auto j = nlohmann::json::parse(err);
  CHECK(j.at("exit_code") == 1);
  CHECK(j.contains("message"));
}
