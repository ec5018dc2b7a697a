#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "ctm/io.hpp"
#include "doctest.h"
#include "tiny_run.hpp"

using namespace ctm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ctm_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Writes a tiny parity run config and returns its path.
fs::path write_tiny_config(const fs::path& dir, std::size_t iterations = 4) {
  RunConfig run = tiny_parity_run(iterations);
  run.train.eval_interval = 2;
  run.output_dir = (dir / "run").string();
  const auto path = dir / "run.json";
  write_text_file(path, to_json(run).dump(2));
  return path;
}

struct Csv {
  std::string schema;
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

Csv read_csv(const fs::path& path) {
  Csv c;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, c.schema);
  std::getline(in, line);
  std::istringstream h(line);
  for (std::string cell; std::getline(h, cell, ',');) c.header.push_back(cell);
  while (std::getline(in, line)) {
    std::istringstream r(line);
    std::vector<double> row;
    for (std::string cell; std::getline(r, cell, ',');) row.push_back(std::stod(cell));
    c.rows.push_back(row);
  }
  return c;
}

// Values of a data attribute on the polyline of `series` in an SVG file.
std::vector<double> svg_values(const std::string& svg, const std::string& series, const std::string& attr) {
  const auto at = svg.find("data-series=\"" + series + "\"");
  REQUIRE(at != std::string::npos);
  const auto start = svg.find(attr + "=\"", at) + attr.size() + 2;
  const auto stop = svg.find('"', start);
  std::istringstream in(svg.substr(start, stop - start));
  std::vector<double> v;
  for (double x; in >> x;) v.push_back(x);
  return v;
}

// Emits the exact cumulative parity at every tick.
class PerfectParity : public SequenceModel {
 public:
  explicit PerfectParity(std::size_t length, std::size_t ticks) : length_(length), ticks_(ticks) {}
  std::string kind() const override { return "perfect"; }
  std::size_t ticks() const override { return ticks_; }
  std::size_t out_positions() const override { return length_; }
  std::size_t out_classes() const override { return 2; }
  std::size_t analytic_param_count() const override { return 0; }
  ForwardOutput forward(ParamBinding& p, const Tensor& inputs, const ForwardOptions&) const override {
    const std::size_t b = inputs.shape[0];
    Tensor y({b, length_, 2});
    for (std::size_t i = 0; i < b; ++i) {
      int sign = 1;
      for (std::size_t k = 0; k < length_; ++k) {
        sign *= inputs[i * length_ + k] < 0 ? -1 : 1;
        y[(i * length_ + k) * 2 + parity_class(sign)] = 10.0;
      }
    }
    ForwardOutput out;
    for (std::size_t t = 0; t < ticks_; ++t) out.logits.push_back(p.tape().constant(y));
    return out;
  }

 private:
  std::size_t length_, ticks_;
};

}  // namespace

TEST_CASE("train command: errors and exit codes") {
  auto r = run_cli({"train", "/nonexistent/dir/run.json"});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("/nonexistent/dir/run.json") != std::string::npos);

  const auto dir = scratch_dir("errors");
  write_text_file(dir / "typo.json", R"({"train": {"iteratons": 5}})");
  r = run_cli({"train", (dir / "typo.json").string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("train.iteratons") != std::string::npos);

  write_text_file(dir / "syntax.json", "{\n\"train\": {\n\"lr\": 1e-3,,\n}}");
  r = run_cli({"train", (dir / "syntax.json").string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("syntax.json:3:") != std::string::npos);

  CHECK(run_cli({"frobnicate"}).code == cli::kUsage);
  CHECK(run_cli({}).code == cli::kUsage);
  CHECK(run_cli({"--help"}).code == cli::kOk);

  // The real binary reports the same exit code.
  const std::string cmd = std::string(CTM_CLI_PATH) + " train /nonexistent/run.json 2>" + (dir / "err.txt").string();
  const int status = std::system(cmd.c_str());
  CHECK(WEXITSTATUS(status) == 1);
  CHECK(read_text_file(dir / "err.txt").find("/nonexistent/run.json") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("train command writes a self-describing run") {
  const auto dir = scratch_dir("train");
  const auto config = write_tiny_config(dir);
  auto r = run_cli({"train", config.string(), "--quiet"});
  REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
  const fs::path run = dir / "run";
  CHECK(fs::exists(run / kConfigFile));
  CHECK(fs::exists(run / kMetricsFile));
  CHECK(fs::exists(run / kBestCheckpoint));
  CHECK(fs::exists(run / kFinalCheckpoint));

  const json echo = json::parse(read_text_file(run / kConfigFile));
  CHECK(echo["train"].contains("grad_clip"));
  CHECK(echo["model"]["pairing"].contains("n_self"));
  CHECK(echo["model"]["out_positions"] == 4);
  // The echo is itself a valid config describing the same run.
  CHECK(to_json(run_config_from_json(echo)) == echo);

  const std::string first = read_text_file(run / kMetricsFile);
  CHECK(std::count(first.begin(), first.end(), '\n') == 2);
  r = run_cli({"train", config.string(), "--quiet"});
  REQUIRE(r.code == cli::kOk);
  CHECK(read_text_file(run / kMetricsFile) == first);

  // Output directory precedence: flag, then environment, then config.
  setenv(cli::kOutputDirEnv, (dir / "from_env").c_str(), 1);
  r = run_cli({"train", config.string(), "--quiet"});
  CHECK(r.code == cli::kOk);
  CHECK(fs::exists(dir / "from_env" / kMetricsFile));
  r = run_cli({"train", config.string(), "--quiet", "--output-dir", (dir / "from_flag").string()});
  CHECK(r.code == cli::kOk);
  CHECK(fs::exists(dir / "from_flag" / kMetricsFile));
  unsetenv(cli::kOutputDirEnv);
  fs::remove_all(dir);
}

TEST_CASE("eval command report") {
  const auto dir = scratch_dir("eval");
  const auto config = write_tiny_config(dir);
  REQUIRE(run_cli({"train", config.string(), "--quiet"}).code == cli::kOk);
  const std::string ckpt = (dir / "run" / kFinalCheckpoint).string();

  auto r = run_cli({"eval", "--checkpoint", ckpt, "--threshold", "1.01"});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("threshold") != std::string::npos);
  CHECK(run_cli({"eval", "--checkpoint", (dir / "missing.ckpt").string()}).code == cli::kUsage);

  r = run_cli({"eval", "--checkpoint", ckpt, "--samples", "40", "--bins", "5"});
  REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
  const json rep = json::parse(r.out);
  CHECK(rep["samples"] == 40);
  CHECK(rep["per_tick_accuracy"].size() == 4);
  CHECK(rep["halting"]["histogram"].size() == 4);
  std::size_t halted = 0;
  for (const auto& h : rep["halting"]["histogram"]) halted += h.get<std::size_t>();
  CHECK(halted == 40);
  CHECK(rep["calibration"]["bins"].size() == 5);
  std::size_t binned = 0;
  for (const auto& b : rep["calibration"]["bins"]) binned += b["count"].get<std::size_t>();
  CHECK(binned == 40 * 4);

  // Saved datasets give the same numbers as the seed they were drawn with.
  const std::string data = (dir / "eval.bin").string();
  REQUIRE(run_cli({"dataset", "--config", config.string(), "--samples", "40", "--seed", "1234", "--out", data}).code ==
          cli::kOk);
  r = run_cli({"eval", "--checkpoint", ckpt, "--dataset", data, "--bins", "5"});
  REQUIRE(r.code == cli::kOk);
  CHECK(json::parse(r.out)["accuracy"] == rep["accuracy"]);

  // A task of a different length no longer fits the model.
  write_text_file(dir / "task.json", R"({"name": "parity", "length": 6})");
  r = run_cli({"eval", "--checkpoint", ckpt, "--task", (dir / "task.json").string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("model.out_positions: checkpoint 4, task 6") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("perfect toy model is accurate at every tick") {
  TaskConfig tc;
  tc.length = 5;
  auto task = make_task(tc);
  Rng rng(2);
  const Batch b = task->sample(30, rng);
  PerfectParity model(5, 3);
  const auto r = evaluate(model, *task, b, LossMode::two_tick);
  const json rep = cli::eval_report(r, 0.8, 10);
  for (const auto& a : rep["per_tick_accuracy"]) CHECK(a == 1.0);
  CHECK(rep["accuracy"] == 1.0);
  CHECK(rep["halting"]["accuracy_at_halt"] == 1.0);
  CHECK(rep["halting"]["histogram"][0] == 30);
}

TEST_CASE("eval report ECE matches the hand-built fixture") {
  // Confidences 0.875, 0.625, 0.125, 0.625 with correctness T, F, F, T over 4 bins
  // give ECE = 0.125.
  EvalResult r;
  const std::size_t c = 8;
  Tensor probs({4, c});
  auto fill = [&](std::size_t row, double top) {
    probs[row * c] = top;
    for (std::size_t k = 1; k < c; ++k) probs[row * c + k] = (1.0 - top) / double(c - 1);
  };
  fill(0, 0.875);
  fill(1, 0.625);
  fill(2, 0.125);
  fill(3, 0.625);
  r.probs = {probs};
  r.labels = {0, 1, 1, 0};
  r.certainties = Tensor({4, 1}, {1, 1, 1, 1});
  r.tick_accuracy = {0.5};
  r.chosen_tick = {0, 0, 0, 0};
  const json rep = cli::eval_report(r, 0.8, 4);
  CHECK(rep["calibration"]["ece"].get<double>() == 0.125);
  CHECK_THROWS_AS(cli::eval_report(r, 1.01, 4), ConfigError);
}

TEST_CASE("trace command exports consistent files") {
  const auto dir = scratch_dir("trace");
  const auto config = write_tiny_config(dir);
  REQUIRE(run_cli({"train", config.string(), "--quiet"}).code == cli::kOk);
  const std::string ckpt = (dir / "run" / kFinalCheckpoint).string();
  const fs::path out = dir / "trace";

  auto r = run_cli({"trace", "--checkpoint", ckpt, "--samples", "3", "--instance", "3", "--out", out.string()});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("out of range") != std::string::npos);

  r = run_cli({"trace", "--checkpoint", ckpt, "--samples", "3", "--instance", "2", "--neurons", "5", "--out",
           out.string()});
  REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
  const Csv csv = read_csv(out / "trace_2.csv");
  CHECK(csv.schema.find("# schema: ctm-trace/1") == 0);
  REQUIRE(csv.rows.size() == 4);  // one row per tick

  const std::size_t heads = 2, per_tick = 4 * 2;
  const std::size_t first_attn = 1 + per_tick + 1;
  const std::size_t locs = (csv.header.size() - first_attn) / heads;
  REQUIRE(first_attn + heads * locs == csv.header.size());
  CHECK(csv.header[first_attn] == "attn_h0_l0");
  const std::string svg = read_text_file(out / "attention_2.svg");
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> argmax;
    for (const auto& row : csv.rows) {
      double s = 0.0;
      std::size_t best = 0;
      for (std::size_t l = 0; l < locs; ++l) {
        const double w = row[first_attn + h * locs + l];
        s += w;
        if (w > row[first_attn + h * locs + best]) best = l;
      }
      CHECK(std::abs(s - 1.0) < 1e-9);
      argmax.push_back(static_cast<double>(best));
    }
    CHECK(svg_values(svg, "head " + std::to_string(h), "data-y") == argmax);
  }

  const Csv neurons = read_csv(out / "neurons_2.csv");
  CHECK(neurons.rows.size() == 4);
  CHECK(neurons.header.size() == 6);
  CHECK(fs::exists(out / "neurons_2.svg"));
  fs::remove_all(dir);
}

TEST_CASE("plot command") {
  const auto dir = scratch_dir("plot");
  const auto config = write_tiny_config(dir);
  REQUIRE(run_cli({"train", config.string(), "--quiet"}).code == cli::kOk);
  const std::string svg = (dir / "curves.svg").string();
  auto r = run_cli({"plot", "--metrics", (dir / "run" / kMetricsFile).string(), "--out", svg});
  REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
  const std::string text = read_text_file(svg);
  CHECK(text.find("<svg") == 0);
  CHECK(svg_values(text, "train loss", "data-x") == std::vector<double>{2, 4});

  const std::string report = (dir / "report.json").string();
  REQUIRE(run_cli({"eval", "--checkpoint", (dir / "run" / kFinalCheckpoint).string(), "--out", report}).code ==
          cli::kOk);
  r = run_cli({"plot", "--report", report, "--out", (dir / "rel.svg").string()});
  CHECK(r.code == cli::kOk);
  CHECK(fs::exists(dir / "rel.svg"));
  CHECK(run_cli({"plot", "--out", (dir / "x.svg").string()}).code == cli::kUsage);
  fs::remove_all(dir);
}
