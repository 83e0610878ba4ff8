#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "cloc_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Run run(const std::string& args) {
  const auto out_file = workdir() / "stdout.txt";
  const std::string cmd = std::string(CLOC_CLI_PATH) + " " + args + " > " + out_file.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string write_file(const std::string& name, const std::string& text) {
  const auto p = workdir() / name;
  std::ofstream(p) << text;
  return p.string();
}

std::size_t data_rows(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++n;
  return n - 1;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  return nlohmann::json::parse(in);
}

const std::string& small_data() {
  static const std::string path = [] {
    const auto spec = write_file("spec.json", R"({"num_classes":3,"dim":4,"per_class":15,"gaps":[1,1],"sigma":0.1,"seed":2})");
    const auto out = (workdir() / "small.csv").string();
    EXPECT_EQ(run("gen --spec " + spec + " --out " + out).code, 0);
    return out;
  }();
  return path;
}

const std::string& small_config() {
  static const std::string path = write_file(
      "config.json", R"({"encoder_hidden":[16],"embedding_dim":4,"classifier_hidden":8,"max_epochs":40,"seed":1})");
  return path;
}

}  // namespace

TEST(Cli, GenWritesTheRequestedRowsAndAManifest) {
  const auto& data = small_data();
  EXPECT_EQ(data_rows(data), 45u);
  const auto manifest = read_json(data + ".manifest.json");
  EXPECT_EQ(manifest["command"], "gen");
  EXPECT_EQ(manifest["seed"], 2);
}

TEST(Cli, GenWithBiasKeepsCleanLabels) {
  const auto spec = write_file("spec_b.json", R"({"num_classes":3,"dim":2,"per_class":10,"gaps":[1,1],"sigma":0.1})");
  const auto bias = write_file("bias.json", R"({"boundary":1,"p_up":0.5,"p_down":0.2,"seed":3})");
  const auto out = (workdir() / "biased.csv").string();
  ASSERT_EQ(run("gen --spec " + spec + " --bias " + bias + " --out " + out).code, 0);
  std::ifstream in(out);
  std::string header;
  std::getline(in, header);
  EXPECT_NE(header.find("clean_label"), std::string::npos);
  std::size_t flipped = 0;
  std::string line;
  while (std::getline(in, line)) {
    std::stringstream fields(line);
    std::vector<std::string> cells;
    for (std::string cell; std::getline(fields, cell, ',');) cells.push_back(cell);
    flipped += cells[1] != cells.back();
  }
  EXPECT_EQ(flipped, 7u);
}

TEST(Cli, MalformedInputsExitWithTwo) {
  const auto bad = write_file("bad.json", "{\"num_classes\": 3,");
  EXPECT_EQ(run("gen --spec " + bad + " --out " + (workdir() / "x.csv").string()).code, 2);
  const auto bad_csv = write_file("bad.csv", "id,label,f1\n1,0,0.5\n");
  EXPECT_EQ(run("train --data " + bad_csv + " --out " + (workdir() / "t_bad").string()).code, 2);
  EXPECT_EQ(run("train --data " + small_data() + " --out " + (workdir() / "t_bad").string() + " --fix-margin 3=1").code,
            2);
  EXPECT_EQ(run("frobnicate").code, 2);
}

TEST(Cli, MissingOrCorruptCheckpointExitsWithThree) {
  EXPECT_EQ(run("eval --checkpoint " + (workdir() / "nope.json").string() + " --data " + small_data()).code, 3);
  const auto corrupt = write_file("corrupt_ck.json", "{\"format\": \"cloc-checkpoint\"");
  EXPECT_EQ(run("eval --checkpoint " + corrupt + " --data " + small_data()).code, 3);
}

TEST(Cli, TrainEvalExportRoundTrip) {
  const auto dir = (workdir() / "run").string();
  ASSERT_EQ(run("train --data " + small_data() + " --config " + small_config() + " --out " + dir +
                " --fix-margin 2=0.8")
                .code,
            0);
  for (const char* f : {"checkpoint.json", "train_log.csv", "margins.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(dir) / f)) << f;

  const auto margins = read_json(dir + "/margins.json");
  ASSERT_EQ(margins["boundaries"].size(), 2u);
  EXPECT_EQ(margins["boundaries"][1]["boundary"], 2);
  EXPECT_EQ(margins["boundaries"][1]["mode"], "fixed");
  EXPECT_EQ(margins["boundaries"][1]["value"], 0.8);
  EXPECT_EQ(margins["boundaries"][0]["mode"], "learnable");

  const auto eval = run("eval --checkpoint " + dir + "/checkpoint.json --data " + small_data());
  ASSERT_EQ(eval.code, 0);
  const auto report = nlohmann::json::parse(eval.out);
  EXPECT_GE(report["accuracy"].get<double>(), 0.0);
  EXPECT_EQ(report["boundary_errors"].size(), 2u);
  EXPECT_TRUE(report.contains("ordering_score"));

  const auto emb = (workdir() / "emb.csv").string();
  ASSERT_EQ(run("export --checkpoint " + dir + "/checkpoint.json --data " + small_data() + " --out " + emb).code, 0);
  EXPECT_EQ(data_rows(emb), 45u);
}

TEST(Cli, SelfCheckPasses) {
  const auto r = run("check --configs 6 --batches 10");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("ok   gradients"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("ok   loss oracle"), std::string::npos) << r.out;
}
