#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "coattn/synth_data.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "coattn_cli_tests";

int run(const std::string& args, const fs::path& stdout_file = {}) {
  std::string cmd = std::string(COATTN_CLI_PATH) + " " + args;
  cmd += stdout_file.empty() ? " >/dev/null" : " >" + stdout_file.string();
  cmd += " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// One small dataset and checkpoint shared by every test in this file.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    std::ofstream(kRoot / "spec.txt") << "image_size = 16\nmin_object = 4\nmax_object = 6\n"
                                         "train_count = 12\ntest_count = 4\nseed = 3\n";
    std::ofstream(kRoot / "train.txt") << "epochs = 1\npairs_per_epoch = 6\nchannels = 4, 8\n";
    ASSERT_EQ(run("gen-data --out " + (kRoot / "data").string() + " --spec " + (kRoot / "spec.txt").string()), 0);
    ASSERT_EQ(run("train --data " + (kRoot / "data").string() + " --config " + (kRoot / "train.txt").string() +
                  " --out " + (kRoot / "model").string()),
              0);
  }
  static std::string data() { return (kRoot / "data").string(); }
  static std::string test_split() { return (kRoot / "data" / "test").string(); }
  static std::string ckpt() { return (kRoot / "model" / "final.ckpt").string(); }
};

}  // namespace

TEST_F(Cli, ConfigurationErrorsExitTwo) {
  EXPECT_EQ(run("gen-data --out " + (kRoot / "x").string() + " --spec " + (kRoot / "missing.txt").string()), 2);
  std::ofstream(kRoot / "bad.txt") << "epoch = 3\n";
  EXPECT_EQ(run("train --data " + data() + " --config " + (kRoot / "bad.txt").string() + " --out " +
                (kRoot / "bad_out").string()),
            2);
  EXPECT_EQ(run("infer --data " + test_split() + " --ckpt " + ckpt() + " --out " + (kRoot / "t1").string() +
                " --theta 1.0"),
            2);
  EXPECT_EQ(run("no-such-command"), 2);
}

TEST_F(Cli, BadCheckpointExitsFour) {
  std::ofstream(kRoot / "junk.ckpt") << "NOTACKPT and some more bytes";
  EXPECT_EQ(run("infer --data " + test_split() + " --ckpt " + (kRoot / "junk.ckpt").string() + " --out " +
                (kRoot / "junk_out").string()),
            4);
}

TEST_F(Cli, EvalIdMismatchExitsFive) {
  const fs::path out = kRoot / "partial";
  ASSERT_EQ(run("infer --data " + test_split() + " --ckpt " + ckpt() + " --out " + out.string() + " --pool " + data()), 0);
  const auto first = *fs::directory_iterator(out / "masks");
  fs::remove(first.path());
  EXPECT_EQ(run("eval --pred " + out.string() + " --gt " + test_split()), 5);
}

TEST_F(Cli, MultiWithZeroRelatedMatchesSingle) {
  const fs::path a = kRoot / "single", b = kRoot / "multi0";
  ASSERT_EQ(run("infer --data " + test_split() + " --ckpt " + ckpt() + " --out " + a.string() +
                " --strategy single --pool " + data()),
            0);
  ASSERT_EQ(run("infer --data " + test_split() + " --ckpt " + ckpt() + " --out " + b.string() +
                " --strategy multi --R 0 --pool " + data()),
            0);
  std::size_t n = 0;
  for (const char* sub : {"masks", "maps"})
    for (const auto& e : fs::directory_iterator(a / sub)) {
      EXPECT_EQ(slurp(e.path()), slurp(b / sub / e.path().filename())) << e.path();
      ++n;
    }
  EXPECT_GT(n, 0u);
}

TEST_F(Cli, OneMapPerLabelledClass) {
  const fs::path out = kRoot / "maps_count";
  ASSERT_EQ(run("infer --data " + test_split() + " --ckpt " + ckpt() + " --out " + out.string() + " --pool " + data()), 0);
  const coattn::Dataset test = coattn::read_dataset(test_split());
  std::size_t expected = 0;
  for (const auto& s : test.samples) expected += s.labels.count();
  const auto count = std::distance(fs::directory_iterator(out / "maps"), fs::directory_iterator{});
  EXPECT_EQ(static_cast<std::size_t>(count), expected);
  const auto masks = std::distance(fs::directory_iterator(out / "masks"), fs::directory_iterator{});
  EXPECT_EQ(static_cast<std::size_t>(masks), test.samples.size());
}

TEST_F(Cli, GroundTruthAgainstItselfScoresOne) {
  const fs::path report = kRoot / "self.json";
  ASSERT_EQ(run("eval --pred " + (kRoot / "data" / "test" / "masks").string() + " --gt " + test_split(), report), 0);
  const auto j = nlohmann::json::parse(slurp(report));
  EXPECT_DOUBLE_EQ(j["miou"].get<double>(), 1.0);
  EXPECT_EQ(j["classes"].size(), 6u);
}

TEST_F(Cli, GenDataIsDeterministic) {
  const fs::path a = kRoot / "gen_a", b = kRoot / "gen_b";
  const std::string spec = " --spec " + (kRoot / "spec.txt").string();
  ASSERT_EQ(run("gen-data --out " + a.string() + spec + " --seed 11"), 0);
  ASSERT_EQ(run("gen-data --out " + b.string() + spec + " --seed 11"), 0);
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
}

TEST_F(Cli, GradcheckPasses) { EXPECT_EQ(run("gradcheck --seed 1"), 0); }
