// Links only the shared library: everything goes through the C ABI.
#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dprune/c_api.h"

namespace {

namespace fs = std::filesystem;

struct Config {
  dp_config* h = nullptr;
  Config() { EXPECT_EQ(dp_config_new(&h), DP_OK); }
  ~Config() { dp_config_free(h); }
};

std::string get(const dp_config* c, const char* key) {
  size_t needed = 0;
  EXPECT_EQ(dp_config_get(c, key, nullptr, 0, &needed), DP_ERR_LENGTH);
  std::vector<char> buf(needed);
  EXPECT_EQ(dp_config_get(c, key, buf.data(), buf.size(), nullptr), DP_OK);
  return buf.data();
}

const char* kTiny =
    "model.d_model = 8\nmodel.n_heads = 2\nmodel.d_ff = 6\nmodel.n_layers = 3\nmodel.max_seq = 16\n"
    "train.steps = 5\ntrain.seq_len = 16\ncalib.samples = 2\ncalib.seq_len = 12\nprune.ratio = 0.04\n"
    "recover.steps = 3\nrecover.seq_len = 16\nrecover.eval_every = 0\nrecover.rank = 2\n"
    "eval.seq_len = 16\n";

TEST(CApi, VersionAndStatusNames) {
  EXPECT_STREQ(dp_version(), "1.0.0");
  EXPECT_STREQ(dp_status_name(DP_OK), "ok");
  EXPECT_STREQ(dp_status_name(DP_ERR_CONFIG), "config");
  EXPECT_STREQ(dp_status_name(DP_ERR_DEPENDENCY), "dependency");
}

TEST(CApi, ConfigSetGetAndErrors) {
  Config c;
  EXPECT_EQ(get(c.h, "prune.ratio"), "0.2");
  EXPECT_EQ(dp_config_set(c.h, "prune.ratio", "0.3"), DP_OK);
  EXPECT_EQ(get(c.h, "prune.ratio"), "0.3");
  EXPECT_STREQ(dp_last_error(), "");
  EXPECT_EQ(dp_config_set(c.h, "no.such.key", "1"), DP_ERR_CONFIG);
  EXPECT_NE(std::string(dp_last_error()).find("no.such.key"), std::string::npos);
  EXPECT_EQ(dp_config_set(c.h, "prune.ratio", "1.5"), DP_OK);
  EXPECT_EQ(dp_config_validate(c.h), DP_ERR_CONFIG);
}

TEST(CApi, NullArgumentsAreRejected) {
  EXPECT_EQ(dp_config_new(nullptr), DP_ERR_ARGUMENT);
  EXPECT_EQ(dp_config_set(nullptr, "a", "b"), DP_ERR_ARGUMENT);
  EXPECT_EQ(dp_run(nullptr, "pipeline", nullptr, nullptr), DP_ERR_ARGUMENT);
  dp_config_free(nullptr);
  dp_model_free(nullptr);
}

TEST(CApi, DigestAndDumpAreStable) {
  Config a, b;
  char da[17], db[17];
  ASSERT_EQ(dp_config_digest(a.h, da), DP_OK);
  ASSERT_EQ(dp_config_digest(b.h, db), DP_OK);
  EXPECT_STREQ(da, db);
  EXPECT_EQ(std::string(da).size(), 16u);
  EXPECT_EQ(dp_config_set_seed(b.h, 77), DP_OK);
  EXPECT_EQ(get(b.h, "seed.random"), "77");
  ASSERT_EQ(dp_config_digest(b.h, db), DP_OK);
  EXPECT_STRNE(da, db);
  size_t needed = 0;
  EXPECT_EQ(dp_config_dump(a.h, nullptr, 0, &needed), DP_ERR_LENGTH);
  std::vector<char> buf(needed);
  ASSERT_EQ(dp_config_dump(a.h, buf.data(), buf.size(), nullptr), DP_OK);
  Config c;
  ASSERT_EQ(dp_config_apply(c.h, buf.data()), DP_OK);
  char dc[17];
  ASSERT_EQ(dp_config_digest(c.h, dc), DP_OK);
  EXPECT_STREQ(da, dc);
}

TEST(CApi, ModelRoundTripAndPerplexity) {
  Config c;
  ASSERT_EQ(dp_config_apply(c.h, kTiny), DP_OK);
  dp_model* m = nullptr;
  ASSERT_EQ(dp_model_init(c.h, &m), DP_OK);
  uint64_t n = 0;
  ASSERT_EQ(dp_model_param_count(m, &n), DP_OK);
  EXPECT_EQ(n, 259u * 8 * 2 + 16 * 8 + 3 * (4 * 64 + 3 * 8 * 6 + 16) + 8);
  const auto path = (fs::temp_directory_path() / "dprune_capi.dprn").string();
  ASSERT_EQ(dp_model_save(m, path.c_str()), DP_OK);
  dp_model* back = nullptr;
  ASSERT_EQ(dp_model_load(path.c_str(), &back), DP_OK);
  double p1 = 0, p2 = 0;
  ASSERT_EQ(dp_model_perplexity(m, "data/sample_corpus.txt", 0.9, 1.0, 16, &p1), DP_OK);
  ASSERT_EQ(dp_model_perplexity(back, "data/sample_corpus.txt", 0.9, 1.0, 16, &p2), DP_OK);
  EXPECT_EQ(p1, p2);
  EXPECT_NEAR(p1, 259.0, 40.0);
  EXPECT_EQ(dp_model_perplexity(m, "data/none.txt", 0.0, 1.0, 16, &p1), DP_ERR_IO);
  dp_model_free(m);
  dp_model_free(back);
  EXPECT_EQ(dp_model_load("/nonexistent.dprn", &m), DP_ERR_IO);
  fs::remove(path);
}

TEST(CApi, RunReportsDependencyAndSucceeds) {
  Config c;
  ASSERT_EQ(dp_config_apply(c.h, kTiny), DP_OK);
  const auto dir = (fs::temp_directory_path() / "dprune_capi_run").string();
  fs::remove_all(dir);
  ASSERT_EQ(dp_config_set(c.h, "out_dir", dir.c_str()), DP_OK);
  EXPECT_EQ(dp_run(c.h, "prune", nullptr, nullptr), DP_ERR_DEPENDENCY);
  EXPECT_EQ(dp_run(c.h, "nope", nullptr, nullptr), DP_ERR_CONFIG);
  int lines = 0;
  auto log = [](const char*, void* user) { ++*static_cast<int*>(user); };
  for (const char* stage : {"train-base", "discover", "estimate", "plan", "prune", "recover", "eval"}) {
    ASSERT_EQ(dp_run(c.h, stage, log, &lines), DP_OK) << stage << ": " << dp_last_error();
  }
  EXPECT_GT(lines, 0);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "merged.dprn"));
  fs::remove_all(dir);
}

}  // namespace
