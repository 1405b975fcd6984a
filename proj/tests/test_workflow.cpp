/*
 * Copyright 2026 The kvadapt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cstdlib>
#include <sys/wait.h>

#include "test_util.hpp"

using namespace kvadapt;

namespace {

nlohmann::json tiny_run(const std::filesystem::path& workspace, std::uint64_t seed = 3) {
  nlohmann::json tasks = nlohmann::json::array(
      {TaskSpec::make("colon_tissue", "colon", "tissue type", {"adipose", "tumor"}, Level::kPatch, {"tumor"}),
       TaskSpec::make("kidney_grade", "kidney", "cancer grade", {"benign", "high grade"}, Level::kSlide,
                      {"high grade"})});
  nlohmann::json pre = nlohmann::json::array(
      {TaskSpec::make("pre_skin", "skin", "tissue type", {"dermis", "tumor"}, Level::kPatch)});
  return {{"seed", seed},
          {"workspace", workspace.string()},
          {"backbone",
           {{"image_size", 16}, {"d_v", 16}, {"d_t", 16}, {"n_layers_v", 1}, {"n_layers_t", 1}, {"n_heads", 2},
            {"max_seq_len", 24}, {"ffn_mult", 2}}},
          {"pretrain", {{"encoder_epochs", 2}, {"decoder_epochs", 2}, {"n_per_class", 10}, {"text_repeats", 2}}},
          {"data", {{"n_per_class", 10}, {"n_bags_per_class", 10}, {"bag_min", 2}, {"bag_max", 4}}},
          {"train", {{"patch", {{"epochs", 2}, {"lr", 1e-3}}}, {"slide", {{"epochs", 3}, {"lr", 1e-3}}}}},
          {"tasks", tasks},
          {"pretrain_tasks", pre}};
}

struct CliResult {
  int status = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::string& args, const std::filesystem::path& scratch) {
  const char* exe = std::getenv("KVADAPT_CLI");
  CliResult r;
  if (exe == nullptr) return r;
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string(exe) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int raw = std::system(cmd.c_str());
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = read_text(out);
  r.err = read_text(err);
  return r;
}

}  // namespace

TEST(Workflow, ConfigParsing) {
  const auto dir = kvtest::scratch_dir("wf_config");
  try {
    parse_run_config({{"workspace", "w"}}, dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
    EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
  }
  const RunConfig seeded = parse_run_config({{"workspace", "w"}}, dir, 9);
  EXPECT_EQ(seeded.seed, 9u);
  EXPECT_EQ(seeded.workspace, dir / "w");
  EXPECT_EQ(seeded.tasks.size(), 8u);

  const RunConfig q = parse_run_config(quickstart_config_json(), dir);
  EXPECT_EQ(q.tasks.size(), 3u);
  EXPECT_EQ(q.seed, 7u);

  nlohmann::json j = tiny_run(dir / "ws");
  const RunConfig c = parse_run_config(j, dir);
  EXPECT_EQ(c.train_config(Level::kPatch).epochs, 2);
  EXPECT_EQ(c.train_config(Level::kSlide).patience, 20);
  EXPECT_EQ(c.train_config(Level::kPatch).seed, 3u);
  EXPECT_EQ(c.bag_size.max, 4);

  j["task_count"] = 5;
  EXPECT_THROW(parse_run_config(j, dir), Error);
  j.erase("task_count");
  j["train"]["patch"]["optimizer"] = "sgd";
  EXPECT_THROW(parse_run_config(j, dir), Error);

  write_text(dir / "bad.json", "{ not json");
  try {
    load_run_config(dir / "bad.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
  EXPECT_THROW(load_run_config(dir / "absent.json"), Error);
}

TEST(Workflow, CommandsBeforePretrainNameTheFix) {
  const auto dir = kvtest::scratch_dir("wf_missing");
  const RunConfig cfg = parse_run_config(tiny_run(dir / "ws"), dir);
  try {
    cmd_add_task(cfg, "auto");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingFile);
    EXPECT_NE(std::string(e.what()).find("kvadapt pretrain"), std::string::npos) << e.what();
  }
}

TEST(Workflow, EndToEnd) {
  const auto dir = kvtest::scratch_dir("wf_e2e");
  const RunConfig cfg = parse_run_config(tiny_run(dir / "ws"), dir);
  const auto pre = cmd_pretrain(cfg);
  EXPECT_GT(pre.params, 0u);
  try {
    cmd_evaluate(cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("kvadapt add-task"), std::string::npos) << e.what();
  }
  EXPECT_EQ(cmd_add_task(cfg, "auto").task_id, "colon_tissue");
  EXPECT_EQ(cmd_add_task(cfg, "kidney_grade").store_size, 2u);
  try {
    cmd_add_task(cfg, "kidney_grade");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConflict);
  }
  EXPECT_THROW(cmd_add_task(cfg, "auto"), Error);
  EXPECT_THROW(cmd_add_task(cfg, "nope"), Error);

  const auto ev = cmd_evaluate(cfg);
  ASSERT_EQ(ev.rows.size(), 2u);
  EXPECT_TRUE(std::filesystem::exists(cfg.report_path() / "metrics.csv"));
  EXPECT_EQ(cmd_evaluate(cfg, "kidney_grade").rows.size(), 1u);

  const std::string csv = cmd_predict(cfg, PredictRequest{"colon_tissue", PromptMode::kFull, {}, {}});
  EXPECT_EQ(csv.rfind("item,generated,retrieved_task,terminated,attention\n", 0), 0u);
  const auto bag = cfg.data_path() / "kidney_grade" / "images" / "bag_00000";
  const std::string one = cmd_predict(cfg, PredictRequest{"auto", PromptMode::kFull, bag, "kidney cancer grade"});
  EXPECT_NE(one.find("bag_00000,"), std::string::npos);
  EXPECT_NE(one.find(",kidney_grade,"), std::string::npos);

  const auto rows = cmd_audit_prompts(cfg);
  EXPECT_EQ(rows.size(), 6u);
  long changed = 0;
  for (const auto& s : cmd_audit_forgetting(cfg))
    for (const auto& r : s.rows) changed += r.changed;
  EXPECT_EQ(changed, 0);
  const auto maps = cmd_export_heatmap(cfg, "kidney_grade");
  EXPECT_FALSE(maps.empty());
  EXPECT_THROW(cmd_export_heatmap(cfg, "colon_tissue"), Error);
}

TEST(Workflow, CliReportsErrorsOnOneLine) {
  if (std::getenv("KVADAPT_CLI") == nullptr) GTEST_SKIP() << "KVADAPT_CLI not set";
  const auto dir = kvtest::scratch_dir("wf_cli");
  write_text(dir / "run.json", tiny_run(dir / "ws").dump());
  auto r = run_cli("evaluate --config " + (dir / "run.json").string(), dir);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error kind=missing-file message=\"", 0), 0u) << r.err;
  EXPECT_NE(r.err.find("kvadapt pretrain"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  r = run_cli("pretrain", dir);
  EXPECT_EQ(r.status, 1);
  EXPECT_EQ(r.err.rfind("error kind=config", 0), 0u) << r.err;

  r = run_cli("pretrain --config " + (dir / "run.json").string() + " --seed 4", dir);
  EXPECT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("checksum"), std::string::npos);

  r = run_cli("predict --config " + (dir / "run.json").string() + " --prompt-mode bogus", dir);
  EXPECT_NE(r.status, 0);
}
