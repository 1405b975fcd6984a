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

// Command-line front end. Every command reads one JSON config (--config, or
// $KVADAPT_CONFIG) and works inside its workspace directory (--out overrides).
// Failures print one line to stderr:
//   error kind=<kind> message="<text>"
// and exit with status 1.

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "kvadapt/workflow.hpp"

namespace {

using namespace kvadapt;

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string task = "auto";
  std::string prompt_mode = "full";
  std::string out;
  std::string input;
  std::string prompt;
};

RunConfig load(const Options& o) {
  std::string path = o.config;
  if (path.empty())
    if (const char* env = std::getenv("KVADAPT_CONFIG")) path = env;
  require(!path.empty(), ErrorKind::kConfig, "no config given; pass --config or set KVADAPT_CONFIG");
  RunConfig cfg = load_run_config(path, o.seed);
  if (!o.out.empty()) cfg.workspace = o.out;
  return cfg;
}

void print_metrics(const std::vector<MetricRow>& rows) { std::cout << metrics_csv(rows); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvadapt: continual generative classification with retrievable adaptors"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "JSON run config (default: $KVADAPT_CONFIG)");
    c->add_option("--seed", o.seed, "override the config seed");
    c->add_option("--out", o.out, "workspace directory (overrides the config)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "build the vocabulary and pretrain the frozen backbones");
  auto* add = app.add_subcommand("add-task", "train one task's key and adaptors and append them to the store");
  auto* predict = app.add_subcommand("predict", "generate labels for an input or a task's test split");
  auto* evaluate = app.add_subcommand("evaluate", "metric table per stored task (metrics.csv, predictions.csv)");
  auto* audit_p = app.add_subcommand("audit-prompts", "retrieval error rates under full and ablated prompts");
  auto* audit_f = app.add_subcommand("audit-forgetting", "replay store growth and count changed outputs");
  auto* bench = app.add_subcommand("bench", "adaptor vs full fine-tuning time and storage");
  auto* heat = app.add_subcommand("export-heatmap", "attention percentile scores for slide bags");
  for (auto* c : {pretrain, add, predict, evaluate, audit_p, audit_f, bench, heat}) common(c);
  for (auto* c : {add, predict, evaluate, heat}) c->add_option("--task", o.task, "task id or auto");
  for (auto* c : {predict, evaluate})
    c->add_option("--prompt-mode", o.prompt_mode, "full, organ_only or task_only")
        ->check(CLI::IsMember({"full", "organ_only", "task_only"}));
  for (auto* c : {predict, heat}) c->add_option("--input", o.input, "PNG patch or bag directory");
  predict->add_option("--prompt", o.prompt, "prompt text (default: the task's prompt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    const RunConfig cfg = load(o);
    if (*pretrain) {
      const auto s = cmd_pretrain(cfg);
      std::cout << "backbone " << cfg.backbone_path().string() << " params " << s.params << " vocab " << s.vocab_size
                << " checksum " << s.checksum << "\n";
      for (const auto& w : s.warnings) std::cerr << "warning: " << w << "\n";
    } else if (*add) {
      const auto s = cmd_add_task(cfg, o.task);
      const auto& last = s.trace.rows.back();
      std::cout << "added " << s.task_id << " (store size " << s.store_size << ") epochs " << s.trace.rows.size()
                << " L_K " << last.key_loss << " L_S " << last.seq_loss << " seconds " << s.trace.seconds << "\n";
    } else if (*predict) {
      PredictRequest r;
      r.task = o.task;
      r.mode = parse_prompt_mode(o.prompt_mode);
      if (!o.input.empty()) r.input = o.input;
      if (!o.prompt.empty()) r.prompt = o.prompt;
      std::cout << cmd_predict(cfg, r);
    } else if (*evaluate) {
      print_metrics(cmd_evaluate(cfg, o.task, parse_prompt_mode(o.prompt_mode)).rows);
    } else if (*audit_p) {
      std::cout << retrieval_csv(cmd_audit_prompts(cfg));
    } else if (*audit_f) {
      long changed = 0;
      for (const auto& s : cmd_audit_forgetting(cfg))
        for (const auto& r : s.rows) changed += r.changed;
      std::cout << read_text(cfg.report_path() / "forgetting.csv") << "total_changed " << changed << "\n";
    } else if (*bench) {
      const auto rep = cmd_bench(cfg);
      std::cout << rep.to_csv() << "storage_ratio " << detail::fmt(rep.storage_ratio()) << "\n";
    } else if (*heat) {
      std::optional<fs::path> in;
      if (!o.input.empty()) in = o.input;
      for (const auto& p : cmd_export_heatmap(cfg, o.task, in)) std::cout << p.string() << "\n";
    }
  } catch (const Error& e) {
    const std::string what = e.what();
    const std::string kind(to_string(e.kind()));
    std::cerr << "error kind=" << kind << " message=" << quoted(what.substr(kind.size() + 2)) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error kind=internal message=" << quoted(e.what()) << "\n";
    return 1;
  }
  return 0;
}
