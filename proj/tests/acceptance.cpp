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

// Acceptance run: one PASS/FAIL line per criterion, then a summary. The exit
// status is 0 unless the run itself breaks; verdicts are in the lines.
//
//   acceptance <work_dir>

#include <Eigen/SVD>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>

#include "test_util.hpp"

using namespace kvadapt;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int n, const std::string& name, bool ok, const std::string& detail) {
  std::cout << "criterion " << n << " " << (ok ? "PASS" : "FAIL") << " " << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

std::string num(double v, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", precision, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

double own_f1(const Dataset& ds, BackboneBundle<float>& bundle, AdaptorStore<float>& store, const Vocabulary& vocab,
              int max_len, BagCache<float>* cache, std::vector<GenerationResult>* out = nullptr) {
  const auto items = test_items(ds);
  auto res = predict_with_task(items, ds.spec.task_id, bundle, store, vocab, max_len, cache);
  const double f1 = macro_precision_recall_f1(confusion_of(ds.spec, items, res)).f1;
  if (out != nullptr) *out = std::move(res);
  return f1;
}

struct Suite {
  RunConfig cfg;
  Workspace ws;
  std::vector<Dataset> data;
  std::vector<TrainTrace> traces;
  std::vector<double> f1;
  BagCache<float> cache;
};

// ---- criterion 1 ----

void forgetting(Suite& s) {
  const std::size_t n = std::min<std::size_t>(5, s.ws.store.size());
  int patch = 0, slide = 0;
  for (std::size_t i = 0; i < n; ++i) (s.data[i].spec.level == Level::kPatch ? patch : slide)++;
  std::vector<const Dataset*> sets;
  for (std::size_t i = 0; i < n; ++i) sets.push_back(&s.data[i]);
  const int max_len = s.cfg.train_config(Level::kPatch).max_generate_len;
  long changed = 0, compared = 0, own_changed = 0;
  std::string per_step;
  for (std::size_t k = 1; k < n; ++k) {
    auto before = store_prefix(s.ws.store, k);
    auto after = store_prefix(s.ws.store, k + 1);
    long step = 0;
    for (const auto& r : audit_forgetting(before, after, s.ws.bundle, s.ws.vocab, sets, max_len, &s.cache)) {
      step += r.changed;
      compared += r.n;
    }
    changed += step;
    per_step += " +" + after.entries()[k].spec.task_id + ":" + std::to_string(step);
    for (std::size_t t = 0; t < k; ++t) {
      const auto items = test_items(s.data[t]);
      const auto a = predict_with_task(items, s.data[t].spec.task_id, s.ws.bundle, before, s.ws.vocab, max_len, &s.cache);
      const auto b = predict_with_task(items, s.data[t].spec.task_id, s.ws.bundle, after, s.ws.vocab, max_len, &s.cache);
      for (std::size_t i = 0; i < a.size(); ++i) own_changed += !(a[i] == b[i]);
    }
  }
  verdict(1, "zero forgetting", changed == 0 && patch == 3 && slide == 2,
          std::to_string(patch) + " patch + " + std::to_string(slide) + " slide tasks; retrieval-routed outputs changed " +
              std::to_string(changed) + "/" + std::to_string(compared) + " (per addition:" + per_step +
              "); own-adaptor outputs changed " + std::to_string(own_changed));
}

// ---- criterion 2 ----

void retrieval(Suite& s) {
  std::vector<const Dataset*> sets;
  for (const auto& d : s.data) sets.push_back(&d);
  bool full_ok = true, ablated_ok = true;
  std::string detail;
  for (PromptMode m : {PromptMode::kFull, PromptMode::kOrganOnly, PromptMode::kTaskOnly}) {
    long wrong = 0, total = 0;
    std::string worst;
    double worst_rate = -1.0;
    for (const auto& r : audit_retrieval(s.ws.store, s.ws.bundle, s.ws.vocab, sets, m, &s.cache)) {
      wrong += r.wrong;
      total += r.n;
      if (m == PromptMode::kFull && r.wrong > 0) full_ok = false;
      if (m != PromptMode::kFull && r.rate() > 0.05) ablated_ok = false;
      if (r.rate() > worst_rate) {
        worst_rate = r.rate();
        worst = r.task_id;
      }
    }
    detail += to_string(m) + " " + std::to_string(wrong) + "/" + std::to_string(total) + " (worst " + worst + " " +
              num(100 * worst_rate, 3) + "%); ";
  }
  verdict(2, "prompt retrieval", s.ws.store.size() >= 8 && full_ok && ablated_ok,
          std::to_string(s.ws.store.size()) + " tasks; " + detail);
}

// ---- criterion 3 ----

BackboneBundle<float> merged_copy(const BackboneBundle<float>& b, const LoraSet<float>& set) {
  BackboneBundle<float> out = b;
  for (const auto& a : set.adapters) {
    auto& blocks = a.target.component == Component::kEncoder ? out.encoder.blocks : out.decoder.blocks;
    auto& blk = blocks[static_cast<std::size_t>(a.target.layer)];
    Linear<float>& lin = a.target.matrix == 'q' ? blk.q : a.target.matrix == 'k' ? blk.k : blk.v;
    lin.weight.value = merge(lin.weight.value, a);
  }
  return out;
}

void lora(Suite& s) {
  auto& bundle = s.ws.bundle;
  const auto& c = bundle.config;
  Rng rng(31);
  double merge_err = 0.0, trip_err = 0.0, sigma = 0.0;
  std::size_t deltas = 0;
  bool zero_init = true;
  for (auto& e : s.ws.store.entries()) {
    std::vector<LoraSet<float>*> sets{&e.adaptors.decoder_lora};
    if (e.adaptors.encoder_lora) sets.push_back(&*e.adaptors.encoder_lora);
    for (LoraSet<float>* set : sets) {
      auto merged = merged_copy(bundle, *set);
      Tape<float> t1, t2;
      ForwardContext<float> with{set, false, nullptr}, plain;
      Matrix<float> a, b;
      if (set->adapters.front().target.component == Component::kEncoder) {
        const Matrix<float> patches = gaussian<float>(2 * c.num_patches(), c.patch_dim(), 0.3, rng);
        a = t1.value(bundle.encoder.forward(t1, patches, 2, with));
        b = t2.value(merged.encoder.forward(t2, patches, 2, plain));
      } else {
        const Matrix<float> in = gaussian<float>(2 * 10, c.d_t, 1.0, rng);
        a = t1.value(bundle.decoder.hidden(t1, t1.constant(in), 2, 10, with));
        b = t2.value(merged.decoder.hidden(t2, t2.constant(in), 2, 10, plain));
      }
      merge_err = std::max<double>(merge_err, (a - b).cwiseAbs().maxCoeff());
      for (const auto& ad : set->adapters) {
        const Linear<float>& lin = [&]() -> const Linear<float>& {
          const auto& blocks = ad.target.component == Component::kEncoder ? bundle.encoder.blocks : bundle.decoder.blocks;
          const auto& blk = blocks[static_cast<std::size_t>(ad.target.layer)];
          return ad.target.matrix == 'q' ? blk.q : ad.target.matrix == 'k' ? blk.k : blk.v;
        }();
        trip_err = std::max<double>(trip_err, (unmerge(merge(lin.weight.value, ad), ad) - lin.weight.value).cwiseAbs().maxCoeff());
        LoraAdapter<double> d;
        d.A = Parameter<double>(ad.A.value.cast<double>());
        d.B = Parameter<double>(ad.B.value.cast<double>());
        d.rank = ad.rank;
        d.alpha = ad.alpha;
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(effective_delta(d));
        const auto sv = svd.singularValues();
        if (sv(0) > 0.0) sigma = std::max(sigma, sv(ad.rank) / sv(0));
        ++deltas;
      }
    }
    // A fresh set for the same task must leave the backbone output untouched.
    AdaptorSet<float> fresh = AdaptorSet<float>::init(e.spec.level, c, e.adaptors.prompt, e.spec.labels, LoraHyper{}, rng);
    for (const auto& ad : fresh.decoder_lora.adapters) zero_init = zero_init && effective_delta(ad).isZero(0.0);
    if (fresh.encoder_lora) {
      Tape<float> t1, t2;
      ForwardContext<float> with{&*fresh.encoder_lora, false, nullptr}, plain;
      const Matrix<float> patches = gaussian<float>(c.num_patches(), c.patch_dim(), 0.3, rng);
      zero_init = zero_init && t1.value(bundle.encoder.forward(t1, patches, 1, with)) ==
                                   t2.value(bundle.encoder.forward(t2, patches, 1, plain));
    }
  }
  verdict(3, "LoRA correctness", merge_err <= 1e-5 && trip_err <= 1e-6 && zero_init && sigma <= 1e-8,
          "merged vs unmerged " + num(merge_err) + ", round trip " + num(trip_err) + ", zero at init " +
              (zero_init ? "exact" : "NOT exact") + ", max sigma_{r+1}/sigma_1 " + num(sigma) + " over " +
              std::to_string(deltas) + " trained deltas");
}

// ---- criterion 4 ----

void gradients() {
  Rng rng(41);
  double key_err = 0.0, proj_err = 0.0, lora_err = 0.0;
  for (int point = 0; point < 10; ++point) {
    Parameter<double> key(gaussian<double>(1, 32, 1.0, rng));
    const Matrix<double> q = gaussian<double>(4, 32, 1.0, rng), prev = gaussian<double>(1 + point % 3, 32, 1.0, rng);
    key_err = std::max(key_err, kvtest::gradient_error({&key}, [&](Tape<double>& t) {
                         return key_loss(t, t.param(key), q, prev);
                       }));

    auto p = Projector<double>::init(8, {16, 32, 16}, 8, rng);
    std::vector<Parameter<double>*> params;
    p.visit("p", [&](const std::string&, Parameter<double>& x) {
      x.value = gaussian<double>(x.value.rows(), x.value.cols(), 0.5, rng);
      params.push_back(&x);
    });
    const Matrix<double> x = gaussian<double>(3, 8, 1.0, rng), mix = gaussian<double>(3, 8, 1.0, rng);
    proj_err = std::max(proj_err, kvtest::gradient_error(params, [&](Tape<double>& t) {
                          return t.mean_all(t.mul_const(p.forward(t, t.constant(x)), mix));
                        }));
  }
  const auto c = kvtest::tiny_config(10);
  auto b = freeze(BackboneBundle<double>::init(c, 43));
  for (int point = 0; point < 10; ++point) {
    LoraSet<double> set = make_lora_set<double>(Component::kDecoder, c.n_layers_t, c.d_t, LoraHyper{2, 4.0, 0.0}, rng);
    for (auto& a : set.adapters) {
      a.A.value = gaussian<double>(a.A.value.rows(), a.A.value.cols(), 0.5, rng);
      a.B.value = gaussian<double>(a.B.value.rows(), a.B.value.cols(), 0.5, rng);
    }
    const Matrix<double> in = gaussian<double>(6, c.d_t, 1.0, rng);
    lora_err = std::max(lora_err, kvtest::gradient_error(set.parameters(), [&](Tape<double>& t) {
                          ForwardContext<double> ctx{&set, false, nullptr};
                          Var logits = b.decoder.logits(t, b.decoder.hidden(t, t.constant(in), 2, 3, ctx));
                          return t.cross_entropy(logits, {2, 3, 4, 5, 1, 1}, std::vector<double>(6, 1.0 / 6));
                        }));
  }
  verdict(4, "gradient checks", key_err <= 1e-4 && proj_err <= 1e-4 && lora_err <= 1e-4,
          "max relative error over 10 points: key loss " + num(key_err) + ", projector " + num(proj_err) + ", LoRA " +
              num(lora_err));
}

// ---- criterion 5 ----

void learning(Suite& s) {
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    const bool patch = s.data[i].spec.level == Level::kPatch;
    const bool pass = s.f1[i] >= (patch ? 0.90 : 0.80) && s.traces[i].seconds <= 180.0;
    ok = ok && pass;
    detail += s.data[i].spec.task_id + " F1 " + num(s.f1[i], 3) + " in " + num(s.traces[i].seconds, 3) + "s" +
              (pass ? "" : " (below bar)") + "; ";
  }
  verdict(5, "downstream learning", ok, detail + "scored with each task's own adaptors");
}

// ---- criterion 6 ----

void prior_knowledge(Suite& s) {
  auto random = freeze(BackboneBundle<float>::init(s.ws.bundle.config, s.cfg.seed ^ 0x9e3779b97f4a7c15ULL));
  AdaptorStore<float> store(random.checksum());
  BagCache<float> cache;
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    const Dataset& ds = s.data[i];
    TrainedTask<float> t = train_task(ds.spec, ds, random, store, s.ws.vocab, s.cfg.train_config(ds.spec.level), &cache);
    store.add_task(ds.spec, std::move(t.key), std::move(t.adaptors));
    const double f1 = own_f1(ds, random, store, s.ws.vocab, s.cfg.train_config(ds.spec.level).max_generate_len, &cache);
    const double gap = s.f1[i] - f1;
    ok = ok && gap >= 0.05;
    detail += ds.spec.task_id + " " + num(s.f1[i], 3) + " vs " + num(f1, 3) + "; ";
  }
  verdict(6, "pretrained beats random init", ok, detail + "(pretrained vs random, macro-F1)");
}

// ---- criterion 7 ----

std::uintmax_t bin_bytes(const fs::path& dir) {
  std::uintmax_t total = 0;
  for (const auto& f : fs::recursive_directory_iterator(dir))
    if (f.is_regular_file() && f.path().extension() == ".bin") total += f.file_size();
  return total;
}

void storage(Suite& s, const fs::path& work) {
  const std::uintmax_t backbone = blob_bytes(s.ws.bundle);
  std::uintmax_t adaptors = backbone, full = 0;
  bool affine = true;
  const fs::path dir = work / "storage_curve";
  fs::remove_all(dir);
  AdaptorStore<float> grow(s.ws.store.backbone_checksum());
  grow.save(dir);
  std::uintmax_t on_disk = bin_bytes(dir);
  for (auto& e : s.ws.store.entries()) {
    const std::uintmax_t slope = task_blob_bytes(e.adaptors, e.key);
    adaptors += slope;
    grow.add_task(e.spec, e.key, e.adaptors);
    grow.save(dir);
    const std::uintmax_t now = bin_bytes(dir);
    affine = affine && now - on_disk == slope;
    on_disk = now;
    TrainConfig none = s.cfg.train_config(e.spec.level);
    none.epochs = 0;
    const Dataset* ds = nullptr;
    for (const auto& d : s.data)
      if (d.spec.task_id == e.spec.task_id) ds = &d;
    FullModel<float> fm = train_task_full_finetune(e.spec, *ds, s.ws.bundle, s.ws.vocab, none);
    full += full_model_bytes(fm);
  }
  const double ratio = static_cast<double>(adaptors) / static_cast<double>(full);
  std::map<Level, std::uintmax_t> slopes;
  for (auto& e : s.ws.store.entries()) slopes[e.spec.level] = task_blob_bytes(e.adaptors, e.key);
  verdict(7, "storage efficiency", ratio <= 0.40 && affine,
          "adaptor store " + std::to_string(adaptors) + " B (backbone " + std::to_string(backbone) + " + tasks) vs full " +
              std::to_string(full) + " B, ratio " + num(ratio, 6) + "; per-task slope patch " +
              std::to_string(slopes[Level::kPatch]) + " B, slide " + std::to_string(slopes[Level::kSlide]) +
              " B; on-disk blob growth " + (affine ? "matches exactly" : "DIFFERS"));
}

// ---- criterion 8 ----

void metric_oracles() {
  Rng rng(81);
  double worst = 0.0;
  int checked = 0;
  while (checked < 100) {
    std::vector<std::vector<long>> table(4, std::vector<long>(4));
    for (auto& row : table)
      for (auto& v : row) v = static_cast<long>(rng.index(10));
    // brute force over individual (truth, prediction) pairs
    std::vector<int> truth, pred;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (long k = 0; k < table[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]; ++k) {
          truth.push_back(i);
          pred.push_back(j);
        }
    double obs = 0.0, exp = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) obs += (truth[i] - pred[i]) * (truth[i] - pred[i]) / 9.0;
    for (int a : truth)
      for (int b : pred) exp += (a - b) * (a - b) / 9.0;
    exp /= static_cast<double>(truth.size());
    if (exp == 0.0) continue;
    worst = std::max(worst, std::abs(quadratic_weighted_kappa(ConfusionMatrix::from_counts(table)) - (1.0 - obs / exp)));
    ++checked;
  }
  const double acc_c = cancer_accuracy(ConfusionMatrix::from_counts({{5, 0}, {5, 0}}), {1});
  verdict(8, "metric oracles", worst <= 1e-9 && acc_c == 0.0,
          "max |QWK - brute force| over 100 random 4x4 tables " + num(worst) + "; Acc_c([[5,0],[5,0]]) = " + num(acc_c));
}

// ---- criterion 9 ----

void generation_safety(Suite& s) {
  long total = 0, terminated = 0, in_set = 0, routed_in_set = 0, routed = 0;
  for (const auto& ds : s.data) {
    const int max_len = s.cfg.train_config(ds.spec.level).max_generate_len;
    std::vector<GenerationResult> own;
    own_f1(ds, s.ws.bundle, s.ws.store, s.ws.vocab, max_len, &s.cache, &own);
    const auto items = test_items(ds);
    const auto via = infer_batch(items, s.ws.vocab.encode_prompt(ds.spec.prompt), s.ws.bundle, s.ws.store, s.ws.vocab,
                                 max_len, &s.cache);
    auto count = [&](const std::vector<GenerationResult>& list) {
      for (const auto& r : list) {
        ++total;
        terminated += r.terminated_by_eos && static_cast<int>(r.token_ids.size()) < max_len;
      }
    };
    count(own);
    count(via);
    for (const auto& r : own) in_set += match_label(r.label_text, ds.spec.labels) != kUnparseable;
    for (const auto& r : via) {
      ++routed;
      routed_in_set += match_label(r.label_text, ds.spec.labels) != kUnparseable;
    }
  }
  const long own_n = total - routed;
  const double own_rate = static_cast<double>(in_set) / static_cast<double>(own_n);
  verdict(9, "generation safety", terminated == total && own_rate >= 0.99,
          std::to_string(terminated) + "/" + std::to_string(total) + " sequences ended by EOS within budget; " +
              num(100 * own_rate, 4) + "% of own-adaptor outputs in the label set (" + num(100.0 * routed_in_set / routed, 4) +
              "% after retrieval)");
}

// ---- criterion 10 ----

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& f : fs::recursive_directory_iterator(root))
    if (f.is_regular_file()) out[fs::relative(f.path(), root).string()] = read_text(f.path());
  return out;
}

fs::path quickstart(const fs::path& base) {
  fs::remove_all(base);
  fs::create_directories(base);
  const RunConfig cfg = parse_run_config(quickstart_config_json(7), base);
  cmd_pretrain(cfg);
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) cmd_add_task(cfg, "auto");
  cmd_evaluate(cfg);
  cmd_audit_prompts(cfg);
  cmd_audit_forgetting(cfg);
  for (const auto& t : cfg.tasks)
    if (t.level == Level::kSlide) cmd_export_heatmap(cfg, t.task_id);
  PredictRequest r;
  r.task = cfg.tasks.front().task_id;
  write_text(cfg.report_path() / "predict.csv", cmd_predict(cfg, r));
  return cfg.workspace;
}

void determinism(const fs::path& work) {
  const auto a = snapshot(quickstart(work / "quickstart_a"));
  const auto b = snapshot(quickstart(work / "quickstart_b"));
  std::size_t differ = 0, stores = 0, reports = 0;
  std::string first;
  for (const auto& [name, bytes] : a) {
    if (name.rfind("store", 0) == 0) ++stores;
    if (name.rfind("reports", 0) == 0) ++reports;
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) {
      if (differ++ == 0) first = name;
    }
  }
  const bool ok = differ == 0 && a.size() == b.size() && stores > 0 && reports > 0;
  verdict(10, "determinism", ok,
          std::to_string(a.size()) + " files compared (" + std::to_string(stores) + " store, " + std::to_string(reports) +
              " report), " + std::to_string(differ) + " differ" + (first.empty() ? "" : ", first: " + first));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "kvadapt_acceptance";
  fs::create_directories(work);
  const auto start = std::chrono::steady_clock::now();
  try {
    Suite s;
    fs::remove_all(work / "suite");
    s.cfg = parse_run_config({{"seed", 2026}, {"workspace", "suite"}}, work);
    const auto pre = cmd_pretrain(s.cfg);
    std::cout << "pretrained backbone: " << pre.params << " parameters, vocabulary " << pre.vocab_size << ", "
              << num(seconds_since(start), 3) << "s" << std::endl;
    s.ws = open_workspace(s.cfg, false);
    for (const auto& spec : s.cfg.tasks) {
      s.data.push_back(task_dataset(s.cfg, spec));
      const Dataset& ds = s.data.back();
      const TrainConfig tc = s.cfg.train_config(spec.level);
      TrainedTask<float> t = train_task(spec, ds, s.ws.bundle, s.ws.store, s.ws.vocab, tc, &s.cache);
      s.traces.push_back(t.trace);
      s.ws.store.add_task(spec, std::move(t.key), std::move(t.adaptors));
      s.f1.push_back(own_f1(ds, s.ws.bundle, s.ws.store, s.ws.vocab, tc.max_generate_len, &s.cache));
      std::cout << "trained " << spec.task_id << " (" << to_string(spec.level) << ") in " << num(t.trace.seconds, 3)
                << "s, own-adaptor F1 " << num(s.f1.back(), 3) << std::endl;
    }
    s.ws.store.save(s.cfg.store_path());

    forgetting(s);
    retrieval(s);
    lora(s);
    gradients();
    learning(s);
    prior_knowledge(s);
    storage(s, work);
    metric_oracles();
    generation_safety(s);
    determinism(work);
  } catch (const std::exception& e) {
    std::cout << "acceptance run aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << "summary: " << (10 - failures) << "/10 criteria pass, " << num(seconds_since(start), 4) << "s total"
            << std::endl;
  return 0;
}
