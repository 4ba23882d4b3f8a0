/*
 * Copyright (c) 2026, the hps authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "hps/config.hpp"
#include "hps/dataset.hpp"
#include "hps/oracle.hpp"
#include "hps/osrp.hpp"
#include "hps/pipeline.hpp"
#include "hps/ssd_ps.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config file (key=value)");
    cmd->add_option("--set", overrides,
                    "override a config key, e.g. --set nodes=2 (repeatable)");
  }

  hps::RunConfig resolve() const {
    hps::RunConfig cfg;
    if (!config_path.empty()) cfg = hps::RunConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw hps::ConfigError("--set expects key=value, got: " + kv);
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

json config_json(const hps::RunConfig& cfg) {
  json j;
  for (const auto& [k, v] : cfg.to_map()) j[k] = v;
  return j;
}

// Model export: all sparse parameters dumped through a parameter-file store
// plus the dense weights and a manifest.
void export_model(const hps::FlatStore& model, const hps::RunConfig& cfg,
                  const fs::path& dir, double auc_value) {
  hps::StoreConfig sc;
  sc.dir = dir / "sparse";
  sc.embedding_dim = cfg.embedding_dim;
  sc.file_capacity = cfg.file_capacity;
  sc.background_compaction = false;
  fs::remove_all(sc.dir);
  hps::SsdStore store(sc);
  std::map<hps::ParamKey, hps::SparseParam> all(model.sparse.begin(),
                                                model.sparse.end());
  std::vector<std::uint64_t> files;
  if (!all.empty()) files = store.dump(all);

  {
    std::ofstream f(dir / "dense.bin", std::ios::binary);
    f.write(reinterpret_cast<const char*>(model.dense.weights.data()),
            std::streamsize(model.dense.weights.size() * sizeof(float)));
  }
  json manifest;
  manifest["embedding_dim"] = cfg.embedding_dim;
  manifest["layer_dims"] = cfg.layer_dims;
  manifest["sparse_parameters"] = all.size();
  manifest["dense_weights"] = model.dense.weights.size();
  manifest["sparse_files"] = files;
  manifest["final_auc"] = auc_value;
  manifest["config"] = config_json(cfg);
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

int cmd_gen(const hps::GenSpec& spec, const std::string& out) {
  auto ds = hps::gen_dataset(spec);
  hps::write_dataset(out, ds);
  std::cout << "wrote " << ds.examples.size() << " examples, dims="
            << ds.dims << " -> " << out << "\n";
  return kExitOk;
}

int cmd_train(const hps::RunConfig& cfg, const std::string& dataset_path,
              const std::string& test_path, const std::string& out_dir) {
  auto ds = hps::read_dataset(dataset_path);
  auto batches = hps::to_batches(ds, cfg.batch_size);
  auto out = hps::run_training(cfg, batches, ds.dims);

  double auc_value = -1.0;
  if (!test_path.empty()) {
    auto test = hps::read_dataset(test_path);
    auc_value = hps::evaluate_auc(out.model, test.examples);
  }
  out.metrics.final_auc = auc_value;

  fs::create_directories(out_dir);
  {
    std::ofstream csv(fs::path(out_dir) / "metrics.csv");
    out.metrics.write_csv(csv);
  }
  {
    json summary;
    summary["batches"] = out.metrics.rows.size();
    summary["examples"] = out.metrics.total_examples;
    summary["wall_ms"] = out.metrics.wall_ms;
    summary["examples_per_sec"] = out.metrics.examples_per_sec();
    summary["sync_rounds_per_minibatch"] =
        out.metrics.sync_rounds_per_minibatch;
    summary["compactions"] = out.metrics.compactions;
    summary["queue_high_water"] = out.metrics.queue_high_water;
    summary["final_auc"] = auc_value;
    summary["config"] = config_json(cfg);
    std::ofstream sf(fs::path(out_dir) / "summary.json");
    sf << summary.dump(2) << "\n";
  }
  export_model(out.model, cfg, fs::path(out_dir) / "model", auc_value);
  std::cout << "trained " << out.metrics.rows.size() << " batches ("
            << out.metrics.total_examples << " examples) in "
            << out.metrics.wall_ms << " ms";
  if (auc_value >= 0) std::cout << ", test AUC " << auc_value;
  std::cout << "\nmetrics: " << (fs::path(out_dir) / "metrics.csv").string()
            << "\n";
  return kExitOk;
}

int cmd_verify(const hps::RunConfig& cfg, const std::string& dataset_path,
               const std::string& test_path) {
  auto ds = hps::read_dataset(dataset_path);
  auto batches = hps::to_batches(ds, cfg.batch_size);
  if (batches.empty()) {
    std::cout << "verify: empty dataset, trivially lossless\n";
    return kExitOk;
  }
  auto distributed = hps::run_training(cfg, batches, ds.dims);
  auto oracle = hps::train_reference(cfg, batches);

  const bool expect_bitexact =
      cfg.nodes == 1 && cfg.devices_per_node == 1 && cfg.deterministic;

  struct Offender {
    std::string what;
    double diff;
  };
  std::vector<Offender> offenders;
  double worst = 0.0;
  bool bitexact = distributed.model.dense.weights == oracle.dense.weights;
  for (std::size_t i = 0; i < oracle.dense.weights.size(); ++i) {
    const double a = distributed.model.dense.weights[i];
    const double b = oracle.dense.weights[i];
    const double d = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
    if (d > worst) worst = d;
    if (d > 1e-5)
      offenders.push_back({"dense[" + std::to_string(i) + "]", d});
  }
  for (const auto& [k, v] : oracle.sparse) {
    auto it = distributed.model.sparse.find(k);
    for (std::size_t i = 0; i < v.embedding.size(); ++i) {
      const double b = v.embedding[i];
      const double a = it == distributed.model.sparse.end()
                           ? 0.0
                           : it->second.embedding[i];
      if (a != b) bitexact = false;
      const double d =
          std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
      if (d > worst) worst = d;
      if (d > 1e-5)
        offenders.push_back(
            {"key " + std::to_string(k) + "[" + std::to_string(i) + "]", d});
    }
  }

  const std::vector<hps::Example> eval_examples =
      test_path.empty() ? ds.examples
                        : hps::read_dataset(test_path).examples;
  const double auc_dist = hps::evaluate_auc(distributed.model, eval_examples);
  const double auc_oracle = hps::evaluate_auc(oracle, eval_examples);
  const double auc_rel = std::abs(auc_dist - auc_oracle) / auc_oracle;

  std::cout << "verify: max relative parameter diff = " << worst << "\n";
  std::cout << "verify: AUC distributed=" << auc_dist
            << " oracle=" << auc_oracle << " rel diff=" << auc_rel << "\n";

  bool ok = true;
  if (expect_bitexact && !bitexact) {
    std::cout << "FAIL: 1x1 deterministic run must match the oracle "
                 "bit-exactly\n";
    ok = false;
  }
  if (worst >= 1e-5) {
    std::cout << "FAIL: parameter divergence beyond 1e-5\n";
    ok = false;
  }
  if (auc_rel >= 0.001) {
    std::cout << "FAIL: AUC relative difference beyond 0.1%\n";
    ok = false;
  }
  if (!ok) {
    std::sort(offenders.begin(), offenders.end(),
              [](const Offender& a, const Offender& b) {
                return a.diff > b.diff;
              });
    std::cout << "worst offenders:\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, offenders.size());
         ++i)
      std::cout << "  " << offenders[i].what << " rel diff "
                << offenders[i].diff << "\n";
    return kExitValidation;
  }
  std::cout << "verify: PASS"
            << (expect_bitexact ? " (bit-exact)" : " (within tolerance)")
            << "\n";
  return kExitOk;
}

int cmd_hash(const std::string& in, const std::string& out, std::uint64_t k,
             std::uint64_t seed) {
  auto ds = hps::read_dataset(in);
  auto plan = hps::OsrpPlan::seeded(ds.dims, k, seed);
  hps::Dataset hashed;
  hashed.dims = 2 * k;
  hashed.examples.reserve(ds.examples.size());
  for (const auto& ex : ds.examples)
    hashed.examples.push_back({ex.label, hps::hash_example(plan, ex.features)});
  hps::write_dataset(out, hashed);
  std::cout << "hashed " << ds.examples.size() << " examples: dims "
            << ds.dims << " -> " << hashed.dims << "\n";
  return kExitOk;
}

std::vector<fs::path> store_dirs(const std::string& root) {
  std::vector<fs::path> dirs;
  for (const auto& ent : fs::directory_iterator(root)) {
    if (ent.is_directory() &&
        ent.path().filename().string().rfind("node", 0) == 0)
      dirs.push_back(ent.path());
    if (ent.is_regular_file() &&
        ent.path().filename().string().rfind("pf_", 0) == 0) {
      dirs.assign(1, fs::path(root));
      break;
    }
  }
  if (dirs.empty()) dirs.push_back(fs::path(root));
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

bool has_param_files(const fs::path& dir) {
  if (!fs::exists(dir)) return false;
  for (const auto& ent : fs::directory_iterator(dir))
    if (ent.path().filename().string().rfind("pf_", 0) == 0) return true;
  return false;
}

int cmd_fsck(const std::string& root) {
  bool all_ok = true;
  for (const auto& dir : store_dirs(root)) {
    if (!has_param_files(dir)) {
      std::cout << dir.string() << ": empty store (no parameter files) OK\n";
      continue;
    }
    hps::StoreConfig sc;
    sc.dir = dir;
    sc.embedding_dim = 0;
    sc.background_compaction = false;
    try {
      hps::SsdStore store(sc);
      auto rep = store.fsck();
      const auto st = store.stats();
      std::cout << dir.string() << ": files=" << rep.files_scanned
                << " records=" << rep.records << " live=" << rep.live
                << " stale=" << rep.stale
                << " cleaned_invalid=" << st.recovered_invalid_files
                << (rep.ok ? " OK" : " CORRUPT") << "\n";
      for (const auto& p : rep.problems) std::cout << "  " << p << "\n";
      all_ok = all_ok && rep.ok;
    } catch (const hps::Error& e) {
      // An empty store directory is fine for fsck.
      std::cout << dir.string() << ": " << e.what() << "\n";
    }
  }
  return all_ok ? kExitOk : kExitValidation;
}

int cmd_stats(const std::string& root) {
  json out = json::array();
  for (const auto& dir : store_dirs(root)) {
    if (!has_param_files(dir)) {
      json j;
      j["dir"] = dir.string();
      j["files"] = 0;
      j["live_records"] = 0;
      out.push_back(j);
      continue;
    }
    hps::StoreConfig sc;
    sc.dir = dir;
    sc.embedding_dim = 0;
    sc.background_compaction = false;
    try {
      hps::SsdStore store(sc);
      const auto st = store.stats();
      json j;
      j["dir"] = dir.string();
      j["files"] = st.files;
      j["disk_bytes"] = st.disk_bytes;
      j["live_records"] = st.live_records;
      j["stale_records"] = st.stale_records;
      j["live_bytes"] = st.live_bytes;
      j["embedding_dim"] = store.embedding_dim();
      out.push_back(j);
    } catch (const hps::Error& e) {
      json j;
      j["dir"] = dir.string();
      j["note"] = e.what();
      out.push_back(j);
    }
  }
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hps: tiered parameter-server trainer for sparse CTR models"};
  app.require_subcommand(0, 1);

  std::string write_config;
  app.add_option("--write-config", write_config,
                 "write a reference config with every default to PATH");

  // gen
  hps::GenSpec spec;
  std::string gen_out;
  std::string gen_dist = "uniform";
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--dims", spec.dims, "feature space size");
  gen->add_option("--examples", spec.num_examples, "number of examples");
  gen->add_option("--nnz", spec.nnz, "features per example");
  gen->add_option("--dist", gen_dist, "key distribution: uniform|zipf");
  gen->add_option("--zipf-s", spec.zipf_s, "zipf exponent");
  gen->add_option("--seed", spec.seed, "generator seed");
  gen->add_option("--signal-scale", spec.signal_scale,
                  "planted logit standard deviation");
  gen->add_option("--clusters", spec.clusters,
                  "group keys into interleaved signal clusters (0 = off)");

  // train
  ConfigArgs train_cfg;
  std::string train_data, train_test, train_out = "hps_out";
  auto* train = app.add_subcommand("train", "run the tiered trainer");
  train_cfg.attach(train);
  train->add_option("--dataset", train_data, "training dataset")->required();
  train->add_option("--test-dataset", train_test, "held-out dataset for AUC");
  train->add_option("--out", train_out, "output directory");

  // verify
  ConfigArgs verify_cfg;
  std::string verify_data, verify_test;
  auto* verify = app.add_subcommand(
      "verify", "train distributed + reference oracle and compare");
  verify_cfg.attach(verify);
  verify->add_option("--dataset", verify_data, "training dataset")->required();
  verify->add_option("--test-dataset", verify_test, "held-out dataset");

  // hash
  std::string hash_in, hash_out;
  std::uint64_t hash_k = 0, hash_seed = 1;
  auto* hash = app.add_subcommand("hash", "re-hash a dataset (2k-dim output)");
  hash->add_option("--in", hash_in, "input dataset")->required();
  hash->add_option("--out", hash_out, "output dataset")->required();
  hash->add_option("--k", hash_k, "bin count")->required();
  hash->add_option("--seed", hash_seed, "hash seed");

  // fsck / stats
  std::string fsck_dir, stats_dir;
  auto* fsck = app.add_subcommand("fsck", "verify store files and counters");
  fsck->add_option("--store", fsck_dir, "store directory")->required();
  auto* stats = app.add_subcommand("stats", "print store statistics");
  stats->add_option("--store", stats_dir, "store directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (!write_config.empty()) {
      hps::RunConfig{}.save(write_config);
      std::cout << "wrote default config to " << write_config << "\n";
      return kExitOk;
    }
    if (gen->parsed()) {
      if (gen_dist == "zipf")
        spec.dist = hps::KeyDist::kZipf;
      else if (gen_dist == "uniform")
        spec.dist = hps::KeyDist::kUniform;
      else
        throw hps::ConfigError("gen: unknown --dist " + gen_dist);
      return cmd_gen(spec, gen_out);
    }
    if (train->parsed())
      return cmd_train(train_cfg.resolve(), train_data, train_test, train_out);
    if (verify->parsed())
      return cmd_verify(verify_cfg.resolve(), verify_data, verify_test);
    if (hash->parsed()) return cmd_hash(hash_in, hash_out, hash_k, hash_seed);
    if (fsck->parsed()) return cmd_fsck(fsck_dir);
    if (stats->parsed()) return cmd_stats(stats_dir);
    std::cout << app.help();
    return kExitOk;
  } catch (const hps::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
