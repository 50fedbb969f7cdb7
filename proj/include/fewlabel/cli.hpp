#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewlabel/report.hpp"
#include "fewlabel/trainer.hpp"

namespace fewlabel {

// ---------------------------------------------------------------------------
// Experiment manifest: a flat key-value file naming the dataset, the methods
// and seeds to run, the artifact and output directories, and any method
// hyperparameter overrides (same keys as the method config format).
// ---------------------------------------------------------------------------

struct ExperimentManifest {
  LabeledDataset dataset;
  std::string artifact_dir = "artifacts";
  std::string out_dir = "runs";
  std::vector<std::string> methods;  // names, possibly with _SS suffix
  std::vector<std::uint64_t> seeds = {1};
  double k_percent = 10.0;
  int n_clusters = 8;
  int pretrain_epochs = 30;
  int pretrain_batch = 64;
  int pretrain_unlabeled = 48;
  int embedder_epochs = 10;
  KeyValueConfig raw;
};

// Parses "synthetic:count=1024,classes=4,size=32,seed=1".
inline LabeledDataset load_synthetic_spec(const std::string& value) {
  SyntheticSpec spec;
  const std::string params = value.substr(std::string("synthetic:").size());
  std::istringstream ss(params);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("bad synthetic dataset parameter: " + item);
    const std::string key = item.substr(0, eq);
    const long val = std::stol(item.substr(eq + 1));
    if (key == "count") spec.count = static_cast<int>(val);
    else if (key == "classes") spec.num_classes = static_cast<int>(val);
    else if (key == "size") spec.image_size = static_cast<int>(val);
    else if (key == "seed") spec.seed = static_cast<std::uint64_t>(val);
    else throw ConfigError("unknown synthetic dataset parameter: " + key);
  }
  return make_synthetic_dataset(spec);
}

inline LabeledDataset resolve_dataset(const std::string& value) {
  if (value.rfind("synthetic:", 0) == 0) return load_synthetic_spec(value);
  namespace fs = std::filesystem;
  fs::path path = value;
  if (path.is_relative()) {
    if (const char* root = std::getenv("FEWLABEL_DATA_DIR"); root && !fs::exists(path)) {
      path = fs::path(root) / path;
    }
  }
  if (fs::is_directory(path)) path /= "manifest.txt";
  if (!fs::exists(path)) {
    throw ConfigError("dataset path missing: " + path.string());
  }
  return load_dataset(path.string());
}

inline ExperimentManifest load_manifest(const std::string& path) {
  ExperimentManifest m;
  m.raw = KeyValueConfig::load(path);
  const std::string dataset = m.raw.get_string("dataset");
  if (dataset.empty()) throw ConfigError("manifest: 'dataset' is required");
  m.dataset = resolve_dataset(dataset);
  m.artifact_dir = m.raw.get_string("artifact_dir", m.artifact_dir);
  m.out_dir = m.raw.get_string("out_dir", m.out_dir);
  m.methods = m.raw.get_list("methods");
  if (m.raw.has("seeds")) {
    m.seeds.clear();
    for (const auto& s : m.raw.get_list("seeds")) {
      m.seeds.push_back(static_cast<std::uint64_t>(std::stoull(s)));
    }
  }
  m.k_percent = m.raw.get_double("k_percent", m.k_percent);
  m.n_clusters = static_cast<int>(m.raw.get_int("n_clusters", m.n_clusters));
  m.pretrain_epochs = static_cast<int>(m.raw.get_int("pretrain_epochs", m.pretrain_epochs));
  m.pretrain_batch = static_cast<int>(m.raw.get_int("pretrain_batch", m.pretrain_batch));
  m.pretrain_unlabeled =
      static_cast<int>(m.raw.get_int("pretrain_unlabeled", m.pretrain_unlabeled));
  m.embedder_epochs = static_cast<int>(m.raw.get_int("embedder_epochs", m.embedder_epochs));
  return m;
}

struct CliOverrides {
  std::vector<std::uint64_t> seeds;
  std::string method;
  double k_percent = -1.0;
  std::string out_dir;
  bool dry_run = false;
};

inline void apply_overrides(ExperimentManifest& m, const CliOverrides& o) {
  if (!o.seeds.empty()) m.seeds = o.seeds;
  if (!o.method.empty()) m.methods = {o.method};
  if (o.k_percent > 0.0) m.k_percent = o.k_percent;
  if (!o.out_dir.empty()) m.out_dir = o.out_dir;
}

// Resolves one method row: registry defaults for the named method, then any
// manifest-level hyperparameter overrides.
inline MethodConfig resolve_method_config(const ExperimentManifest& m, const std::string& name) {
  KeyValueConfig merged = m.raw;
  merged.set("method", name);
  merged.set("k_percent", std::to_string(m.k_percent));
  auto [parsed, ss] = method_from_name(name);
  if (parsed == Method::BIGGAN) merged.set("k_percent", "100");
  if (parsed == Method::CLUSTERING && !m.raw.has("n_clusters")) {
    merged.set("n_clusters", std::to_string(m.n_clusters));
  }
  // manifest bookkeeping keys are not method hyperparameters
  return method_config_from_kv(merged);
}

namespace artifact_paths {
inline std::string embedder(const ExperimentManifest& m) {
  return m.artifact_dir + "/embedder.bin";
}
inline std::string s2l(const ExperimentManifest& m) {
  std::ostringstream ss;
  ss << m.artifact_dir << "/s2l_k" << m.k_percent << ".bin";
  return ss.str();
}
inline std::string clusters(const ExperimentManifest& m) {
  std::ostringstream ss;
  ss << m.artifact_dir << "/cluster_n" << m.n_clusters << ".bin";
  return ss.str();
}
}  // namespace artifact_paths

inline void write_artifact_meta(const std::string& artifact_path, const nlohmann::json& meta) {
  std::ofstream out(artifact_path + ".json");
  out << meta.dump(2) << "\n";
}

// Features of the whole dataset, in chunks.
inline Tensor<double> embed_features(FeatureExtractor<float>& net, const LabeledDataset& ds) {
  Tensor<double> out(Shape{ds.size(), net.spec().feature_dim()});
  const int chunk = 256;
  for (int start = 0; start < ds.size(); start += chunk) {
    const int n = std::min(chunk, ds.size() - start);
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[i] = start + i;
    const auto feats = net.features(ds.gather_images(idx)).cast<double>();
    std::copy(feats.data.begin(), feats.data.end(),
              out.data.begin() + static_cast<std::int64_t>(start) * net.spec().feature_dim());
  }
  return out;
}

// ---------------------------------------------------------------------------
// pretrain: produce provider + embedder artifacts (idempotent)
// ---------------------------------------------------------------------------

inline int cmd_pretrain(const std::string& manifest_path, const CliOverrides& overrides) {
  ExperimentManifest m = load_manifest(manifest_path);
  apply_overrides(m, overrides);
  if (m.methods.empty()) {
    m.methods = {"S3GAN"};
  }
  std::filesystem::create_directories(m.artifact_dir);

  bool need_s2l = false, need_clusters = false;
  for (const auto& name : m.methods) {
    auto [method, ss] = method_from_name(name);
    need_s2l = need_s2l || method_uses_pretrained_classifier(method);
    need_clusters = need_clusters || method == Method::CLUSTERING;
  }

  if (overrides.dry_run) {
    std::cout << "pretrain plan: embedder=" << artifact_paths::embedder(m)
              << (need_s2l ? " s2l=" + artifact_paths::s2l(m) : "")
              << (need_clusters ? " clusters=" + artifact_paths::clusters(m) : "") << "\n";
    return 0;
  }

  // evaluation embedder, trained once on the fully labeled dataset
  const std::string embedder_path = artifact_paths::embedder(m);
  if (std::filesystem::exists(embedder_path)) {
    std::cout << "skipped " << embedder_path << " (exists)\n";
  } else {
    if (!m.dataset.fully_labeled()) {
      throw ConfigError("embedder pretraining needs the fully labeled dataset");
    }
    FeatureExtractorSpec spec;
    spec.image_size = m.dataset.height();
    spec.image_channels = m.dataset.channels();
    spec.num_classes = m.dataset.num_classes;
    auto net = std::make_shared<FeatureExtractor<float>>(spec, 0xe3beddull);
    train_classifier(*net, m.dataset, m.embedder_epochs, 64, 0x7a11ull);
    const double acc = classifier_accuracy(*net, m.dataset);
    save_extractor(embedder_path, *net);
    DeskEmbedder emb(net);
    write_artifact_meta(embedder_path, {{"kind", "embedder"},
                                        {"identifier", emb.identifier()},
                                        {"epochs", m.embedder_epochs},
                                        {"train_accuracy", acc}});
    std::cout << "wrote " << embedder_path << " (train accuracy " << acc << ")\n";
  }

  if (need_s2l) {
    const std::string path = artifact_paths::s2l(m);
    if (std::filesystem::exists(path)) {
      std::cout << "skipped " << path << " (exists)\n";
    } else {
      auto [train, holdout] = split_holdout(m.dataset, 0.1, 0x401d0ull);
      LabeledDataset sub = subsample_labels(train, m.k_percent, fnv1a("label-subsample"));
      FeatureExtractorSpec spec;
      spec.image_size = m.dataset.height();
      spec.image_channels = m.dataset.channels();
      spec.num_classes = m.dataset.num_classes;
      auto net = std::make_shared<FeatureExtractor<float>>(spec, 0x52cull);
      PretrainConfig pcfg;
      pcfg.epochs = m.pretrain_epochs;
      pcfg.batch_size = m.pretrain_batch;
      pcfg.num_unlabeled_per_batch = m.pretrain_unlabeled;
      pcfg.gamma = m.raw.get_double("gamma", 0.5);
      pcfg.seed = 0x52c5eedull;
      const PretrainResult r = train_feature_extractor(*net, sub, pcfg, &holdout);
      auto provider = make_s2l_provider(net, LabelMode::Hard, r.heldout_accuracy);
      save_provider(path, provider);
      write_artifact_meta(path, {{"kind", "s2l"},
                                 {"k_percent", m.k_percent},
                                 {"epochs", m.pretrain_epochs},
                                 {"gamma", pcfg.gamma},
                                 {"heldout_accuracy", r.heldout_accuracy}});
      std::cout << "wrote " << path << " (held-out accuracy " << r.heldout_accuracy << ")\n";
    }
  }

  if (need_clusters) {
    const std::string path = artifact_paths::clusters(m);
    if (std::filesystem::exists(path)) {
      std::cout << "skipped " << path << " (exists)\n";
    } else {
      FeatureExtractorSpec spec;
      spec.image_size = m.dataset.height();
      spec.image_channels = m.dataset.channels();
      spec.num_classes = m.dataset.num_classes;
      auto net = std::make_shared<FeatureExtractor<float>>(spec, 0xc10ull);
      PretrainConfig pcfg;
      pcfg.epochs = m.pretrain_epochs;
      pcfg.batch_size = m.pretrain_batch;
      pcfg.num_unlabeled_per_batch = m.pretrain_batch;  // fully unsupervised
      pcfg.gamma = 0.0;
      pcfg.seed = 0xc105eedull;
      train_feature_extractor(*net, m.dataset, pcfg);
      const Tensor<double> feats = embed_features(*net, m.dataset);
      const int iterations = 10 * std::max(1, m.dataset.size() / 64);
      ClusterModel clusters = fit_clusters(feats, m.n_clusters, 64, iterations, 0xc1050ull);
      auto provider = make_cluster_provider(net, clusters, m.dataset);
      save_provider(path, provider);
      write_artifact_meta(path, {{"kind", "clusters"},
                                 {"n_clusters", m.n_clusters},
                                 {"epochs", m.pretrain_epochs}});
      std::cout << "wrote " << path << " (" << m.n_clusters << " clusters)\n";
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train: dispatch run_experiment per method x seed
// ---------------------------------------------------------------------------

inline int cmd_train(const std::string& manifest_path, const CliOverrides& overrides) {
  ExperimentManifest m = load_manifest(manifest_path);
  apply_overrides(m, overrides);
  if (m.methods.empty()) throw ConfigError("manifest: no methods to train");

  std::vector<MethodConfig> configs;
  for (const auto& name : m.methods) configs.push_back(resolve_method_config(m, name));

  if (overrides.dry_run) {
    for (const auto& cfg : configs) {
      std::cout << "# resolved method configuration\n" << method_config_to_kv(cfg).serialize();
    }
    return 0;
  }

  const std::string embedder_path = artifact_paths::embedder(m);
  if (!std::filesystem::exists(embedder_path)) {
    throw ConfigError("missing evaluation embedder artifact: " + embedder_path +
                      " (run pretrain first)");
  }
  DeskEmbedder embedder(load_extractor(embedder_path));

  PretrainedArtifacts artifacts;
  artifacts.s2l_provider_path = artifact_paths::s2l(m);
  artifacts.cluster_provider_path = artifact_paths::clusters(m);

  for (const auto& cfg : configs) {
    std::cout << "== training " << cfg.name() << " (k=" << cfg.k_percent << "%, seeds=";
    for (std::size_t i = 0; i < m.seeds.size(); ++i) {
      std::cout << m.seeds[i] << (i + 1 < m.seeds.size() ? "," : "");
    }
    std::cout << ") ==\n";
    RunHooks hooks;
    hooks.on_eval = [&](std::int64_t step, const EvalResult& ev) {
      std::cout << "  step " << step << ": FID " << ev.fid_mean << ", IS " << ev.is_mean << "\n";
    };
    ExperimentReport report =
        run_experiment(cfg, m.dataset, artifacts, m.seeds, m.out_dir, embedder, hooks);
    std::cout << cfg.name() << ": median FID " << report.median_fid << ", median IS "
              << report.median_is << "\n";
    for (const auto& s : report.seeds) {
      std::cout << "  seed " << s.seed << ": FID " << s.final_fid << ", IS " << s.final_is
                << (s.collapsed ? " [collapsed]" : "") << "\n";
    }
  }

  const auto finals = collect_finals(m.out_dir);
  const auto paths = write_report(finals, m.out_dir + "/report");
  std::cout << "report written to " << m.out_dir << "/report\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report: tables + charts from completed logs
// ---------------------------------------------------------------------------

inline int cmd_report(const std::string& log_dir, const std::string& out_dir) {
  const auto finals = collect_finals(log_dir);
  const std::string dir = out_dir.empty() ? log_dir + "/report" : out_dir;
  const auto paths = write_report(finals, dir);
  std::cout << render_median_table(finals, true) << "\n"
            << render_median_table(finals, false) << "\n"
            << render_meanstd_table(finals, true) << "\n"
            << render_meanstd_table(finals, false);
  std::cout << "charts: ";
  for (const auto& c : paths.charts) std::cout << c << " ";
  std::cout << "\nprovenance: " << paths.provenance << "\n";
  return 0;
}

}  // namespace fewlabel
