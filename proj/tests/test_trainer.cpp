#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "fewlabel/trainer.hpp"

using fewlabel::GanTrainer;
using fewlabel::LabeledDataset;
using fewlabel::Method;
using fewlabel::MethodConfig;
using fewlabel::PretrainedArtifacts;
using fewlabel::Rng;
using fewlabel::Tensor;

namespace {

namespace fs = std::filesystem;

LabeledDataset micro_dataset(int n = 64, std::uint64_t seed = 3) {
  fewlabel::SyntheticSpec spec;
  spec.count = n;
  spec.num_classes = 4;
  spec.image_size = 8;
  spec.seed = seed;
  return fewlabel::make_synthetic_dataset(spec);
}

MethodConfig micro_config(Method m, bool ss = false) {
  MethodConfig cfg = fewlabel::make_method_config(m, m == Method::BIGGAN ? 100.0 : 25.0, ss);
  cfg.image_size = 8;
  cfg.base_channels = 4;
  cfg.embedding_dim = 4;
  cfg.opt.batch_size = 8;
  cfg.opt.latent_dim = 4;
  cfg.nonlocal_at = 0;  // 8x8 micro models are too narrow for attention
  cfg.total_g_steps = 4;
  cfg.eval_every = 2;
  cfg.n_fake = 24;
  cfg.n_sets = 2;
  if (m == Method::CLUSTERING) cfg.n_clusters = 3;
  cfg.validate();
  return cfg;
}

std::shared_ptr<fewlabel::DeskEmbedder> micro_embedder(const LabeledDataset& ds) {
  fewlabel::FeatureExtractorSpec spec;
  spec.image_size = ds.height();
  spec.image_channels = ds.channels();
  spec.channels = {8, 8, 8, 8};
  spec.num_classes = ds.num_classes;
  auto net = std::make_shared<fewlabel::FeatureExtractor<float>>(spec, 77);
  fewlabel::train_classifier(*net, ds, 2, 16, 5);
  return std::make_shared<fewlabel::DeskEmbedder>(net);
}

std::string write_s2l_artifact(const LabeledDataset& ds, const std::string& name) {
  fewlabel::FeatureExtractorSpec spec;
  spec.image_size = ds.height();
  spec.image_channels = ds.channels();
  spec.channels = {8, 8, 8, 8};
  spec.num_classes = ds.num_classes;
  auto net = std::make_shared<fewlabel::FeatureExtractor<float>>(spec, 55);
  fewlabel::PretrainConfig pcfg;
  pcfg.epochs = 1;
  pcfg.batch_size = 8;
  pcfg.num_unlabeled_per_batch = 6;
  pcfg.gamma = 0.5;
  fewlabel::train_feature_extractor(*net, ds, pcfg);
  auto provider = fewlabel::make_s2l_provider(net, fewlabel::LabelMode::Hard);
  const std::string path = (fs::temp_directory_path() / name).string();
  fewlabel::save_provider(path, provider);
  return path;
}

std::string write_cluster_artifact(const LabeledDataset& ds, int k, const std::string& name) {
  fewlabel::FeatureExtractorSpec spec;
  spec.image_size = ds.height();
  spec.image_channels = ds.channels();
  spec.channels = {8, 8, 8, 8};
  spec.num_classes = ds.num_classes;
  auto net = std::make_shared<fewlabel::FeatureExtractor<float>>(spec, 56);
  auto feats = net->features(ds.images).cast<double>();
  auto clusters = fewlabel::fit_clusters(feats, k, 16, 20, 3);
  auto provider = fewlabel::make_cluster_provider(net, clusters, ds);
  const std::string path = (fs::temp_directory_path() / name).string();
  fewlabel::save_provider(path, provider);
  return path;
}

std::uint64_t hash_params(fewlabel::ParamStore<float>& store) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : store.all()) {
    h = fewlabel::fnv1a(p->value.data.data(), p->value.data.size() * sizeof(float), h);
  }
  return h;
}

bool files_identical(const std::string& a, const std::string& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  return !sa.empty() && sa == sb;
}

}  // namespace

TEST_CASE("optimizer and full-scale defaults match the reference constants") {
  MethodConfig cfg = fewlabel::make_method_config(Method::S3GAN);
  CHECK(cfg.d_steps_per_g == 2);
  CHECK(cfg.opt.g_lr == 5e-5);
  CHECK(cfg.opt.d_lr == 2e-4);
  CHECK(cfg.opt.beta1 == 0.0);
  CHECK(cfg.opt.beta2 == 0.999);
  CHECK(cfg.weights.alpha == 0.2);
  CHECK(cfg.weights.beta == 0.5);
  CHECK(fewlabel::make_method_config(Method::S3GAN_CO).weights.beta == 1.0);
  CHECK(fewlabel::make_method_config(Method::S2GAN_CO).weights.lambda == 0.2);
  CHECK(fewlabel::make_method_config(Method::S2GAN_CO).hard_or_soft == fewlabel::LabelMode::Soft);
  CHECK(fewlabel::make_method_config(Method::S2GAN).hard_or_soft == fewlabel::LabelMode::Hard);

  CHECK(fewlabel::FullScaleDefaults::batch_size == 2048);
  CHECK(fewlabel::FullScaleDefaults::latent_dim == 120);
  CHECK(fewlabel::FullScaleDefaults::total_g_steps == 250000);
  CHECK(fewlabel::FullScaleDefaults::d_steps_per_g == 2);
}

TEST_CASE("method-flag consistency is enforced") {
  auto cfg = micro_config(Method::S2GAN);
  cfg.weights.alpha = 0.2;  // rotation weight without the SS flag
  CHECK_THROWS_AS(cfg.validate(), fewlabel::ArgumentError);

  auto cfg2 = micro_config(Method::S2GAN);
  cfg2.weights.lambda = 0.1;  // lambda without co-training
  CHECK_THROWS_AS(cfg2.validate(), fewlabel::ArgumentError);

  auto cfg3 = micro_config(Method::S2GAN);
  cfg3.n_clusters = 50;  // clusters outside CLUSTERING
  CHECK_THROWS_AS(cfg3.validate(), fewlabel::ArgumentError);

  CHECK_THROWS_AS(fewlabel::make_method_config(Method::S2GAN, 10.0, true),
                  fewlabel::ArgumentError);
  CHECK_NOTHROW(fewlabel::make_method_config(Method::SINGLE_LABEL, 10.0, true));
  CHECK_NOTHROW(fewlabel::make_method_config(Method::CLUSTERING, 10.0, true));
}

TEST_CASE("method names round-trip, including the SS suffix") {
  for (auto m : {Method::BIGGAN, Method::BIGGAN_K, Method::SINGLE_LABEL, Method::RANDOM_LABEL,
                 Method::CLUSTERING, Method::S2GAN, Method::S2GAN_CO, Method::S3GAN,
                 Method::S3GAN_CO}) {
    auto [parsed, ss] = fewlabel::method_from_name(fewlabel::method_name(m));
    CHECK(parsed == m);
    CHECK_FALSE(ss);
  }
  auto [m, ss] = fewlabel::method_from_name("CLUSTERING_SS");
  CHECK(m == Method::CLUSTERING);
  CHECK(ss);
  CHECK_THROWS_AS(fewlabel::method_from_name("NOT_A_METHOD"), fewlabel::ConfigError);
}

TEST_CASE("method config serializes through the flat key-value format") {
  auto cfg = micro_config(Method::S3GAN_CO);
  auto kv = fewlabel::method_config_to_kv(cfg);
  auto parsed = fewlabel::method_config_from_kv(fewlabel::KeyValueConfig::parse(kv.serialize()));
  CHECK(parsed.method == cfg.method);
  CHECK(parsed.k_percent == cfg.k_percent);
  CHECK(parsed.weights.lambda == cfg.weights.lambda);
  CHECK(parsed.weights.beta == cfg.weights.beta);
  CHECK(parsed.opt.batch_size == cfg.opt.batch_size);
  CHECK(parsed.total_g_steps == cfg.total_g_steps);
  CHECK(parsed.hard_or_soft == cfg.hard_or_soft);
}

TEST_CASE("zero learning rates leave trainable parameters bit-identical") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::RANDOM_LABEL);
  cfg.opt.g_lr = 0.0;
  cfg.opt.d_lr = 0.0;
  GanTrainer trainer(cfg, ds, {}, 9);
  std::vector<std::vector<float>> before;
  for (const auto& p : trainer.generator().params().all()) before.push_back(p->value.data);
  for (const auto& p : trainer.discriminator().params().all()) before.push_back(p->value.data);
  trainer.train_step();
  trainer.train_step();
  std::size_t i = 0;
  for (const auto& p : trainer.generator().params().all()) {
    CHECK(p->value.data == before[i++]);
  }
  for (const auto& p : trainer.discriminator().params().all()) {
    CHECK(p->value.data == before[i++]);
  }
  CHECK(trainer.d_updates() == 4);
  CHECK(trainer.g_updates() == 2);
}

TEST_CASE("update counters: exactly d_steps_per_g discriminator updates per generator step") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::SINGLE_LABEL);
  cfg.d_steps_per_g = 3;
  GanTrainer trainer(cfg, ds, {}, 4);
  for (int i = 0; i < 5; ++i) trainer.train_step();
  CHECK(trainer.step() == 5);
  CHECK(trainer.g_updates() == 5);
  CHECK(trainer.d_updates() == 15);
}

TEST_CASE("parameter isolation between the two update phases") {
  auto ds = micro_dataset();
  GanTrainer trainer(micro_config(Method::RANDOM_LABEL), ds, {}, 6);

  const std::uint64_t g_before = hash_params(trainer.generator().params());
  trainer.d_update_for_test(0);
  CHECK(hash_params(trainer.generator().params()) == g_before);  // D step leaves G alone

  const std::uint64_t d_before = hash_params(trainer.discriminator().params());
  trainer.g_update_for_test(1);
  CHECK(hash_params(trainer.discriminator().params()) == d_before);  // G step leaves D alone
  CHECK(hash_params(trainer.generator().params()) != g_before);
}

TEST_CASE("cotrain head receives gradient only through the lambda term") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::S2GAN_CO);
  cfg.weights.lambda = 0.0;
  GanTrainer trainer(cfg, ds, {}, 8);
  auto* k = trainer.discriminator().params().find("discriminator/cotrain_head/kernel");
  auto* b = trainer.discriminator().params().find("discriminator/cotrain_head/bias");
  REQUIRE(k != nullptr);
  const auto kv = k->value.data;
  const auto bv = b->value.data;
  trainer.d_update_for_test(0);
  CHECK(k->value.data == kv);
  CHECK(b->value.data == bv);

  // with lambda > 0 the head trains
  auto cfg2 = micro_config(Method::S2GAN_CO);
  GanTrainer t2(cfg2, ds, {}, 8);
  auto* k2 = t2.discriminator().params().find("discriminator/cotrain_head/kernel");
  const auto kv2 = k2->value.data;
  t2.d_update_for_test(0);
  CHECK(k2->value.data != kv2);
}

TEST_CASE("two runs with identical config and seed are bit-identical") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::S3GAN);
  const std::string art = write_s2l_artifact(ds, "fewlabel_s2l_micro.bin");
  PretrainedArtifacts artifacts;
  artifacts.s2l_provider_path = art;

  GanTrainer a(cfg, ds, artifacts, 42);
  GanTrainer b(cfg, ds, artifacts, 42);
  for (int i = 0; i < 3; ++i) {
    a.train_step();
    b.train_step();
  }
  const auto pa = (fs::temp_directory_path() / "fewlabel_ckpt_a.bin").string();
  const auto pb = (fs::temp_directory_path() / "fewlabel_ckpt_b.bin").string();
  a.save_checkpoint(pa);
  b.save_checkpoint(pb);
  CHECK(files_identical(pa, pb));

  GanTrainer c(cfg, ds, artifacts, 43);  // different seed diverges
  for (int i = 0; i < 3; ++i) c.train_step();
  const auto pc = (fs::temp_directory_path() / "fewlabel_ckpt_c.bin").string();
  c.save_checkpoint(pc);
  CHECK_FALSE(files_identical(pa, pc));
  fs::remove(pa);
  fs::remove(pb);
  fs::remove(pc);
}

TEST_CASE("checkpoint resume reproduces an uninterrupted run exactly") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::RANDOM_LABEL);
  GanTrainer straight(cfg, ds, {}, 12);
  for (int i = 0; i < 6; ++i) straight.train_step();

  GanTrainer first(cfg, ds, {}, 12);
  for (int i = 0; i < 3; ++i) first.train_step();
  const auto mid = (fs::temp_directory_path() / "fewlabel_ckpt_mid.bin").string();
  first.save_checkpoint(mid);

  GanTrainer resumed(cfg, ds, {}, 12);
  resumed.load_checkpoint(mid);
  CHECK(resumed.step() == 3);
  for (int i = 0; i < 3; ++i) resumed.train_step();

  const auto pa = (fs::temp_directory_path() / "fewlabel_ckpt_s.bin").string();
  const auto pb = (fs::temp_directory_path() / "fewlabel_ckpt_r.bin").string();
  straight.save_checkpoint(pa);
  resumed.save_checkpoint(pb);
  CHECK(files_identical(pa, pb));
  fs::remove(mid);
  fs::remove(pa);
  fs::remove(pb);
}

TEST_CASE("single-label wiring removes the projection; heads follow the method") {
  auto ds = micro_dataset();
  GanTrainer single(micro_config(Method::SINGLE_LABEL), ds, {}, 3);
  CHECK(single.discriminator().params().find("discriminator_projection/kernel") == nullptr);
  CHECK(single.provider().num_classes_effective == 1);

  const std::string art = write_s2l_artifact(ds, "fewlabel_s2l_micro2.bin");
  PretrainedArtifacts artifacts;
  artifacts.s2l_provider_path = art;
  GanTrainer s3(micro_config(Method::S3GAN), ds, artifacts, 3);
  CHECK(s3.discriminator().params().find("discriminator/rotation_head/kernel") != nullptr);
  CHECK(s3.discriminator().params().find("discriminator/cotrain_head/kernel") == nullptr);
  CHECK(s3.discriminator().params().find("discriminator_projection/kernel") != nullptr);

  GanTrainer co(micro_config(Method::S2GAN_CO), ds, {}, 3);
  CHECK(co.discriminator().params().find("discriminator/cotrain_head/kernel") != nullptr);
  CHECK(co.discriminator().params().find("discriminator/rotation_head/kernel") == nullptr);
  fs::remove(art);
}

TEST_CASE("BIGGAN_K prunes the dataset to the labeled subset") {
  auto ds = micro_dataset(64);
  auto cfg = micro_config(Method::BIGGAN_K);  // k = 25%
  GanTrainer trainer(cfg, ds, {}, 5);
  CHECK(trainer.dataset().size() == 16);  // 25% of 64
  CHECK(trainer.dataset().fully_labeled());

  GanTrainer full(micro_config(Method::BIGGAN), ds, {}, 5);
  CHECK(full.dataset().size() == 64);
}

TEST_CASE("missing pretrained artifacts are configuration errors naming the path") {
  auto ds = micro_dataset();
  PretrainedArtifacts missing;
  missing.s2l_provider_path = "/nonexistent/s2l.bin";
  try {
    GanTrainer t(micro_config(Method::S3GAN), ds, missing, 2);
    FAIL("expected ConfigError");
  } catch (const fewlabel::ConfigError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/s2l.bin") != std::string::npos);
  }
  CHECK_THROWS_AS(GanTrainer(micro_config(Method::CLUSTERING), ds, {}, 2), fewlabel::ConfigError);
}

TEST_CASE("clustering method conditions on the cluster provider") {
  auto ds = micro_dataset();
  const std::string art = write_cluster_artifact(ds, 3, "fewlabel_cluster_micro.bin");
  PretrainedArtifacts artifacts;
  artifacts.cluster_provider_path = art;
  GanTrainer trainer(micro_config(Method::CLUSTERING), ds, artifacts, 7);
  CHECK(trainer.provider().kind == fewlabel::ProviderKind::Cluster);
  CHECK(trainer.provider().num_classes_effective == 3);
  CHECK(trainer.generator().spec().num_classes == 3);
  trainer.train_step();  // smoke: one full step
  CHECK(trainer.step() == 1);
  fs::remove(art);
}

TEST_CASE("divergence: aborted step restores parameters and records the event") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::RANDOM_LABEL);
  GanTrainer trainer(cfg, ds, {}, 10);
  trainer.train_step();

  // poison one parameter; the loss goes non-finite and the step must abort
  auto* bias = trainer.discriminator().params().find("discriminator/final_fc/bias");
  REQUIRE(bias != nullptr);
  bias->value.data[0] = std::nanf("");
  std::vector<std::vector<float>> others;
  for (const auto& p : trainer.generator().params().all()) others.push_back(p->value.data);

  fewlabel::WarningCapture warnings;
  trainer.train_step();
  CHECK(trainer.divergence_events() == 1);
  CHECK(warnings.contains("non-finite"));
  CHECK(trainer.step() == 2);  // the step was counted but aborted
  std::size_t i = 0;
  for (const auto& p : trainer.generator().params().all()) {
    CHECK(p->value.data == others[i++]);  // pre-step values restored
  }
}

TEST_CASE("divergence rollback restores the last checkpoint and continues") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::RANDOM_LABEL);
  cfg.total_g_steps = 6;
  cfg.eval_every = 2;  // checkpoints at steps 2 and 4
  auto embedder = micro_embedder(ds);
  const std::string dir = (fs::temp_directory_path() / "fewlabel_rollback_run").string();
  fs::remove_all(dir);
  auto real_stats = fewlabel::compute_real_stats(*embedder, ds);
  fewlabel::RunHooks hooks;
  hooks.on_step = [](std::int64_t step, GanTrainer& t) {
    if (step == 3) {
      t.discriminator().params().find("discriminator/final_fc/bias")->value.data[0] =
          std::nanf("");
    }
  };
  fewlabel::WarningCapture warnings;
  auto result = fewlabel::run_single_seed(cfg, ds, {}, 5, dir, *embedder, real_stats, hooks);
  CHECK_FALSE(result.collapsed);  // recovered from the checkpoint at step 2
  auto records = fewlabel::read_metrics_records(dir + "/metrics.jsonl");
  CHECK(records.back().step == 6);
  CHECK_FALSE(records.back().collapsed);
  fs::remove_all(dir);
}

TEST_CASE("a collapsing run is recorded with its last valid metrics") {
  auto ds = micro_dataset();
  auto cfg = micro_config(Method::RANDOM_LABEL);
  cfg.total_g_steps = 30;
  cfg.eval_every = 50;  // no checkpoint before the poison, so no recovery
  auto embedder = micro_embedder(ds);
  const std::string dir = (fs::temp_directory_path() / "fewlabel_collapse_run").string();
  fs::remove_all(dir);
  auto real_stats = fewlabel::compute_real_stats(*embedder, ds);
  fewlabel::RunHooks hooks;
  hooks.on_step = [](std::int64_t step, GanTrainer& t) {
    if (step == 2) {
      t.discriminator().params().find("discriminator/final_fc/bias")->value.data[0] =
          std::nanf("");
    }
  };
  auto result = fewlabel::run_single_seed(cfg, ds, {}, 3, dir, *embedder, real_stats, hooks);
  CHECK(result.collapsed);
  CHECK(result.final_fid >= 0.0);  // the step-0 metrics were kept
  auto records = fewlabel::read_metrics_records(dir + "/metrics.jsonl");
  REQUIRE(records.size() >= 2);
  CHECK(records.back().collapsed);
  CHECK(records.back().fid_mean == Catch::Approx(records.front().fid_mean));
  fs::remove_all(dir);
}

TEST_CASE("run_experiment: median and mean/std over the per-seed logs") {
  auto ds = micro_dataset(48);
  auto cfg = micro_config(Method::RANDOM_LABEL);
  cfg.total_g_steps = 2;
  cfg.eval_every = 2;
  cfg.n_fake = 16;
  cfg.n_sets = 2;
  auto embedder = micro_embedder(ds);
  const std::string dir = (fs::temp_directory_path() / "fewlabel_experiment").string();
  fs::remove_all(dir);
  auto report = fewlabel::run_experiment(cfg, ds, {}, {1, 2, 3}, dir, *embedder);
  REQUIRE(report.seeds.size() == 3);

  // recompute the median by hand from the per-seed logs
  std::vector<double> finals;
  for (const auto& s : report.seeds) {
    auto records = fewlabel::read_metrics_records(s.metrics_path);
    REQUIRE_FALSE(records.empty());
    CHECK(records.back().step == 2);
    finals.push_back(records.back().fid_mean);
  }
  std::sort(finals.begin(), finals.end());
  CHECK(report.median_fid == Catch::Approx(finals[1]).margin(1e-12));

  double mean = (finals[0] + finals[1] + finals[2]) / 3.0;
  double var = 0.0;
  for (double f : finals) var += (f - mean) * (f - mean) / 3.0;
  CHECK(report.mean_fid == Catch::Approx(mean).margin(1e-12));
  CHECK(report.std_fid == Catch::Approx(std::sqrt(var)).margin(1e-12));

  // previews exist (8x8 grids per checkpoint)
  CHECK(fs::exists(dir + "/RANDOM_LABEL/seed1/preview_step0.bmp"));
  CHECK(fs::exists(dir + "/RANDOM_LABEL/seed1/preview_step2.bmp"));
  fs::remove_all(dir);
}

TEST_CASE("median helper") {
  CHECK(fewlabel::median_of({3.0, 1.0, 2.0}) == 2.0);
  CHECK(fewlabel::median_of({5.0}) == 5.0);
  CHECK(fewlabel::median_of({4.0, 1.0}) == 2.5);
  CHECK_THROWS_AS(fewlabel::median_of({}), fewlabel::ArgumentError);
}

TEST_CASE("all method rows build and run one step") {
  auto ds = micro_dataset(48);
  const std::string s2l = write_s2l_artifact(ds, "fewlabel_s2l_all.bin");
  const std::string clu = write_cluster_artifact(ds, 3, "fewlabel_cluster_all.bin");
  PretrainedArtifacts artifacts;
  artifacts.s2l_provider_path = s2l;
  artifacts.cluster_provider_path = clu;
  for (Method m : {Method::BIGGAN, Method::BIGGAN_K, Method::SINGLE_LABEL, Method::RANDOM_LABEL,
                   Method::CLUSTERING, Method::S2GAN, Method::S2GAN_CO, Method::S3GAN,
                   Method::S3GAN_CO}) {
    INFO("method " << fewlabel::method_name(m));
    GanTrainer trainer(micro_config(m), ds, artifacts, 11);
    trainer.train_step();
    CHECK(trainer.step() == 1);
    CHECK(std::isfinite(trainer.last_d_loss()));
    CHECK(std::isfinite(trainer.last_g_loss()));
  }
  // the SS variants of the unsupervised methods
  for (Method m : {Method::SINGLE_LABEL, Method::CLUSTERING}) {
    INFO("method " << fewlabel::method_name(m) << "_SS");
    GanTrainer trainer(micro_config(m, true), ds, artifacts, 11);
    trainer.train_step();
    CHECK(trainer.step() == 1);
  }
  fs::remove(s2l);
  fs::remove(clu);
}
