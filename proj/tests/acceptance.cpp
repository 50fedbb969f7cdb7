// Acceptance suite: one criterion per section, one pass/fail line each.
//
//   acceptance               run all criteria
//   acceptance <n>           run criterion n
//   acceptance 8 <METHOD>    run the end-to-end smoke for one method
//
// Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "fewlabel/cli.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace fewlabel;

namespace {

// ---------------------------------------------------------------------------
// shared desk-scale fixtures, cached across acceptance processes
// ---------------------------------------------------------------------------

const char* kCacheEnv = "FEWLABEL_ACCEPTANCE_CACHE";

std::string cache_dir() {
  if (const char* env = std::getenv(kCacheEnv)) return env;
  return (fs::temp_directory_path() / "fewlabel_acceptance_artifacts").string();
}

LabeledDataset desk_dataset() {
  SyntheticSpec spec;
  spec.count = 2048;
  spec.num_classes = 4;
  spec.image_size = 32;
  spec.seed = 1;
  return make_synthetic_dataset(spec);
}

FeatureExtractorSpec desk_extractor_spec() {
  FeatureExtractorSpec spec;
  spec.image_size = 32;
  spec.image_channels = 3;
  spec.channels = {16, 32, 64, 64};
  spec.num_classes = 4;
  return spec;
}

std::shared_ptr<DeskEmbedder> desk_embedder(const LabeledDataset& ds) {
  const std::string path = cache_dir() + "/embedder.bin";
  fs::create_directories(cache_dir());
  if (!fs::exists(path)) {
    auto net = std::make_shared<FeatureExtractor<float>>(desk_extractor_spec(), 7);
    train_classifier(*net, ds, 6, 64, 3);
    save_extractor(path, *net);
  }
  return std::make_shared<DeskEmbedder>(load_extractor(path));
}

std::string desk_s2l_artifact(const LabeledDataset& ds) {
  const std::string path = cache_dir() + "/s2l_k10.bin";
  fs::create_directories(cache_dir());
  if (!fs::exists(path)) {
    auto net = std::make_shared<FeatureExtractor<float>>(desk_extractor_spec(), 9);
    auto sub = subsample_labels(ds, 10.0, 4);
    PretrainConfig pcfg;
    pcfg.epochs = 12;
    pcfg.batch_size = 64;
    pcfg.num_unlabeled_per_batch = 48;
    pcfg.gamma = 0.5;
    pcfg.seed = 2;
    train_feature_extractor(*net, sub, pcfg);
    save_provider(path, make_s2l_provider(net, LabelMode::Hard));
  }
  return path;
}

std::string desk_cluster_artifact(const LabeledDataset& ds) {
  const std::string path = cache_dir() + "/cluster_n8.bin";
  fs::create_directories(cache_dir());
  if (!fs::exists(path)) {
    auto net = std::make_shared<FeatureExtractor<float>>(desk_extractor_spec(), 11);
    PretrainConfig pcfg;
    pcfg.epochs = 8;
    pcfg.batch_size = 64;
    pcfg.num_unlabeled_per_batch = 64;
    pcfg.gamma = 0.0;
    pcfg.seed = 5;
    train_feature_extractor(*net, ds, pcfg);
    const Tensor<double> feats = embed_features(*net, ds);
    ClusterModel clusters = fit_clusters(feats, 8, 64, 10 * ds.size() / 64, 3);
    save_provider(path, make_cluster_provider(net, clusters, ds));
  }
  return path;
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

bool criterion1_parameter_counts(std::ostream& log) {
  const auto g = Generator<float>::parameter_shapes(full_scale_generator_spec());
  const auto d = Discriminator<float>::parameter_shapes(full_scale_discriminator_spec());
  const std::int64_t gc = count_parameters(g);
  const std::int64_t dc = count_parameters(d);
  Generator<float> gen(full_scale_generator_spec());
  const std::int64_t gc_built = gen.params().trainable_parameter_count();
  log << "generator " << gc << " (built " << gc_built << "), discriminator " << dc;
  if (gc != 70433988 || gc_built != 70433988) return false;
  {
    Discriminator<float> disc(full_scale_discriminator_spec());
    if (disc.params().trainable_parameter_count() != 87982370) return false;
  }
  return dc == 87982370;
}

bool criterion2_fid_oracles(std::ostream& log) {
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + static_cast<int>(rng.uniform_int(6));
    // diagonal closed form
    GaussianStats a, b;
    a.n = b.n = 100;
    a.mu = Tensor<double>(Shape{d});
    b.mu = Tensor<double>(Shape{d});
    a.sigma = Tensor<double>(Shape{d, d});
    b.sigma = Tensor<double>(Shape{d, d});
    double expected = 0.0;
    for (int i = 0; i < d; ++i) {
      a.mu.data[i] = rng.normal();
      b.mu.data[i] = rng.normal();
      const double v1 = 0.1 + 3.0 * rng.uniform();
      const double v2 = 0.1 + 3.0 * rng.uniform();
      a.sigma.data[static_cast<std::size_t>(i) * d + i] = v1;
      b.sigma.data[static_cast<std::size_t>(i) * d + i] = v2;
      expected += (a.mu.data[i] - b.mu.data[i]) * (a.mu.data[i] - b.mu.data[i]);
      expected += (std::sqrt(v1) - std::sqrt(v2)) * (std::sqrt(v1) - std::sqrt(v2));
    }
    worst = std::max(worst, std::abs(fid(a, b) - expected));
    // equal covariances: only the mean term remains
    auto feats = Tensor<double>::randn({80, d}, rng);
    GaussianStats c = fit_gaussian(feats);
    GaussianStats shifted = c;
    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
      const double delta = rng.normal();
      shifted.mu.data[i] += delta;
      mean_term += delta * delta;
    }
    worst = std::max(worst, std::abs(fid(c, shifted) - mean_term));
    worst = std::max(worst, std::abs(fid(c, c)));
    worst = std::max(worst, std::abs(fid(c, shifted) - fid(shifted, c)));
  }
  log << "max deviation " << worst;
  return worst <= 1e-6;
}

bool criterion3_is_oracles(std::ostream& log) {
  Rng rng(102);
  // identical rows -> 1
  Tensor<double> same(Shape{6, 4});
  for (int i = 0; i < 6; ++i) {
    same.data[static_cast<std::size_t>(i) * 4 + 0] = 0.4;
    same.data[static_cast<std::size_t>(i) * 4 + 1] = 0.3;
    same.data[static_cast<std::size_t>(i) * 4 + 2] = 0.2;
    same.data[static_cast<std::size_t>(i) * 4 + 3] = 0.1;
  }
  if (std::abs(inception_score(same) - 1.0) > 1e-9) return false;
  // one-hot per class -> K
  const int k = 6;
  Tensor<double> onehot(Shape{k, k});
  for (int i = 0; i < k; ++i) onehot.data[static_cast<std::size_t>(i) * k + i] = 1.0;
  if (std::abs(inception_score(onehot) - k) > 1e-9) return false;
  // 20 random row-stochastic matrices vs a direct KL computation
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(12));
    const int kk = 2 + static_cast<int>(rng.uniform_int(7));
    Tensor<double> probs(Shape{n, kk});
    for (int i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int j = 0; j < kk; ++j) {
        probs.data[static_cast<std::size_t>(i) * kk + j] = 0.01 + rng.uniform();
        sum += probs.data[static_cast<std::size_t>(i) * kk + j];
      }
      for (int j = 0; j < kk; ++j) probs.data[static_cast<std::size_t>(i) * kk + j] /= sum;
    }
    std::vector<double> marg(static_cast<std::size_t>(kk), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kk; ++j) marg[j] += probs.data[static_cast<std::size_t>(i) * kk + j] / n;
    double mean_kl = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < kk; ++j) {
        const double p = probs.data[static_cast<std::size_t>(i) * kk + j];
        mean_kl += p * std::log(p / marg[j]) / n;
      }
    worst = std::max(worst, std::abs(inception_score(probs) - std::exp(mean_kl)));
  }
  log << "max deviation " << worst;
  return worst <= 1e-9;
}

bool criterion4_loss_suite(std::ostream& log) {
  const double ln4 = std::log(4.0);
  auto near = [](double a, double b) { return std::abs(a - b) <= 1e-9; };
  bool ok = true;
  // hinge discriminator
  ok = ok && near(hinge_d_loss({2, 3}, {-2, -5}), 0.0);
  ok = ok && near(hinge_d_loss({0}, {0}), 2.0);
  ok = ok && near(hinge_d_loss({0.5, -1}, {0.3}), 2.55);
  // hinge generator
  ok = ok && near(hinge_g_loss({0, 0}), 0.0);
  ok = ok && near(hinge_g_loss({3}), -3.0);
  ok = ok && near(hinge_g_loss({1, -2, 4}), -1.0);
  // rotation
  ok = ok && near(rotation_loss(Tensor<double>::zeros({4, 4}), {0, 1, 2, 3}), ln4);
  {
    Tensor<double> confident({1, 4});
    confident.data = {1e7, 0, 0, 0};
    ok = ok && rotation_loss(confident, {0}) <= 1e-9;
    Tensor<double> one({1, 4});
    one.data = {1, 0, 0, 0};
    ok = ok && near(rotation_loss(one, {0}), std::log(std::exp(1.0) + 3.0) - 1.0);
  }
  // joint pretraining loss
  ok = ok && near(s2l_loss(Tensor<double>::zeros({1, 4}), {0}, Tensor<double>::zeros({1, 10}), {0},
                           1.0),
                  ln4 + std::log(10.0));
  {
    Rng rng(103);
    auto logits = Tensor<double>::randn({4, 4}, rng);
    ok = ok && near(s2l_loss(logits, {0, 1, 2, 3}, Tensor<double>({0, 3}), {}, 0.0),
                    rotation_loss(logits, {0, 1, 2, 3}));
    Tensor<double> rot({4, 4}), cls({4, 3});
    for (int r = 0; r < 4; ++r) rot.data[static_cast<std::size_t>(r) * 4 + r] = 1e8;
    for (int r = 0; r < 4; ++r) cls.data[static_cast<std::size_t>(r) * 3 + 2] = 1e8;
    ok = ok && s2l_loss(rot, {0, 1, 2, 3}, cls, {2, 2, 2, 2}, 0.5) <= 1e-9;
  }
  // co-training loss
  ok = ok && near(cotrain_d_loss({0.0}, Tensor<double>::zeros({1, 4}), {0}, {}, {0.0}, 1.0),
                  2.0 + ln4);
  {
    std::vector<double> real{0.4, -0.2, 1.5}, fake{-0.7, 0.1};
    ok = ok && std::abs(cotrain_d_loss(real, Tensor<double>::zeros({3, 4}), {0, 1, 2}, {}, fake,
                                       0.0) -
                        hinge_d_loss(real, fake)) <= 1e-9;
    Tensor<double> perfect({2, 4});
    perfect.data = {60, 0, 0, 0, 0, 60, 0, 0};
    ok = ok && cotrain_d_loss({2.0, 3.0}, perfect, {0, 1}, {1.7}, {-2.0}, 0.2) <= 1e-9;
  }
  // self-supervision terms
  ok = ok && near(d_selfsup_term(Tensor<double>::zeros({4, 4}), {0, 1, 2, 3}, 0.5), 0.5 * ln4);
  ok = ok && near(d_selfsup_term(Tensor<double>::zeros({4, 4}), {0, 1, 2, 3}, 0.0), 0.0);
  ok = ok && near(g_selfsup_term(Tensor<double>::zeros({1, 4}), {2}, 0.2), 0.2 * ln4);
  if (!ok) {
    log << "example value mismatch";
    return false;
  }
  // finite-difference gradient checks
  Rng rng(104);
  auto real = Tensor<double>::randn({3}, rng);
  auto fake = Tensor<double>::randn({4}, rng);
  auto rot_logits = Tensor<double>::randn({4, 4}, rng);
  auto cls_logits = Tensor<double>::randn({2, 3}, rng);
  auto unl = Tensor<double>::randn({2}, rng);
  std::vector<int> rot_targets{1, 0, 3, 2}, labels{0, 2};
  double worst = 0.0;
  worst = std::max(worst,
                   testutil::check_gradients({real, fake},
                                             [](Graph<double>& g, const std::vector<testutil::DVal>& in) {
                                               return hinge_d_loss(g, in[0], in[1]);
                                             })
                       .max_rel_err);
  worst = std::max(worst,
                   testutil::check_gradients({fake},
                                             [](Graph<double>& g, const std::vector<testutil::DVal>& in) {
                                               return hinge_g_loss(g, in[0]);
                                             })
                       .max_rel_err);
  worst = std::max(
      worst, testutil::check_gradients(
                 {rot_logits},
                 [&](Graph<double>& g, const std::vector<testutil::DVal>& in) {
                   auto a = rotation_loss(g, in[0], rot_targets);
                   auto b = d_selfsup_term(g, in[0], rot_targets, 0.5);
                   auto c = g_selfsup_term(g, in[0], rot_targets, 0.2);
                   return g.add(a, g.add(b, c));
                 })
                 .max_rel_err);
  worst = std::max(worst, testutil::check_gradients(
                              {rot_logits, cls_logits},
                              [&](Graph<double>& g, const std::vector<testutil::DVal>& in) {
                                return s2l_loss(g, in[0], rot_targets, in[1], labels, 0.5);
                              })
                              .max_rel_err);
  worst = std::max(worst, testutil::check_gradients(
                              {real, cls_logits, unl, fake},
                              [&](Graph<double>& g, const std::vector<testutil::DVal>& in) {
                                return cotrain_d_loss(g, in[0], in[1], labels, in[2], true, in[3],
                                                      0.2);
                              })
                              .max_rel_err);
  log << "max gradient relative error " << worst;
  return worst <= 1e-3;
}

bool criterion5_spectral_norm(std::ostream& log) {
  Rng rng(105);
  double lo = 1.0, hi = 1.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 2 + static_cast<int>(rng.uniform_int(7));
    const int cols = 2 + static_cast<int>(rng.uniform_int(7));
    auto w = Tensor<double>::randn({rows, cols}, rng);
    SpectralNormState<double> st;
    st.num_iterations_per_step = 1;
    Tensor<double> out;
    for (int it = 0; it < 50; ++it) out = spectral_normalize(w, st);
    const double top = testutil::top_singular_value(out.data, rows, cols);
    lo = std::min(lo, top);
    hi = std::max(hi, top);
  }
  log << "normalized top singular values in [" << lo << ", " << hi << "]";
  return lo >= 0.99 && hi <= 1.01;
}

bool criterion6_cluster_assignment(std::ostream& log) {
  Rng rng(106);
  const int k = 7, d = 3;
  ClusterModel model;
  model.centroids = Tensor<double>::randn({k, d}, rng, 2.0);
  // duplicate one centroid so ties actually occur
  for (int j = 0; j < d; ++j) {
    model.centroids.data[static_cast<std::size_t>(5) * d + j] =
        model.centroids.data[static_cast<std::size_t>(2) * d + j];
  }
  model.counts.assign(k, 1);
  int agree = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    Tensor<double> p = Tensor<double>::randn({d}, rng, 2.5);
    // exhaustive scan with strictly-smaller updates (lowest index on ties)
    int best = 0;
    double bd = 1e300;
    for (int c = 0; c < k; ++c) {
      const double dist = squared_distance(
          p.data.data(), model.centroids.data.data() + static_cast<std::size_t>(c) * d, d);
      if (dist < bd) {
        bd = dist;
        best = c;
      }
    }
    agree += (assign_cluster(model, p) == best);
  }
  // the duplicated centroid pair must break ties toward index 2
  Tensor<double> exactly(Shape{d});
  for (int j = 0; j < d; ++j) exactly.data[j] = model.centroids.data[static_cast<std::size_t>(2) * d + j];
  const bool tie_ok = assign_cluster(model, exactly) == 2;
  log << agree << "/" << n << " agreements, tie-break " << (tie_ok ? "ok" : "wrong");
  return agree == n && tie_ok;
}

MethodConfig desk_method_config(Method m, bool ss = false) {
  MethodConfig cfg = make_method_config(m, 10.0, ss);
  cfg.opt.batch_size = 16;
  cfg.total_g_steps = 2000;
  cfg.eval_every = 500;
  cfg.n_fake = 512;
  cfg.n_sets = 5;
  cfg.validate();
  return cfg;
}

bool criterion7_determinism(std::ostream& log) {
  auto ds = desk_dataset();
  PretrainedArtifacts arts;
  arts.s2l_provider_path = desk_s2l_artifact(ds);
  MethodConfig cfg = desk_method_config(Method::S3GAN);
  cfg.opt.batch_size = 8;  // determinism is batch-size independent; keep it quick
  cfg.total_g_steps = 100;

  const std::string pa = cache_dir() + "/det_a.bin";
  const std::string pb = cache_dir() + "/det_b.bin";
  {
    GanTrainer a(cfg, ds, arts, 17);
    for (int i = 0; i < 100; ++i) a.train_step();
    a.save_checkpoint(pa);
  }
  {
    GanTrainer b(cfg, ds, arts, 17);
    for (int i = 0; i < 100; ++i) b.train_step();
    b.save_checkpoint(pb);
  }
  std::ifstream fa(pa, std::ios::binary), fb(pb, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  log << "checkpoints " << sa.size() << " bytes, " << (sa == sb ? "identical" : "DIFFER");
  fs::remove(pa);
  fs::remove(pb);
  return !sa.empty() && sa == sb;
}

bool criterion8_smoke(std::ostream& log, const std::string& method_name) {
  auto ds = desk_dataset();
  auto embedder = desk_embedder(ds);
  PretrainedArtifacts arts;
  auto [method, ss] = method_from_name(method_name);
  if (method_uses_pretrained_classifier(method)) arts.s2l_provider_path = desk_s2l_artifact(ds);
  if (method == Method::CLUSTERING) arts.cluster_provider_path = desk_cluster_artifact(ds);

  MethodConfig cfg = desk_method_config(method, ss);
  const std::string run_dir = cache_dir() + "/smoke_" + method_name;
  fs::remove_all(run_dir);

  const GaussianStats real_stats = compute_real_stats(*embedder, ds);
  const auto t0 = std::chrono::steady_clock::now();
  RunHooks hooks;
  hooks.on_eval = [&](std::int64_t step, const EvalResult& ev) {
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("      [%7.1fs] %s step %5lld: FID %.3f IS %.3f\n", dt, method_name.c_str(),
                static_cast<long long>(step), ev.fid_mean, ev.is_mean);
    std::fflush(stdout);
  };
  SeedResult result = run_single_seed(cfg, ds, arts, 1, run_dir, *embedder, real_stats, hooks);

  const auto records = read_metrics_records(run_dir + "/metrics.jsonl");
  double fid0 = -1.0, fid_final = -1.0;
  for (const auto& r : records) {
    if (r.step == 0) fid0 = r.fid_mean;
    if (r.step == cfg.total_g_steps) fid_final = r.fid_mean;
  }
  log << method_name << ": FID " << fid0 << " -> " << fid_final
      << (result.collapsed ? " [collapsed]" : "") << ", ratio "
      << (fid0 > 0 ? fid_final / fid0 : -1.0);
  return !result.collapsed && fid0 > 0.0 && fid_final >= 0.0 && fid_final <= 0.5 * fid0;
}

bool criterion9_classifier(std::ostream& log) {
  SyntheticSpec spec;
  spec.count = 1024;
  spec.num_classes = 4;
  spec.image_size = 32;
  spec.seed = 8;
  auto train = make_synthetic_dataset(spec);
  spec.count = 256;
  spec.seed = 99;
  auto heldout = make_synthetic_dataset(spec);
  auto sub = subsample_labels(train, 10.0, 4);

  FeatureExtractor<float> f(desk_extractor_spec(), 41);
  PretrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 64;
  cfg.num_unlabeled_per_batch = 48;
  cfg.gamma = 0.5;
  cfg.seed = 5;
  const PretrainResult r = train_feature_extractor(f, sub, cfg, &heldout);
  log << "held-out accuracy " << r.heldout_accuracy << " after " << r.steps << " steps";
  return r.heldout_accuracy > 0.9;
}

// Embedder wrapper counting the fake sets evaluated per evaluate_model call.
class SetCountingEmbedder : public Embedder {
 public:
  explicit SetCountingEmbedder(const Embedder& inner) : inner_(inner) {}
  std::string identifier() const override { return inner_.identifier(); }
  int dim() const override { return inner_.dim(); }
  int num_classes() const override { return inner_.num_classes(); }
  Tensor<double> embed(const Tensor<float>& images) const override {
    ++embed_batches;
    embedded_images += images.dim(0);
    return inner_.embed(images);
  }
  Tensor<double> class_probs(const Tensor<float>& images) const override {
    return inner_.class_probs(images);
  }
  mutable std::int64_t embed_batches = 0;
  mutable std::int64_t embedded_images = 0;

 private:
  const Embedder& inner_;
};

bool criterion10_protocol(std::ostream& log) {
  SyntheticSpec spec;
  spec.count = 256;
  spec.num_classes = 4;
  spec.image_size = 32;
  spec.seed = 12;
  auto ds = make_synthetic_dataset(spec);
  auto embedder = desk_embedder(desk_dataset());

  // counter audit: exactly n_sets = 5 fake sets per evaluation
  SetCountingEmbedder counter(*embedder);
  Generator<float> gen(desk_scale_generator_spec(4));
  auto provider = make_ground_truth_provider(4);
  const GaussianStats real_stats = compute_real_stats(counter, ds);
  counter.embedded_images = 0;
  const int n_fake = 128;
  EvalResult ev = evaluate_model(gen, provider, real_stats, counter, n_fake, 5, 3);
  if (ev.n_sets != 5 || static_cast<int>(ev.fid_per_set.size()) != 5 ||
      counter.embedded_images != 5 * n_fake) {
    log << "set counter audit failed: embedded " << counter.embedded_images << " images";
    return false;
  }

  // median grid equals the hand-computed medians of the per-seed logs
  MethodConfig cfg = desk_method_config(Method::RANDOM_LABEL);
  cfg.opt.batch_size = 8;
  cfg.total_g_steps = 4;
  cfg.eval_every = 2;
  cfg.n_fake = 96;
  cfg.n_sets = 5;
  const std::string out_dir = cache_dir() + "/protocol_runs";
  fs::remove_all(out_dir);
  ExperimentReport report = run_experiment(cfg, ds, {}, {1, 2, 3}, out_dir, *embedder);

  std::vector<double> fids, iss;
  for (const auto& s : report.seeds) {
    const auto records = read_metrics_records(s.metrics_path);
    if (records.empty() || records.back().step != cfg.total_g_steps) {
      log << "per-seed log incomplete";
      return false;
    }
    fids.push_back(records.back().fid_mean);
    iss.push_back(records.back().is_mean);
  }
  auto hand_median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[1];
  };
  const double mf = hand_median(fids), mi = hand_median(iss);
  // the emitted grid cell must equal the hand-computed median exactly
  const auto finals = collect_finals(out_dir);
  const std::string table = render_median_table(finals, true);
  std::ostringstream cell;
  cell << std::fixed << std::setprecision(1) << mf;
  const bool cell_ok = table.find(cell.str()) != std::string::npos;
  log << "median FID " << report.median_fid << " (hand " << mf << "), median IS "
      << report.median_is << " (hand " << mi << "), grid cell "
      << (cell_ok ? "matches" : "MISSING");
  fs::remove_all(out_dir);
  return report.median_fid == mf && report.median_is == mi && cell_ok;
}

struct CriterionSpec {
  int id;
  const char* name;
  std::function<bool(std::ostream&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  const int which = argc > 1 ? std::atoi(argv[1]) : 0;
  const std::string method = argc > 2 ? argv[2] : "";

  std::vector<CriterionSpec> criteria = {
      {1, "parameter-count audit (full-scale generator & discriminator)", criterion1_parameter_counts},
      {2, "FID oracle suite (closed forms, self-distance, symmetry)", criterion2_fid_oracles},
      {3, "IS oracle suite (degenerate cases, direct KL)", criterion3_is_oracles},
      {4, "loss unit suite (examples exact, gradients vs finite differences)", criterion4_loss_suite},
      {5, "spectral norm: top singular value in [0.99, 1.01] after 50 iterations", criterion5_spectral_norm},
      {6, "cluster assignment matches brute force on 10^4 points", criterion6_cluster_assignment},
      {7, "determinism: bit-identical checkpoints at step 100", criterion7_determinism},
      {9, "semi-supervised classifier: >90% held-out accuracy at 10% labels", criterion9_classifier},
      {10, "protocol fidelity: median grid and n_sets=5 audit", criterion10_protocol},
  };

  const std::vector<std::string> smoke_methods = {"SINGLE_LABEL", "CLUSTERING", "S2GAN",
                                                  "S2GAN_CO", "S3GAN"};

  int failures = 0;
  auto report = [&failures](int id, const std::string& name, bool ok, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s%s%s\n", ok ? "PASS" : "FAIL", id, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  };

  for (const auto& c : criteria) {
    if (which != 0 && which != c.id) continue;
    std::ostringstream detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail << "exception: " << e.what();
    }
    report(c.id, c.name, ok, detail.str());
  }

  if (which == 0 || which == 8) {
    for (const auto& m : smoke_methods) {
      if (!method.empty() && method != m) continue;
      std::ostringstream detail;
      bool ok = false;
      try {
        ok = criterion8_smoke(detail, m);
      } catch (const std::exception& e) {
        detail << "exception: " << e.what();
      }
      report(8, "end-to-end smoke, 2000 generator steps, FID at least halved", ok, detail.str());
    }
  }
  return failures;
}
