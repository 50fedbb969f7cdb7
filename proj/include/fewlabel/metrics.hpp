#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewlabel/features.hpp"
#include "fewlabel/models.hpp"
#include "fewlabel/providers.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

// ---------------------------------------------------------------------------
// Gaussian statistics with compensated accumulation.
// ---------------------------------------------------------------------------

struct GaussianStats {
  Tensor<double> mu;     // [d]
  Tensor<double> sigma;  // [d, d], symmetric
  std::int64_t n = 0;

  int dim() const { return mu.rank() == 1 ? mu.dim(0) : 0; }

  void validate() const {
    if (n < 2) throw ArgumentError("gaussian stats: need n >= 2");
    for (int i = 0; i < dim(); ++i) {
      for (int j = i + 1; j < dim(); ++j) {
        if (std::abs(sigma.data[static_cast<std::size_t>(i) * dim() + j] -
                     sigma.data[static_cast<std::size_t>(j) * dim() + i]) > 1e-8) {
          throw ArgumentError("gaussian stats: sigma not symmetric");
        }
      }
    }
  }
};

namespace detail {
// Kahan-compensated accumulator.
struct KahanSum {
  double sum = 0.0, c = 0.0;
  void add(double x) {
    const double y = x - c;
    const double t = sum + y;
    c = (t - sum) - y;
    sum = t;
  }
};
}  // namespace detail

// Empirical mean and (n-1)-normalized covariance of rows, order-independent
// within accumulation tolerance (compensated summation).
inline GaussianStats fit_gaussian(const Tensor<double>& features) {
  if (features.rank() != 2) throw ArgumentError("fit_gaussian: features must be [n, d]");
  const int n = features.dim(0), d = features.dim(1);
  if (n < 2) throw ArgumentError("fit_gaussian: need at least 2 samples");
  GaussianStats out;
  out.n = n;
  out.mu = Tensor<double>(Shape{d});
  std::vector<detail::KahanSum> mean_acc(static_cast<std::size_t>(d));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) mean_acc[j].add(features.data[static_cast<std::size_t>(i) * d + j]);
  }
  for (int j = 0; j < d; ++j) out.mu.data[j] = mean_acc[j].sum / n;

  out.sigma = Tensor<double>(Shape{d, d});
  std::vector<detail::KahanSum> cov_acc(static_cast<std::size_t>(d) * d);
  std::vector<double> centered(static_cast<std::size_t>(d));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      centered[j] = features.data[static_cast<std::size_t>(i) * d + j] - out.mu.data[j];
    }
    for (int a = 0; a < d; ++a) {
      for (int b = a; b < d; ++b) {
        cov_acc[static_cast<std::size_t>(a) * d + b].add(centered[a] * centered[b]);
      }
    }
  }
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      const double v = cov_acc[static_cast<std::size_t>(a) * d + b].sum / (n - 1);
      out.sigma.data[static_cast<std::size_t>(a) * d + b] = v;
      out.sigma.data[static_cast<std::size_t>(b) * d + a] = v;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PSD matrix square root
// ---------------------------------------------------------------------------

// S with S*S ~= A for symmetric PSD A: symmetrized, eigenvalues in
// [-1e-8, 0) clamped to zero, anything below -1e-6 rejected.
inline Tensor<double> matrix_sqrt_psd(const Tensor<double>& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ArgumentError("matrix_sqrt_psd: matrix must be square");
  }
  const int d = a.dim(0);
  double max_asym = 0.0;
  for (int i = 0; i < d; ++i) {
    for (int j = i + 1; j < d; ++j) {
      max_asym = std::max(max_asym, std::abs(a.data[static_cast<std::size_t>(i) * d + j] -
                                             a.data[static_cast<std::size_t>(j) * d + i]));
    }
  }
  if (max_asym > 1e-6) throw ArgumentError("matrix_sqrt_psd: matrix not symmetric within 1e-6");

  Eigen::MatrixXd sym(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      sym(i, j) = 0.5 * (a.data[static_cast<std::size_t>(i) * d + j] +
                         a.data[static_cast<std::size_t>(j) * d + i]);
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
  if (eig.info() != Eigen::Success) throw std::runtime_error("matrix_sqrt_psd: eigensolver failed");
  Eigen::VectorXd w = eig.eigenvalues();
  for (int i = 0; i < d; ++i) {
    if (w(i) < -1e-6) throw ArgumentError("matrix_sqrt_psd: matrix is not PSD");
    w(i) = w(i) > 0.0 ? std::sqrt(w(i)) : 0.0;
  }
  const Eigen::MatrixXd s = eig.eigenvectors() * w.asDiagonal() * eig.eigenvectors().transpose();
  Tensor<double> out(Shape{d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) out.data[static_cast<std::size_t>(i) * d + j] = s(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// FID and Inception Score
// ---------------------------------------------------------------------------

// ||mu_x - mu_g||^2 + Tr(S_x + S_g - 2 (S_x S_g)^{1/2}), with the cross term
// evaluated as Tr sqrt(S_x^{1/2} S_g S_x^{1/2}) (equal trace, symmetric
// argument). Clamped to be nonnegative.
inline double fid(const GaussianStats& real, const GaussianStats& fake) {
  if (real.dim() != fake.dim()) throw ArgumentError("fid: dimension mismatch");
  const int d = real.dim();
  double mean_term = 0.0;
  for (int i = 0; i < d; ++i) {
    const double diff = real.mu.data[i] - fake.mu.data[i];
    mean_term += diff * diff;
  }
  const Tensor<double> root_real = matrix_sqrt_psd(real.sigma);
  // M = S_x^{1/2} S_g S_x^{1/2}
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> R(
      root_real.data.data(), d, d);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Sg(
      fake.sigma.data.data(), d, d);
  Eigen::MatrixXd m = R * Sg * R;
  Tensor<double> mt(Shape{d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) mt.data[static_cast<std::size_t>(i) * d + j] = 0.5 * (m(i, j) + m(j, i));
  const Tensor<double> cross = matrix_sqrt_psd(mt);
  double trace_term = 0.0;
  for (int i = 0; i < d; ++i) {
    trace_term += real.sigma.data[static_cast<std::size_t>(i) * d + i] +
                  fake.sigma.data[static_cast<std::size_t>(i) * d + i] -
                  2.0 * cross.data[static_cast<std::size_t>(i) * d + i];
  }
  const double result = mean_term + trace_term;
  return result > 0.0 ? result : 0.0;
}

// exp of the mean KL divergence from each row to the column-mean marginal.
inline double inception_score(const Tensor<double>& pred_probs) {
  if (pred_probs.rank() != 2) throw ArgumentError("inception_score: probs must be [N, K]");
  const int n = pred_probs.dim(0), k = pred_probs.dim(1);
  if (n < 1) throw ArgumentError("inception_score: need at least one row");
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      const double p = pred_probs.data[static_cast<std::size_t>(i) * k + j];
      if (p < -1e-12) throw ArgumentError("inception_score: negative probability");
      sum += p;
    }
    if (sum <= 0.0) throw ArgumentError("inception_score: row with zero sum");
    if (std::abs(sum - 1.0) > 1e-5) {
      throw ArgumentError("inception_score: row does not sum to 1 within 1e-5");
    }
  }
  std::vector<double> marginal(static_cast<std::size_t>(k), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) marginal[j] += pred_probs.data[static_cast<std::size_t>(i) * k + j];
  }
  for (auto& m : marginal) m /= n;
  detail::KahanSum kl_sum;
  for (int i = 0; i < n; ++i) {
    double kl = 0.0;
    for (int j = 0; j < k; ++j) {
      const double p = pred_probs.data[static_cast<std::size_t>(i) * k + j];
      if (p > 0.0) kl += p * std::log(p / marginal[j]);
    }
    kl_sum.add(kl);
  }
  double score = std::exp(kl_sum.sum / n);
  score = std::max(1.0, std::min(static_cast<double>(k), score));
  return score;
}

// ---------------------------------------------------------------------------
// Embedder
// ---------------------------------------------------------------------------

// A frozen map from images to feature vectors plus a class-posterior head;
// the identifier names the embedding so scores are only compared within it.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::string identifier() const = 0;
  virtual int dim() const = 0;
  virtual int num_classes() const = 0;
  virtual Tensor<double> embed(const Tensor<float>& images) const = 0;        // [N, d]
  virtual Tensor<double> class_probs(const Tensor<float>& images) const = 0;  // [N, K]
};

// Desk-scale embedder: the penultimate features of a small classifier
// trained once on the fully labeled desk dataset; its softmax is the IS
// classifier.
class DeskEmbedder : public Embedder {
 public:
  explicit DeskEmbedder(std::shared_ptr<FeatureExtractor<float>> net) : net_(std::move(net)) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : net_->params().all()) {
      h = fnv1a(p->value.data.data(), p->value.data.size() * sizeof(float), h);
    }
    std::ostringstream id;
    id << "deskcnn-d" << net_->spec().feature_dim() << "-" << std::hex << h;
    identifier_ = id.str();
  }

  std::string identifier() const override { return identifier_; }
  int dim() const override { return net_->spec().feature_dim(); }
  int num_classes() const override { return net_->spec().num_classes; }

  Tensor<double> embed(const Tensor<float>& images) const override {
    return net_->features(images).cast<double>();
  }

  Tensor<double> class_probs(const Tensor<float>& images) const override {
    Graph<float> g;
    auto probs = g.softmax_rows(g.constant(net_->class_logits(images)));
    return g.value(probs).cast<double>();
  }

 private:
  std::shared_ptr<FeatureExtractor<float>> net_;
  std::string identifier_;
};

// Trains the desk embedder on the (fully labeled) dataset; deterministic in
// the seed.
inline std::shared_ptr<DeskEmbedder> train_desk_embedder(const LabeledDataset& dataset,
                                                         std::uint64_t seed, int epochs = 10) {
  FeatureExtractorSpec spec;
  spec.image_size = dataset.height();
  spec.image_channels = dataset.channels();
  spec.num_classes = dataset.num_classes;
  auto net = std::make_shared<FeatureExtractor<float>>(spec, hash_combine(seed, 0xe3bedull));
  train_classifier(*net, dataset, epochs, 64, hash_combine(seed, 0x7a11ull));
  return std::make_shared<DeskEmbedder>(net);
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

struct EvalResult {
  double fid_mean = 0.0;
  double is_mean = 0.0;
  std::vector<double> fid_per_set;
  std::vector<double> is_per_set;
  int n_fake = 0;
  int n_sets = 0;
  std::string embedder_id;
};

// Embeds a batch of images in chunks to bound peak memory.
inline Tensor<double> embed_in_chunks(const Embedder& embedder, const Tensor<float>& images,
                                      int chunk = 128) {
  const int n = images.dim(0);
  Tensor<double> out(Shape{n, embedder.dim()});
  for (int start = 0; start < n; start += chunk) {
    const int m = std::min(chunk, n - start);
    Tensor<float> part(Shape{m, images.dim(1), images.dim(2), images.dim(3)});
    const std::int64_t stride = images.numel() / n;
    std::copy(images.data.begin() + start * stride, images.data.begin() + (start + m) * stride,
              part.data.begin());
    const Tensor<double> feats = embedder.embed(part);
    std::copy(feats.data.begin(), feats.data.end(),
              out.data.begin() + static_cast<std::int64_t>(start) * embedder.dim());
  }
  return out;
}

inline GaussianStats compute_real_stats(const Embedder& embedder, const LabeledDataset& real_set) {
  return fit_gaussian(embed_in_chunks(embedder, real_set.images));
}

// Draws n_sets independent sets of n_fake generated images, computes FID
// against the cached real statistics and IS from the embedder's class
// posteriors per set, and reports the means. A rank-deficient fake set
// (n_fake <= d) gets a 1e-6 ridge on both covariances, with a warning.
inline EvalResult evaluate_model(Generator<float>& generator, const LabelProvider& provider,
                                 const GaussianStats& real_stats, const Embedder& embedder,
                                 int n_fake, int n_sets, std::uint64_t seed) {
  if (n_fake < 2 || n_sets < 1) throw ArgumentError("evaluate_model: need n_fake >= 2, n_sets >= 1");
  const bool ridge = n_fake < embedder.dim() + 1;
  if (ridge) {
    emit_warning("evaluate_model: n_fake <= embedding dim, covariance rank-deficient; "
                 "adding 1e-6 ridge");
  }
  EvalResult result;
  result.n_fake = n_fake;
  result.n_sets = n_sets;
  result.embedder_id = embedder.identifier();

  GaussianStats real = real_stats;
  if (ridge) {
    for (int i = 0; i < real.dim(); ++i) real.sigma.data[static_cast<std::size_t>(i) * real.dim() + i] += 1e-6;
  }

  const int latent = generator.spec().latent_dim;
  const int chunk = 64;
  for (int set = 0; set < n_sets; ++set) {
    Tensor<float> images(Shape{n_fake, generator.spec().image_size, generator.spec().image_size, 3});
    Rng rng = Rng::derive(seed, 0xe5a1ull, static_cast<std::uint64_t>(set));
    for (int start = 0; start < n_fake; start += chunk) {
      const int m = std::min(chunk, n_fake - start);
      Tensor<float> z = Tensor<float>::randn({m, latent}, rng);
      const LabelBatch<float> y = sample_fake_labels(provider, m, rng);
      const Tensor<float> out = generator.generate(z, y);
      std::copy(out.data.begin(), out.data.end(),
                images.data.begin() + static_cast<std::int64_t>(start) * out.numel() / m);
    }
    GaussianStats fake = fit_gaussian(embed_in_chunks(embedder, images));
    if (ridge) {
      for (int i = 0; i < fake.dim(); ++i) fake.sigma.data[static_cast<std::size_t>(i) * fake.dim() + i] += 1e-6;
    }
    result.fid_per_set.push_back(fid(real, fake));
    result.is_per_set.push_back(inception_score(embedder.class_probs(images)));
  }
  for (double v : result.fid_per_set) result.fid_mean += v / n_sets;
  for (double v : result.is_per_set) result.is_mean += v / n_sets;
  return result;
}

// ---------------------------------------------------------------------------
// Metrics report records (line-delimited JSON)
// ---------------------------------------------------------------------------

struct MetricsRecord {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string method;
  double fid_mean = 0.0;
  double is_mean = 0.0;
  std::string embedder_id;
  int n_fake = 0;
  int n_sets = 0;
  // extensions beyond the base schema
  double k_percent = 100.0;
  bool collapsed = false;
};

inline void append_metrics_record(const std::string& path, const MetricsRecord& r) {
  nlohmann::json j{{"step", r.step},           {"seed", r.seed},
                   {"method", r.method},       {"fid_mean", r.fid_mean},
                   {"is_mean", r.is_mean},     {"embedder_id", r.embedder_id},
                   {"n_fake", r.n_fake},       {"n_sets", r.n_sets},
                   {"k_percent", r.k_percent}};
  if (r.collapsed) j["collapsed"] = true;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path);
  out << j.dump() << "\n";
}

inline std::vector<MetricsRecord> read_metrics_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.step = j.at("step").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.method = j.at("method").get<std::string>();
    r.fid_mean = j.at("fid_mean").get<double>();
    r.is_mean = j.at("is_mean").get<double>();
    r.embedder_id = j.at("embedder_id").get<std::string>();
    r.n_fake = j.at("n_fake").get<int>();
    r.n_sets = j.at("n_sets").get<int>();
    r.k_percent = j.value("k_percent", 100.0);
    r.collapsed = j.value("collapsed", false);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fewlabel
