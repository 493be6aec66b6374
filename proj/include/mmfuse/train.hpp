#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "mmfuse/data.hpp"
#include "mmfuse/model.hpp"

namespace mmfuse {

// Mean over the batch of -log softmax(logits)[label]. logits is [K] with one
// label or [B x K] with B labels.
template <Real T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels);

template <Real T>
std::vector<T> softmax(const std::vector<T>& logits);

// Adam with bias correction. Parameters without a gradient are treated as
// having a zero gradient.
template <Real T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void step();
  void zero_grad();
  double lr = 0;
  std::size_t steps() const { return t_; }

  // Explicit-gradient form; grads[k] must match params[k].
  void step(const std::vector<std::vector<T>>& grads);

 private:
  std::vector<Tensor<T>> params_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Linear warm-up over the first epochs, then reduce-on-plateau on a
// higher-is-better validation metric.
class LrSchedule {
 public:
  LrSchedule(double base_lr, std::size_t patience, std::size_t warmup_epochs = 5,
             double factor = 0.2, double min_lr_ratio = 1e-4);

  // Learning rate for 1-based `epoch`.
  double lr(std::size_t epoch) const;
  // Report the validation metric at the end of `epoch`. Returns true if the
  // rate was decayed.
  bool observe(std::size_t epoch, double metric);

  double base_lr() const { return base_; }
  double current() const { return current_; }
  std::size_t epochs_since_improve() const { return since_; }

 private:
  double base_, factor_, min_lr_;
  std::size_t patience_, warmup_;
  double current_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t since_ = 0;
};

enum class MetricKind { auc, oa };
std::string_view metric_name(MetricKind k);
MetricKind parse_metric(std::string_view name);

// Area under the ROC curve by the trapezoidal rule, class 1 positive.
double auc(const std::vector<double>& scores, const std::vector<std::size_t>& labels);
double overall_accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels);
// Index of the largest value; the lowest index wins ties.
template <Real T>
std::size_t argmax(const std::vector<T>& v);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Per-class seeded shuffle, then round-robin over folds with the counter
// carried from one class to the next.
std::vector<Fold> stratified_kfold(const std::vector<std::size_t>& labels, std::size_t k,
                                   std::uint64_t seed);

struct TrainConfig {
  double lr = 3e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::size_t patience = 3;
  std::size_t warmup_epochs = 5;
  double plateau_factor = 0.2;
  std::string metric = "auto";  // auto | auc | oa
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  MetricKind resolve_metric(std::size_t num_classes) const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_metric = 0;
  double lr = 0;
};

struct Evaluation {
  std::vector<std::vector<double>> probs;  // per sample, softmax
  std::vector<std::size_t> labels;
  double metric = 0;
};

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_metric = 0;
  Evaluation best_eval;
};

// EHR-standardized view of some samples; volumes are shared, not copied.
Dataset prepare_split(const Dataset& data, const std::vector<std::size_t>& indices,
                      const EhrScaler& scaler);

Evaluation evaluate(Model<float>& model, const Dataset& data, MetricKind metric,
                    std::size_t batch_size);

// Trains on `train`, evaluates on `val` after every epoch and leaves the
// model holding the parameters of the best validation epoch.
FitResult fit(Model<float>& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg);

std::string history_csv(const std::vector<EpochRecord>& history);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::size_t> val_indices;
  std::vector<double> scores;  // class-1 probability per validation sample
  std::vector<std::size_t> labels;
  double metric = 0;
  std::size_t best_epoch = 0;
};

struct CvResult {
  MetricKind metric = MetricKind::auc;
  std::vector<FoldResult> folds;
  double mean = 0;
  double stdev = 0;  // population standard deviation over folds
};

void summarize(CvResult& r);

// One model per fold, trained concurrently on up to `jobs` threads. The split
// depends on train.seed; model init and batch order on the seeds mixed with
// the fold index. Strategies therefore share splits, and results do not
// depend on the job count.
CvResult run_cv(const Dataset& data, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                std::size_t k, std::size_t jobs);

}  // namespace mmfuse
