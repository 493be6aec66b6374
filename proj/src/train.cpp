#include "mmfuse/train.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include "mmfuse/error.hpp"
#include "mmfuse/log.hpp"

namespace mmfuse {

template <Real T>
std::vector<T> softmax(const std::vector<T>& logits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - mx);
  for (auto& v : p) v /= total;
  return p;
}

template <Real T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.ndim() != 1 && logits.ndim() != 2)
    throw ShapeError("cross_entropy: logits must be [K] or [B x K], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.ndim() == 2 ? logits.dim(0) : 1;
  const std::size_t k = logits.shape().back();
  if (labels.size() != batch)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for a batch of " +
                     std::to_string(batch));
  for (auto y : labels)
    if (y >= k)
      throw ValueError("cross_entropy: label " + std::to_string(y) + " out of range for " +
                       std::to_string(k) + " classes");
  const auto& x = logits.values();
  std::vector<T> probs(x.size());
  T loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = x.data() + b * k;
    const T mx = *std::max_element(row, row + k);
    T total = 0;
    for (std::size_t j = 0; j < k; ++j) total += probs[b * k + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) probs[b * k + j] /= total;
    loss += std::log(total) - (row[labels[b]] - mx);
  }
  loss /= static_cast<T>(batch);
  return make_result<T>({1}, {loss}, "cross_entropy", {logits},
                        [probs = std::move(probs), labels, batch, k](Node<T>& n) {
                          auto g = n.parents[0]->ensure_grad();
                          const T scale = n.grad[0] / static_cast<T>(batch);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t j = 0; j < k; ++j)
                              g[b * k + j] += scale * (probs[b * k + j] - (j == labels[b] ? T(1) : T(0)));
                        });
}

// ---------------------------------------------------------------------------

template <Real T>
Adam<T>::Adam(std::vector<Tensor<T>> params, double lr_, double beta1, double beta2, double eps)
    : lr(lr_), params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

template <Real T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <Real T>
void Adam<T>::step(const std::vector<std::vector<T>>& grads) {
  if (grads.size() != params_.size())
    throw ShapeError("adam: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params_.size()) + " parameters");
  for (std::size_t k = 0; k < grads.size(); ++k)
    if (!grads[k].empty() && grads[k].size() != params_[k].size())
      throw ShapeError("adam: gradient " + std::to_string(k) + " has " +
                       std::to_string(grads[k].size()) + " entries, parameter has " +
                       std::to_string(params_[k].size()));
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto data = params_[k].data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grads[k].empty() ? 0.0 : static_cast<double>(grads[k][i]);
      m[i] = beta1_ * m[i] + (1 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1 - beta2_) * g * g;
      const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      data[i] = static_cast<T>(data[i] - update);
    }
  }
}

template <Real T>
void Adam<T>::step() {
  std::vector<std::vector<T>> grads(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k)
    if (params_[k].has_grad()) grads[k].assign(params_[k].grad().begin(), params_[k].grad().end());
  step(grads);
}

// ---------------------------------------------------------------------------

namespace {

// base * num / den computed on the shortest decimal form of base, so that
// 3e-4 * 1/5 comes out as the double nearest 6e-5 and not as
// 5.9999999999999995e-05.
double decimal_scale(double base, std::uint64_t num, std::uint64_t den) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, base, std::chars_format::scientific);
  const std::string s(buf, res.ptr);
  const auto epos = s.find('e');
  std::string digits;
  for (char c : s.substr(0, epos))
    if (c != '.') digits += c;
  const long exp10 = std::strtol(s.c_str() + epos + 1, nullptr, 10) - static_cast<long>(digits.size() - 1);
  unsigned __int128 n = std::strtoull(digits.c_str(), nullptr, 10);
  n *= num;
  unsigned __int128 q = n / den, r = n % den;
  std::string whole;
  do {
    whole.insert(whole.begin(), static_cast<char>('0' + static_cast<int>(q % 10)));
    q /= 10;
  } while (q != 0);
  std::string text = whole + ".";
  for (int i = 0; i < 30; ++i) {
    r *= 10;
    text += static_cast<char>('0' + static_cast<int>(r / den));
    r %= den;
  }
  text += "e" + std::to_string(exp10);
  return std::strtod(text.c_str(), nullptr);
}

}  // namespace

LrSchedule::LrSchedule(double base_lr, std::size_t patience, std::size_t warmup_epochs,
                       double factor, double min_lr_ratio)
    : base_(base_lr),
      factor_(factor),
      min_lr_(base_lr * min_lr_ratio),
      patience_(patience),
      warmup_(warmup_epochs),
      current_(base_lr) {
  if (!(base_lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(factor > 0 && factor < 1)) throw ConfigError("plateau factor must lie in (0,1)");
  if (patience == 0) throw ConfigError("plateau patience must be at least 1");
}

double LrSchedule::lr(std::size_t epoch) const {
  if (epoch >= 1 && epoch <= warmup_)
    return decimal_scale(base_, epoch, warmup_);
  return current_;
}

bool LrSchedule::observe(std::size_t epoch, double metric) {
  if (epoch <= warmup_) return false;
  if (metric > best_) {
    best_ = metric;
    since_ = 0;
    return false;
  }
  if (++since_ < patience_) return false;
  current_ = std::max(min_lr_, current_ * factor_);
  since_ = 0;
  return true;
}

// ---------------------------------------------------------------------------

std::string_view metric_name(MetricKind k) { return k == MetricKind::auc ? "auc" : "oa"; }

MetricKind parse_metric(std::string_view name) {
  if (name == "auc") return MetricKind::auc;
  if (name == "oa") return MetricKind::oa;
  throw ConfigError("unknown metric '" + std::string(name) + "' (expected auc or oa)");
}

double auc(const std::vector<double>& scores, const std::vector<std::size_t>& labels) {
  if (scores.size() != labels.size())
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(labels.size()) + " labels");
  std::size_t pos = 0, neg = 0;
  for (auto y : labels) {
    if (y > 1) throw ValueError("auc: labels must be 0 or 1");
    (y == 1 ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw ValueError("auc: both classes must be present");
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  // Walk thresholds from high to low; tied scores move the ROC point
  // diagonally in one step.
  double area = 0, tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    double dtp = 0, dfp = 0;
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? dtp : dfp) += 1;
      ++j;
    }
    area += dfp * (tp + tp + dtp) / 2;
    tp += dtp;
    fp += dfp;
    i = j;
  }
  return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

double overall_accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
  if (preds.size() != labels.size())
    throw ShapeError("overall_accuracy: " + std::to_string(preds.size()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  if (preds.empty()) throw ValueError("overall_accuracy: no samples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

template <Real T>
std::size_t argmax(const std::vector<T>& v) {
  if (v.empty()) throw ValueError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::vector<Fold> stratified_kfold(const std::vector<std::size_t>& labels, std::size_t k,
                                   std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be at least 2");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [label, members] : by_class)
    if (members.size() < k)
      throw ValueError("stratified_kfold: class " + std::to_string(label) + " has " +
                       std::to_string(members.size()) + " samples, fewer than k = " +
                       std::to_string(k));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> fold_of(labels.size());
  std::size_t counter = 0;
  for (auto& [label, members] : by_class) {
    shuffle_indices(members, rng);
    for (auto i : members) fold_of[i] = counter++ % k;
  }
  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t f = 0; f < k; ++f) (f == fold_of[i] ? folds[f].val : folds[f].train).push_back(i);
  return folds;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("train: lr must be a finite number >= 0");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (patience == 0) throw ConfigError("train: patience must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1))
    throw ConfigError("train: plateau_factor must lie in (0,1)");
  if (metric != "auto") parse_metric(metric);
}

MetricKind TrainConfig::resolve_metric(std::size_t num_classes) const {
  if (metric == "auto") return num_classes == 2 ? MetricKind::auc : MetricKind::oa;
  const auto k = parse_metric(metric);
  if (k == MetricKind::auc && num_classes != 2)
    throw ConfigError("train: AUC needs a binary task, model has " + std::to_string(num_classes) +
                      " classes");
  return k;
}

Dataset prepare_split(const Dataset& data, const std::vector<std::size_t>& indices,
                      const EhrScaler& scaler) {
  Dataset out;
  out.reserve(indices.size());
  for (auto i : indices) {
    Sample s = data[i];
    s.ehr = scaler.apply(s.ehr);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

struct Batch {
  Tensor<float> image, ehr;
  std::vector<std::size_t> labels;
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t begin,
                 std::size_t end, bool with_image) {
  Batch b;
  const std::size_t n = end - begin, m = data[order[begin]].ehr.size();
  std::vector<float> ehr;
  ehr.reserve(n * m);
  std::vector<float> image;
  Shape shape = data[order[begin]].volume.shape();
  if (with_image) image.reserve(n * data[order[begin]].volume.size());
  for (std::size_t i = begin; i < end; ++i) {
    const auto& s = data[order[i]];
    if (s.ehr.size() != m) throw ShapeError("batch: inconsistent EHR lengths");
    ehr.insert(ehr.end(), s.ehr.begin(), s.ehr.end());
    if (with_image) {
      if (s.volume.shape() != shape)
        throw ShapeError("batch: volume " + s.id + " has shape " + shape_str(s.volume.shape()) +
                         ", expected " + shape_str(shape));
      image.insert(image.end(), s.volume.values().begin(), s.volume.values().end());
    }
    b.labels.push_back(s.label);
  }
  b.ehr = Tensor<float>::from({n, m}, std::move(ehr));
  if (with_image) {
    shape.insert(shape.begin(), n);
    b.image = Tensor<float>::from(std::move(shape), std::move(image));
  } else {
    b.image = Tensor<float>::zeros({1});
  }
  return b;
}

std::vector<std::vector<float>> snapshot(const StateList<float>& state) {
  std::vector<std::vector<float>> out;
  for (const auto& t : state) out.push_back(t.tensor.values());
  return out;
}

void restore(const StateList<float>& state, const std::vector<std::vector<float>>& saved) {
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto data = state[i].tensor.node()->data.data();
    std::copy(saved[i].begin(), saved[i].end(), data);
  }
}

}  // namespace

Evaluation evaluate(Model<float>& model, const Dataset& data, MetricKind metric,
                    std::size_t batch_size) {
  if (data.empty()) throw ValueError("evaluate: empty dataset");
  NoGradGuard no_grad;
  const Mode before = model.mode();
  model.set_mode(Mode::eval);
  const bool with_image = model.config().fusion != Fusion::ehr_only;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Evaluation ev;
  const std::size_t k = model.config().num_classes;
  for (std::size_t at = 0; at < data.size(); at += batch_size) {
    const std::size_t end = std::min(data.size(), at + batch_size);
    auto b = make_batch(data, order, at, end, with_image);
    auto logits = model.forward_batch(b.image, b.ehr).logits.values();
    for (std::size_t i = 0; i < end - at; ++i) {
      std::vector<float> row(logits.begin() + i * k, logits.begin() + (i + 1) * k);
      auto p = softmax(row);
      ev.probs.emplace_back(p.begin(), p.end());
    }
    ev.labels.insert(ev.labels.end(), b.labels.begin(), b.labels.end());
  }
  model.set_mode(before);
  if (metric == MetricKind::auc) {
    std::vector<double> scores;
    for (auto& p : ev.probs) scores.push_back(p[1]);
    ev.metric = auc(scores, ev.labels);
  } else {
    std::vector<std::size_t> preds;
    for (auto& p : ev.probs) preds.push_back(argmax(p));
    ev.metric = overall_accuracy(preds, ev.labels);
  }
  return ev;
}

FitResult fit(Model<float>& model, const Dataset& train, const Dataset& val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ValueError("fit: empty training set");
  if (val.empty()) throw ValueError("fit: empty validation set");
  const MetricKind metric = cfg.resolve_metric(model.config().num_classes);
  const bool with_image = model.config().fusion != Fusion::ehr_only;
  const auto state = model.state();
  Adam<float> opt(model.parameters(), cfg.lr);
  std::unique_ptr<LrSchedule> sched;
  if (cfg.lr > 0)
    sched = std::make_unique<LrSchedule>(cfg.lr, cfg.patience, cfg.warmup_epochs, cfg.plateau_factor);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  FitResult result;
  std::vector<std::vector<float>> best;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.set_mode(Mode::train);
    opt.lr = sched ? sched->lr(epoch) : 0.0;
    shuffle_indices(order, rng);
    double total = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), at + cfg.batch_size);
      auto b = make_batch(train, order, at, end, with_image);
      auto loss = cross_entropy(model.forward_batch(b.image, b.ehr).logits, b.labels);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw ValueError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                         ", samples " + std::to_string(at) + ".." + std::to_string(end - 1) +
                         " (lr " + std::to_string(opt.lr) + ")");
      opt.zero_grad();
      backward(loss);
      opt.step();
      total += value * static_cast<double>(end - at);
    }
    auto ev = evaluate(model, val, metric, std::max<std::size_t>(cfg.batch_size, 32));
    result.history.push_back({epoch, total / static_cast<double>(train.size()), ev.metric, opt.lr});
    log_debug("epoch " + std::to_string(epoch) + " loss " +
              std::to_string(result.history.back().train_loss) + " val " +
              std::string(metric_name(metric)) + " " + std::to_string(ev.metric));
    if (best.empty() || ev.metric > result.best_metric) {
      result.best_metric = ev.metric;
      result.best_epoch = epoch;
      result.best_eval = std::move(ev);
      best = snapshot(state);
    }
    if (sched) sched->observe(epoch, result.history.back().val_metric);
  }
  restore(state, best);
  model.set_mode(Mode::eval);
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_metric,lr\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_metric, r.lr);
    out += buf;
  }
  return out;
}

void summarize(CvResult& r) {
  if (r.folds.empty()) throw ValueError("no folds to summarize");
  double mean = 0;
  for (const auto& f : r.folds) mean += f.metric;
  mean /= static_cast<double>(r.folds.size());
  double var = 0;
  for (const auto& f : r.folds) var += (f.metric - mean) * (f.metric - mean);
  r.mean = mean;
  r.stdev = std::sqrt(var / static_cast<double>(r.folds.size()));
}

CvResult run_cv(const Dataset& data, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                std::size_t k, std::size_t jobs) {
  model_cfg.validate();
  train_cfg.validate();
  if (data.empty()) throw ValueError("run_cv: empty dataset");
  std::vector<std::size_t> labels;
  for (const auto& s : data) {
    if (s.label >= model_cfg.num_classes)
      throw ValueError("run_cv: sample " + s.id + " has label " + std::to_string(s.label) +
                       " but the model has " + std::to_string(model_cfg.num_classes) + " classes");
    labels.push_back(s.label);
  }
  const auto folds = stratified_kfold(labels, k, train_cfg.seed);
  CvResult result;
  result.metric = train_cfg.resolve_metric(model_cfg.num_classes);
  result.folds.resize(k);
  std::vector<std::exception_ptr> errors(k);

  auto run_fold = [&](std::size_t f) {
    try {
      const auto scaler = EhrScaler::fit(data, folds[f].train);
      const auto train = prepare_split(data, folds[f].train, scaler);
      const auto val = prepare_split(data, folds[f].val, scaler);
      ModelConfig mc = model_cfg;
      mc.seed = mix_seed(model_cfg.seed, f);
      TrainConfig tc = train_cfg;
      tc.seed = mix_seed(train_cfg.seed, 1000 + f);
      Model<float> model(mc);
      auto fitted = fit(model, train, val, tc);
      FoldResult& out = result.folds[f];
      out.fold = f;
      out.val_indices = folds[f].val;
      out.labels = fitted.best_eval.labels;
      for (const auto& p : fitted.best_eval.probs) out.scores.push_back(p.size() > 1 ? p[1] : p[0]);
      out.metric = fitted.best_metric;
      out.best_epoch = fitted.best_epoch;
      log_info(std::string(fusion_name(model_cfg.fusion)) + " fold " + std::to_string(f) + ": " +
               std::string(metric_name(result.metric)) + " " + std::to_string(out.metric) +
               " (best epoch " + std::to_string(out.best_epoch) + ")");
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, k);
  if (workers == 1) {
    for (std::size_t f = 0; f < k; ++f) run_fold(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t f = next++; f < k; f = next++) run_fold(f);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  summarize(result);
  return result;
}

#define MMFUSE_INSTANTIATE_TRAIN(T)                                                      \
  template std::vector<T> softmax(const std::vector<T>&);                                \
  template Tensor<T> cross_entropy(const Tensor<T>&, const std::vector<std::size_t>&);   \
  template class Adam<T>;                                                                \
  template std::size_t argmax(const std::vector<T>&);

MMFUSE_INSTANTIATE_TRAIN(float)
MMFUSE_INSTANTIATE_TRAIN(double)

}  // namespace mmfuse
