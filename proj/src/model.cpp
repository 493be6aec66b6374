#include "mmfuse/model.hpp"

#include <algorithm>

#include "mmfuse/error.hpp"

namespace mmfuse {

std::string_view fusion_name(Fusion f) {
  switch (f) {
    case Fusion::image_only: return "image_only";
    case Fusion::ehr_only: return "ehr_only";
    case Fusion::concat: return "concat";
    case Fusion::linear_sum: return "linear_sum";
    case Fusion::gmu: return "gmu";
    case Fusion::multihead_gmu: return "multihead_gmu";
  }
  return "?";
}

Fusion parse_fusion(std::string_view name) {
  for (Fusion f : kAllFusions)
    if (fusion_name(f) == name) return f;
  throw ConfigError("unknown fusion strategy '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  if (in_channels == 0) throw ConfigError("model: in_channels must be positive");
  if (stage_channels.empty()) throw ConfigError("model: at least one backbone stage is required");
  if (blocks_per_stage.size() != stage_channels.size())
    throw ConfigError("model: blocks_per_stage has " + std::to_string(blocks_per_stage.size()) +
                      " entries for " + std::to_string(stage_channels.size()) + " stages");
  for (std::size_t i = 0; i < stages(); ++i) {
    if (stage_channels[i] == 0) throw ConfigError("model: stage channels must be positive");
    if (blocks_per_stage[i] == 0) throw ConfigError("model: every stage needs at least one block");
  }
  if (num_classes < 2) throw ConfigError("model: num_classes must be at least 2");
  if (ehr_dim == 0) throw ConfigError("model: ehr_dim must be positive");
  if (ehr_hidden == 0) throw ConfigError("model: ehr_hidden must be positive");
  if (heads < 1) throw ConfigError("model: heads must be at least 1");
  if (heads != 1 && fusion != Fusion::multihead_gmu)
    throw ConfigError("model: heads = " + std::to_string(heads) +
                      " is only valid with multihead_gmu fusion");
  if (attention_placements) {
    if (!is_bimodal(fusion) && !attention_placements->empty())
      throw ConfigError("model: attention needs EHR input and image features; " +
                        std::string(fusion_name(fusion)) + " cannot have attention placements");
    for (std::size_t p : *attention_placements)
      if (p >= stages())
        throw ConfigError("model: attention placement " + std::to_string(p) +
                          " is not a stage index (0.." + std::to_string(stages() - 1) + ")");
    auto sorted = *attention_placements;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw ConfigError("model: duplicate attention placement");
  }
}

ModelConfig for_fusion(ModelConfig cfg, Fusion f) {
  cfg.fusion = f;
  if (!is_bimodal(f)) cfg.attention_placements.reset();
  if (f != Fusion::multihead_gmu) cfg.heads = 1;
  return cfg;
}

std::vector<std::size_t> ModelConfig::placements() const {
  if (!is_bimodal(fusion)) return {};
  if (!attention_placements) return {stages() - 1};
  auto p = *attention_placements;
  std::sort(p.begin(), p.end());
  return p;
}

std::size_t ModelConfig::resolved_c_int() const {
  return c_int ? c_int : c_int_rule(image_channels(), ehr_dim);
}

std::size_t ModelConfig::fused_dim() const {
  switch (fusion) {
    case Fusion::image_only: return image_channels();
    case Fusion::ehr_only: return ehr_hidden;
    case Fusion::concat: return image_channels() + ehr_dim;
    case Fusion::linear_sum:
    case Fusion::gmu: return resolved_c_int();
    case Fusion::multihead_gmu: return heads * resolved_c_int();
  }
  return 0;
}

template <Real T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const std::size_t c1 = cfg_.image_channels(), cm = cfg_.ehr_dim;

  if (cfg_.fusion != Fusion::ehr_only) {
    stem_ = Conv3d<T>(cfg_.in_channels, cfg_.stage_channels[0], 3, {1, 1, false}, false);
    stem_bn_ = BatchNorm3d<T>(cfg_.stage_channels[0]);
    init_params(stem_, InitScheme::he, rng);
    std::size_t in = cfg_.stage_channels[0];
    for (std::size_t s = 0; s < cfg_.stages(); ++s) {
      std::vector<ResidualBlock3d<T>> blocks;
      for (std::size_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks.emplace_back(in, cfg_.stage_channels[s], stride);
        blocks.back().init(rng);
        in = cfg_.stage_channels[s];
      }
      stages_.push_back(std::move(blocks));
    }
    for (std::size_t p : cfg_.placements()) {
      const std::size_t c = cfg_.stage_channels[p];
      AttentionParams<T> att(c, cm, cfg_.c_int ? cfg_.c_int : c_int_rule(c, cm));
      att.init(rng);
      attention_.emplace_back(p, std::move(att));
    }
  }

  const std::size_t c_int = cfg_.resolved_c_int();
  switch (cfg_.fusion) {
    case Fusion::ehr_only:
      ehr_hidden_ = Linear<T>(cm, cfg_.ehr_hidden);
      init_params(ehr_hidden_, InitScheme::he, rng);
      break;
    case Fusion::linear_sum:
      linear_sum_ = LinearSumParams<T>(c1, cm, c_int);
      linear_sum_.init(rng);
      break;
    case Fusion::gmu:
    case Fusion::multihead_gmu:
      gmu_ = MultiHeadGmu<T>(cfg_.heads, c1, cm, c_int);
      gmu_.init(rng);
      break;
    default:
      break;
  }
  classifier_ = Linear<T>(cfg_.fused_dim(), cfg_.num_classes);
  init_params(classifier_, InitScheme::xavier, rng);
}

template <Real T>
void Model<T>::set_mode(Mode m) {
  mode_ = m;
  stem_bn_.mode = m;
  for (auto& stage : stages_)
    for (auto& block : stage) block.set_mode(m);
}

template <Real T>
Tensor<T> Model<T>::attend(const AttentionParams<T>& att, const Tensor<T>& features,
                           const Tensor<T>& ehr, std::vector<Tensor<T>>& attention) const {
  const std::size_t batch = features.dim(0);
  Shape one{features.dim(1), features.dim(2), features.dim(3), features.dim(4)};
  Shape one_q{1, features.dim(2), features.dim(3), features.dim(4)};
  std::vector<Tensor<T>> gated, maps;
  for (std::size_t b = 0; b < batch; ++b) {
    auto x = reshape(slice(features, 0, b, b + 1), one);
    auto m = reshape(slice(ehr, 0, b, b + 1), {ehr.dim(1)});
    auto out = mm_attention_forward(att, x, m);
    Shape with_batch = out.features.shape();
    with_batch.insert(with_batch.begin(), 1);
    gated.push_back(reshape(out.features, with_batch));
    Shape q_batch = one_q;
    q_batch.insert(q_batch.begin(), 1);
    maps.push_back(reshape(out.attention, q_batch));
  }
  attention.push_back(batch == 1 ? maps[0] : concat(maps, 0));
  return batch == 1 ? gated[0] : concat(gated, 0);
}

template <Real T>
Tensor<T> Model<T>::backbone(const Tensor<T>& image, const Tensor<T>& ehr,
                             std::vector<Tensor<T>>& attention) {
  auto h = relu(stem_bn_.forward(stem_.forward(image)));
  auto next_att = attention_.begin();
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (auto& block : stages_[s]) h = block.forward(h);
    if (next_att != attention_.end() && next_att->first == s) {
      h = attend(next_att->second, h, ehr, attention);
      ++next_att;
    }
  }
  return global_avg_pool(h);
}

template <Real T>
Tensor<T> Model<T>::fuse(const Tensor<T>& pooled, const Tensor<T>& ehr) const {
  switch (cfg_.fusion) {
    case Fusion::image_only: return pooled;
    case Fusion::concat: return concat_fusion(pooled, ehr);
    case Fusion::linear_sum: return linear_sum_fusion(linear_sum_, pooled, ehr);
    case Fusion::gmu:
    case Fusion::multihead_gmu: return multihead_gmu_forward(gmu_, pooled, ehr);
    case Fusion::ehr_only: break;
  }
  throw ConfigError("model: fusion head not applicable");
}

template <Real T>
ModelOutput<T> Model<T>::forward_batch(const Tensor<T>& image, const Tensor<T>& ehr) {
  if (ehr.ndim() != 2 || ehr.dim(1) != cfg_.ehr_dim)
    throw ShapeError("model: EHR batch must be [B x " + std::to_string(cfg_.ehr_dim) + "], got " +
                     shape_str(ehr.shape()));
  ModelOutput<T> out;
  if (cfg_.fusion == Fusion::ehr_only) {
    out.logits = classifier_.forward(relu(ehr_hidden_.forward(ehr)));
    return out;
  }
  if (image.ndim() != 5 || image.dim(1) != cfg_.in_channels || image.dim(0) != ehr.dim(0))
    throw ShapeError("model: image batch must be [" + std::to_string(ehr.dim(0)) + " x " +
                     std::to_string(cfg_.in_channels) + " x H x W x D], got " +
                     shape_str(image.shape()));
  auto pooled = backbone(image, ehr, out.attention);
  out.logits = classifier_.forward(fuse(pooled, ehr));
  return out;
}

template <Real T>
StateList<T> Model<T>::state() const {
  StateList<T> out;
  if (cfg_.fusion != Fusion::ehr_only) {
    stem_.collect(out, "stem");
    stem_bn_.collect(out, "stem_bn");
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t b = 0; b < stages_[s].size(); ++b)
        stages_[s][b].collect(out, "stage" + std::to_string(s) + ".block" + std::to_string(b));
    for (const auto& [p, att] : attention_) att.collect(out, "attention" + std::to_string(p));
  }
  switch (cfg_.fusion) {
    case Fusion::ehr_only: ehr_hidden_.collect(out, "ehr_hidden"); break;
    case Fusion::linear_sum: linear_sum_.collect(out, "fusion"); break;
    case Fusion::gmu:
    case Fusion::multihead_gmu: gmu_.collect(out, "fusion"); break;
    default: break;
  }
  classifier_.collect(out, "classifier");
  return out;
}

template <Real T>
std::vector<Tensor<T>> Model<T>::parameters() const {
  std::vector<Tensor<T>> params;
  for (auto& t : state())
    if (t.trainable) params.push_back(t.tensor);
  return params;
}

template <Real T>
std::pair<Tensor<T>, std::vector<Tensor<T>>> model_forward(Model<T>& model, const Tensor<T>& image,
                                                           const Tensor<T>& ehr) {
  if (ehr.ndim() != 1)
    throw ShapeError("model_forward: EHR must be a vector, got " + shape_str(ehr.shape()));
  Tensor<T> batch_image = image;
  if (model.config().fusion != Fusion::ehr_only) {
    if (image.ndim() != 4)
      throw ShapeError("model_forward: image must be [C x H x W x D], got " +
                       shape_str(image.shape()));
    Shape s = image.shape();
    s.insert(s.begin(), 1);
    batch_image = reshape(image, s);
  }
  auto out = model.forward_batch(batch_image, reshape(ehr, {1, ehr.size()}));
  std::vector<Tensor<T>> maps;
  for (auto& q : out.attention) {
    Shape s(q.shape().begin() + 1, q.shape().end());
    maps.push_back(reshape(q, s));
  }
  return {reshape(out.logits, {model.config().num_classes}), std::move(maps)};
}

template <Real T>
Tensor<T> upsample_nearest(const Tensor<T>& q, const std::array<std::size_t, 3>& size) {
  if (q.ndim() != 4 || q.dim(0) != 1)
    throw ShapeError("upsample_nearest: expected [1 x h x w x d], got " + shape_str(q.shape()));
  const std::size_t h = q.dim(1), w = q.dim(2), d = q.dim(3);
  const auto [H, W, D] = size;
  if (H == 0 || W == 0 || D == 0) throw ShapeError("upsample_nearest: empty target size");
  std::vector<T> out(H * W * D);
  for (std::size_t i = 0; i < H; ++i) {
    const std::size_t si = i * h / H;
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t sj = j * w / W;
      for (std::size_t k = 0; k < D; ++k)
        out[(i * W + j) * D + k] = q[(si * w + sj) * d + k * d / D];
    }
  }
  return Tensor<T>::from({1, H, W, D}, std::move(out));
}

template <Real T>
std::vector<Tensor<T>> extract_attention(Model<T>& model, const Tensor<T>& image,
                                         const Tensor<T>& ehr) {
  if (model.config().placements().empty())
    throw ConfigError("model has no attention module");
  NoGradGuard no_grad;
  const Mode before = model.mode();
  model.set_mode(Mode::eval);
  std::vector<Tensor<T>> maps;
  try {
    maps = model_forward(model, image, ehr).second;
  } catch (...) {
    model.set_mode(before);
    throw;
  }
  model.set_mode(before);
  for (auto& q : maps) q = upsample_nearest(q, {image.dim(1), image.dim(2), image.dim(3)});
  return maps;
}

#define MMFUSE_INSTANTIATE_MODEL(T)                                                         \
  template class Model<T>;                                                                  \
  template std::pair<Tensor<T>, std::vector<Tensor<T>>> model_forward(                      \
      Model<T>&, const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> upsample_nearest(const Tensor<T>&, const std::array<std::size_t, 3>&); \
  template std::vector<Tensor<T>> extract_attention(Model<T>&, const Tensor<T>&,            \
                                                    const Tensor<T>&);

MMFUSE_INSTANTIATE_MODEL(float)
MMFUSE_INSTANTIATE_MODEL(double)

}  // namespace mmfuse
