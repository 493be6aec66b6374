#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmfuse/fusion.hpp"
#include "mmfuse/nn.hpp"

namespace mmfuse {

enum class Fusion { image_only, ehr_only, concat, linear_sum, gmu, multihead_gmu };

inline constexpr std::array<Fusion, 6> kAllFusions{Fusion::image_only, Fusion::ehr_only,
                                                   Fusion::concat,     Fusion::linear_sum,
                                                   Fusion::gmu,        Fusion::multihead_gmu};

std::string_view fusion_name(Fusion f);
Fusion parse_fusion(std::string_view name);  // throws ConfigError
inline bool is_bimodal(Fusion f) { return f != Fusion::image_only && f != Fusion::ehr_only; }

struct ModelConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> stage_channels{8, 16, 32, 64};
  std::vector<std::size_t> blocks_per_stage{1, 1, 1, 1};
  std::size_t num_classes = 2;
  std::size_t ehr_dim = 8;
  Fusion fusion = Fusion::gmu;
  std::size_t heads = 1;
  // Stage indices followed by an attention module. Unset means "after the
  // last stage" for the bimodal heads and none for image_only / ehr_only.
  std::optional<std::vector<std::size_t>> attention_placements;
  std::size_t c_int = 0;  // 0: c_int_rule(C1, C_M)
  std::size_t ehr_hidden = 32;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
  std::vector<std::size_t> placements() const;
  std::size_t image_channels() const { return stage_channels.back(); }
  std::size_t resolved_c_int() const;
  std::size_t fused_dim() const;
  std::size_t stages() const { return stage_channels.size(); }
};

// `cfg` switched to fusion `f`. Attention placements are dropped for the
// unimodal heads and the head count reset to 1 unless `f` is multihead_gmu.
ModelConfig for_fusion(ModelConfig cfg, Fusion f);

// Output of a batched forward pass.
template <Real T>
struct ModelOutput {
  Tensor<T> logits;                  // [B x num_classes]
  std::vector<Tensor<T>> attention;  // per placement, [B x 1 x h x w x d]
};

// Conv stem (3x3x3, stride 1) + BN + ReLU, residual stages (stride 2 from the
// second stage on), optional EHR-conditioned attention after chosen stages,
// global average pooling, a fusion head and a linear classifier. The EHR-only
// model skips the image path and uses a one-hidden-layer MLP instead.
template <Real T>
class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }

  // image [B x C x H x W x D], ehr [B x C_M].
  ModelOutput<T> forward_batch(const Tensor<T>& image, const Tensor<T>& ehr);

  void set_mode(Mode m);
  Mode mode() const { return mode_; }

  // Every tensor that defines the model, parameters and buffers, with stable
  // dotted names in construction order.
  StateList<T> state() const;
  std::vector<Tensor<T>> parameters() const;

 private:
  Tensor<T> backbone(const Tensor<T>& image, const Tensor<T>& ehr,
                     std::vector<Tensor<T>>& attention);
  Tensor<T> attend(const AttentionParams<T>& att, const Tensor<T>& features, const Tensor<T>& ehr,
                   std::vector<Tensor<T>>& attention) const;
  Tensor<T> fuse(const Tensor<T>& pooled, const Tensor<T>& ehr) const;

  ModelConfig cfg_;
  Mode mode_ = Mode::train;
  Conv3d<T> stem_;
  BatchNorm3d<T> stem_bn_;
  std::vector<std::vector<ResidualBlock3d<T>>> stages_;
  std::vector<std::pair<std::size_t, AttentionParams<T>>> attention_;
  Linear<T> ehr_hidden_;
  LinearSumParams<T> linear_sum_;
  MultiHeadGmu<T> gmu_;
  Linear<T> classifier_;
};

template <Real T>
Model<T> build_model(const ModelConfig& cfg) {
  return Model<T>(cfg);
}

// Single sample: image [C x H x W x D], ehr [C_M]. Returns logits
// [num_classes] and one map [1 x h x w x d] per placement.
template <Real T>
std::pair<Tensor<T>, std::vector<Tensor<T>>> model_forward(Model<T>& model, const Tensor<T>& image,
                                                           const Tensor<T>& ehr);

// Nearest-neighbour resize of a [1 x h x w x d] map: out[i] = q[floor(i*h/H)].
template <Real T>
Tensor<T> upsample_nearest(const Tensor<T>& q, const std::array<std::size_t, 3>& size);

// Attention maps of one sample, resized to the input's spatial size. Runs in
// eval mode without recording a graph.
template <Real T>
std::vector<Tensor<T>> extract_attention(Model<T>& model, const Tensor<T>& image,
                                         const Tensor<T>& ehr);

}  // namespace mmfuse
