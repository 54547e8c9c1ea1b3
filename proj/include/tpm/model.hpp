#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpm/autodiff.hpp"
#include "tpm/geometry.hpp"
#include "tpm/masking.hpp"
#include "tpm/tensor.hpp"

namespace tpm {

/// Shape of the shared-weight point-patch autoencoder.
struct ModelConfig {
  std::size_t n_points = 256;
  std::size_t patch_count = 32;
  std::size_t patch_size = 16;
  std::size_t embed_dim = 64;
  std::size_t encoder_depth = 3;
  std::size_t decoder_depth = 1;
  std::size_t head_count = 4;
  std::size_t mlp_ratio = 4;
  double base_mask = 0.6;

  /// Throws ParameterError on any violated invariant.
  void validate() const;

  /// CPU-scale default used throughout the tests.
  static ModelConfig desk();
  /// 1024 points, 64 patches of 32, width 384, depth 12/4, 6 heads.
  static ModelConfig point_mae();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameters of the encoder ("encoder." prefix) and decoder ("decoder." prefix).
template <typename T>
using ModelParams = NamedTensors<T>;

/// Truncated-normal (sigma 0.02, clipped at 2 sigma) weights and mask token, zero biases,
/// unit/zero layer-norm affines. Deterministic per seed.
ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed);

/// Number of scalars init_params allocates for `config`.
std::size_t parameter_count(const ModelConfig& config);

bool is_encoder_param(const std::string& name);

// ---------------------------------------------------------------------------------------------
// Graph builders. All operate on a batch of B clouds that share one visible/masked count.

namespace model {

template <typename T>
ad::Var linear(ad::Graph<T>& g, ad::Var x, const std::string& prefix);

/// points [N*S, 3] local coordinates -> tokens [N, c] (shared point MLP, max-pool, MLP).
template <typename T>
ad::Var embed_tokens(ad::Graph<T>& g, const ModelConfig& cfg, ad::Var points, std::size_t groups);

/// centers [N, 3] -> [N, c]. `prefix` is "encoder" or "decoder".
template <typename T>
ad::Var positional_embedding(ad::Graph<T>& g, const std::string& prefix, ad::Var centers);

/// Pre-norm transformer block applied to x + pos; x, pos: [B, T, c].
template <typename T>
ad::Var transformer_block(ad::Graph<T>& g, const ModelConfig& cfg, const std::string& prefix,
                          ad::Var x, ad::Var pos);

/// Patch embedding, positional embedding and encoder blocks with final norm -> [B, T, c].
template <typename T>
ad::Var encode(ad::Graph<T>& g, const ModelConfig& cfg, ad::Var points, ad::Var centers,
               std::size_t batch, std::size_t tokens);

/// [B, T, c] -> [B, 2c]: max-pool over tokens concatenated with mean-pool over tokens.
template <typename T>
ad::Var pool_features(ad::Graph<T>& g, ad::Var encoded);

}  // namespace model

/// Host-side tensors for one mask branch over a batch.
template <typename T>
struct BranchData {
  std::size_t batch = 0;
  std::size_t visible = 0;
  std::size_t masked = 0;
  Tensor<T> visible_points;   // [B*V*S, 3] local coordinates of visible patches
  Tensor<T> visible_centers;  // [B*V, 3]
  Tensor<T> ordered_centers;  // [B*G, 3] visible centers, then masked centers
  Tensor<T> masked_truth;     // [B*M, S, 3]
  Tensor<T> full_truth;       // [B, G*S, 3] every patch point in cloud coordinates (visible first)
  Tensor<T> center_offsets;   // [B*G, S, 3] ordered centers repeated per patch point
};

/// All assignments must share the same visible and masked counts.
template <typename T>
BranchData<T> make_branch_data(std::span<const PatchSet* const> patches,
                               std::span<const MaskAssignment> assignments);

template <typename T>
struct ReconstructionVars {
  ad::Var encoded;     // [B, V, c]
  ad::Var prediction;  // [B*M, S, 3] (masked mode) or [B, G*S, 3] (full-cloud mode)
  ad::Var loss;        // scalar
};

/// Declares inputs "<prefix>/..." for `data` and builds encoder, decoder, head and the
/// reconstruction loss. Masked mode supervises only masked patches in center-local
/// coordinates; full-cloud mode reconstructs every patch and compares whole clouds.
template <typename T>
ReconstructionVars<T> build_reconstruction(ad::Graph<T>& g, const ModelConfig& cfg,
                                           const BranchData<T>& data, const std::string& prefix,
                                           bool full_cloud = false);

/// Adds the tensors that build_reconstruction declared under `prefix`.
template <typename T>
void bind_branch_inputs(ad::Inputs<T>& inputs, const BranchData<T>& data, const std::string& prefix,
                        bool full_cloud = false);

// ---------------------------------------------------------------------------------------------
// Eager single-sample entry points.

template <typename T>
struct PatchEmbedding {
  Tensor<T> visible_tokens;  // [|visible|, c]
  Tensor<T> positions;       // [G, c] encoder positional embedding, original center order
};

template <typename T>
PatchEmbedding<T> embed_patches(const PatchSet& patches, const MaskAssignment& assignment,
                                const ModelParams<T>& params, const ModelConfig& cfg);

/// Predicted masked patches [|masked|, S, 3] in center-local coordinates.
template <typename T>
Tensor<T> reconstruct(const PatchSet& patches, const MaskAssignment& assignment,
                      const ModelParams<T>& params, const ModelConfig& cfg);

/// [max-pool || mean-pool] of encoder tokens, length 2c. Without a mask ratio every patch is
/// encoded; with one, only the visible patches of sample_mask(G, ratio, seed).
template <typename T>
std::vector<T> global_feature(const PointCloud& cloud, const ModelParams<T>& params,
                              const ModelConfig& cfg, std::optional<double> mask_ratio,
                              std::uint64_t seed);

/// Batched global features for pre-computed patch sets: row i uses seeds[i] for its mask.
/// Returns a [N, 2c] tensor.
Tensor<float> global_features(std::span<const PatchSet> patches, const ModelParams<float>& params,
                              const ModelConfig& cfg, std::optional<double> mask_ratio,
                              std::span<const std::uint64_t> seeds, std::size_t batch_size = 64);

/// FPS seed used for a cloud when only a per-sample seed is available.
std::uint64_t patch_seed(std::uint64_t sample_seed);

}  // namespace tpm
