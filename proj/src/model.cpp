#include "tpm/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "tpm/error.hpp"
#include "tpm/loss.hpp"
#include "tpm/random.hpp"

namespace tpm {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ParameterError(std::string("model config: ") + what + " must be positive");
  };
  positive(n_points, "n_points");
  positive(patch_count, "patch_count");
  positive(patch_size, "patch_size");
  positive(embed_dim, "embed_dim");
  positive(encoder_depth, "encoder_depth");
  positive(decoder_depth, "decoder_depth");
  positive(head_count, "head_count");
  positive(mlp_ratio, "mlp_ratio");
  if (embed_dim % head_count != 0) {
    throw ParameterError("model config: embed_dim " + std::to_string(embed_dim) +
                         " is not divisible by head_count " + std::to_string(head_count));
  }
  if (embed_dim % 2 != 0) throw ParameterError("model config: embed_dim must be even");
  if (decoder_depth > encoder_depth) {
    throw ParameterError("model config: decoder_depth must not exceed encoder_depth");
  }
  if (patch_count > n_points || patch_size > n_points) {
    throw ParameterError("model config: patch_count and patch_size must not exceed n_points");
  }
  if (!(base_mask > 0.0 && base_mask < 1.0)) {
    throw ParameterError("model config: base_mask must lie in (0, 1)");
  }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::point_mae() {
  ModelConfig c;
  c.n_points = 1024;
  c.patch_count = 64;
  c.patch_size = 32;
  c.embed_dim = 384;
  c.encoder_depth = 12;
  c.decoder_depth = 4;
  c.head_count = 6;
  c.mlp_ratio = 4;
  c.base_mask = 0.6;
  return c;
}

bool is_encoder_param(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

namespace {

enum class Init { Weight, Zero, One };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                std::size_t width, bool bias = true) {
  out.push_back({prefix + ".weight", {in, width}, Init::Weight});
  if (bias) out.push_back({prefix + ".bias", {width}, Init::Zero});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t c) {
  out.push_back({prefix + ".gamma", {c}, Init::One});
  out.push_back({prefix + ".beta", {c}, Init::Zero});
}

void add_block(std::vector<ParamSpec>& out, const std::string& prefix, const ModelConfig& cfg) {
  const std::size_t c = cfg.embed_dim;
  add_norm(out, prefix + ".norm1", c);
  add_linear(out, prefix + ".attn.q", c, c, false);
  add_linear(out, prefix + ".attn.k", c, c, false);
  add_linear(out, prefix + ".attn.v", c, c, false);
  add_linear(out, prefix + ".attn.proj", c, c);
  add_norm(out, prefix + ".norm2", c);
  add_linear(out, prefix + ".mlp.fc1", c, c * cfg.mlp_ratio);
  add_linear(out, prefix + ".mlp.fc2", c * cfg.mlp_ratio, c);
}

std::vector<ParamSpec> layout(const ModelConfig& cfg) {
  const std::size_t c = cfg.embed_dim;
  std::vector<ParamSpec> out;
  add_linear(out, "encoder.patch_embed.fc1", 3, c / 2);
  add_linear(out, "encoder.patch_embed.fc2", c / 2, c);
  add_linear(out, "encoder.patch_embed.fc3", c, 2 * c);
  add_linear(out, "encoder.patch_embed.fc4", 2 * c, c);
  add_linear(out, "encoder.pos_embed.fc1", 3, 2 * c);
  add_linear(out, "encoder.pos_embed.fc2", 2 * c, c);
  for (std::size_t i = 0; i < cfg.encoder_depth; ++i) {
    add_block(out, "encoder.blocks." + std::to_string(i), cfg);
  }
  add_norm(out, "encoder.norm", c);

  out.push_back({"decoder.mask_token", {c}, Init::Weight});
  add_linear(out, "decoder.pos_embed.fc1", 3, 2 * c);
  add_linear(out, "decoder.pos_embed.fc2", 2 * c, c);
  for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
    add_block(out, "decoder.blocks." + std::to_string(i), cfg);
  }
  add_norm(out, "decoder.norm", c);
  add_linear(out, "decoder.head", c, 3 * cfg.patch_size);
  return out;
}

double truncated_normal(Rng& rng, double sigma) {
  for (;;) {
    const double z = rng.normal();
    if (std::abs(z) <= 2.0) return z * sigma;
  }
}

}  // namespace

ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams<float> params;
  Rng rng(derive_seed(seed, {0x1417ULL}));
  for (auto& spec : layout(config)) {
    Tensor<float> t(spec.shape);
    switch (spec.init) {
      case Init::Weight:
        for (auto& v : t.values()) v = static_cast<float>(truncated_normal(rng, 0.02));
        break;
      case Init::One: t.fill(1.0f); break;
      case Init::Zero: break;
    }
    params.add(spec.name, std::move(t));
  }
  return params;
}

std::size_t parameter_count(const ModelConfig& config) {
  config.validate();
  std::size_t n = 0;
  for (const auto& spec : layout(config)) n += shape_numel(spec.shape);
  return n;
}

// ---------------------------------------------------------------------------------------------

namespace model {

using ad::Graph;
using ad::Var;

template <typename T>
Var linear(Graph<T>& g, Var x, const std::string& prefix) {
  Var y = g.matmul(x, g.param(prefix + ".weight"));
  if (g.params().contains(prefix + ".bias")) y = g.add(y, g.param(prefix + ".bias"));
  return y;
}

template <typename T>
Var affine_norm(Graph<T>& g, Var x, const std::string& prefix) {
  return g.add(g.multiply(g.layer_norm(x), g.param(prefix + ".gamma")), g.param(prefix + ".beta"));
}

template <typename T>
Var embed_tokens(Graph<T>& g, const ModelConfig& cfg, Var points, std::size_t groups) {
  typename Graph<T>::Scope scope(g, "patch_embed");
  const std::string p = "encoder.patch_embed";
  Var h = g.gelu(linear(g, points, p + ".fc1"));
  h = linear(g, h, p + ".fc2");
  h = g.reshape(h, {groups, cfg.patch_size, cfg.embed_dim});
  h = g.reduce_max(h, 1);
  h = g.gelu(linear(g, h, p + ".fc3"));
  return linear(g, h, p + ".fc4");
}

template <typename T>
Var positional_embedding(Graph<T>& g, const std::string& prefix, Var centers) {
  typename Graph<T>::Scope scope(g, prefix + ".pos_embed");
  Var h = g.gelu(linear(g, centers, prefix + ".pos_embed.fc1"));
  return linear(g, h, prefix + ".pos_embed.fc2");
}

template <typename T>
Var transformer_block(Graph<T>& g, const ModelConfig& cfg, const std::string& prefix, Var x,
                      Var pos) {
  typename Graph<T>::Scope scope(g, prefix);
  Var h = g.add(x, pos);
  Var n1 = affine_norm(g, h, prefix + ".norm1");
  Var attn = ad::scaled_dot_product_attention(g, linear(g, n1, prefix + ".attn.q"),
                                              linear(g, n1, prefix + ".attn.k"),
                                              linear(g, n1, prefix + ".attn.v"), cfg.head_count);
  h = g.add(h, linear(g, attn, prefix + ".attn.proj"));
  Var n2 = affine_norm(g, h, prefix + ".norm2");
  Var m = linear(g, g.gelu(linear(g, n2, prefix + ".mlp.fc1")), prefix + ".mlp.fc2");
  return g.add(h, m);
}

template <typename T>
Var encode(Graph<T>& g, const ModelConfig& cfg, Var points, Var centers, std::size_t batch,
           std::size_t tokens) {
  const std::size_t c = cfg.embed_dim;
  Var x = g.reshape(embed_tokens(g, cfg, points, batch * tokens), {batch, tokens, c});
  Var pos = g.reshape(positional_embedding(g, "encoder", centers), {batch, tokens, c});
  for (std::size_t i = 0; i < cfg.encoder_depth; ++i) {
    x = transformer_block(g, cfg, "encoder.blocks." + std::to_string(i), x, pos);
  }
  return affine_norm(g, x, "encoder.norm");
}

template <typename T>
Var pool_features(Graph<T>& g, Var encoded) {
  const std::array<Var, 2> parts = {g.reduce_max(encoded, 1), g.reduce_mean(encoded, 1)};
  return g.concat(parts, 1);
}

}  // namespace model

// ---------------------------------------------------------------------------------------------

template <typename T>
BranchData<T> make_branch_data(std::span<const PatchSet* const> patches,
                               std::span<const MaskAssignment> assignments) {
  if (patches.empty() || patches.size() != assignments.size()) {
    throw ShapeError("branch data needs one assignment per patch set");
  }
  const std::size_t G = patches[0]->patch_count;
  const std::size_t S = patches[0]->patch_size;
  BranchData<T> d;
  d.batch = patches.size();
  d.visible = assignments[0].visible.size();
  d.masked = assignments[0].masked.size();
  const std::size_t B = d.batch;
  d.visible_points = Tensor<T>({B * d.visible * S, 3});
  d.visible_centers = Tensor<T>({B * d.visible, 3});
  d.ordered_centers = Tensor<T>({B * G, 3});
  d.masked_truth = Tensor<T>({B * d.masked, S, 3});
  d.full_truth = Tensor<T>({B, G * S, 3});
  d.center_offsets = Tensor<T>({B * G, S, 3});

  auto put = [](T* dst, Point3 p) {
    dst[0] = static_cast<T>(p.x);
    dst[1] = static_cast<T>(p.y);
    dst[2] = static_cast<T>(p.z);
  };
  for (std::size_t b = 0; b < B; ++b) {
    const PatchSet& ps = *patches[b];
    const MaskAssignment& a = assignments[b];
    if (ps.patch_count != G || ps.patch_size != S) throw ShapeError("patch sets differ in shape");
    if (a.patch_count() != G) throw ShapeError("assignment does not partition the patches");
    if (a.visible.size() != d.visible || a.masked.size() != d.masked) {
      throw ShapeError("assignments in one batch must share visible/masked counts");
    }
    std::vector<std::size_t> order(a.visible);
    order.insert(order.end(), a.masked.begin(), a.masked.end());
    for (std::size_t v = 0; v < d.visible; ++v) {
      const std::size_t gidx = a.visible[v];
      put(d.visible_centers.data() + (b * d.visible + v) * 3, ps.centers[gidx]);
      const auto patch = ps.patch(gidx);
      for (std::size_t s = 0; s < S; ++s) {
        put(d.visible_points.data() + ((b * d.visible + v) * S + s) * 3, patch[s]);
      }
    }
    for (std::size_t m = 0; m < d.masked; ++m) {
      const auto patch = ps.patch(a.masked[m]);
      for (std::size_t s = 0; s < S; ++s) {
        put(d.masked_truth.data() + ((b * d.masked + m) * S + s) * 3, patch[s]);
      }
    }
    for (std::size_t o = 0; o < G; ++o) {
      const std::size_t gidx = order[o];
      put(d.ordered_centers.data() + (b * G + o) * 3, ps.centers[gidx]);
      const auto patch = ps.patch(gidx);
      for (std::size_t s = 0; s < S; ++s) {
        put(d.full_truth.data() + ((b * G + o) * S + s) * 3, patch[s] + ps.centers[gidx]);
        put(d.center_offsets.data() + ((b * G + o) * S + s) * 3, ps.centers[gidx]);
      }
    }
  }
  return d;
}

template <typename T>
ReconstructionVars<T> build_reconstruction(ad::Graph<T>& g, const ModelConfig& cfg,
                                           const BranchData<T>& data, const std::string& prefix,
                                           bool full_cloud) {
  using ad::Var;
  const std::size_t B = data.batch;
  const std::size_t V = data.visible;
  const std::size_t M = data.masked;
  const std::size_t G = V + M;
  const std::size_t S = cfg.patch_size;
  const std::size_t c = cfg.embed_dim;
  if (G != cfg.patch_count) throw ShapeError("branch data patch count differs from config");
  typename ad::Graph<T>::Scope scope(g, prefix);

  Var points = g.input(prefix + "/visible_points", data.visible_points.shape());
  Var centers = g.input(prefix + "/visible_centers", data.visible_centers.shape());
  Var ordered = g.input(prefix + "/ordered_centers", data.ordered_centers.shape());

  ReconstructionVars<T> out;
  out.encoded = model::encode(g, cfg, points, centers, B, V);

  Var mask_tokens = g.add(g.constant(Tensor<T>({B, M, c})), g.param("decoder.mask_token"));
  const std::array<Var, 2> parts = {out.encoded, mask_tokens};
  Var x = g.concat(parts, 1);
  Var pos = g.reshape(model::positional_embedding(g, "decoder", ordered), {B, G, c});
  for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
    x = model::transformer_block(g, cfg, "decoder.blocks." + std::to_string(i), x, pos);
  }
  x = model::affine_norm(g, x, "decoder.norm");
  x = g.reshape(x, {B * G, c});

  if (!full_cloud) {
    std::vector<std::size_t> rows;
    rows.reserve(B * M);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t m = 0; m < M; ++m) rows.push_back(b * G + V + m);
    }
    Var masked = g.gather(x, std::move(rows));
    out.prediction = g.reshape(model::linear(g, masked, "decoder.head"), {B * M, S, 3});
    Var truth = g.input(prefix + "/masked_truth", data.masked_truth.shape());
    out.loss = reconstruction_loss(g, out.prediction, truth);
  } else {
    Var local = g.reshape(model::linear(g, x, "decoder.head"), {B * G, S, 3});
    Var offsets = g.input(prefix + "/center_offsets", data.center_offsets.shape());
    out.prediction = g.reshape(g.add(local, offsets), {B, G * S, 3});
    Var truth = g.input(prefix + "/full_truth", data.full_truth.shape());
    out.loss = g.mean(g.chamfer(out.prediction, truth));
  }
  return out;
}

template <typename T>
void bind_branch_inputs(ad::Inputs<T>& inputs, const BranchData<T>& data, const std::string& prefix,
                        bool full_cloud) {
  inputs[prefix + "/visible_points"] = data.visible_points;
  inputs[prefix + "/visible_centers"] = data.visible_centers;
  inputs[prefix + "/ordered_centers"] = data.ordered_centers;
  if (full_cloud) {
    inputs[prefix + "/center_offsets"] = data.center_offsets;
    inputs[prefix + "/full_truth"] = data.full_truth;
  } else {
    inputs[prefix + "/masked_truth"] = data.masked_truth;
  }
}

// ---------------------------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> points_tensor(const PatchSet& ps, std::span<const std::size_t> groups) {
  Tensor<T> t({groups.size() * ps.patch_size, 3});
  std::size_t k = 0;
  for (auto gidx : groups) {
    for (const auto& p : ps.patch(gidx)) {
      t[k++] = static_cast<T>(p.x);
      t[k++] = static_cast<T>(p.y);
      t[k++] = static_cast<T>(p.z);
    }
  }
  return t;
}

template <typename T>
Tensor<T> centers_tensor(const PatchSet& ps, std::span<const std::size_t> groups) {
  Tensor<T> t({groups.size(), 3});
  std::size_t k = 0;
  for (auto gidx : groups) {
    t[k++] = static_cast<T>(ps.centers[gidx].x);
    t[k++] = static_cast<T>(ps.centers[gidx].y);
    t[k++] = static_cast<T>(ps.centers[gidx].z);
  }
  return t;
}

std::vector<std::size_t> all_groups(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

template <typename T>
PatchEmbedding<T> embed_patches(const PatchSet& patches, const MaskAssignment& assignment,
                                const ModelParams<T>& params, const ModelConfig& cfg) {
  cfg.validate();
  if (patches.patch_count != cfg.patch_count || patches.patch_size != cfg.patch_size) {
    throw ShapeError("patch set does not match the model config");
  }
  if (assignment.patch_count() != patches.patch_count) {
    throw ShapeError("assignment does not partition the patch set");
  }
  ad::Graph<T> g(params);
  auto points = g.input("points", {assignment.visible.size() * cfg.patch_size, 3});
  auto centers = g.input("centers", {cfg.patch_count, 3});
  g.output("tokens", model::embed_tokens(g, cfg, points, assignment.visible.size()));
  g.output("positions", model::positional_embedding(g, "encoder", centers));
  ad::Inputs<T> in;
  in["points"] = points_tensor<T>(patches, assignment.visible);
  in["centers"] = centers_tensor<T>(patches, all_groups(cfg.patch_count));
  auto out = g.forward(in);
  return {std::move(out.at("tokens")), std::move(out.at("positions"))};
}

template <typename T>
Tensor<T> reconstruct(const PatchSet& patches, const MaskAssignment& assignment,
                      const ModelParams<T>& params, const ModelConfig& cfg) {
  cfg.validate();
  const PatchSet* ptr = &patches;
  const auto data = make_branch_data<T>(std::span<const PatchSet* const>(&ptr, 1),
                                        std::span<const MaskAssignment>(&assignment, 1));
  ad::Graph<T> g(params);
  const auto vars = build_reconstruction(g, cfg, data, "branch");
  g.output("prediction", vars.prediction);
  ad::Inputs<T> in;
  bind_branch_inputs(in, data, "branch");
  auto out = g.forward(in);
  return std::move(out.at("prediction"));
}

std::uint64_t patch_seed(std::uint64_t sample_seed) { return derive_seed(sample_seed, {0xfb5ULL}); }

template <typename T>
std::vector<T> global_feature(const PointCloud& cloud, const ModelParams<T>& params,
                              const ModelConfig& cfg, std::optional<double> mask_ratio,
                              std::uint64_t seed) {
  cfg.validate();
  const PatchSet ps = patchify(cloud, cfg.patch_count, cfg.patch_size, patch_seed(seed));
  const std::vector<std::size_t> groups =
      mask_ratio ? sample_mask(cfg.patch_count, *mask_ratio, seed).visible
                 : all_groups(cfg.patch_count);
  ad::Graph<T> g(params);
  auto points = g.input("points", {groups.size() * cfg.patch_size, 3});
  auto centers = g.input("centers", {groups.size(), 3});
  auto encoded = model::encode(g, cfg, points, centers, 1, groups.size());
  g.output("feature", model::pool_features(g, encoded));
  ad::Inputs<T> in;
  in["points"] = points_tensor<T>(ps, groups);
  in["centers"] = centers_tensor<T>(ps, groups);
  auto out = g.forward(in);
  return out.at("feature").storage();
}

Tensor<float> global_features(std::span<const PatchSet> patches, const ModelParams<float>& params,
                              const ModelConfig& cfg, std::optional<double> mask_ratio,
                              std::span<const std::uint64_t> seeds, std::size_t batch_size) {
  cfg.validate();
  if (seeds.size() != patches.size()) throw ShapeError("one seed per patch set is required");
  const std::size_t n = patches.size();
  const std::size_t width = 2 * cfg.embed_dim;
  Tensor<float> out({n, width});
  const std::size_t tokens =
      mask_ratio ? cfg.patch_count - masked_count(cfg.patch_count, *mask_ratio) : cfg.patch_count;

  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t B = std::min(batch_size, n - start);
    Tensor<float> pts({B * tokens * cfg.patch_size, 3});
    Tensor<float> ctr({B * tokens, 3});
    for (std::size_t b = 0; b < B; ++b) {
      const PatchSet& ps = patches[start + b];
      const std::vector<std::size_t> groups =
          mask_ratio ? sample_mask(cfg.patch_count, *mask_ratio, seeds[start + b]).visible
                     : all_groups(cfg.patch_count);
      const auto p = points_tensor<float>(ps, groups);
      const auto c = centers_tensor<float>(ps, groups);
      std::copy(p.data(), p.data() + p.numel(), pts.data() + b * p.numel());
      std::copy(c.data(), c.data() + c.numel(), ctr.data() + b * c.numel());
    }
    ad::Graph<float> g(params);
    auto points = g.input("points", pts.shape());
    auto centers = g.input("centers", ctr.shape());
    g.output("feature", model::pool_features(g, model::encode(g, cfg, points, centers, B, tokens)));
    ad::Inputs<float> in;
    in["points"] = std::move(pts);
    in["centers"] = std::move(ctr);
    const auto res = g.forward(in);
    const auto& f = res.at("feature");
    std::copy(f.data(), f.data() + f.numel(), out.data() + start * width);
  }
  return out;
}

#define TPM_INSTANTIATE(T)                                                                      \
  namespace model {                                                                             \
  template ad::Var linear(ad::Graph<T>&, ad::Var, const std::string&);                          \
  template ad::Var embed_tokens(ad::Graph<T>&, const ModelConfig&, ad::Var, std::size_t);       \
  template ad::Var positional_embedding(ad::Graph<T>&, const std::string&, ad::Var);            \
  template ad::Var transformer_block(ad::Graph<T>&, const ModelConfig&, const std::string&,     \
                                     ad::Var, ad::Var);                                         \
  template ad::Var encode(ad::Graph<T>&, const ModelConfig&, ad::Var, ad::Var, std::size_t,     \
                          std::size_t);                                                         \
  template ad::Var pool_features(ad::Graph<T>&, ad::Var);                                       \
  }                                                                                             \
  template BranchData<T> make_branch_data(std::span<const PatchSet* const>,                     \
                                          std::span<const MaskAssignment>);                     \
  template ReconstructionVars<T> build_reconstruction(ad::Graph<T>&, const ModelConfig&,        \
                                                      const BranchData<T>&, const std::string&, \
                                                      bool);                                    \
  template void bind_branch_inputs(ad::Inputs<T>&, const BranchData<T>&, const std::string&,    \
                                   bool);                                                       \
  template PatchEmbedding<T> embed_patches(const PatchSet&, const MaskAssignment&,              \
                                           const ModelParams<T>&, const ModelConfig&);          \
  template Tensor<T> reconstruct(const PatchSet&, const MaskAssignment&, const ModelParams<T>&, \
                                 const ModelConfig&);                                           \
  template std::vector<T> global_feature(const PointCloud&, const ModelParams<T>&,              \
                                         const ModelConfig&, std::optional<double>,             \
                                         std::uint64_t);

TPM_INSTANTIATE(float)
TPM_INSTANTIATE(double)
#undef TPM_INSTANTIATE

}  // namespace tpm
