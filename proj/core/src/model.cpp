#include "starry/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "starry/checkpoint.hpp"
#include "starry/ops.hpp"
#include "starry/rng.hpp"

namespace starry {

using nlohmann::json;

Repr repr_from_string(const std::string& name) {
  if (name == "act") return Repr::kAct;
  if (name == "app") return Repr::kApp;
  if (name == "st") return Repr::kSt;
  throw Error("unknown repr '" + name + "', expected act|app|st");
}

std::string repr_to_string(Repr repr) {
  switch (repr) {
    case Repr::kAct: return "act";
    case Repr::kApp: return "app";
    default: return "st";
  }
}

void PolicyConfig::validate() const {
  if (embed_dim_video == 0 || embed_dim_video % heads != 0 ||
      embed_dim_action == 0 || embed_dim_action % heads != 0) {
    throw Error("config: embed dims must be positive multiples of heads");
  }
  if (horizon < 1 || chunk < 1) throw Error("config: horizon and chunk must be >= 1");
  if (chunk % horizon != 0) {
    throw Error("config: chunk must be an integer multiple of horizon");
  }
  if (patch == 0 || img_h % patch != 0 || img_w % patch != 0) {
    throw Error("config: patch must divide image extents");
  }
  if (obs_window < 1 || views < 1 || num_tasks < 1 || action_dim < 1 ||
      effectors < 1 || proprio_dim < 1 || layers < 1) {
    throw Error("config: counts must be >= 1");
  }
  if (lambda_mod < 0.0f) throw Error("config: lambda_mod must be >= 0");
  if (eps_mod <= 0.0f) throw Error("config: eps_mod must be > 0");
  if (sigma <= 0.0f) throw Error("config: sigma must be > 0");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
    throw Error("config: time_embed_dim must be even and >= 2");
  }
}

// ---- parameter construction ---------------------------------------------------

namespace {

Tensor init_normal(const Shape& shape, Rng& rng, float stddev = 0.02f) {
  Tensor t = Tensor::randn(shape, rng, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor init_const(const Shape& shape, float value) {
  Tensor t(shape, value);
  t.set_requires_grad(true);
  return t;
}

LinearParams init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return {init_normal({in, out}, rng), init_const({1, out}, 0.0f)};
}

LinearParams init_linear_small(std::size_t in, std::size_t out, Rng& rng,
                               float bias = 0.0f) {
  return {init_normal({in, out}, rng, 0.002f), init_const({1, out}, bias)};
}

LayerNormParams init_layer_norm(std::size_t dim) {
  return {init_const({dim}, 1.0f), init_const({dim}, 0.0f)};
}

AttentionParams init_attention(std::size_t q_dim, std::size_t kv_dim,
                               std::size_t inner, Rng& rng) {
  return {init_linear(q_dim, inner, rng), init_linear(kv_dim, inner, rng),
          init_linear(kv_dim, inner, rng), init_linear(inner, q_dim, rng)};
}

constexpr std::size_t kMlpMultiplier = 4;

template <typename F>
void visit_linear(const std::string& name, LinearParams& p, ParamGroup g, F&& f) {
  f(name + ".weight", p.weight, g);
  f(name + ".bias", p.bias, g);
}

template <typename F>
void visit_layer_norm(const std::string& name, LayerNormParams& p, ParamGroup g,
                      F&& f) {
  f(name + ".gamma", p.gamma, g);
  f(name + ".beta", p.beta, g);
}

template <typename F>
void visit_attention(const std::string& name, AttentionParams& p, ParamGroup g,
                     F&& f) {
  visit_linear(name + ".q", p.query, g, f);
  visit_linear(name + ".k", p.key, g, f);
  visit_linear(name + ".v", p.value, g, f);
  visit_linear(name + ".o", p.out, g, f);
}

template <typename F>
void visit_params(PolicyParams& p, F&& f) {
  const ParamGroup s1 = ParamGroup::kStage1;
  const ParamGroup ae = ParamGroup::kActionExpert;
  const ParamGroup ge = ParamGroup::kGeometryExpert;

  f("tokenizer.weight", p.tokenizer.weight, s1);
  f("tokenizer.bias", p.tokenizer.bias, s1);
  f("tokenizer.pos_step", p.tokenizer.pos_step, s1);
  f("tokenizer.pos_view", p.tokenizer.pos_view, s1);
  f("tokenizer.pos_row", p.tokenizer.pos_row, s1);
  f("tokenizer.pos_col", p.tokenizer.pos_col, s1);
  f("understanding.task_embedding", p.task_embedding, s1);
  visit_linear("understanding.proprio", p.proprio_embed, s1, f);
  visit_linear("understanding.action_history", p.action_hist_embed, s1, f);
  visit_linear("time.video", p.time_video, s1, f);
  for (std::size_t i = 0; i < p.video_layers.size(); ++i) {
    const std::string base = "video." + std::to_string(i);
    VideoLayerParams& l = p.video_layers[i];
    visit_layer_norm(base + ".ln_attn", l.ln_attn, s1, f);
    visit_layer_norm(base + ".ln_mlp", l.ln_mlp, s1, f);
    visit_attention(base + ".attn", l.attn, s1, f);
    visit_linear(base + ".mlp_in", l.mlp_in, s1, f);
    visit_linear(base + ".mlp_out", l.mlp_out, s1, f);
    visit_linear(base + ".ada", l.ada, s1, f);
  }
  visit_layer_norm("video_head.ln", p.video_head_ln, s1, f);
  visit_linear("video_head.out", p.video_head, s1, f);

  visit_linear("action.embed", p.action_embed, ae, f);
  f("action.pos", p.action_pos, ae);
  visit_linear("time.action", p.time_action, ae, f);
  for (std::size_t i = 0; i < p.action_layers.size(); ++i) {
    const std::string base = "action." + std::to_string(i);
    ActionLayerParams& l = p.action_layers[i];
    visit_layer_norm(base + ".ln_self", l.ln_self, ae, f);
    visit_layer_norm(base + ".ln_cross", l.ln_cross, ae, f);
    visit_layer_norm(base + ".ln_mlp", l.ln_mlp, ae, f);
    visit_attention(base + ".self_attn", l.self_attn, ae, f);
    visit_attention(base + ".cross_attn", l.cross_attn, ae, f);
    visit_linear(base + ".mlp_in", l.mlp_in, ae, f);
    visit_linear(base + ".mlp_out", l.mlp_out, ae, f);
    visit_linear(base + ".ada", l.ada, ae, f);
  }
  visit_layer_norm("action_head.ln", p.action_head_ln, ae, f);
  visit_linear("action_head.out", p.action_head, ae, f);

  f("geo.depth_queries", p.geo.depth_queries, ge);
  f("geo.ee_queries", p.geo.ee_queries, ge);
  visit_layer_norm("geo.ln_query", p.geo.ln_query, ge, f);
  visit_layer_norm("geo.ln_mlp", p.geo.ln_mlp, ge, f);
  visit_layer_norm("geo.ln_head", p.geo.ln_head, ge, f);
  visit_attention("geo.cross", p.geo.cross, ge, f);
  visit_linear("geo.mlp_in", p.geo.mlp_in, ge, f);
  visit_linear("geo.mlp_out", p.geo.mlp_out, ge, f);
  visit_linear("geo.time_video", p.geo.time_video, ge, f);
  visit_linear("geo.time_action", p.geo.time_action, ge, f);
  visit_linear("geo.depth_head", p.geo.depth_head, ge, f);
  visit_linear("geo.ee_head", p.geo.ee_head, ge, f);

  f("norm.action_mean", p.action_norm_mean, ParamGroup::kStats);
  f("norm.action_std", p.action_norm_std, ParamGroup::kStats);
}

void config_to_json(const PolicyConfig& c, json& j) {
  j["embed_dim_video"] = c.embed_dim_video;
  j["embed_dim_action"] = c.embed_dim_action;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["horizon"] = c.horizon;
  j["chunk"] = c.chunk;
  j["action_dim"] = c.action_dim;
  j["patch"] = c.patch;
  j["views"] = c.views;
  j["img_h"] = c.img_h;
  j["img_w"] = c.img_w;
  j["obs_window"] = c.obs_window;
  j["action_history"] = c.action_history;
  j["num_tasks"] = c.num_tasks;
  j["effectors"] = c.effectors;
  j["proprio_dim"] = c.proprio_dim;
  j["time_embed_dim"] = c.time_embed_dim;
  j["lambda_mod"] = c.lambda_mod;
  j["eps_mod"] = c.eps_mod;
  j["sigma"] = c.sigma;
  j["d_max"] = c.d_max;
  j["lambda_obs"] = c.lambda_obs;
  j["lambda_act"] = c.lambda_act;
  j["lambda_depth"] = c.lambda_depth;
  j["lambda_pose"] = c.lambda_pose;
  j["lambda_weight"] = c.lambda_weight;
  j["repr"] = repr_to_string(c.repr);
  j["gasam"] = c.gasam;
}

void config_from_json(const json& j, PolicyConfig& c) {
  c.embed_dim_video = j.at("embed_dim_video").get<std::size_t>();
  c.embed_dim_action = j.at("embed_dim_action").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.horizon = j.at("horizon").get<std::size_t>();
  c.chunk = j.at("chunk").get<std::size_t>();
  c.action_dim = j.at("action_dim").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.views = j.at("views").get<std::size_t>();
  c.img_h = j.at("img_h").get<std::size_t>();
  c.img_w = j.at("img_w").get<std::size_t>();
  c.obs_window = j.at("obs_window").get<std::size_t>();
  c.action_history = j.at("action_history").get<std::size_t>();
  c.num_tasks = j.at("num_tasks").get<std::size_t>();
  c.effectors = j.at("effectors").get<std::size_t>();
  c.proprio_dim = j.at("proprio_dim").get<std::size_t>();
  c.time_embed_dim = j.at("time_embed_dim").get<std::size_t>();
  c.lambda_mod = j.at("lambda_mod").get<float>();
  c.eps_mod = j.at("eps_mod").get<float>();
  c.sigma = j.at("sigma").get<float>();
  c.d_max = j.at("d_max").get<float>();
  c.lambda_obs = j.at("lambda_obs").get<float>();
  c.lambda_act = j.at("lambda_act").get<float>();
  c.lambda_depth = j.at("lambda_depth").get<float>();
  c.lambda_pose = j.at("lambda_pose").get<float>();
  c.lambda_weight = j.at("lambda_weight").get<float>();
  c.repr = repr_from_string(j.at("repr").get<std::string>());
  c.gasam = j.at("gasam").get<bool>();
}

}  // namespace

PolicyModel::PolicyModel(const PolicyConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t dv = config.embed_dim_video;
  const std::size_t da = config.embed_dim_action;
  const std::size_t f = config.time_embed_dim;
  PolicyParams& p = params_;

  p.tokenizer.weight = init_normal({config_.patch_value_dim(), dv}, rng);
  p.tokenizer.bias = init_const({1, dv}, 0.0f);
  p.tokenizer.pos_step = init_normal({config.obs_window + config.horizon, dv}, rng);
  p.tokenizer.pos_view = init_normal({config.views, dv}, rng);
  p.tokenizer.pos_row = init_normal({config_.tok_rows(), dv}, rng);
  p.tokenizer.pos_col = init_normal({config_.tok_cols(), dv}, rng);

  p.task_embedding = init_normal({config.num_tasks, dv}, rng);
  p.proprio_embed = init_linear(config.proprio_dim, dv, rng);
  p.action_hist_embed =
      init_linear(config.action_history * config.action_dim, dv, rng);
  p.action_embed = init_linear(config.action_dim, da, rng);
  p.action_pos = init_normal({config.chunk, da}, rng);
  p.time_video = init_linear(f, dv, rng);
  p.time_action = init_linear(f, da, rng);

  for (std::size_t i = 0; i < config.layers; ++i) {
    VideoLayerParams l;
    l.ln_attn = init_layer_norm(dv);
    l.ln_mlp = init_layer_norm(dv);
    l.attn = init_attention(dv, dv, dv, rng);
    l.mlp_in = init_linear(dv, kMlpMultiplier * dv, rng);
    l.mlp_out = init_linear(kMlpMultiplier * dv, dv, rng);
    l.ada = init_linear_small(dv, 6 * dv, rng);  // near-identity start
    p.video_layers.push_back(std::move(l));

    ActionLayerParams a;
    a.ln_self = init_layer_norm(da);
    a.ln_cross = init_layer_norm(da);
    a.ln_mlp = init_layer_norm(da);
    a.self_attn = init_attention(da, da, da, rng);
    a.cross_attn = init_attention(da, dv, da, rng);
    a.mlp_in = init_linear(da, kMlpMultiplier * da, rng);
    a.mlp_out = init_linear(kMlpMultiplier * da, da, rng);
    a.ada = init_linear_small(da, 9 * da, rng);
    p.action_layers.push_back(std::move(a));
  }

  p.video_head_ln = init_layer_norm(dv);
  p.video_head = init_linear_small(dv, config_.patch_value_dim(), rng);
  p.action_head_ln = init_layer_norm(da);
  p.action_head = init_linear_small(da, config.action_dim, rng);

  p.geo.depth_queries = init_normal({config.horizon * config.views, dv}, rng);
  p.geo.ee_queries = init_normal({config.horizon * config.effectors, dv}, rng);
  p.geo.ln_query = init_layer_norm(dv);
  p.geo.ln_mlp = init_layer_norm(dv);
  p.geo.ln_head = init_layer_norm(dv);
  p.geo.cross = init_attention(dv, dv, dv, rng);
  p.geo.mlp_in = init_linear(dv, kMlpMultiplier * dv, rng);
  p.geo.mlp_out = init_linear(kMlpMultiplier * dv, dv, rng);
  p.geo.time_video = init_linear(f, dv, rng);
  p.geo.time_action = init_linear(f, dv, rng);
  // softplus(0.6) ~= 1.04 m: start depth near the workspace scale
  p.geo.depth_head = init_linear_small(dv, config_.tokens_per_view(), rng, 0.6f);
  p.geo.ee_head = init_linear_small(dv, 3, rng);

  p.action_norm_mean = Tensor({config.action_dim}, 0.0f);
  p.action_norm_std = Tensor({config.action_dim}, 1.0f);
}

std::vector<PolicyModel::NamedParam> PolicyModel::named_params() {
  std::vector<NamedParam> out;
  visit_params(params_, [&](const std::string& name, Tensor& t, ParamGroup g) {
    out.push_back({name, t, g});
  });
  return out;
}

PolicyModel PolicyModel::worker_view() const {
  PolicyModel view;
  view.config_ = config_;
  view.params_ = params_;  // shallow: shared node handles
  visit_params(view.params_, [](const std::string&, Tensor& t, ParamGroup) {
    t = Tensor::leaf_view(t);
  });
  return view;
}

void PolicyModel::set_trainable(bool stage1, bool action_expert,
                                bool geometry_expert) {
  visit_params(params_, [&](const std::string&, Tensor& t, ParamGroup g) {
    switch (g) {
      case ParamGroup::kStage1: t.set_requires_grad(stage1); break;
      case ParamGroup::kActionExpert: t.set_requires_grad(action_expert); break;
      case ParamGroup::kGeometryExpert: t.set_requires_grad(geometry_expert); break;
      case ParamGroup::kStats: t.set_requires_grad(false); break;
    }
  });
}

void PolicyModel::save(const std::string& dir) const {
  std::vector<std::pair<std::string, Tensor>> tensors;
  PolicyParams& mutable_params = const_cast<PolicyParams&>(params_);
  visit_params(mutable_params, [&](const std::string& name, Tensor& t, ParamGroup) {
    tensors.emplace_back(name, t);
  });
  save_checkpoint(dir, tensors);
  json j;
  config_to_json(config_, j);
  std::ofstream out(std::filesystem::path(dir) / "config.json");
  if (!out) throw Error("cannot write config.json in " + dir);
  out << j.dump(2) << "\n";
}

PolicyModel PolicyModel::load(const std::string& dir) {
  const auto config_path = std::filesystem::path(dir) / "config.json";
  std::ifstream in(config_path);
  if (!in) throw CheckpointCorruptError("missing config.json in " + dir);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw CheckpointCorruptError("unreadable config.json: " + std::string(e.what()));
  }
  PolicyConfig config;
  config_from_json(j, config);

  Rng init_rng(0);
  PolicyModel model(config, init_rng);

  std::map<std::string, Tensor> loaded;
  for (auto& [name, tensor] : load_checkpoint(dir)) loaded.emplace(name, tensor);

  visit_params(model.params_, [&](const std::string& name, Tensor& t, ParamGroup) {
    auto it = loaded.find(name);
    if (it == loaded.end()) {
      throw CheckpointCorruptError("checkpoint missing tensor " + name);
    }
    if (it->second.shape() != t.shape()) {
      throw CheckpointCorruptError("checkpoint shape mismatch for " + name);
    }
    const bool grad = t.requires_grad();
    t = it->second;
    t.set_requires_grad(grad);
    loaded.erase(it);
  });
  if (!loaded.empty()) {
    throw CheckpointCorruptError("checkpoint has unexpected tensor " +
                                 loaded.begin()->first);
  }
  return model;
}

// ---- forward helpers -------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const LinearParams& p) {
  return add(matmul(x, p.weight), p.bias);
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t t = x.shape()[0];
  const std::size_t d = x.shape()[1];
  return transpose(reshape(x, {t, heads, d / heads}), 0, 1);
}

Tensor merge_heads(const Tensor& x) {
  const Shape& s = x.shape();
  return reshape(transpose(x, 0, 1), {s[1], s[0] * s[2]});
}

Tensor attention_block(const Tensor& q_in, const Tensor& kv_in,
                       const AttentionParams& p, std::size_t heads,
                       const Tensor& log_bias) {
  Tensor q = split_heads(linear(q_in, p.query), heads);
  Tensor k = split_heads(linear(kv_in, p.key), heads);
  Tensor v = split_heads(linear(kv_in, p.value), heads);
  return linear(merge_heads(gasam_attention(q, k, v, log_bias)), p.out);
}

Tensor modulate(const Tensor& x, const LayerNormParams& ln, const Tensor& shift,
                const Tensor& scl) {
  Tensor normed = layer_norm(x, ln.gamma, ln.beta, 1e-6f);
  return add(mul(normed, affine(scl, 1.0f, 1.0f)), shift);
}

Tensor mlp_block(const Tensor& x, const LinearParams& in, const LinearParams& out) {
  return linear(gelu(linear(x, in)), out);
}

Tensor sinusoidal_embed(float tau, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<float> v(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq =
        std::pow(1000.0, static_cast<double>(k) /
                             std::max<std::size_t>(1, half - 1));
    v[k] = static_cast<float>(std::sin(tau * freq));
    v[half + k] = static_cast<float>(std::cos(tau * freq));
  }
  return Tensor(Shape{1, dim}, std::move(v));
}

Tensor time_conditioning(float tau, std::size_t dim, const LinearParams& proj) {
  return gelu(linear(sinusoidal_embed(tau, dim), proj));
}

Tensor video_layer_fwd(Tensor x, const VideoLayerParams& lp, const Tensor& temb,
                       std::size_t heads, std::size_t dim) {
  Tensor m = linear(temb, lp.ada);  // (1, 6D)
  auto md = [&](std::size_t k) { return slice(m, 1, k * dim, dim); };
  Tensor h = modulate(x, lp.ln_attn, md(0), md(1));
  x = add(x, mul(attention_block(h, h, lp.attn, heads, Tensor()), md(2)));
  Tensor h2 = modulate(x, lp.ln_mlp, md(3), md(4));
  x = add(x, mul(mlp_block(h2, lp.mlp_in, lp.mlp_out), md(5)));
  return x;
}

Tensor action_layer_fwd(Tensor a, const ActionLayerParams& lp, const Tensor& video_kv,
                        const Tensor& temb, std::size_t heads, std::size_t dim,
                        const Tensor& log_bias) {
  Tensor m = linear(temb, lp.ada);  // (1, 9D)
  auto md = [&](std::size_t k) { return slice(m, 1, k * dim, dim); };
  Tensor h = modulate(a, lp.ln_self, md(0), md(1));
  a = add(a, mul(attention_block(h, h, lp.self_attn, heads, Tensor()), md(2)));
  Tensor h2 = modulate(a, lp.ln_cross, md(3), md(4));
  a = add(a,
          mul(attention_block(h2, video_kv, lp.cross_attn, heads, log_bias), md(5)));
  Tensor h3 = modulate(a, lp.ln_mlp, md(6), md(7));
  a = add(a, mul(mlp_block(h3, lp.mlp_in, lp.mlp_out), md(8)));
  return a;
}

// elementwise min built from kernels: min(a, b) = a - relu(a - b)
Tensor ew_min(const Tensor& a, const Tensor& b) { return sub(a, relu(sub(a, b))); }

std::vector<std::size_t> upsample_index_map(std::size_t img_h, std::size_t img_w,
                                            std::size_t patch) {
  const std::size_t cols = img_w / patch;
  std::vector<std::size_t> map(img_h * img_w);
  for (std::size_t i = 0; i < img_h; ++i) {
    for (std::size_t j = 0; j < img_w; ++j) {
      map[i * img_w + j] = (i / patch) * cols + j / patch;
    }
  }
  return map;
}

}  // namespace

Tensor understanding_encode(const PolicyConfig& config, const PolicyParams& params,
                            std::size_t task_id, const std::vector<float>& proprio) {
  if (task_id >= config.num_tasks) {
    throw UnknownTaskError("task id " + std::to_string(task_id) +
                           " outside vocabulary of " +
                           std::to_string(config.num_tasks));
  }
  if (proprio.size() != config.proprio_dim) {
    throw ShapeMismatchError("understanding_encode: proprio dim mismatch");
  }
  for (float v : proprio) {
    if (!std::isfinite(v)) throw NonFiniteError("understanding_encode: proprio");
  }
  Tensor task_token = gather_rows(params.task_embedding, {task_id});
  Tensor prop(Shape{1, config.proprio_dim}, std::vector<float>(proprio));
  Tensor prop_token = linear(prop, params.proprio_embed);
  return concat({task_token, prop_token}, 0);
}

Tensor gasam_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& log_bias) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 3 || ks.size() != 3 || v.shape() != ks || qs[0] != ks[0] ||
      qs[2] != ks[2]) {
    throw ShapeMismatchError("gasam_attention: expected (heads, T, dh) operands");
  }
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(qs[2]));
  Tensor logits = scale(matmul(q, transpose(k, 1, 2)), inv_sqrt_d);
  if (log_bias.defined()) {
    if (log_bias.size() != ks[1]) {
      throw ShapeMismatchError("gasam_attention: bias length must match keys");
    }
    logits = add(logits, reshape(log_bias, {1, 1, ks[1]}));
  }
  return matmul(softmax_lastdim(logits), v);
}

Tensor gasam_bias(const PolicyConfig& config, const Tensor& token_weights) {
  if (token_weights.size() != config.modulated_tokens()) {
    throw ShapeMismatchError("gasam_bias: weight count must match the modulated span");
  }
  Tensor bias_mod = scale(log(affine(reshape(token_weights,
                                             {token_weights.size()}),
                                     1.0f, config.eps_mod)),
                          config.lambda_mod);
  // history positions carry zero bias; modulation targets future-frame
  // tokens, or the history span itself when no future tokens exist
  std::vector<Tensor> parts;
  if (config.has_future_tokens()) {
    parts.push_back(Tensor(Shape{config.history_tokens()}, 0.0f));
    parts.push_back(bias_mod);
  } else {
    parts.push_back(bias_mod);
  }
  parts.push_back(Tensor(Shape{config.cond_tokens()}, 0.0f));
  return concat(parts, 0);
}

EncodedContext encode_context(const PolicyConfig& config, const PolicyParams& params,
                              const ComposedInput& history, std::size_t task_id,
                              const std::vector<float>& proprio,
                              const std::vector<float>& action_history) {
  if (history.steps != config.obs_window || history.views != config.views ||
      history.channels != config.in_channels()) {
    throw ShapeMismatchError("encode_context: history layout does not match config");
  }
  if (action_history.size() != config.action_history * config.action_dim) {
    throw ShapeMismatchError("encode_context: action history length mismatch");
  }
  EncodedContext ctx;
  ctx.history_tokens = tokenize(history, config.patch, params.tokenizer, 0);
  Tensor understanding = understanding_encode(config, params, task_id, proprio);
  Tensor hist(Shape{1, action_history.size()}, std::vector<float>(action_history));
  Tensor action_token = linear(hist, params.action_hist_embed);
  ctx.cond_tokens = concat({understanding, action_token}, 0);
  return ctx;
}

GeometryPrediction geometry_expert_forward(const PolicyConfig& config,
                                           const PolicyParams& params,
                                           const EncodedContext& context,
                                           float tau_v, float tau_a,
                                           bool stop_gradient) {
  if (!(tau_v >= 0.0f && tau_v <= 1.0f && tau_a >= 0.0f && tau_a <= 1.0f)) {
    throw Error("geometry_expert_forward: timesteps must lie in [0, 1]");
  }
  const GeometryExpertParams& g = params.geo;
  Tensor hist = stop_gradient ? context.history_tokens.detach()
                              : context.history_tokens;
  Tensor cond = stop_gradient ? context.cond_tokens.detach() : context.cond_tokens;
  Tensor keys = concat({hist, cond}, 0);

  Tensor queries = concat({g.depth_queries, g.ee_queries}, 0);
  Tensor normed = layer_norm(queries, g.ln_query.gamma, g.ln_query.beta, 1e-6f);
  Tensor q = add(queries, attention_block(normed, keys, g.cross, config.heads,
                                          Tensor()));
  Tensor q_mlp = layer_norm(q, g.ln_mlp.gamma, g.ln_mlp.beta, 1e-6f);
  q = add(q, mlp_block(q_mlp, g.mlp_in, g.mlp_out));

  // branch noise levels enter at the head input
  Tensor time_in = add(linear(sinusoidal_embed(tau_v, config.time_embed_dim),
                              g.time_video),
                       linear(sinusoidal_embed(tau_a, config.time_embed_dim),
                              g.time_action));
  Tensor head_in = add(layer_norm(q, g.ln_head.gamma, g.ln_head.beta, 1e-6f),
                       time_in);

  const std::size_t n_depth = config.horizon * config.views;
  const std::size_t n_ee = config.horizon * config.effectors;
  GeometryPrediction out;
  out.depth_tokens = softplus(linear(slice(head_in, 0, 0, n_depth), g.depth_head));
  out.ee_positions = linear(slice(head_in, 0, n_depth, n_ee), g.ee_head);
  return out;
}

Tensor predicted_weight_tokens(const PolicyConfig& config,
                               const std::vector<CameraModel>& cameras,
                               const GeometryPrediction& geometry) {
  if (cameras.size() != config.views) {
    throw ShapeMismatchError("predicted_weight_tokens: camera count mismatch");
  }
  const std::size_t plane = config.img_h * config.img_w;
  const float inv2s2 = 1.0f / (2.0f * config.sigma * config.sigma);
  const std::vector<std::size_t> up_map =
      upsample_index_map(config.img_h, config.img_w, config.patch);

  std::vector<Tensor> ray_consts(config.views), center_consts(config.views);
  for (std::size_t v = 0; v < config.views; ++v) {
    ray_consts[v] = Tensor(Shape{plane, 3}, pixel_rays(cameras[v]));
    const auto c = camera_center_f32(cameras[v]);
    center_consts[v] = Tensor(Shape{1, 3}, {c[0], c[1], c[2]});
  }

  std::vector<Tensor> token_blocks;
  for (std::size_t s = 0; s < config.horizon; ++s) {
    for (std::size_t v = 0; v < config.views; ++v) {
      Tensor depth_row = reshape(
          slice(geometry.depth_tokens, 0, s * config.views + v, 1),
          {config.tokens_per_view(), 1});
      Tensor depth_pix = gather_rows(depth_row, up_map);  // (plane, 1)
      Tensor points = add(mul(ray_consts[v], depth_pix), center_consts[v]);

      Tensor dist2;
      for (std::size_t e = 0; e < config.effectors; ++e) {
        Tensor ee_row =
            slice(geometry.ee_positions, 0, s * config.effectors + e, 1);
        Tensor diff = sub(points, ee_row);
        Tensor d2 = sum(mul(diff, diff), 1);
        dist2 = dist2.defined() ? ew_min(dist2, d2) : d2;
      }
      Tensor w_pix = clamp_min(exp(affine(dist2, -inv2s2, 0.0f)), kWeightFloor);
      Tensor grid = reshape(w_pix, {config.tok_rows(), config.patch,
                                    config.tok_cols(), config.patch});
      Tensor tokens = mean(mean(grid, 3), 1);  // (tok_rows, tok_cols)
      token_blocks.push_back(reshape(tokens, {1, config.tokens_per_view()}));
    }
  }
  Tensor stacked = concat(token_blocks, 0);
  return reshape(stacked, {config.horizon * config.views * config.tokens_per_view()});
}

DenoiseOutput joint_denoise(const PolicyConfig& config, const PolicyParams& params,
                            const EncodedContext& context, const JointState& state,
                            float tau_v, float tau_a, bool gasam_enabled) {
  if (state.noised_actions.size() != config.chunk * config.action_dim) {
    throw ShapeMismatchError("joint_denoise: action chunk length mismatch");
  }
  const std::size_t dv = config.embed_dim_video;
  const std::size_t da = config.embed_dim_action;

  std::vector<Tensor> video_parts{context.history_tokens};
  if (config.has_future_tokens()) {
    if (state.noised_future == nullptr) {
      throw ShapeMismatchError("joint_denoise: missing noised future frames");
    }
    video_parts.push_back(tokenize(*state.noised_future, config.patch,
                                   params.tokenizer, config.obs_window));
  } else if (state.noised_future != nullptr) {
    throw ShapeMismatchError("joint_denoise: future frames in action-only mode");
  }
  video_parts.push_back(context.cond_tokens);
  Tensor video_seq = concat(video_parts, 0);

  Tensor actions(Shape{config.chunk, config.action_dim},
                 std::vector<float>(state.noised_actions));
  Tensor act_seq = add(linear(actions, params.action_embed), params.action_pos);

  Tensor temb_v = time_conditioning(tau_v, config.time_embed_dim, params.time_video);
  Tensor temb_a = time_conditioning(tau_a, config.time_embed_dim, params.time_action);

  Tensor bias;
  if (gasam_enabled && config.lambda_mod != 0.0f && state.gasam_weights.defined()) {
    bias = gasam_bias(config, state.gasam_weights);
  }

  DenoiseOutput out;
  for (std::size_t l = 0; l < config.layers; ++l) {
    video_seq = video_layer_fwd(video_seq, params.video_layers[l], temb_v,
                                config.heads, dv);
    out.video_activations.push_back(video_seq);
    act_seq = action_layer_fwd(act_seq, params.action_layers[l], video_seq, temb_a,
                               config.heads, da, bias);
  }

  if (config.has_future_tokens()) {
    Tensor future_feat =
        slice(video_seq, 0, config.history_tokens(), config.future_tokens());
    out.video_velocity_tokens =
        linear(layer_norm(future_feat, params.video_head_ln.gamma,
                          params.video_head_ln.beta, 1e-6f),
               params.video_head);
  }
  out.action_velocity =
      linear(layer_norm(act_seq, params.action_head_ln.gamma,
                        params.action_head_ln.beta, 1e-6f),
             params.action_head);
  return out;
}

Tensor geometry_loss(const PolicyConfig& config, const GeometryPrediction& geometry,
                     const Tensor& predicted_weights, const GeometryTargets& targets,
                     const std::vector<CameraModel>& cameras) {
  const std::size_t plane = config.img_h * config.img_w;
  const std::size_t frames = config.horizon * config.views;
  if (targets.depth.size() != frames * plane ||
      targets.valid.size() != frames * plane) {
    throw ShapeMismatchError("geometry_loss: depth target extents mismatch");
  }
  if (targets.ee_positions.size() != config.horizon * config.effectors * 3) {
    throw ShapeMismatchError("geometry_loss: ee target extents mismatch");
  }
  if (predicted_weights.size() != targets.weight_tokens.size()) {
    throw ShapeMismatchError("geometry_loss: weight token extents mismatch");
  }
  (void)cameras;

  const std::vector<std::size_t> up_map =
      upsample_index_map(config.img_h, config.img_w, config.patch);

  // masked depth MSE over all future frames and views
  Tensor depth_sq_sum;
  double valid_count = 0.0;
  for (std::size_t s = 0; s < config.horizon; ++s) {
    for (std::size_t v = 0; v < config.views; ++v) {
      const std::size_t f = s * config.views + v;
      Tensor depth_row = reshape(slice(geometry.depth_tokens, 0, f, 1),
                                 {config.tokens_per_view(), 1});
      Tensor pred = gather_rows(depth_row, up_map);  // (plane, 1)
      std::vector<float> gt(targets.depth.begin() + f * plane,
                            targets.depth.begin() + (f + 1) * plane);
      std::vector<float> mask(plane);
      for (std::size_t i = 0; i < plane; ++i) {
        mask[i] = targets.valid[f * plane + i] ? 1.0f : 0.0f;
        valid_count += mask[i];
      }
      Tensor diff = sub(pred, Tensor(Shape{plane, 1}, std::move(gt)));
      Tensor masked = mul(mul(diff, diff), Tensor(Shape{plane, 1}, std::move(mask)));
      Tensor total = sum(masked);
      depth_sq_sum = depth_sq_sum.defined() ? add(depth_sq_sum, total) : total;
    }
  }
  Tensor loss;
  if (valid_count > 0.0) {
    loss = scale(depth_sq_sum,
                 config.lambda_depth / static_cast<float>(valid_count));
  } else {
    loss = Tensor::scalar(0.0f);
  }

  // mean squared 3-D end-effector error per future step
  Tensor ee_target(Shape{config.horizon * config.effectors, 3},
                   std::vector<float>(targets.ee_positions));
  Tensor ee_diff = sub(geometry.ee_positions, ee_target);
  Tensor ee_loss = mean(sum(mul(ee_diff, ee_diff), 1));
  loss = add(loss, scale(ee_loss, config.lambda_pose));

  Tensor w_target(Shape{predicted_weights.size()},
                  std::vector<float>(targets.weight_tokens));
  Tensor w_loss = mse(reshape(predicted_weights, {predicted_weights.size()}),
                      w_target);
  return add(loss, scale(w_loss, config.lambda_weight));
}

std::vector<float> velocity_tokens_to_frames(const PolicyConfig& config,
                                             const Tensor& tokens) {
  const std::size_t per_frame = config.tokens_per_view();
  const std::size_t c = config.in_channels();
  const std::size_t frame_values = c * config.img_h * config.img_w;
  if (tokens.shape() !=
      Shape{config.horizon * config.views * per_frame, config.patch_value_dim()}) {
    throw ShapeMismatchError("velocity_tokens_to_frames: unexpected token shape");
  }
  std::vector<float> out(config.horizon * config.views * frame_values);
  for (std::size_t s = 0; s < config.horizon; ++s) {
    for (std::size_t v = 0; v < config.views; ++v) {
      const std::size_t f = s * config.views + v;
      Tensor block = slice(tokens, 0, f * per_frame, per_frame);
      Tensor image = unpatchify(block.detach(), c, config.img_h, config.img_w,
                                config.patch);
      std::copy(image.values().begin(), image.values().end(),
                out.begin() + f * frame_values);
    }
  }
  return out;
}

std::vector<float> frames_to_token_values(const PolicyConfig& config,
                                          const std::vector<float>& frames) {
  const std::size_t c = config.in_channels();
  const std::size_t frame_values = c * config.img_h * config.img_w;
  const std::size_t n_frames = config.horizon * config.views;
  if (frames.size() != n_frames * frame_values) {
    throw ShapeMismatchError("frames_to_token_values: unexpected frame extents");
  }
  const std::vector<std::size_t> map =
      patch_index_map(c, config.img_h, config.img_w, config.patch);
  std::vector<float> out(frames.size());
  for (std::size_t f = 0; f < n_frames; ++f) {
    const float* src = frames.data() + f * frame_values;
    float* dst = out.data() + f * frame_values;
    for (std::size_t i = 0; i < map.size(); ++i) dst[i] = src[map[i]];
  }
  return out;
}

}  // namespace starry
