#pragma once

#include <string>
#include <vector>

#include "starry/camera.hpp"
#include "starry/composer.hpp"
#include "starry/tensor.hpp"

namespace starry {

// Predictive-representation axis of the ablation matrix.
//   kAct: no future-frame tokens, observation loss disabled
//   kApp: future RGB prediction, no depth channel / overlay / geometry losses
//   kSt:  full spatial-temporal modeling
enum class Repr { kAct, kApp, kSt };

Repr repr_from_string(const std::string& name);
std::string repr_to_string(Repr repr);

struct PolicyConfig {
  std::size_t embed_dim_video = 64;
  std::size_t embed_dim_action = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t horizon = 4;  // H future frames
  std::size_t chunk = 8;    // action steps per query
  std::size_t action_dim = 4;
  std::size_t patch = 8;
  std::size_t views = 2;
  std::size_t img_h = 64;
  std::size_t img_w = 64;
  std::size_t obs_window = 2;
  std::size_t action_history = 4;  // past actions conditioning the policy
  std::size_t num_tasks = 2;
  std::size_t effectors = 1;
  std::size_t proprio_dim = 4;  // ee xyz + grip state
  std::size_t time_embed_dim = 32;

  float lambda_mod = 1.0f;  // GASAM modulation strength
  float eps_mod = 1e-6f;    // epsilon inside the GASAM log
  float sigma = 0.15f;      // distance-to-weight scale, meters
  float d_max = 3.0f;       // depth normalization scale

  float lambda_obs = 1.0f;
  float lambda_act = 2.0f;
  float lambda_depth = 1.0f;
  float lambda_pose = 1.0f;
  float lambda_weight = 1.0f;

  Repr repr = Repr::kSt;
  bool gasam = true;

  void validate() const;

  bool has_future_tokens() const { return repr != Repr::kAct; }
  bool has_geometry_losses() const { return repr != Repr::kApp; }
  // appearance-only runs drop the depth channel and trajectory overlay
  bool has_depth_channel() const { return repr != Repr::kApp; }
  bool has_overlay() const { return repr != Repr::kApp; }
  float effective_lambda_obs() const {
    return repr == Repr::kAct ? 0.0f : lambda_obs;
  }

  std::size_t in_channels() const { return has_depth_channel() ? 4 : 3; }
  std::size_t tok_rows() const { return img_h / patch; }
  std::size_t tok_cols() const { return img_w / patch; }
  std::size_t tokens_per_view() const { return tok_rows() * tok_cols(); }
  std::size_t history_tokens() const {
    return obs_window * views * tokens_per_view();
  }
  std::size_t future_tokens() const {
    return has_future_tokens() ? horizon * views * tokens_per_view() : 0;
  }
  std::size_t cond_tokens() const { return 3; }  // task, proprio, action history
  std::size_t video_seq_len() const {
    return history_tokens() + future_tokens() + cond_tokens();
  }
  std::size_t modulated_tokens() const {
    // GASAM targets future-frame tokens; with none present (action-only),
    // the predicted future weights collapse onto the history positions
    return has_future_tokens() ? future_tokens() : history_tokens();
  }
  std::size_t patch_value_dim() const { return in_channels() * patch * patch; }
  std::size_t future_value_len() const {
    return horizon * views * in_channels() * img_h * img_w;
  }
};

struct LinearParams {
  Tensor weight, bias;
};

struct LayerNormParams {
  Tensor gamma, beta;
};

struct AttentionParams {
  LinearParams query, key, value, out;
};

struct VideoLayerParams {
  LayerNormParams ln_attn, ln_mlp;
  AttentionParams attn;
  LinearParams mlp_in, mlp_out;
  LinearParams ada;  // time embedding -> 6 * D modulation
};

struct ActionLayerParams {
  LayerNormParams ln_self, ln_cross, ln_mlp;
  AttentionParams self_attn, cross_attn;
  LinearParams mlp_in, mlp_out;
  LinearParams ada;  // time embedding -> 9 * D modulation
};

struct GeometryExpertParams {
  Tensor depth_queries;  // (horizon * views, Dv)
  Tensor ee_queries;     // (horizon * effectors, Dv)
  LayerNormParams ln_query, ln_mlp, ln_head;
  AttentionParams cross;
  LinearParams mlp_in, mlp_out;
  LinearParams time_video, time_action;  // sinusoidal embed -> Dv, head input
  LinearParams depth_head;               // Dv -> tokens_per_view
  LinearParams ee_head;                  // Dv -> 3
};

struct PolicyParams {
  TokenizerParams tokenizer;
  Tensor task_embedding;  // (num_tasks, Dv)
  LinearParams proprio_embed;
  LinearParams action_hist_embed;
  LinearParams action_embed;
  Tensor action_pos;  // (chunk, Da)
  LinearParams time_video, time_action;  // sinusoidal embed -> branch cond
  std::vector<VideoLayerParams> video_layers;
  std::vector<ActionLayerParams> action_layers;
  LayerNormParams video_head_ln;
  LinearParams video_head;  // Dv -> patch^2 * C velocity per future token
  LayerNormParams action_head_ln;
  LinearParams action_head;  // Da -> action_dim velocity
  GeometryExpertParams geo;
  Tensor action_norm_mean, action_norm_std;  // dataset statistics, not trained
};

// Parameter groups for the staged training freeze contracts.
enum class ParamGroup { kStage1, kActionExpert, kGeometryExpert, kStats };

class PolicyModel {
 public:
  PolicyModel(const PolicyConfig& config, Rng& rng);

  static PolicyModel load(const std::string& dir);
  void save(const std::string& dir) const;

  const PolicyConfig& config() const { return config_; }
  PolicyParams& params() { return params_; }
  const PolicyParams& params() const { return params_; }

  // Canonical (name, tensor, group) listing; order defines the checkpoint
  // manifest and the optimizer state alignment.
  struct NamedParam {
    std::string name;
    Tensor tensor;
    ParamGroup group;
  };
  std::vector<NamedParam> named_params();

  // Shares parameter storage but gives every tensor a private grad slot;
  // each batch worker denoises through its own view.
  PolicyModel worker_view() const;

  void set_trainable(bool stage1, bool action_expert, bool geometry_expert);

 private:
  PolicyModel() = default;
  PolicyConfig config_;
  PolicyParams params_;
};

// ---- forward pieces ---------------------------------------------------------

// [task embedding; linear proprio], 2 tokens of width Dv.
Tensor understanding_encode(const PolicyConfig& config, const PolicyParams& params,
                            std::size_t task_id, const std::vector<float>& proprio);

// Softmax(Q K^T / sqrt(d) + lambda * log(w + eps)) V with the log-bias
// broadcast over heads and queries. Q (heads, Tq, dh); K, V (heads, Tk, dh);
// bias_weights is a length-Tk weight vector aligned with the keys, where
// non-modulated positions carry weight 1 handled by the caller via
// `gasam_bias`. Undefined bias or lambda == 0 is exactly unmodulated.
Tensor gasam_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const Tensor& log_bias);

// lambda * log(w + eps) for the modulated span, spliced into a zero bias
// vector covering the whole key sequence.
Tensor gasam_bias(const PolicyConfig& config, const Tensor& token_weights);

struct EncodedContext {
  Tensor history_tokens;  // (history_tokens, Dv)
  Tensor cond_tokens;     // (3, Dv): task, proprio, action history
};

EncodedContext encode_context(const PolicyConfig& config, const PolicyParams& params,
                              const ComposedInput& history, std::size_t task_id,
                              const std::vector<float>& proprio,
                              const std::vector<float>& action_history);

struct GeometryPrediction {
  Tensor depth_tokens;  // (horizon * views, tokens_per_view), meters, >= 0
  Tensor ee_positions;  // (horizon * effectors, 3), world meters
};

GeometryPrediction geometry_expert_forward(const PolicyConfig& config,
                                           const PolicyParams& params,
                                           const EncodedContext& context,
                                           float tau_v, float tau_a,
                                           bool stop_gradient);

// Differentiable path from predicted geometry to GASAM token weights,
// ordered (step, view, row, col) to align with the future-token layout.
Tensor predicted_weight_tokens(const PolicyConfig& config,
                               const std::vector<CameraModel>& cameras,
                               const GeometryPrediction& geometry);

struct JointState {
  const ComposedInput* noised_future = nullptr;  // null in action-only mode
  std::vector<float> noised_actions;             // (chunk * action_dim)
  Tensor gasam_weights;  // modulated-span token weights; undefined -> off
};

struct DenoiseOutput {
  Tensor video_velocity_tokens;  // (future tokens, patch^2 * C); undefined in act mode
  Tensor action_velocity;        // (chunk, action_dim)
  std::vector<Tensor> video_activations;  // per-layer video sequences
};

DenoiseOutput joint_denoise(const PolicyConfig& config, const PolicyParams& params,
                            const EncodedContext& context, const JointState& state,
                            float tau_v, float tau_a, bool gasam_enabled);

// lambda_d * masked depth MSE + lambda_p * mean squared ee error +
// lambda_w * MSE between predicted and target weight tokens.
struct GeometryTargets {
  std::vector<float> depth;          // (horizon, views, H, W) meters
  std::vector<std::uint8_t> valid;   // same extents
  std::vector<float> ee_positions;   // (horizon * effectors * 3)
  std::vector<float> weight_tokens;  // (horizon * views * tokens_per_view)
};

Tensor geometry_loss(const PolicyConfig& config, const GeometryPrediction& geometry,
                     const Tensor& predicted_weights, const GeometryTargets& targets,
                     const std::vector<CameraModel>& cameras);

// Velocity tokens back to frame layout (horizon, views, C, H, W).
std::vector<float> velocity_tokens_to_frames(const PolicyConfig& config,
                                             const Tensor& tokens);

// Frame-layout future values to per-token targets via the patchify map.
std::vector<float> frames_to_token_values(const PolicyConfig& config,
                                          const std::vector<float>& frames);

}  // namespace starry
