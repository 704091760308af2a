#include "starry/diffusion.hpp"

#include <cmath>

#include "starry/ops.hpp"

namespace starry {

BranchTimesteps sample_branch_timesteps(Rng& rng) {
  BranchTimesteps t;
  t.video = static_cast<float>(rng.uniform());
  t.action = static_cast<float>(rng.uniform());
  return t;
}

std::vector<float> forward_noise(const std::vector<float>& clean,
                                 const std::vector<float>& noise, float tau) {
  if (clean.size() != noise.size()) {
    throw ShapeMismatchError("forward_noise: clean/noise lengths differ");
  }
  std::vector<float> out(clean.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0f - tau) * clean[i] + tau * noise[i];
  }
  return out;
}

std::vector<float> velocity_target(const std::vector<float>& clean,
                                   const std::vector<float>& noise) {
  if (clean.size() != noise.size()) {
    throw ShapeMismatchError("velocity_target: clean/noise lengths differ");
  }
  std::vector<float> out(clean.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = noise[i] - clean[i];
  return out;
}

Tensor diffusion_loss(const Tensor& v_obs, const Tensor& v_obs_target,
                      const Tensor& v_act, const Tensor& v_act_target,
                      float lambda_obs, float lambda_act) {
  Tensor loss = scale(mse(v_act, v_act_target), lambda_act);
  if (v_obs.defined() && lambda_obs != 0.0f) {
    loss = add(loss, scale(mse(v_obs, v_obs_target), lambda_obs));
  }
  return loss;
}

DiffusionSample euler_sample(const Denoiser& denoiser, std::size_t video_len,
                             std::size_t action_len, std::size_t steps, Rng& rng) {
  if (steps < 1) throw Error("euler_sample: steps must be >= 1");

  DiffusionSample state;
  state.video.resize(video_len);
  state.action.resize(action_len);
  for (float& v : state.video) v = static_cast<float>(rng.normal());
  for (float& v : state.action) v = static_cast<float>(rng.normal());

  const float dt = 1.0f / static_cast<float>(steps);
  std::vector<float> vel_video(video_len), vel_action(action_len);
  for (std::size_t k = 0; k < steps; ++k) {
    const float tau = 1.0f - static_cast<float>(k) * dt;
    denoiser(state.video, state.action, tau, tau, vel_video, vel_action);
    for (std::size_t i = 0; i < video_len; ++i) {
      state.video[i] -= dt * vel_video[i];
    }
    for (std::size_t i = 0; i < action_len; ++i) {
      state.action[i] -= dt * vel_action[i];
    }
    for (float v : state.video) {
      if (!std::isfinite(v)) throw NonFiniteError("euler_sample: video state diverged");
    }
    for (float v : state.action) {
      if (!std::isfinite(v)) throw NonFiniteError("euler_sample: action state diverged");
    }
  }
  return state;
}

}  // namespace starry
