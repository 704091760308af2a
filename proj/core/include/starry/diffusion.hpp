#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "starry/rng.hpp"
#include "starry/tensor.hpp"

namespace starry {

// Independent uniform noise levels for the video and action branches.
struct BranchTimesteps {
  float video = 0.0f;
  float action = 0.0f;
};

BranchTimesteps sample_branch_timesteps(Rng& rng);

// Linear (rectified-flow) interpolant: noised = (1 - tau) * clean + tau * eps.
std::vector<float> forward_noise(const std::vector<float>& clean,
                                 const std::vector<float>& noise, float tau);

// Velocity regression target eps - clean, the interpolant's d/dtau.
std::vector<float> velocity_target(const std::vector<float>& clean,
                                   const std::vector<float>& noise);

// lambda_obs * mean((v_obs - t_obs)^2) + lambda_act * mean((v_act - t_act)^2).
// The observation branch may be undefined (action-only runs); its term is
// then dropped.
Tensor diffusion_loss(const Tensor& v_obs, const Tensor& v_obs_target,
                      const Tensor& v_act, const Tensor& v_act_target,
                      float lambda_obs, float lambda_act);

struct DiffusionSample {
  std::vector<float> video;
  std::vector<float> action;
};

// Writes branch velocities for the given noised state at (tau_v, tau_a).
using Denoiser = std::function<void(
    const std::vector<float>& noised_video, const std::vector<float>& noised_action,
    float tau_v, float tau_a, std::vector<float>& velocity_video,
    std::vector<float>& velocity_action)>;

// Integrates both branches from pure Gaussian noise at tau=1 down to 0 on a
// shared uniform Euler grid. video_len may be 0 (action-only).
DiffusionSample euler_sample(const Denoiser& denoiser, std::size_t video_len,
                             std::size_t action_len, std::size_t steps, Rng& rng);

}  // namespace starry
