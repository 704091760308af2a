#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "starry/diffusion.hpp"
#include "starry/model.hpp"
#include "starry/ops.hpp"
#include "starry/rng.hpp"
#include "test_support.hpp"

using namespace starry;

namespace {

PolicyConfig toy_config(Repr repr = Repr::kSt) {
  PolicyConfig cfg;
  cfg.embed_dim_video = 16;
  cfg.embed_dim_action = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.horizon = 2;
  cfg.chunk = 4;
  cfg.action_dim = 3;
  cfg.patch = 8;
  cfg.views = 2;
  cfg.img_h = 16;
  cfg.img_w = 16;
  cfg.obs_window = 1;
  cfg.action_history = 2;
  cfg.num_tasks = 2;
  cfg.proprio_dim = 4;
  cfg.time_embed_dim = 8;
  cfg.repr = repr;
  return cfg;
}

ComposedInput random_composed(const PolicyConfig& cfg, std::size_t steps, Rng& rng) {
  ComposedInput x;
  x.steps = steps;
  x.views = cfg.views;
  x.channels = cfg.in_channels();
  x.height = cfg.img_h;
  x.width = cfg.img_w;
  x.data.resize(steps * cfg.views * x.frame_size());
  for (float& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return x;
}

std::vector<float> random_vec(std::size_t n, Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return v;
}

std::vector<CameraModel> toy_cameras(const PolicyConfig& cfg) {
  std::vector<CameraModel> cams;
  cams.push_back(look_at_camera({0.0, -0.85, 1.1}, {0.0, 0.0, 0.1},
                                cfg.img_w * 1.1, cfg.img_w * 1.1, cfg.img_w,
                                cfg.img_h));
  cams.push_back(look_at_camera({1.15, 0.05, 0.45}, {0.0, 0.0, 0.12},
                                cfg.img_w * 1.1, cfg.img_w * 1.1, cfg.img_w,
                                cfg.img_h));
  return cams;
}

struct ModelFixture {
  PolicyConfig cfg;
  PolicyModel model;
  ComposedInput history;
  ComposedInput future;
  std::vector<float> actions;
  std::vector<float> proprio;
  std::vector<float> action_history;

  explicit ModelFixture(Repr repr, std::uint64_t seed = 7)
      : cfg(toy_config(repr)), model([&] {
          Rng r(seed);
          return PolicyModel(toy_config(repr), r);
        }()) {
    Rng rng(Rng::mix(seed, 1));
    history = random_composed(cfg, cfg.obs_window, rng);
    future = random_composed(cfg, cfg.horizon, rng);
    actions = random_vec(cfg.chunk * cfg.action_dim, rng);
    proprio = random_vec(cfg.proprio_dim, rng);
    action_history = random_vec(cfg.action_history * cfg.action_dim, rng);
  }

  DenoiseOutput run(bool gasam_enabled, const Tensor& weights = Tensor()) {
    EncodedContext ctx = encode_context(cfg, model.params(), history, 0, proprio,
                                        action_history);
    JointState state;
    state.noised_future = cfg.has_future_tokens() ? &future : nullptr;
    state.noised_actions = actions;
    state.gasam_weights = weights;
    return joint_denoise(cfg, model.params(), ctx, state, 0.3f, 0.7f,
                         gasam_enabled);
  }
};

}  // namespace

TEST_CASE("understanding_encode contract") {
  PolicyConfig cfg = toy_config();
  Rng rng(3);
  PolicyModel model(cfg, rng);

  std::vector<float> proprio = {0.1f, -0.2f, 0.3f, 1.0f};
  Tensor s1 = understanding_encode(cfg, model.params(), 1, proprio);
  Tensor s2 = understanding_encode(cfg, model.params(), 1, proprio);
  CHECK(s1.values() == s2.values());
  CHECK(s1.shape() == Shape{2, cfg.embed_dim_video});

  Tensor other = understanding_encode(cfg, model.params(), 0, proprio);
  bool task_token_differs = false;
  for (std::size_t i = 0; i < cfg.embed_dim_video; ++i) {
    task_token_differs |= other.data()[i] != s1.data()[i];
  }
  CHECK(task_token_differs);

  SUBCASE("zero proprio with zero bias gives a zero token") {
    std::vector<float> zeros(cfg.proprio_dim, 0.0f);
    Tensor s = understanding_encode(cfg, model.params(), 0, zeros);
    for (std::size_t i = 0; i < cfg.embed_dim_video; ++i) {
      CHECK(s.data()[cfg.embed_dim_video + i] == 0.0f);
    }
  }
  SUBCASE("unknown task raises") {
    CHECK_THROWS_AS(understanding_encode(cfg, model.params(), 99, proprio),
                    UnknownTaskError);
  }
  SUBCASE("non-finite proprio raises") {
    std::vector<float> bad = proprio;
    bad[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(understanding_encode(cfg, model.params(), 0, bad),
                    NonFiniteError);
  }
}

TEST_CASE("gasam_attention neutrality and selectivity") {
  Rng rng(11);
  const std::size_t heads = 2, tq = 3, tk = 5, dh = 4;
  Tensor q = Tensor::randn({heads, tq, dh}, rng);
  Tensor k = Tensor::randn({heads, tk, dh}, rng);
  Tensor v = Tensor::randn({heads, tk, dh}, rng);

  SUBCASE("no bias and zero-bias agree exactly") {
    Tensor plain = gasam_attention(q, k, v, Tensor());
    Tensor zero_bias = gasam_attention(q, k, v, Tensor(Shape{tk}, 0.0f));
    CHECK(plain.values() == zero_bias.values());
  }
  SUBCASE("uniform weights reproduce unmodulated attention within 1e-6") {
    Tensor plain = gasam_attention(q, k, v, Tensor());
    // lambda * log(w + eps) with w == 0.37 everywhere: constant bias
    const float bias_val = 1.0f * std::log(0.37f + 1e-6f);
    Tensor biased = gasam_attention(q, k, v, Tensor(Shape{tk}, bias_val));
    for (std::size_t i = 0; i < plain.size(); ++i) {
      CHECK(biased.data()[i] == doctest::Approx(plain.data()[i]).epsilon(1e-6));
    }
  }
  SUBCASE("tied logits: probability ratio equals ((w_i+eps)/(w_j+eps))^lambda") {
    // identical key rows make every logit equal; identity values read the
    // attention row straight out of the output
    std::vector<float> krows(heads * tk * dh);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < tk; ++t) {
        for (std::size_t d = 0; d < dh; ++d) {
          krows[(h * tk + t) * dh + d] = 0.31f * static_cast<float>(d + 1);
        }
      }
    }
    Tensor k_tied(Shape{heads, tk, dh}, std::move(krows));
    std::vector<float> eye(heads * tk * tk, 0.0f);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < tk; ++t) eye[(h * tk + t) * tk + t] = 1.0f;
    }
    Tensor v_eye(Shape{heads, tk, tk}, std::move(eye));

    const float lambda = 1.7f, eps = 1e-6f;
    std::vector<float> w = {0.9f, 0.45f, 0.2f, 0.61f, 0.05f};
    std::vector<float> bias(tk);
    for (std::size_t i = 0; i < tk; ++i) bias[i] = lambda * std::log(w[i] + eps);
    Tensor probs = gasam_attention(q, k_tied, v_eye, Tensor(Shape{tk}, bias));

    for (std::size_t i = 1; i < tk; ++i) {
      const double measured =
          static_cast<double>(probs.data()[i]) / probs.data()[0];
      const double expected =
          std::pow((w[i] + eps) / (w[0] + eps), static_cast<double>(lambda));
      CHECK(std::abs(measured - expected) < 1e-4 * std::max(1.0, expected));
    }
  }
  SUBCASE("floor weight starves its key") {
    std::vector<float> krows(heads * tk * dh, 0.5f);  // tied logits
    Tensor k_tied(Shape{heads, tk, dh}, std::move(krows));
    std::vector<float> eye(heads * tk * tk, 0.0f);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < tk; ++t) eye[(h * tk + t) * tk + t] = 1.0f;
    }
    Tensor v_eye(Shape{heads, tk, tk}, std::move(eye));
    // two live keys: w = [1, floor, floor, floor, floor]
    std::vector<float> bias(tk);
    for (std::size_t i = 0; i < tk; ++i) {
      bias[i] = std::log((i == 0 ? 1.0f : kWeightFloor) + 1e-6f);
    }
    Tensor probs = gasam_attention(q, k_tied, v_eye, Tensor(Shape{tk}, bias));
    CHECK(probs.data()[0] > 0.99f);
  }
}

TEST_CASE("joint_denoise output contract and GASAM scope isolation") {
  ModelFixture fx(Repr::kSt);
  Rng wr(5);
  Tensor weights = Tensor::uniform({fx.cfg.modulated_tokens()}, wr, 0.05f, 1.0f);

  DenoiseOutput off = fx.run(false);
  DenoiseOutput on = fx.run(true, weights);

  SUBCASE("velocity shapes match the noised inputs") {
    CHECK(off.video_velocity_tokens.shape() ==
          Shape{fx.cfg.future_tokens(), fx.cfg.patch_value_dim()});
    CHECK(off.action_velocity.shape() == Shape{fx.cfg.chunk, fx.cfg.action_dim});
    std::vector<float> frames =
        velocity_tokens_to_frames(fx.cfg, off.video_velocity_tokens);
    CHECK(frames.size() == fx.cfg.future_value_len());
  }
  SUBCASE("video branch activations are bit-identical with GASAM toggled") {
    REQUIRE(on.video_activations.size() == off.video_activations.size());
    for (std::size_t l = 0; l < on.video_activations.size(); ++l) {
      CHECK(on.video_activations[l].values() == off.video_activations[l].values());
    }
    CHECK(on.video_velocity_tokens.values() == off.video_velocity_tokens.values());
  }
  SUBCASE("action branch responds to modulation") {
    bool differs = false;
    for (std::size_t i = 0; i < on.action_velocity.size(); ++i) {
      differs |= on.action_velocity.data()[i] != off.action_velocity.data()[i];
    }
    CHECK(differs);
  }
  SUBCASE("uniform weights leave the action branch unchanged within 1e-5") {
    DenoiseOutput uniform = fx.run(true, Tensor({fx.cfg.modulated_tokens()}, 1.0f));
    for (std::size_t i = 0; i < uniform.action_velocity.size(); ++i) {
      CHECK(uniform.action_velocity.data()[i] ==
            doctest::Approx(off.action_velocity.data()[i]).epsilon(1e-5));
    }
  }
  SUBCASE("lambda = 0 reproduces the unmodulated branch exactly") {
    ModelFixture fz(Repr::kSt);
    fz.cfg.lambda_mod = 0.0f;
    Rng wr2(6);
    Tensor w2 = Tensor::uniform({fz.cfg.modulated_tokens()}, wr2, 0.05f, 1.0f);
    DenoiseOutput a = fz.run(false);
    DenoiseOutput b = fz.run(true, w2);
    CHECK(a.action_velocity.values() == b.action_velocity.values());
  }
}

TEST_CASE("action-only mode: no future tokens, GASAM collapses onto history") {
  ModelFixture fx(Repr::kAct);
  CHECK(fx.cfg.future_tokens() == 0);
  CHECK(fx.cfg.modulated_tokens() == fx.cfg.history_tokens());

  Rng wr(9);
  Tensor weights = Tensor::uniform({fx.cfg.modulated_tokens()}, wr, 0.05f, 1.0f);
  DenoiseOutput off = fx.run(false);
  DenoiseOutput on = fx.run(true, weights);
  CHECK_FALSE(off.video_velocity_tokens.defined());
  CHECK(off.action_velocity.shape() == Shape{fx.cfg.chunk, fx.cfg.action_dim});
  bool differs = false;
  for (std::size_t i = 0; i < on.action_velocity.size(); ++i) {
    differs |= on.action_velocity.data()[i] != off.action_velocity.data()[i];
  }
  CHECK(differs);
}

TEST_CASE("geometry expert forward contract") {
  ModelFixture fx(Repr::kSt);
  EncodedContext ctx = encode_context(fx.cfg, fx.model.params(), fx.history, 0,
                                      fx.proprio, fx.action_history);
  GeometryPrediction geo =
      geometry_expert_forward(fx.cfg, fx.model.params(), ctx, 0.2f, 0.8f, false);

  CHECK(geo.depth_tokens.shape() ==
        Shape{fx.cfg.horizon * fx.cfg.views, fx.cfg.tokens_per_view()});
  CHECK(geo.ee_positions.shape() ==
        Shape{fx.cfg.horizon * fx.cfg.effectors, 3});
  for (float d : geo.depth_tokens.values()) CHECK(d >= 0.0f);

  SUBCASE("conditioning on tau_a is live") {
    GeometryPrediction other =
        geometry_expert_forward(fx.cfg, fx.model.params(), ctx, 0.2f, 0.1f, false);
    bool differs = false;
    for (std::size_t i = 0; i < geo.depth_tokens.size(); ++i) {
      differs |= other.depth_tokens.data()[i] != geo.depth_tokens.data()[i];
    }
    CHECK(differs);
  }
  SUBCASE("timestep bounds are enforced") {
    CHECK_THROWS_AS(geometry_expert_forward(fx.cfg, fx.model.params(), ctx, 1.4f,
                                            0.1f, false),
                    Error);
  }
}

TEST_CASE("predicted weight pipeline matches the ground-truth pipeline elementwise") {
  // Feeding the differentiable path the same token-resolution depth and ee
  // the float path sees must reproduce w* exactly: both realize
  // unproject -> distance -> rho -> mean pooling with identical arithmetic.
  PolicyConfig cfg = toy_config();
  std::vector<CameraModel> cams = toy_cameras(cfg);
  Rng rng(13);

  GeometryPrediction geo;
  geo.depth_tokens = Tensor::uniform(
      {cfg.horizon * cfg.views, cfg.tokens_per_view()}, rng, 0.6f, 2.4f);
  geo.ee_positions =
      Tensor::uniform({cfg.horizon * cfg.effectors, 3}, rng, -0.4f, 0.6f);

  Tensor predicted = predicted_weight_tokens(cfg, cams, geo);
  REQUIRE(predicted.size() ==
          cfg.horizon * cfg.views * cfg.tokens_per_view());

  const std::size_t plane = cfg.img_h * cfg.img_w;
  for (std::size_t s = 0; s < cfg.horizon; ++s) {
    for (std::size_t v = 0; v < cfg.views; ++v) {
      // nearest-fill the token depths to full resolution
      std::vector<float> depth(plane);
      const float* tok =
          geo.depth_tokens.data() + (s * cfg.views + v) * cfg.tokens_per_view();
      for (std::size_t i = 0; i < cfg.img_h; ++i) {
        for (std::size_t j = 0; j < cfg.img_w; ++j) {
          depth[i * cfg.img_w + j] =
              tok[(i / cfg.patch) * cfg.tok_cols() + j / cfg.patch];
        }
      }
      std::vector<std::uint8_t> valid(plane, 1);
      const float* ee = geo.ee_positions.data() + s * cfg.effectors * 3;
      Vec3 ee_pos{ee[0], ee[1], ee[2]};
      TargetWeightResult target = compute_target_weights(
          cams[v], depth, valid, {ee_pos}, cfg.sigma, cfg.patch);

      const float* pred =
          predicted.data() + (s * cfg.views + v) * cfg.tokens_per_view();
      for (std::size_t t = 0; t < cfg.tokens_per_view(); ++t) {
        CHECK(pred[t] == target.token_weights[t]);
      }
    }
  }
}

TEST_CASE("geometry_loss values") {
  PolicyConfig cfg = toy_config();
  std::vector<CameraModel> cams = toy_cameras(cfg);
  Rng rng(17);

  GeometryPrediction geo;
  geo.depth_tokens = Tensor::uniform(
      {cfg.horizon * cfg.views, cfg.tokens_per_view()}, rng, 0.6f, 2.4f);
  geo.ee_positions =
      Tensor::uniform({cfg.horizon * cfg.effectors, 3}, rng, -0.4f, 0.6f);
  Tensor predicted = predicted_weight_tokens(cfg, cams, geo);

  const std::size_t plane = cfg.img_h * cfg.img_w;
  GeometryTargets targets;
  targets.depth.resize(cfg.horizon * cfg.views * plane);
  targets.valid.assign(cfg.horizon * cfg.views * plane, 1);
  for (std::size_t s = 0; s < cfg.horizon; ++s) {
    for (std::size_t v = 0; v < cfg.views; ++v) {
      const float* tok =
          geo.depth_tokens.data() + (s * cfg.views + v) * cfg.tokens_per_view();
      float* dst = targets.depth.data() + (s * cfg.views + v) * plane;
      for (std::size_t i = 0; i < cfg.img_h; ++i) {
        for (std::size_t j = 0; j < cfg.img_w; ++j) {
          dst[i * cfg.img_w + j] =
              tok[(i / cfg.patch) * cfg.tok_cols() + j / cfg.patch];
        }
      }
    }
  }
  targets.ee_positions.assign(geo.ee_positions.values().begin(),
                              geo.ee_positions.values().end());
  targets.weight_tokens.assign(predicted.values().begin(),
                               predicted.values().end());

  SUBCASE("perfect prediction gives zero loss") {
    Tensor loss = geometry_loss(cfg, geo, predicted, targets, cams);
    CHECK(loss.item() == doctest::Approx(0.0f).epsilon(1e-7));
  }
  SUBCASE("unit ee offset contributes exactly lambda_pose") {
    GeometryTargets shifted = targets;
    for (std::size_t r = 0; r < cfg.horizon * cfg.effectors; ++r) {
      shifted.ee_positions[r * 3 + 0] += 1.0f;
    }
    Tensor loss = geometry_loss(cfg, geo, predicted, shifted, cams);
    CHECK(loss.item() == doctest::Approx(cfg.lambda_pose).epsilon(1e-5));
  }
}

TEST_CASE("checkpoint round trip reproduces the forward pass bitwise") {
  ModelFixture fx(Repr::kSt, 23);
  DenoiseOutput before = fx.run(false);

  const std::string dir = "model_ckpt_test";
  fx.model.save(dir);
  PolicyModel loaded = PolicyModel::load(dir);

  EncodedContext ctx = encode_context(fx.cfg, loaded.params(), fx.history, 0,
                                      fx.proprio, fx.action_history);
  JointState state;
  state.noised_future = &fx.future;
  state.noised_actions = fx.actions;
  DenoiseOutput after =
      joint_denoise(fx.cfg, loaded.params(), ctx, state, 0.3f, 0.7f, false);

  CHECK(after.action_velocity.values() == before.action_velocity.values());
  CHECK(after.video_velocity_tokens.values() ==
        before.video_velocity_tokens.values());
  std::filesystem::remove_all(dir);
}

TEST_CASE("full-model gradient check at toy width") {
  // L_diff + L_geo through joint denoising, the geometry expert, and the
  // differentiable weight pipeline, probed coordinate-wise against central
  // finite differences.
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    ModelFixture fx(Repr::kSt, seed);
    std::vector<CameraModel> cams = toy_cameras(fx.cfg);
    Rng rng(Rng::mix(seed, 99));

    std::vector<float> obs_target =
        random_vec(fx.cfg.future_tokens() * fx.cfg.patch_value_dim(), rng);
    std::vector<float> act_target = random_vec(fx.cfg.chunk * fx.cfg.action_dim, rng);

    const std::size_t plane = fx.cfg.img_h * fx.cfg.img_w;
    GeometryTargets targets;
    targets.depth = random_vec(fx.cfg.horizon * fx.cfg.views * plane, rng, 0.5, 2.5);
    targets.valid.assign(targets.depth.size(), 1);
    for (std::size_t i = 0; i < targets.valid.size(); i += 11) targets.valid[i] = 0;
    targets.ee_positions =
        random_vec(fx.cfg.horizon * fx.cfg.effectors * 3, rng, -0.5, 0.5);
    targets.weight_tokens =
        random_vec(fx.cfg.horizon * fx.cfg.views * fx.cfg.tokens_per_view(), rng,
                   0.05, 1.0);

    auto loss_fn = [&]() -> Tensor {
      EncodedContext ctx = encode_context(fx.cfg, fx.model.params(), fx.history, 0,
                                          fx.proprio, fx.action_history);
      GeometryPrediction geo = geometry_expert_forward(fx.cfg, fx.model.params(),
                                                       ctx, 0.4f, 0.6f, false);
      Tensor w_pred = predicted_weight_tokens(fx.cfg, cams, geo);
      JointState state;
      state.noised_future = &fx.future;
      state.noised_actions = fx.actions;
      state.gasam_weights = w_pred;
      DenoiseOutput out = joint_denoise(fx.cfg, fx.model.params(), ctx, state, 0.4f,
                                        0.6f, true);
      Tensor diff = diffusion_loss(
          out.video_velocity_tokens,
          Tensor(out.video_velocity_tokens.shape(), std::vector<float>(obs_target)),
          out.action_velocity,
          Tensor(out.action_velocity.shape(), std::vector<float>(act_target)),
          fx.cfg.lambda_obs, fx.cfg.lambda_act);
      Tensor geo_loss = geometry_loss(fx.cfg, geo, w_pred, targets, cams);
      return add(diff, geo_loss);
    };

    {
      Tape tape;
      tape.backward(loss_fn());
    }

    Rng pick(Rng::mix(seed, 555));
    std::size_t checked = 0, failures = 0;
    for (auto& named : fx.model.named_params()) {
      if (named.group == ParamGroup::kStats) continue;
      REQUIRE(named.tensor.has_grad());
      const std::vector<float> analytic = named.tensor.grad();
      float* data = named.tensor.data();
      for (int probe = 0; probe < 2; ++probe) {
        const std::size_t i = pick.randint(named.tensor.size());
        const float saved = data[i];
        const float step = 1e-3f;
        const float xp = saved + step;
        const float xm = saved - step;
        data[i] = xp;
        const double hi = loss_fn().item();
        data[i] = xm;
        const double lo = loss_fn().item();
        data[i] = saved;
        const float fd = static_cast<float>(
            (hi - lo) / (static_cast<double>(xp) - static_cast<double>(xm)));
        const float scale = std::max(std::fabs(analytic[i]), std::fabs(fd));
        if (std::fabs(analytic[i] - fd) > std::max(1e-3f * scale, 1.25e-3f)) {
          ++failures;
          MESSAGE("param ", named.name, " coord ", i, " analytic ", analytic[i],
                  " fd ", fd);
        }
        ++checked;
      }
      named.tensor.zero_grad();
    }
    CHECK(failures == 0);
    CHECK(checked > 100);
  }
}

TEST_CASE("worker views share data and isolate gradients") {
  ModelFixture fx(Repr::kSt, 31);
  PolicyModel view = fx.model.worker_view();
  CHECK(view.params().tokenizer.weight.data() ==
        fx.model.params().tokenizer.weight.data());

  EncodedContext ctx = encode_context(fx.cfg, view.params(), fx.history, 0,
                                      fx.proprio, fx.action_history);
  JointState state;
  state.noised_future = &fx.future;
  state.noised_actions = fx.actions;
  {
    Tape tape;
    DenoiseOutput out =
        joint_denoise(fx.cfg, view.params(), ctx, state, 0.5f, 0.5f, false);
    tape.backward(mean(square(out.action_velocity)));
  }
  CHECK(view.params().action_head.weight.has_grad());
  CHECK_FALSE(fx.model.params().action_head.weight.has_grad());
}
