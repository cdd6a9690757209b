"""High-level trainable model with a scikit-learn style surface.

``TrajectoryDiffusion`` owns the noise predictor, its schedule, and the
training loop; ``fit`` consumes (scene, windows) pairs, ``sample`` draws
scene-conditioned trajectories with optional objective guidance, and the
fitted state round-trips through the binary checkpoint format.
"""

from __future__ import annotations

import numpy as np

from . import numkit as nk
from .base import ParamsMixin, check_array
from .checkpoint import load_checkpoint, save_checkpoint
from .config import dict_hash
from .diffusion import ddpm_loss, denoise_batch, make_schedule
from .epsnet import ModelDims, encode_scene, init_params, predict_epsilon
from .objectives import (GuidanceContext, GuidanceEvaluator, GuidanceSpec,
                         NormalizedGuidance)

__all__ = ["TrajectoryDiffusion"]


class TrajectoryDiffusion(ParamsMixin):
    """Scene-conditioned trajectory diffusion model.

    Parameters mirror the desk-scale defaults: horizon-32 windows, 100
    denoising steps on a linear noise ramp, and a ~1e5-parameter
    cross-attention noise predictor.
    """

    def __init__(self, horizon: int = 32, state_dim: int = 2,
                 timesteps: int = 100, beta_start: float = 1e-3,
                 beta_end: float = 0.2, feature_dim: int = 64,
                 token_count: int = 16, n_heads: int = 2, n_blocks: int = 2,
                 time_freqs: int = 64, learning_rate: float = 1e-3,
                 batch_size: int = 32, train_steps: int = 2000,
                 prefix_prob: float = 0.0, prefix_max: int = 15,
                 coord_freqs: int = 6, state_center=0.0, state_half=1.0,
                 seed: int = 0):
        self.horizon = horizon
        self.state_dim = state_dim
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.feature_dim = feature_dim
        self.token_count = token_count
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.time_freqs = time_freqs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.train_steps = train_steps
        self.prefix_prob = prefix_prob
        self.prefix_max = prefix_max
        self.coord_freqs = coord_freqs
        self.state_center = state_center
        self.state_half = state_half
        self.seed = seed

    # -- construction ---------------------------------------------------

    def _dims(self) -> ModelDims:
        return ModelDims(state_dim=self.state_dim, point_dim=2,
                         feature_dim=self.feature_dim,
                         token_count=self.token_count, n_heads=self.n_heads,
                         n_blocks=self.n_blocks, time_freqs=self.time_freqs,
                         coord_freqs=self.coord_freqs)

    def state_space(self) -> tuple[np.ndarray, np.ndarray]:
        """(center, half) of the whitening map: x_model = (x - center) / half."""
        center = np.broadcast_to(np.asarray(self.state_center, dtype=np.float64),
                                 (self.state_dim,)).copy()
        half = np.broadcast_to(np.asarray(self.state_half, dtype=np.float64),
                               (self.state_dim,)).copy()
        if np.any(half <= 0):
            raise ValueError("state_half entries must be positive")
        return center, half

    def normalize(self, x) -> np.ndarray:
        center, half = self.state_space()
        return (np.asarray(x, dtype=np.float64) - center) / half

    def denormalize(self, x) -> np.ndarray:
        center, half = self.state_space()
        return np.asarray(x, dtype=np.float64) * half + center

    def _init_fit_state(self):
        self.dims_ = self._dims()
        self.schedule_ = make_schedule(self.timesteps, self.beta_start,
                                       self.beta_end)
        self.params_ = init_params(self.seed, self.dims_)
        self.loss_history_ = []
        self._token_cache: dict[str, np.ndarray] = {}

    def config_hash(self) -> bytes:
        return dict_hash(self.get_params())

    # -- training ---------------------------------------------------------

    def fit(self, scene_windows, log_every: int = 0):
        """Train the noise predictor on (scene, windows) pairs.

        Each step draws one scene (weighted by its window count) and a
        window batch from it, so scene encoding happens once per step and
        encoder gradients still flow.
        """
        data = [(scene, check_array(w, "windows", ndim=3)) for scene, w in
                scene_windows]
        if not data:
            raise ValueError("no training data")
        for scene, w in data:
            if w.shape[1] != self.horizon or w.shape[2] != self.state_dim:
                raise ValueError(
                    f"windows for {scene.scene_id} have shape {w.shape[1:]}, "
                    f"expected ({self.horizon}, {self.state_dim})")
        self._init_fit_state()
        data = [(scene, self.normalize(w)) for scene, w in data]
        rng = np.random.default_rng(self.seed)
        weights = np.array([len(w) for _, w in data], dtype=float)
        weights /= weights.sum()
        opt = nk.Adam(self.params_, lr=self.learning_rate)
        for step in range(self.train_steps):
            scene, windows = data[rng.choice(len(data), p=weights)]
            batch = windows[rng.integers(0, len(windows), size=self.batch_size)]

            def model(tau_t, t, _):
                tokens = encode_scene(scene.points, self.params_, self.dims_,
                                      scene.bounds)
                return predict_epsilon(tau_t, t, tokens, self.params_, self.dims_)

            loss = ddpm_loss(batch, scene, model, self.schedule_, rng,
                             prefix_prob=self.prefix_prob,
                             prefix_max=self.prefix_max)
            loss.backward()
            opt.step()
            self.loss_history_.append(loss.item())
            if log_every and (step + 1) % log_every == 0:
                recent = float(np.mean(self.loss_history_[-log_every:]))
                print(f"step {step + 1}/{self.train_steps} loss {recent:.4f}")
        return self

    # -- inference --------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("model is not fitted; call fit() or load()")

    def tokens_for(self, scene) -> np.ndarray:
        """Scene tokens with caching; safe because sampling never trains."""
        self._check_fitted()
        cached = self._token_cache.get(scene.scene_id)
        if cached is None:
            cached = encode_scene(scene.points, self.params_, self.dims_,
                                  scene.bounds).data
            self._token_cache[scene.scene_id] = cached
        return cached

    def model_fn(self, scene):
        """Closure (tau_t, t, _) -> noise estimate for a fixed scene.

        Operates in the whitened state space; samplers and planners
        convert with :meth:`normalize`/:meth:`denormalize` at their
        boundaries.
        """
        tokens = nk.Tensor(self.tokens_for(scene))

        def model(tau_t, t, _):
            return predict_epsilon(tau_t, t, tokens, self.params_,
                                   self.dims_).data

        return model

    def batched_model_factory(self, scenes):
        """Lockstep-planner hook: rows of the batch condition on their own
        scene's tokens. Whitened state space, like :meth:`model_fn`."""
        stack = np.stack([self.tokens_for(s) for s in scenes])

        def factory(active):
            tokens = nk.Tensor(stack[active])

            def model(tau_t, t, _):
                return predict_epsilon(tau_t, t, tokens, self.params_,
                                       self.dims_).data

            return model

        return factory

    def wrap_guidance(self, guidance: GuidanceSpec | None, context):
        """Physical-space guidance adapted to the whitened sampler."""
        if guidance is None or not guidance.terms:
            return None
        center, half = self.state_space()
        evaluator = GuidanceEvaluator(guidance, context)
        return NormalizedGuidance(evaluator, center, half).shift_fn()

    def sample(self, scene, n_samples: int = 1,
               guidance: GuidanceSpec | None = None,
               context: GuidanceContext | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Draw (n_samples, horizon, state_dim) trajectories for a scene."""
        self._check_fitted()
        rng = rng or np.random.default_rng(self.seed)
        if context is None:
            context = GuidanceContext(grid=scene.sdf, goal=scene.goal,
                                      scene_points=scene.points)
        guide_fn = self.wrap_guidance(guidance, context)
        out = denoise_batch(self.model_fn(scene), None, self.schedule_, rng,
                            n_samples, self.horizon, self.state_dim,
                            guide_fn=guide_fn)
        return self.denormalize(out)

    # -- persistence -------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        """Checkpoint parameters (and optional extra arrays) with the
        config hash in the footer."""
        self._check_fitted()
        arrays = {name: p.data for name, p in self.params_.items()}
        meta = [self.horizon, self.state_dim, self.timesteps, self.beta_start,
                self.beta_end, self.feature_dim, self.token_count,
                self.n_heads, self.n_blocks, self.time_freqs,
                self.learning_rate, self.batch_size, self.train_steps,
                self.seed, self.prefix_prob, self.prefix_max,
                self.coord_freqs]
        arrays["meta.model"] = np.asarray(meta, dtype=np.float64)
        arrays["meta.schedule.beta"] = self.schedule_.beta
        center, half = self.state_space()
        arrays["meta.state_center"] = center
        arrays["meta.state_half"] = half
        for name, arr in (extra or {}).items():
            arrays[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
        save_checkpoint(path, arrays, self.config_hash())

    @classmethod
    def load(cls, path, expected_hash: bytes | None = None):
        """Rebuild a fitted estimator from a checkpoint.

        Returns (estimator, extra arrays dict).
        """
        arrays, _ = load_checkpoint(path, expected_hash)
        meta = arrays.pop("meta.model")
        beta = arrays.pop("meta.schedule.beta")
        est = cls(horizon=int(meta[0]), state_dim=int(meta[1]),
                  timesteps=int(meta[2]), beta_start=float(meta[3]),
                  beta_end=float(meta[4]), feature_dim=int(meta[5]),
                  token_count=int(meta[6]), n_heads=int(meta[7]),
                  n_blocks=int(meta[8]), time_freqs=int(meta[9]),
                  learning_rate=float(meta[10]), batch_size=int(meta[11]),
                  train_steps=int(meta[12]), seed=int(meta[13]),
                  prefix_prob=float(meta[14]), prefix_max=int(meta[15]),
                  coord_freqs=int(meta[16]),
                  state_center=tuple(arrays.pop("meta.state_center")),
                  state_half=tuple(arrays.pop("meta.state_half")))
        est.dims_ = est._dims()
        est.schedule_ = make_schedule(est.timesteps, est.beta_start, est.beta_end)
        if not np.allclose(est.schedule_.beta, beta):
            raise ValueError("checkpoint schedule disagrees with its metadata")
        extra = {}
        params = {}
        for name, arr in arrays.items():
            if name.startswith("extra."):
                extra[name[len("extra."):]] = arr
            else:
                params[name] = nk.Tensor(arr, name=name)
        est.params_ = params
        est.loss_history_ = []
        est._token_cache = {}
        return est, extra
