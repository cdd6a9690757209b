"""The conditional noise predictor: scene tokens in, per-frame noise out.

A scene point cloud is lifted per point by a shared two-layer map and
max-pooled into a small grid of spatial bins, giving a fixed set of scene
tokens. Trajectory frames are embedded with an affine map plus a
sinusoidal position table, fused with a sinusoidal timestep embedding
through residual blocks, self-attended across frames, cross-attended
against the scene tokens (queries from frames, keys/values from tokens),
and projected to a noise estimate per frame.

All forward passes are batched: trajectories are (B, L, D), timesteps are
(B,). Parameters live in a flat name -> Tensor dict so the optimizer and
the checkpoint format can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numkit as nk

__all__ = ["ModelDims", "init_params", "encode_scene", "predict_epsilon",
           "timestep_embedding", "position_table"]


@dataclass(frozen=True)
class ModelDims:
    """Width/depth configuration of the noise predictor.

    ``coord_freqs`` octaves of fixed sin/cos features augment every raw
    coordinate before its affine embedding; without them a small
    attention stack cannot resolve obstacle surfaces to centimeters from
    meter-scale inputs.
    """

    state_dim: int = 2
    point_dim: int = 2
    feature_dim: int = 64
    token_count: int = 16
    n_heads: int = 2
    n_blocks: int = 2
    time_freqs: int = 64
    coord_freqs: int = 6
    coord_scale: float = 2.0

    def __post_init__(self):
        side = int(round(self.token_count ** 0.5))
        if side * side != self.token_count:
            raise ValueError("token_count must be a perfect square (spatial bins)")
        if self.feature_dim % self.n_heads != 0:
            raise ValueError("feature_dim must be divisible by n_heads")

    @property
    def bin_side(self) -> int:
        return int(round(self.token_count ** 0.5))

    def coord_width(self, raw_dim: int) -> int:
        return raw_dim * (1 + 2 * self.coord_freqs)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def init_params(seed: int, dims: ModelDims) -> dict[str, nk.Tensor]:
    """Seeded parameter dict; same seed gives bit-identical values."""
    rng = np.random.default_rng(seed)
    d = dims.feature_dim
    p: dict[str, np.ndarray] = {}

    def aff(name, fan_in, fan_out):
        p[f"{name}.w"] = _uniform(rng, fan_in, (fan_in, fan_out))
        p[f"{name}.b"] = _uniform(rng, fan_in, (fan_out,))

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    aff("enc.fc1", dims.coord_width(dims.point_dim), d)
    aff("enc.fc2", d, d)
    aff("frame", dims.coord_width(dims.state_dim), d)
    aff("time", 2 * dims.time_freqs, d)
    for i in range(dims.n_blocks):
        norm(f"blk{i}.tn")
        aff(f"blk{i}.tf1", d, d)
        aff(f"blk{i}.tf2", d, d)
        norm(f"blk{i}.sn")
        for proj in ("sq", "sk", "sv", "so"):
            aff(f"blk{i}.{proj}", d, d)
        norm(f"blk{i}.cn")
        for proj in ("cq", "ck", "cv", "co"):
            aff(f"blk{i}.{proj}", d, d)
    norm("head.n")
    aff("head.fc1", d, d)
    aff("head.fc2", d, dims.state_dim)
    p["head.fc2.b"] = np.zeros(dims.state_dim)
    return {name: nk.Tensor(arr, name=name) for name, arr in p.items()}


def coordinate_features(x: np.ndarray, dims: ModelDims) -> np.ndarray:
    """Raw coordinates plus sin/cos octaves per dimension.

    Frequencies double per octave starting at one period over
    ``coord_scale``, giving the embedding sharp position sensitivity down
    to a few centimeters at desk scale.
    """
    x = np.asarray(x, dtype=np.float64)
    if dims.coord_freqs == 0:
        return x
    k = 2.0 ** np.arange(dims.coord_freqs)
    angles = (2.0 * np.pi / dims.coord_scale) * x[..., None] * k
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return np.concatenate([x[..., None], feats], axis=-1).reshape(
        x.shape[:-1] + (dims.coord_width(x.shape[-1]),))


@lru_cache(maxsize=32)
def position_table(length: int, width: int) -> np.ndarray:
    """Sinusoidal per-frame position features, cached per (length, width)."""
    pos = np.arange(length)[:, None]
    i = np.arange(width // 2)[None, :]
    angles = pos / (10000.0 ** (2 * i / width))
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


def timestep_embedding(t: np.ndarray, n_freqs: int) -> np.ndarray:
    """(B,) integer timesteps -> (B, 2 * n_freqs) sinusoidal features."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    i = np.arange(n_freqs)[None, :]
    angles = t[:, None] / (10000.0 ** (i / max(n_freqs - 1, 1)))
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def encode_scene(points: np.ndarray, params: dict[str, nk.Tensor],
                 dims: ModelDims, bounds) -> nk.Tensor:
    """Point cloud (M, point_dim) -> scene tokens (token_count, feature_dim).

    Per-point features are max-pooled within a bin_side x bin_side spatial
    partition of the arena, so the tokens are invariant to point order and
    duplication.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("scene points must be a non-empty (M, D) array")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    side = dims.bin_side
    rel = (pts[:, :2] - lo) / (hi - lo)
    idx = np.clip((rel * side).astype(np.int64), 0, side - 1)
    bin_ids = idx[:, 0] * side + idx[:, 1]

    # points enter in arena-normalized coordinates, matching the state
    # whitening the trajectory side uses
    normed = (pts - (lo + hi) / 2) / ((hi - lo) / 2)
    feats = nk.Tensor(coordinate_features(normed, dims))
    h = nk.gelu(nk.affine(feats, params["enc.fc1.w"], params["enc.fc1.b"]))
    h = nk.gelu(nk.affine(h, params["enc.fc2.w"], params["enc.fc2.b"]))
    return nk.segment_max(h, bin_ids, dims.token_count)


def _ln(x, params, name):
    return nk.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _aff(x, params, name):
    return nk.affine(x, params[f"{name}.w"], params[f"{name}.b"])


def predict_epsilon(tau_t: np.ndarray, t, tokens: nk.Tensor,
                    params: dict[str, nk.Tensor], dims: ModelDims) -> nk.Tensor:
    """Forward pass of the noise predictor.

    ``tau_t`` is (L, D) or (B, L, D); ``t`` is a scalar or (B,). ``tokens``
    is one scene's token matrix, or a (B, token_count, feature_dim) stack
    when each batch row conditions on its own scene. Returns a Tensor of
    the same trajectory shape with the full tape attached.
    """
    arr = np.asarray(tau_t, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    b, horizon, sd = arr.shape
    if sd != dims.state_dim:
        raise nk.ShapeError(f"state dim {sd} != model state dim {dims.state_dim}")
    t_vec = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,))

    x = _aff(nk.Tensor(coordinate_features(arr, dims)), params, "frame")
    x = nk.add(x, nk.Tensor(position_table(horizon, dims.feature_dim)))
    temb_feat = timestep_embedding(t_vec, dims.time_freqs)
    temb = _aff(nk.Tensor(temb_feat), params, "time")
    temb3 = nk.reshape(temb, (b, 1, dims.feature_dim))
    if tokens.ndim == 2:
        tokens3 = nk.broadcast_to(nk.reshape(tokens, (1,) + tokens.shape),
                                  (b,) + tokens.shape)
    elif tokens.shape[0] == b:
        tokens3 = tokens
    else:
        raise nk.ShapeError(f"token stack {tokens.shape} does not match batch {b}")

    for i in range(dims.n_blocks):
        blk = f"blk{i}"
        h = _ln(nk.add(x, temb3), params, f"{blk}.tn")
        h = _aff(nk.gelu(_aff(h, params, f"{blk}.tf1")), params, f"{blk}.tf2")
        x = nk.add(x, h)

        sn = _ln(x, params, f"{blk}.sn")
        sa = nk.attention(_aff(sn, params, f"{blk}.sq"),
                          _aff(sn, params, f"{blk}.sk"),
                          _aff(sn, params, f"{blk}.sv"), dims.n_heads)
        x = nk.add(x, _aff(sa, params, f"{blk}.so"))

        cn = _ln(x, params, f"{blk}.cn")
        ca = nk.attention(_aff(cn, params, f"{blk}.cq"),
                          _aff(tokens3, params, f"{blk}.ck"),
                          _aff(tokens3, params, f"{blk}.cv"), dims.n_heads)
        x = nk.add(x, _aff(ca, params, f"{blk}.co"))

    out = _ln(x, params, "head.n")
    out = _aff(nk.gelu(_aff(out, params, "head.fc1")), params, "head.fc2")
    if squeeze:
        return nk.reshape(out, (horizon, sd))
    return out
