"""Differentiable guidance objectives and their composition.

Each objective maps a trajectory (or batch of trajectories) to a scalar
value per sample and its gradient with respect to the trajectory. Sign
conventions are fixed so guidance always ascends: physical objectives
(collision, contact, smoothness) are <= 0 with 0 meaning satisfied, the
reciprocal-exponential goal objectives are >= 0, and the negated-distance
goal variants are <= 0.

The composed guidance gradient g is the weighted sum of term gradients
evaluated at the reverse-process mean. The sampler shifts that mean by
lambda(t) * var * g in "raw" mode or lambda(t) * g in "scheduled" mode,
which keeps guidance alive in the late, low-variance denoise steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .arm import ARM_LINK_RADIUS, ArmSpec, link_points_jacobian
from .epsnet import timestep_embedding
from .sdf import SdfGrid
from .worlds import ROBOT_RADIUS, FootprintSpec

__all__ = [
    "GuidanceTerm", "GuidanceSpec", "GuidanceContext", "GuidanceEvaluator",
    "sdf_clearance", "contact_objective", "contact_distance", "smoothness",
    "goal_objective", "footprint_penetration", "arm_clearance",
    "guidance_gradient", "fit_guidance_scale", "GOAL_VARIANTS",
]

GOAL_VARIANTS = ("sum_exp", "last_l1", "sum_l1", "last_exp", "min_l1",
                 "arm_sum_exp")
_PLANNING_IDS = {"goal"}
_DIST_FLOOR = 1e-3
_EXP_CAP = 30.0


def _batched(tau) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tau, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise ValueError(f"trajectory must be (L, D) or (B, L, D), got {arr.shape}")


def _squeeze(value, grad, single):
    if single:
        return float(value[0]), grad[0]
    return value, grad


# ---------------------------------------------------------------------------
# physical objectives
# ---------------------------------------------------------------------------


def sdf_clearance(tau, grid: SdfGrid, radius: float = ROBOT_RADIUS,
                  clamp: bool = False):
    """Clearance penalty -sum_i relu(radius - sdf(tau_i)) and its gradient.

    Zero when every frame keeps at least ``radius`` of clearance. With
    ``clamp`` the field query saturates at the grid border instead of
    raising, which guided sampling needs while early iterates still
    wander outside the arena.
    """
    frames, single = _batched(tau)
    val, gradient = grid.sample_with_grad(frames, clamp=clamp)
    active = val < radius
    value = -np.where(active, radius - val, 0.0).sum(axis=-1)
    grad = np.where(active[..., None], gradient, 0.0)
    return _squeeze(value, grad, single)


def footprint_penetration(poses, spec: FootprintSpec, grid: SdfGrid,
                          clamp: bool = False):
    """Mean body-vertex penetration -mean_v relu(-sdf(v)) per pose.

    Poses are (..., 3) rows of (x, y, heading); the gradient chains the
    field slope through the rigid transform of the sampled body polygon.
    Averaging over vertices (rather than summing) keeps the pose gradient
    bounded by the field slope regardless of how densely the polygon is
    sampled.
    """
    p = np.asarray(poses, dtype=np.float64)
    single = p.ndim == 1
    flat = p.reshape(-1, 3)
    local = spec.local_vertices()
    n_verts = len(local)
    c, s = np.cos(flat[:, 2]), np.sin(flat[:, 2])
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    world = np.einsum("bij,vj->bvi", rot, local) + flat[:, None, :2]
    val, gsdf = grid.sample_with_grad(world, clamp=clamp)
    active = val < 0.0
    value = -np.where(active, -val, 0.0).sum(axis=-1) / n_verts
    gv = np.where(active[..., None], gsdf, 0.0) / n_verts
    grad = np.empty_like(flat)
    grad[:, :2] = gv.sum(axis=1)
    # d vertex / d heading = perp(vertex - position)
    rel = world - flat[:, None, :2]
    perp = np.stack([-rel[..., 1], rel[..., 0]], axis=-1)
    grad[:, 2] = (gv * perp).sum(axis=(1, 2))
    if single:
        return float(value[0]), grad[0]
    return value.reshape(p.shape[:-1]), grad.reshape(p.shape)


def contact_objective(poses, spec: FootprintSpec, scene_points,
                      temperature: float = 1e-3):
    """Negative summed distance from contact vertices to the scene.

    The hard nearest-point minimum is replaced by a soft minimum at the
    given temperature so the value stays differentiable; it approaches
    the exact minimum from below within about ``temperature``.
    """
    pts = np.asarray(scene_points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("contact objective needs a non-empty scene point set")
    p = np.asarray(poses, dtype=np.float64)
    single = p.ndim == 1
    flat = p.reshape(-1, 3)
    local = spec.local_vertices()[spec.contact_mask()]
    values = np.empty(len(flat))
    grads = np.empty_like(flat)
    for i, pose in enumerate(flat):
        c, s = np.cos(pose[2]), np.sin(pose[2])
        rot = np.array([[c, -s], [s, c]])
        world = local @ rot.T + pose[:2]
        diff = world[:, None, :] - pts[None]
        d = np.linalg.norm(diff, axis=-1)                       # (C, S)
        m = d.min(axis=1, keepdims=True)
        e = np.exp(-(d - m) / temperature)
        # soft minimum via logsumexp; its gradient is the softmax weighting
        soft = m[:, 0] - temperature * np.log(e.sum(axis=1))
        w = e / e.sum(axis=1, keepdims=True)
        values[i] = -soft.sum()
        unit = diff / np.maximum(d[..., None], 1e-12)
        gv = -(w[..., None] * unit).sum(axis=1)                 # d value / d vertex
        grads[i, :2] = gv.sum(axis=0)
        rel = world - pose[:2]
        perp = np.stack([-rel[:, 1], rel[:, 0]], axis=-1)
        grads[i, 2] = (gv * perp).sum()
    if single:
        return float(values[0]), grads[0]
    return values.reshape(p.shape[:-1]), grads.reshape(p.shape)


def contact_distance(pose, spec: FootprintSpec, scene_points) -> float:
    """Exact minimum contact-vertex to scene-point distance (for metrics)."""
    from .worlds import footprint_vertices
    _, contact = footprint_vertices(pose, spec)
    pts = np.asarray(scene_points)
    return float(np.linalg.norm(contact[:, None] - pts[None], axis=-1).min())


def smoothness(tau):
    """Negative squared second differences across consecutive frames."""
    frames, single = _batched(tau)
    if frames.shape[1] < 3:
        raise ValueError("smoothness needs a horizon of at least 3")
    e = frames[:, 2:] - 2 * frames[:, 1:-1] + frames[:, :-2]
    value = -(e * e).sum(axis=(1, 2))
    grad = np.zeros_like(frames)
    grad[:, 2:] += -2 * e
    grad[:, 1:-1] += 4 * e
    grad[:, :-2] += -2 * e
    return _squeeze(value, grad, single)


# ---------------------------------------------------------------------------
# goal objectives
# ---------------------------------------------------------------------------


def _exp_inverse(u: np.ndarray):
    """exp(1 / u) with the distance floor and exponent cap, plus d/du."""
    uc = np.maximum(u, _DIST_FLOOR)
    a = 1.0 / uc
    capped = a > _EXP_CAP
    v = np.exp(np.minimum(a, _EXP_CAP))
    dv = np.where(capped | (u < _DIST_FLOOR), 0.0, -v / (uc * uc))
    return v, dv


def goal_objective(tau, goal, variant: str = "sum_exp"):
    """Goal-reaching objective over L1 distances to the target state.

    Variants: ``sum_exp`` / ``arm_sum_exp`` sum exp(1/distance) over all
    frames (the arm form reads the state as joint angles; the formula is
    identical), ``last_exp`` applies that to the final frame only,
    ``last_l1`` / ``sum_l1`` / ``min_l1`` are negated L1 distances of the
    final frame, all frames, and the closest frame.
    """
    if variant not in GOAL_VARIANTS:
        raise ValueError(f"unknown goal variant {variant!r}")
    frames, single = _batched(tau)
    g = np.asarray(goal, dtype=np.float64)
    if g.ndim == 1:
        g = np.broadcast_to(g, (frames.shape[0], g.shape[0]))
    diff = g[:, None, :] - frames                       # (B, L, D)
    sign = np.sign(diff)
    u = np.abs(diff).sum(axis=-1)                       # (B, L)
    grad = np.zeros_like(frames)
    if variant in ("sum_exp", "arm_sum_exp"):
        v, dv = _exp_inverse(u)
        value = v.sum(axis=1)
        grad = -dv[..., None] * sign
    elif variant == "last_exp":
        v, dv = _exp_inverse(u[:, -1])
        value = v
        grad[:, -1] = dv[:, None] * -sign[:, -1]
    elif variant == "last_l1":
        value = -u[:, -1]
        grad[:, -1] = sign[:, -1]
    elif variant == "sum_l1":
        value = -u.sum(axis=1)
        grad = sign
    else:  # min_l1
        idx = np.argmin(u, axis=1)
        value = -u[np.arange(len(u)), idx]
        grad[np.arange(len(u)), idx] = sign[np.arange(len(u)), idx]
    return _squeeze(value, grad, single)


def arm_clearance(tau, arm: ArmSpec, grid: SdfGrid,
                  radius: float = ARM_LINK_RADIUS, per_link: int = 10,
                  clamp: bool = True):
    """Link clearance penalty for joint-space trajectories, with gradient.

    Samples points along every link of every frame, penalizes field
    values below ``radius``, and chains the field slope through the
    revolute-chain jacobian.
    """
    frames, single = _batched(tau)
    pts, jac = link_points_jacobian(frames, arm, per_link)   # (B,L,P,2),(B,L,P,k,2)
    val, gsdf = grid.sample_with_grad(pts, clamp=clamp)
    active = val < radius
    value = -np.where(active, radius - val, 0.0).sum(axis=-1).sum(axis=-1)
    gp = np.where(active[..., None], gsdf, 0.0)
    grad = np.einsum("blpi,blpik->blk", gp, jac)
    return _squeeze(value, grad, single)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidanceTerm:
    objective: str
    weight: float = 1.0
    variant: str = "sum_exp"


@dataclass
class GuidanceSpec:
    """Weighted objective terms plus the guidance scale and mode.

    ``shift_clip`` bounds the per-frame norm of the mean shift; the
    reciprocal-exponential goal objectives have gradients that blow up
    by many orders of magnitude as a plan frame parks on the goal, and
    the clip keeps those shifts inside a sane trust region without
    changing their direction.
    """

    terms: tuple = ()
    scale: float = 1.0
    mode: str = "scheduled"
    scale_table: np.ndarray | None = None
    shift_clip: float = 0.5

    def __post_init__(self):
        if self.mode not in ("raw", "scheduled"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.shift_clip <= 0:
            raise ValueError("shift_clip must be positive")
        planning = [t for t in self.terms if t.objective in _PLANNING_IDS]
        if len(planning) > 1:
            raise ValueError("at most one planning (goal) term is allowed")
        for t in self.terms:
            if not np.isfinite(t.weight):
                raise ValueError(f"non-finite weight on term {t.objective!r}")

    def lam(self, t: int) -> float:
        if self.scale_table is not None:
            return float(self.scale_table[t - 1])
        return self.scale

    def to_dict(self) -> dict:
        return {
            "terms": [{"objective": t.objective, "weight": t.weight,
                       "variant": t.variant} for t in self.terms],
            "scale": self.scale,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GuidanceSpec":
        terms = tuple(GuidanceTerm(t["objective"], t.get("weight", 1.0),
                                   t.get("variant", "sum_exp"))
                      for t in doc.get("terms", []))
        return cls(terms=terms, scale=doc.get("scale", 1.0),
                   mode=doc.get("mode", "scheduled"))


@dataclass
class GuidanceContext:
    """Everything the objective terms need to evaluate on one task."""

    grid: SdfGrid | None = None
    goal: np.ndarray | None = None
    radius: float = ROBOT_RADIUS
    footprint: FootprintSpec | None = None
    scene_points: np.ndarray | None = None
    arm: ArmSpec | None = None
    arm_radius: float = ARM_LINK_RADIUS


class GuidanceEvaluator:
    """Binds a GuidanceSpec to one scene context for use in sampling."""

    def __init__(self, spec: GuidanceSpec, context: GuidanceContext):
        self.spec = spec
        self.context = context

    def gradient(self, mu) -> np.ndarray:
        """Weighted sum of term gradients, evaluated at the reverse mean."""
        ctx = self.context
        g = np.zeros_like(np.asarray(mu, dtype=np.float64))
        for term in self.spec.terms:
            if term.weight == 0.0:
                continue
            if term.objective == "collision":
                _, tg = sdf_clearance(mu, ctx.grid, ctx.radius, clamp=True)
            elif term.objective == "placement_collision":
                _, tg = footprint_penetration(mu, ctx.footprint, ctx.grid,
                                              clamp=True)
            elif term.objective == "contact":
                _, tg = contact_objective(mu, ctx.footprint, ctx.scene_points)
            elif term.objective == "smoothness":
                _, tg = smoothness(mu)
            elif term.objective == "goal":
                _, tg = goal_objective(mu, ctx.goal, term.variant)
            elif term.objective == "arm_collision":
                _, tg = arm_clearance(mu, ctx.arm, ctx.grid, ctx.arm_radius)
            else:
                raise ValueError(f"unknown objective id {term.objective!r}")
            g += term.weight * tg
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite guidance gradient")
        return g

    def shift_from_gradient(self, g: np.ndarray, t: int, var: float) -> np.ndarray:
        lam = self.spec.lam(t)
        shift = lam * var * g if self.spec.mode == "raw" else lam * g
        norms = np.linalg.norm(shift, axis=-1, keepdims=True)
        cap = self.spec.shift_clip
        return np.where(norms > cap, shift * (cap / np.maximum(norms, 1e-300)),
                        shift)

    def shift(self, mu, t: int, var: float) -> np.ndarray:
        return self.shift_from_gradient(self.gradient(mu), t, var)

    def shift_fn(self):
        """Closure for the sampler; None when guidance cannot act."""
        if self.spec.scale_table is None and self.spec.scale == 0.0:
            return None
        if not self.spec.terms:
            return None
        return lambda mu, t, var: self.shift(mu, t, var)


class NormalizedGuidance:
    """Guidance adapter for samplers running in whitened state space.

    The objectives are defined on physical states; for a sampler state
    x_n with physical state x = half * x_n + center, the chain rule
    scales each gradient coordinate by ``half``.
    """

    def __init__(self, evaluator: GuidanceEvaluator, center, half):
        self.evaluator = evaluator
        self.center = np.asarray(center, dtype=np.float64)
        self.half = np.asarray(half, dtype=np.float64)

    def shift_fn(self):
        inner = self.evaluator.shift_fn()
        if inner is None:
            return None

        def fn(mu_n, t, var):
            g = self.evaluator.gradient(mu_n * self.half + self.center)
            return self.evaluator.shift_from_gradient(g * self.half, t, var)

        return fn


def guidance_gradient(spec: GuidanceSpec, mu, t: int, var: float,
                      context: GuidanceContext):
    """Composed gradient at the reverse mean and the resulting mean shift."""
    ev = GuidanceEvaluator(spec, context)
    g = ev.gradient(mu)
    return g, ev.shift(mu, t, var)


# ---------------------------------------------------------------------------
# trainable per-timestep scale
# ---------------------------------------------------------------------------


def init_scale_net(seed: int, n_freqs: int = 64, hidden: int = 32):
    rng = np.random.default_rng(seed)
    d_in = 2 * n_freqs

    def uni(fan_in, shape):
        s = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-s, s, size=shape)

    return {
        "lam.fc1.w": nk.Tensor(uni(d_in, (d_in, hidden))),
        "lam.fc1.b": nk.Tensor(uni(d_in, (hidden,))),
        "lam.fc2.w": nk.Tensor(uni(hidden, (hidden, 1))),
        "lam.fc2.b": nk.Tensor(np.full(1, 0.5)),
    }


def _scale_net_forward(net, t_vec: np.ndarray, n_freqs: int) -> nk.Tensor:
    emb = nk.Tensor(timestep_embedding(t_vec, n_freqs))
    h = nk.gelu(nk.affine(emb, net["lam.fc1.w"], net["lam.fc1.b"]))
    raw = nk.affine(h, net["lam.fc2.w"], net["lam.fc2.b"])
    return nk.mul(raw, raw)  # squared output keeps the scale non-negative


def fit_guidance_scale(windows: np.ndarray, scene_tokens, model, sched,
                       evaluator: GuidanceEvaluator, rng: np.random.Generator,
                       steps: int = 300, batch_size: int = 16,
                       lr: float = 1e-3, n_freqs: int = 64, seed: int = 0):
    """Learn a per-timestep guidance scale against a frozen base model.

    Minimizes the residual between the drawn noise and the model estimate
    shifted by lambda(t) * var * g, where g is evaluated at the reverse
    mean. Returns (lambda table for t = 1..T, scale-net params, losses).
    """
    from .diffusion import reverse_moments

    windows = np.asarray(windows, dtype=np.float64)
    net = init_scale_net(seed, n_freqs)
    opt = nk.Adam(net, lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(windows), size=batch_size)
        tau0 = windows[idx]
        t = rng.integers(1, sched.timesteps + 1, size=batch_size)
        eps = rng.standard_normal(tau0.shape)
        ab = sched.alpha_bar[t - 1][:, None, None]
        tau_t = np.sqrt(ab) * tau0 + np.sqrt(1 - ab) * eps
        eps_hat = model(tau_t, t, scene_tokens)
        eps_hat = eps_hat.data if isinstance(eps_hat, nk.Tensor) else eps_hat
        mu = (tau_t - sched.beta[t - 1][:, None, None]
              / np.sqrt(1 - ab) * eps_hat) / np.sqrt(sched.alpha[t - 1][:, None, None])
        g = evaluator.gradient(mu)
        var = sched.posterior_var[t - 1][:, None, None]
        target = eps - eps_hat
        lam = _scale_net_forward(net, t, n_freqs)            # (B, 1)
        lam3 = nk.reshape(lam, (batch_size, 1, 1))
        pred = nk.mul(lam3, nk.Tensor(var * g))
        loss = nk.mse(pred, nk.Tensor(target))
        loss.backward()
        if not np.isfinite(loss.item()):
            raise FloatingPointError("guidance-scale training diverged")
        opt.step()
        losses.append(loss.item())
    table = _scale_net_forward(net, np.arange(1, sched.timesteps + 1),
                               n_freqs).data[:, 0]
    return table, net, np.asarray(losses)
