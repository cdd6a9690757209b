"""Planar revolute arm: kinematics, obstacle clearance, scenes, experts.

The arm is a k-joint chain bolted at the arena center. States are joint
angles in radians within [-pi, pi]; the task space stays 2D, so collision
checking against disk and rectangle obstacles is exact pointwise math on
sampled link points. Expert demonstrations come from shortest paths on a
discretized joint-space grid, resampled to a maximum joint-space step.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .sdf import Disk, grid_from_obstacles
from .worlds import SceneSpec, _boundary_points, SceneGenerationError

__all__ = ["ArmSpec", "arm_forward", "link_points", "link_points_jacobian",
           "min_link_distance", "generate_arm_scene", "collect_arm_expert",
           "ARM_MAX_STEP", "ARM_LINK_RADIUS"]

ARM_MAX_STEP = 0.15      # max joint-space L2 move per executed step
ARM_LINK_RADIUS = 0.04   # links treated as capsules of this radius


@dataclass(frozen=True)
class ArmSpec:
    lengths: tuple = (0.8, 0.6, 0.4)
    base: tuple = (2.0, 2.0)
    limit: float = np.pi

    @property
    def n_joints(self) -> int:
        return len(self.lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.lengths))

    def check(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        if q.shape[-1] != self.n_joints:
            raise ValueError(f"expected {self.n_joints} joint angles, got {q.shape}")
        if np.any(np.abs(q) > self.limit + 1e-12):
            raise ValueError("joint angle outside limits")
        return q


def _joint_positions(q: np.ndarray, arm: ArmSpec) -> np.ndarray:
    """Positions of joints 0..k (base through end effector), batched.

    q is (..., k); the result is (..., k + 1, 2).
    """
    cum = np.cumsum(q, axis=-1)
    steps = np.stack([np.cos(cum), np.sin(cum)], axis=-1) \
        * np.asarray(arm.lengths)[..., :, None]
    pos = np.zeros(q.shape[:-1] + (arm.n_joints + 1, 2))
    pos[..., 0, :] = arm.base
    pos[..., 1:, :] = arm.base + np.cumsum(steps, axis=-2)
    return pos


def arm_forward(q, arm: ArmSpec):
    """Link segments ((k, 2, 2)) and the end-effector position for q."""
    q = arm.check(q)
    joints = _joint_positions(q, arm)
    segments = np.stack([joints[:-1], joints[1:]], axis=1)
    return segments, joints[-1]


def link_points(q, arm: ArmSpec, per_link: int = 12) -> np.ndarray:
    """Sample points along every link, batched over leading axes of q."""
    q = np.asarray(q, dtype=np.float64)
    joints = _joint_positions(q, arm)
    fracs = (np.arange(per_link) + 1.0) / per_link
    a = joints[..., :-1, None, :]
    b = joints[..., 1:, None, :]
    pts = a + (b - a) * fracs[None, :, None]
    return pts.reshape(q.shape[:-1] + (arm.n_joints * per_link, 2))


def link_points_jacobian(q, arm: ArmSpec, per_link: int = 12):
    """Sample points and their jacobian wrt the joint angles.

    Returns (points, jac) with points (..., P, 2) and jac (..., P, 2, k):
    a point on link m responds to joint j <= m by rotating about joint j,
    i.e. d p / d q_j = perp(p - joint_j).
    """
    q = np.asarray(q, dtype=np.float64)
    joints = _joint_positions(q, arm)
    k = arm.n_joints
    fracs = (np.arange(per_link) + 1.0) / per_link
    a = joints[..., :-1, None, :]
    b = joints[..., 1:, None, :]
    pts = a + (b - a) * fracs[None, :, None]          # (..., k, per_link, 2)
    rel = pts[..., :, :, None, :] - joints[..., None, None, :k, :]
    perp = np.stack([-rel[..., 1], rel[..., 0]], axis=-1)  # (..., k, P, k, 2)
    link_idx = np.arange(k)[:, None]
    joint_idx = np.arange(k)[None, :]
    mask = (joint_idx <= link_idx)[:, None, :, None]  # joint j moves links >= j
    jac = np.where(mask, perp, 0.0)
    pshape = q.shape[:-1] + (k * per_link,)
    return (pts.reshape(pshape + (2,)),
            np.swapaxes(jac.reshape(pshape + (k, 2)), -1, -2))


def _obstacle_distance(points: np.ndarray, obstacles) -> np.ndarray:
    vals = np.full(points.shape[:-1], np.inf)
    for obs in obstacles:
        vals = np.minimum(vals, obs.sdf(points))
    return vals


def min_link_distance(q, arm: ArmSpec, obstacles, per_link: int = 200) -> float:
    """Minimum distance from any link to any obstacle for one configuration."""
    pts = link_points(np.asarray(q, dtype=np.float64), arm, per_link)
    return float(_obstacle_distance(pts, obstacles).min())


# ---------------------------------------------------------------------------
# arm scenes and experts
# ---------------------------------------------------------------------------


def generate_arm_scene(seed: int, adversarial: bool = False,
                       arm: ArmSpec | None = None, n_points: int = 512,
                       resolution: int = 64, max_retries: int = 60) -> SceneSpec:
    """Cluttered tabletop scene with valid start/goal joint configurations.

    Adversarial scenes guarantee the straight joint-space interpolation
    between start and goal collides while a grid path still exists, which
    defeats purely distance-chasing planners.
    """
    arm = arm or ArmSpec()
    bounds = ((0.0, 0.0), (4.0, 4.0))
    base = np.asarray(arm.base)
    rng = np.random.default_rng((seed, 77 if adversarial else 33))
    for _ in range(max_retries):
        obstacles = []
        for _ in range(rng.integers(3, 6)):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.55, arm.reach - 0.15)
            c = base + rad * np.array([np.cos(ang), np.sin(ang)])
            obstacles.append(Disk((float(c[0]), float(c[1])),
                                  float(rng.uniform(0.1, 0.22))))
        planner = _JointGrid(arm, obstacles)
        try:
            q0, q1 = planner.pick_endpoints(rng, adversarial)
        except SceneGenerationError:
            continue
        points = _boundary_points(obstacles, bounds, n_points, rng)
        grid = grid_from_obstacles(obstacles, bounds, resolution)
        kind = "arm-adversarial" if adversarial else "arm-cluttered"
        return SceneSpec(
            scene_id=f"{kind}-{seed}", seed=seed, difficulty=kind,
            bounds=bounds, obstacles=tuple(obstacles), points=points,
            sdf=grid, start=q0, goal=q1)
    raise SceneGenerationError(f"no valid arm scene for seed {seed}")


class _JointGrid:
    """Uniform joint-space grid with a precomputed free mask."""

    def __init__(self, arm: ArmSpec, obstacles, n_per_joint: int = 21,
                 margin: float = ARM_LINK_RADIUS + 0.05, per_link: int = 40):
        self.arm = arm
        self.n = n_per_joint
        self.axis = np.linspace(-arm.limit, arm.limit, n_per_joint)
        grids = np.meshgrid(*([self.axis] * arm.n_joints), indexing="ij")
        configs = np.stack(grids, axis=-1)
        pts = link_points(configs, arm, per_link)
        self.free = _obstacle_distance(pts, obstacles).min(axis=-1) >= margin
        self.obstacles = obstacles
        self.margin = margin
        k = arm.n_joints
        self._moves = [m for m in np.ndindex(*([3] * k))
                       if any(v != 1 for v in m)]

    def config(self, node) -> np.ndarray:
        return self.axis[list(node)]

    def snap(self, q) -> tuple:
        idx = np.clip(np.round((np.asarray(q) + self.arm.limit)
                               / (2 * self.arm.limit) * (self.n - 1)),
                      0, self.n - 1).astype(int)
        return tuple(int(i) for i in idx)

    def free_nodes(self):
        return np.argwhere(self.free)

    def shortest_path(self, start, goal) -> np.ndarray:
        if not (self.free[start] and self.free[goal]):
            raise SceneGenerationError("endpoint configuration is not free")
        goal_arr = np.array(goal)
        step = self.axis[1] - self.axis[0]
        dist = {start: 0.0}
        parent = {}
        frontier = [(step * float(np.linalg.norm(np.array(start) - goal_arr)), start)]
        closed = set()
        while frontier:
            _, node = heapq.heappop(frontier)
            if node in closed:
                continue
            if node == goal:
                path = [node]
                while path[-1] in parent:
                    path.append(parent[path[-1]])
                path.reverse()
                return np.stack([self.config(n) for n in path])
            closed.add(node)
            base = np.array(node)
            for move in self._moves:
                nxt = tuple(base + np.array(move) - 1)
                if any(not 0 <= v < self.n for v in nxt) or not self.free[nxt]:
                    continue
                cost = dist[node] + step * float(np.linalg.norm(np.array(move) - 1))
                if cost < dist.get(nxt, np.inf):
                    dist[nxt] = cost
                    parent[nxt] = node
                    h = step * float(np.linalg.norm(np.array(nxt) - goal_arr))
                    heapq.heappush(frontier, (cost + h, nxt))
        raise SceneGenerationError("joint grid endpoints not connected")

    def straight_line_collides(self, q0, q1, n: int = 60) -> bool:
        ts = np.linspace(0.0, 1.0, n)[:, None]
        configs = np.asarray(q0) + ts * (np.asarray(q1) - np.asarray(q0))
        pts = link_points(configs, self.arm, 60)
        return bool(_obstacle_distance(pts, self.obstacles).min() < ARM_LINK_RADIUS)

    def pick_endpoints(self, rng, adversarial: bool, tries: int = 80):
        nodes = self.free_nodes()
        if len(nodes) < 2:
            raise SceneGenerationError("joint grid almost fully blocked")
        for _ in range(tries):
            a, b = nodes[rng.integers(0, len(nodes), size=2)]
            q0, q1 = self.config(tuple(a)), self.config(tuple(b))
            if np.linalg.norm(q1 - q0) < 1.2:
                continue
            blocked = self.straight_line_collides(q0, q1)
            if adversarial != blocked:
                continue
            try:
                self.shortest_path(tuple(a), tuple(b))
            except SceneGenerationError:
                continue
            return q0, q1
        raise SceneGenerationError("no endpoint pair with requested property")


def collect_arm_expert(scene: SceneSpec, arm: ArmSpec | None = None,
                       start=None, goal=None,
                       grid: _JointGrid | None = None,
                       max_step: float = ARM_MAX_STEP) -> np.ndarray:
    """Joint-space shortest path between configurations, step-limited."""
    arm = arm or ArmSpec()
    grid = grid or _JointGrid(arm, scene.obstacles)
    q0 = scene.start if start is None else np.asarray(start)
    q1 = scene.goal if goal is None else np.asarray(goal)
    path = grid.shortest_path(grid.snap(q0), grid.snap(q1))
    out = [path[0]]
    for a, b in zip(path[:-1], path[1:]):
        seg = float(np.linalg.norm(b - a))
        if seg == 0.0:
            continue
        pieces = int(np.ceil(seg / max_step))
        for k in range(1, pieces + 1):
            out.append(a + (b - a) * (k / pieces))
    return np.asarray(out)
