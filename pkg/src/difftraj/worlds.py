"""Procedural desk-scale worlds: scenes, navigation graphs, expert paths,
footprint placements, and dataset windowing.

Scenes live in a 4x4 m arena. Obstacles are axis-aligned rectangles and
disks; the scene carries boundary-sampled points, a signed distance grid,
and a start/goal pair. The expert is a shortest path on a clearance-aware
8-connected grid, resampled so no step exceeds the robot's maximum move.
"""

from __future__ import annotations

import heapq
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .sdf import Disk, Rect, SdfGrid, analytic_sdf, grid_from_obstacles

__all__ = [
    "ROBOT_RADIUS", "MAX_STEP", "SceneSpec", "FootprintSpec", "NavGraph",
    "NoPathError", "generate_scene", "build_sdf", "collect_expert",
    "make_windows", "footprint_vertices", "generate_placements",
    "save_scene", "load_scene", "write_trajectories", "read_trajectories",
]

ROBOT_RADIUS = 0.08
MAX_STEP = 0.08
ARENA = ((0.0, 0.0), (4.0, 4.0))
GRAPH_PITCH = 0.05
# expert clearance: robot radius, half a diagonal cell so interpolated edge
# points stay clear, and a safety margin so imitators inherit slack
GRAPH_CLEARANCE = ROBOT_RADIUS + GRAPH_PITCH + 0.03


class NoPathError(RuntimeError):
    pass


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """One procedural scene: geometry, samples, field, endpoints."""

    scene_id: str
    seed: int
    difficulty: str
    bounds: tuple
    obstacles: tuple
    points: np.ndarray
    sdf: SdfGrid
    start: np.ndarray
    goal: np.ndarray

    def clearance(self, p: np.ndarray) -> np.ndarray:
        return analytic_sdf(p, self.obstacles, self.bounds)


@dataclass(frozen=True)
class FootprintSpec:
    """Rigid rectangular footprint with a designated contact edge.

    The polygon boundary is sampled at ``spacing`` meters in the local
    frame; the contact vertices are the samples on the bottom edge
    (y = -height/2).
    """

    width: float = 0.3
    height: float = 0.2
    spacing: float = 0.02

    def local_vertices(self) -> np.ndarray:
        hw, hh = self.width / 2, self.height / 2
        xs = np.arange(-hw, hw + 1e-12, self.spacing)
        ys = np.arange(-hh, hh + 1e-12, self.spacing)
        bottom = np.stack([xs, np.full_like(xs, -hh)], axis=1)
        top = np.stack([xs, np.full_like(xs, hh)], axis=1)
        left = np.stack([np.full_like(ys[1:-1], -hw), ys[1:-1]], axis=1)
        right = np.stack([np.full_like(ys[1:-1], hw), ys[1:-1]], axis=1)
        return np.concatenate([bottom, top, left, right])

    def contact_mask(self) -> np.ndarray:
        verts = self.local_vertices()
        return np.isclose(verts[:, 1], -self.height / 2)


def footprint_vertices(pose, spec: FootprintSpec):
    """World-frame (body vertices, contact vertices) for pose (x, y, heading)."""
    x, y, heading = np.asarray(pose, dtype=np.float64)
    local = spec.local_vertices()
    c, s = np.cos(heading), np.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    world = local @ rot.T + np.array([x, y])
    return world, world[spec.contact_mask()]


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def _sample_free_point(rng, obstacles, bounds, clearance, tries=400):
    lo = np.asarray(bounds[0]) + clearance
    hi = np.asarray(bounds[1]) - clearance
    for _ in range(tries):
        p = rng.uniform(lo, hi)
        if analytic_sdf(p, obstacles, bounds) >= clearance:
            return p
    raise SceneGenerationError("no free point with required clearance")


def _free_fraction(obstacles, bounds, n=48):
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vals = analytic_sdf(np.stack([gx, gy], -1), obstacles, bounds)
    return float((vals > 0).mean())


def _segment_hits_obstacle(a, b, obstacles, bounds, n=200):
    ts = np.linspace(0.0, 1.0, n)[:, None]
    pts = np.asarray(a) + ts * (np.asarray(b) - np.asarray(a))
    vals = analytic_sdf(pts, obstacles, bounds)
    return bool(np.any(vals <= 0.0))


def _open_obstacles(rng):
    obstacles = []
    for _ in range(rng.integers(0, 3)):
        c = rng.uniform(0.8, 3.2, size=2)
        obstacles.append(Disk((float(c[0]), float(c[1])), float(rng.uniform(0.12, 0.25))))
    return obstacles


def _cluttered_obstacles(rng):
    obstacles = []
    for _ in range(rng.integers(4, 9)):
        c = rng.uniform(0.5, 3.5, size=2)
        if rng.uniform() < 0.5:
            obstacles.append(Disk((float(c[0]), float(c[1])),
                                  float(rng.uniform(0.15, 0.4))))
        else:
            half = rng.uniform(0.15, 0.45, size=2)
            obstacles.append(Rect((float(c[0]), float(c[1])),
                                  (float(half[0]), float(half[1]))))
    return obstacles


def _dead_end_obstacles(rng, start, goal):
    """A U-shaped trap straddling the straight start->goal segment.

    The mouth opens toward the start, so a straight-line chaser walks in
    and has nowhere locally better to go.
    """
    mid = (np.asarray(start) + np.asarray(goal)) / 2
    gap = float(rng.uniform(0.3, 0.4))       # half opening of the mouth
    depth = float(rng.uniform(0.5, 0.7))     # wing length along x
    thick = 0.06
    back_x = mid[0] + depth / 2
    cy = mid[1]
    obstacles = [
        Rect((back_x, cy), (thick, gap + thick)),
        Rect((back_x - depth / 2, cy + gap), (depth / 2 + thick, thick)),
        Rect((back_x - depth / 2, cy - gap), (depth / 2 + thick, thick)),
    ]
    for _ in range(rng.integers(0, 3)):
        c = rng.uniform(0.5, 3.5, size=2)
        d = Disk((float(c[0]), float(c[1])), float(rng.uniform(0.12, 0.2)))
        if d.sdf(mid) > 0.9:
            obstacles.append(d)
    return obstacles


def generate_scene(seed: int, difficulty: str = "cluttered",
                   n_points: int = 512, resolution: int = 64,
                   max_retries: int = 40) -> SceneSpec:
    """Deterministic scene from (seed, difficulty).

    Cluttered scenes are resampled until their free-space fraction lands
    in [0.4, 0.9]; dead-end scenes always block the straight start->goal
    segment with the trap.
    """
    if difficulty not in ("open", "cluttered", "dead-end"):
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = np.random.default_rng((seed, zlib.crc32(difficulty.encode())))
    bounds = ARENA
    for _ in range(max_retries):
        if difficulty == "dead-end":
            start = np.array([rng.uniform(0.5, 0.9), rng.uniform(1.4, 2.6)])
            goal = np.array([rng.uniform(3.1, 3.5), start[1] + rng.uniform(-0.2, 0.2)])
            obstacles = _dead_end_obstacles(rng, start, goal)
            if analytic_sdf(start, obstacles, bounds) < GRAPH_CLEARANCE:
                continue
            if analytic_sdf(goal, obstacles, bounds) < GRAPH_CLEARANCE:
                continue
            if not _segment_hits_obstacle(start, goal, obstacles, bounds):
                continue
        else:
            obstacles = _open_obstacles(rng) if difficulty == "open" \
                else _cluttered_obstacles(rng)
            if difficulty == "cluttered":
                frac = _free_fraction(obstacles, bounds)
                if not 0.4 <= frac <= 0.9:
                    continue
            try:
                start = _sample_free_point(rng, obstacles, bounds, GRAPH_CLEARANCE)
                goal = _sample_free_point(rng, obstacles, bounds, GRAPH_CLEARANCE)
            except SceneGenerationError:
                continue
            if np.linalg.norm(goal - start) < 1.0:
                continue
        points = _boundary_points(obstacles, bounds, n_points, rng)
        grid = grid_from_obstacles(obstacles, bounds, resolution)
        return SceneSpec(
            scene_id=f"{difficulty}-{seed}", seed=seed, difficulty=difficulty,
            bounds=bounds, obstacles=tuple(obstacles), points=points,
            sdf=grid, start=start, goal=goal)
    raise SceneGenerationError(
        f"could not generate a valid {difficulty!r} scene for seed {seed}")


def _boundary_points(obstacles, bounds, n_points, rng):
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    n_wall = max(n_points // 4, 1) if obstacles else n_points
    n_obs = n_points - n_wall
    pts = []
    per = 2 * ((hi[0] - lo[0]) + (hi[1] - lo[1]))
    wall = Rect(tuple((lo + hi) / 2), tuple((hi - lo) / 2))
    pts.append(wall.boundary_points(n_wall, rng))
    if obstacles:
        weights = []
        for obs in obstacles:
            if isinstance(obs, Disk):
                weights.append(2 * np.pi * obs.radius)
            else:
                weights.append(4 * (obs.half[0] + obs.half[1]))
        weights = np.asarray(weights) / sum(weights)
        counts = np.maximum((weights * n_obs).astype(int), 1)
        for obs, c in zip(obstacles, counts):
            pts.append(obs.boundary_points(int(c), rng))
    out = np.concatenate(pts)[:n_points]
    if len(out) < n_points:
        pad = out[rng.integers(0, len(out), size=n_points - len(out))]
        out = np.concatenate([out, pad])
    return out


def build_sdf(scene: SceneSpec, resolution: int = 64) -> SdfGrid:
    """Rebuild the scene's distance grid at a chosen resolution."""
    return grid_from_obstacles(scene.obstacles, scene.bounds, resolution)


# ---------------------------------------------------------------------------
# navigation graph and expert paths
# ---------------------------------------------------------------------------


class NavGraph:
    """8-connected grid over free space with a clearance margin."""

    def __init__(self, scene: SceneSpec, pitch: float = GRAPH_PITCH,
                 clearance: float = GRAPH_CLEARANCE):
        lo, hi = np.asarray(scene.bounds[0]), np.asarray(scene.bounds[1])
        nx = int(np.floor((hi[0] - lo[0]) / pitch)) + 1
        ny = int(np.floor((hi[1] - lo[1]) / pitch)) + 1
        xs = lo[0] + np.arange(nx) * pitch
        ys = lo[1] + np.arange(ny) * pitch
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        coords = np.stack([gx, gy], axis=-1)
        self.free = analytic_sdf(coords, scene.obstacles, scene.bounds) >= clearance
        self.coords = coords
        self.pitch = pitch
        self.shape = (nx, ny)

    def snap(self, p) -> tuple[int, int]:
        """Nearest free node to p; raises when nothing free is nearby."""
        p = np.asarray(p)
        guess = np.round((p - self.coords[0, 0]) / self.pitch).astype(int)
        gi = int(np.clip(guess[0], 0, self.shape[0] - 1))
        gj = int(np.clip(guess[1], 0, self.shape[1] - 1))
        if self.free[gi, gj]:
            return gi, gj
        free_idx = np.argwhere(self.free)
        if len(free_idx) == 0:
            raise NoPathError("scene has no free graph nodes")
        d = np.linalg.norm(self.coords[free_idx[:, 0], free_idx[:, 1]] - p, axis=1)
        best = free_idx[np.argmin(d)]
        return int(best[0]), int(best[1])

    _NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1),
                  (0, 1), (1, -1), (1, 0), (1, 1)]

    def shortest_path(self, start_node, goal_node) -> np.ndarray:
        """A* with Euclidean costs; returns node coordinates including ends."""
        nx, ny = self.shape
        goal = np.array(goal_node)
        start = tuple(start_node)
        goal_t = tuple(goal_node)
        dist = {start: 0.0}
        parent = {}
        h0 = self.pitch * float(np.linalg.norm(np.array(start) - goal))
        frontier = [(h0, start)]
        closed = set()
        while frontier:
            _, node = heapq.heappop(frontier)
            if node in closed:
                continue
            if node == goal_t:
                path = [node]
                while path[-1] in parent:
                    path.append(parent[path[-1]])
                path.reverse()
                idx = np.array(path)
                return self.coords[idx[:, 0], idx[:, 1]]
            closed.add(node)
            for di, dj in self._NEIGHBORS:
                i, j = node[0] + di, node[1] + dj
                if not (0 <= i < nx and 0 <= j < ny) or not self.free[i, j]:
                    continue
                step = self.pitch * (1.4142135623730951 if di and dj else 1.0)
                cand = dist[node] + step
                if cand < dist.get((i, j), np.inf):
                    dist[(i, j)] = cand
                    parent[(i, j)] = node
                    h = self.pitch * float(np.linalg.norm(np.array((i, j)) - goal))
                    heapq.heappush(frontier, (cand + h, (i, j)))
        raise NoPathError("endpoints are not connected in the navigation graph")


def resample_polyline(points: np.ndarray, max_step: float) -> np.ndarray:
    """Equal arc-length resampling along the polyline, steps <= max_step.

    Output points stay on the original polyline (no corner cutting), so
    clearance guarantees along the path carry over; chord lengths are at
    most the arc spacing.
    """
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(seg.sum())
    if total == 0.0:
        return points[:1].copy()
    n_steps = int(np.ceil(total / max_step))
    targets = np.linspace(0.0, total, n_steps + 1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg[idx] > 0, (targets - cum[idx]) / np.where(seg[idx] > 0, seg[idx], 1.0), 0.0)
    return points[idx] + frac[:, None] * (points[idx + 1] - points[idx])


def collect_expert(scene: SceneSpec, start=None, goal=None,
                   graph: NavGraph | None = None,
                   max_step: float = MAX_STEP) -> np.ndarray:
    """Shortest-path demonstration between start and goal, step-limited."""
    start = scene.start if start is None else np.asarray(start)
    goal = scene.goal if goal is None else np.asarray(goal)
    graph = NavGraph(scene) if graph is None else graph
    path = graph.shortest_path(graph.snap(start), graph.snap(goal))
    return resample_polyline(path, max_step)


def make_windows(trajectories, horizon: int = 32):
    """Stride-1 windows of fixed horizon; short inputs pad the last state.

    Returns (windows, source_index) where source_index[i] names the
    trajectory window i was cut from.
    """
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories given")
    windows = []
    sources = []
    for k, traj in enumerate(trajectories):
        traj = np.asarray(traj, dtype=np.float64)
        if len(traj) < horizon:
            pad = np.repeat(traj[-1:], horizon - len(traj), axis=0)
            windows.append(np.concatenate([traj, pad]))
            sources.append(k)
            continue
        for s in range(len(traj) - horizon + 1):
            windows.append(traj[s:s + horizon])
            sources.append(k)
    return np.stack(windows), np.asarray(sources)


# ---------------------------------------------------------------------------
# placement data for the contact task
# ---------------------------------------------------------------------------


def generate_placements(scene: SceneSpec, n: int, rng: np.random.Generator,
                        spec: FootprintSpec | None = None,
                        contact_gap: float = 0.01, tries: int = 2000) -> np.ndarray:
    """Poses resting the contact edge against obstacle or wall boundary.

    Each pose keeps the footprint penetration-free while its contact edge
    sits within ``contact_gap`` of scene geometry: the data distribution a
    placement generator is expected to learn.
    """
    spec = spec or FootprintSpec()
    poses = []
    for _ in range(tries):
        if len(poses) >= n:
            break
        anchor = scene.points[rng.integers(0, len(scene.points))]
        normal = _free_normal(anchor, scene)
        if normal is None:
            continue
        # orient the contact edge (local -y) against the boundary
        heading = float(np.arctan2(-normal[0], normal[1])
                        + rng.uniform(-0.15, 0.15))
        offset = spec.height / 2 + rng.uniform(0.2 * contact_gap, contact_gap)
        pose = np.array([anchor[0] + normal[0] * offset,
                         anchor[1] + normal[1] * offset, heading])
        verts, contact = footprint_vertices(pose, spec)
        if np.any(scene.clearance(verts) < 0.0):
            continue
        gap = np.linalg.norm(contact[:, None, :] - scene.points[None], axis=-1).min()
        if gap > 2 * contact_gap:
            continue
        poses.append(pose)
    if len(poses) < n:
        raise SceneGenerationError(
            f"only placed {len(poses)}/{n} contact poses in {scene.scene_id}")
    return np.asarray(poses)


def _free_normal(anchor, scene, h=0.02):
    """Outward free-space direction at a boundary sample, or None."""
    probe = np.array([[h, 0], [-h, 0], [0, h], [0, -h]])
    vals = scene.clearance(anchor + probe)
    g = np.array([vals[0] - vals[1], vals[2] - vals[3]]) / (2 * h)
    norm = np.linalg.norm(g)
    if norm < 1e-6:
        return None
    return g / norm


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

SCENE_FORMAT_VERSION = 1


def save_scene(scene: SceneSpec, path):
    """Write the structured-text scene document plus a binary sdf blob."""
    doc = {
        "format": "difftraj-scene",
        "version": SCENE_FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "difficulty": scene.difficulty,
        "bounds": [list(scene.bounds[0]), list(scene.bounds[1])],
        "start": scene.start.tolist(),
        "goal": scene.goal.tolist(),
        "obstacles": [
            {"kind": "disk", "center": list(o.center), "radius": o.radius}
            if isinstance(o, Disk) else
            {"kind": "rect", "center": list(o.center), "half": list(o.half)}
            for o in scene.obstacles
        ],
        "points": scene.points.tolist(),
        "sdf_blob": str(path) + ".sdf",
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    with open(str(path) + ".sdf", "wb") as fh:
        r = scene.sdf.resolution
        fh.write(struct.pack("<II", SCENE_FORMAT_VERSION, r))
        fh.write(struct.pack("<2d", *scene.sdf.origin))
        fh.write(struct.pack("<d", scene.sdf.cell))
        fh.write(scene.sdf.values.astype("<f8").tobytes())


def load_scene(path) -> SceneSpec:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "difftraj-scene":
        raise ValueError(f"{path}: not a scene document")
    if doc.get("version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported scene format version "
                         f"{doc.get('version')}")
    obstacles = []
    for o in doc["obstacles"]:
        if o["kind"] == "disk":
            obstacles.append(Disk(tuple(o["center"]), o["radius"]))
        else:
            obstacles.append(Rect(tuple(o["center"]), tuple(o["half"])))
    with open(doc["sdf_blob"], "rb") as fh:
        version, r = struct.unpack("<II", fh.read(8))
        if version != SCENE_FORMAT_VERSION:
            raise ValueError("sdf blob version mismatch")
        origin = np.array(struct.unpack("<2d", fh.read(16)))
        cell = struct.unpack("<d", fh.read(8))[0]
        payload = fh.read(r * r * 8)
        if len(payload) != r * r * 8:
            raise ValueError("sdf blob truncated")
        values = np.frombuffer(payload, dtype="<f8").reshape(r, r).copy()
    return SceneSpec(
        scene_id=doc["scene_id"], seed=doc["seed"], difficulty=doc["difficulty"],
        bounds=(tuple(doc["bounds"][0]), tuple(doc["bounds"][1])),
        obstacles=tuple(obstacles), points=np.asarray(doc["points"]),
        sdf=SdfGrid(values=values, origin=origin, cell=cell),
        start=np.asarray(doc["start"]), goal=np.asarray(doc["goal"]))


def write_trajectories(path, records):
    """Record-per-line trajectory file.

    Each record is (scene_id, states) plus optional metadata: states are
    flattened row-major with horizon and state dimension alongside.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            scene_id, states = rec[0], np.asarray(rec[1], dtype=np.float64)
            meta = rec[2] if len(rec) > 2 else {}
            line = {
                "scene": scene_id,
                "horizon": int(states.shape[0]),
                "dim": int(states.shape[1]),
                "states": [float(v) for v in states.reshape(-1)],
            }
            line.update(meta)
            fh.write(json.dumps(line) + "\n")


def read_trajectories(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            states = np.asarray(doc.pop("states")).reshape(
                doc["horizon"], doc["dim"])
            out.append((doc.pop("scene"), states, doc))
    return out
