"""Acceptance suite: one test per criterion, each printing a PASS line
with its elapsed time and asserting both the property and its runtime
budget. Trained models are built once per session by fixtures; a
criterion that owns a training run includes that time in its budget.

Run with: pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import pytest

from difftraj import numkit as nk
from difftraj import diffusion as df
from difftraj import objectives as obj
from difftraj.arm import ArmSpec, collect_arm_expert, generate_arm_scene, _JointGrid
from difftraj.estimators import TrajectoryDiffusion
from difftraj.evaluate import (build_arm_suite, build_nav_suite,
                               default_guidance, evaluate_suite, run_ablation)
from difftraj.metrics import apd_std, feasibility_metrics
from difftraj.objectives import GuidanceContext, GuidanceSpec, GuidanceTerm
from difftraj.planner import (BehaviorCloningPolicy, NavTask, bc_training_set,
                              plan_inpaint)
from difftraj.sdf import Disk, Rect, grid_from_obstacles
from difftraj.worlds import (MAX_STEP, ROBOT_RADIUS, FootprintSpec, NavGraph,
                             SceneSpec, collect_expert, footprint_vertices,
                             generate_placements, generate_scene, make_windows,
                             resample_polyline, _boundary_points)

ARENA = ((0.0, 0.0), (4.0, 4.0))


def report(num, name, elapsed, budget_s, detail=""):
    print(f"\nACCEPTANCE {num} PASS ({name}) elapsed {elapsed:.1f}s "
          f"budget {budget_s:.0f}s {detail}")
    assert elapsed < budget_s, f"criterion {num} exceeded its runtime budget"


# ---------------------------------------------------------------------------
# shared oracles
# ---------------------------------------------------------------------------


def central_diff(f, x, h):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


# ---------------------------------------------------------------------------
# session fixtures: the trained models
# ---------------------------------------------------------------------------


def bimodal_scene():
    obstacles = (Disk((2.0, 2.0), 0.5),)
    rng = np.random.default_rng(0)
    pts = _boundary_points(list(obstacles), ARENA, 512, rng)
    return SceneSpec(scene_id="bimodal-0", seed=0, difficulty="cluttered",
                     bounds=ARENA, obstacles=obstacles, points=pts,
                     sdf=grid_from_obstacles(obstacles, ARENA, 64),
                     start=np.array([0.7, 2.0]), goal=np.array([3.3, 2.0]))


def bimodal_windows(scene, n=240, seed=42):
    graph = NavGraph(scene)
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        wp = np.array([2.0, 3.1]) if i % 2 == 0 else np.array([2.0, 0.9])
        s = scene.start + rng.uniform(-0.15, 0.15, 2)
        g = scene.goal + rng.uniform(-0.15, 0.15, 2)
        w = wp + rng.uniform([-0.3, -0.25], [0.3, 0.25], 2)
        p1 = graph.shortest_path(graph.snap(s), graph.snap(w))
        p2 = graph.shortest_path(graph.snap(w), graph.snap(g))
        path = np.concatenate([p1, p2[1:]])
        total = np.linalg.norm(np.diff(path, axis=0), axis=1).sum()
        traj = resample_polyline(path, total / 31 + 1e-12)
        assert traj.shape == (32, 2)
        trajs.append(traj)
    return np.stack(trajs)


@pytest.fixture(scope="session")
def toy_gen_model():
    """Bimodal generation model; returns (model, scene, build seconds)."""
    t0 = time.perf_counter()
    scene = bimodal_scene()
    windows = bimodal_windows(scene)
    est = TrajectoryDiffusion(train_steps=3000, batch_size=48, seed=0)
    est.fit([(scene, windows)])
    return est, scene, time.perf_counter() - t0


def placement_scene():
    obstacles = (Rect((2.0, 2.0), (0.55, 0.4)),)
    rng = np.random.default_rng(1)
    pts = _boundary_points(list(obstacles), ARENA, 512, rng)
    return SceneSpec(scene_id="placement-0", seed=0, difficulty="cluttered",
                     bounds=ARENA, obstacles=obstacles, points=pts,
                     sdf=grid_from_obstacles(obstacles, ARENA, 64),
                     start=np.array([0.5, 0.5]), goal=np.array([3.5, 3.5]))


@pytest.fixture(scope="session")
def placement_model():
    """Placement generator on a single-slab scene; (model, scene, seconds)."""
    t0 = time.perf_counter()
    scene = placement_scene()
    spec = FootprintSpec()
    poses = generate_placements(scene, 400, np.random.default_rng(0), spec,
                                tries=20000)
    est = TrajectoryDiffusion(horizon=1, state_dim=3, train_steps=4000, seed=0)
    est.fit([(scene, poses[:, None, :])])
    return est, scene, spec, time.perf_counter() - t0


def nav_training_data(n_scenes=42, per_scene=30, seed=0):
    rng = np.random.default_rng(seed)
    difficulties = ["open", "cluttered", "dead-end"]
    data, bc_x, bc_y = [], [], []
    for s in range(n_scenes):
        scene = generate_scene(s, difficulties[s % 3])
        graph = NavGraph(scene)
        free = np.argwhere(graph.free)
        trajs = []
        tries = 0
        while len(trajs) < per_scene and tries < per_scene * 30:
            tries += 1
            a, b = free[rng.integers(0, len(free), size=2)]
            start = graph.coords[a[0], a[1]]
            goal = graph.coords[b[0], b[1]]
            if np.linalg.norm(goal - start) < 1.0:
                continue
            try:
                trajs.append(collect_expert(scene, start, goal, graph=graph))
            except Exception:
                continue
        windows, _ = make_windows(trajs, 32)
        data.append((scene, windows))
        X, Y = bc_training_set(scene, trajs)
        bc_x.append(X)
        bc_y.append(Y)
    return data, np.concatenate(bc_x), np.concatenate(bc_y)


@pytest.fixture(scope="session")
def nav_models():
    """Navigation planner models; (diffusion, bc, build seconds)."""
    t0 = time.perf_counter()
    data, bc_x, bc_y = nav_training_data()
    est = TrajectoryDiffusion(token_count=64, train_steps=5000, seed=0)
    est.fit(data)
    bc = BehaviorCloningPolicy(train_steps=3000, seed=0).fit(bc_x, bc_y)
    return est, bc, time.perf_counter() - t0


def arm_training_data(n_scenes=14, per_scene=8, seed=0):
    arm = ArmSpec()
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_scenes):
        scene = generate_arm_scene(s, adversarial=False)
        grid = _JointGrid(arm, scene.obstacles)
        free = grid.free_nodes()
        trajs = [collect_arm_expert(scene, arm, grid=grid)]
        tries = 0
        while len(trajs) < per_scene and tries < per_scene * 20:
            tries += 1
            a, b = free[rng.integers(0, len(free), size=2)]
            q0, q1 = grid.config(tuple(a)), grid.config(tuple(b))
            if np.linalg.norm(q1 - q0) < 1.2:
                continue
            try:
                trajs.append(collect_arm_expert(scene, arm, start=q0,
                                                goal=q1, grid=grid))
            except Exception:
                continue
        windows, _ = make_windows(trajs, 32)
        out.append((scene, windows))
    return out


@pytest.fixture(scope="session")
def arm_model():
    t0 = time.perf_counter()
    data = arm_training_data()
    est = TrajectoryDiffusion(state_dim=3, token_count=64, train_steps=3000,
                              seed=0)
    est.fit(data)
    return est, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_c1_numerics_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    def check(build, arrays, tol=1e-6, h=1e-5):
        probe = build(*[nk.Tensor(a.copy()) for a in arrays])
        w = np.random.default_rng(5).normal(size=probe.data.shape)
        tensors = [nk.Tensor(a.copy()) for a in arrays]
        build(*tensors).backward(seed=w)
        for idx, tensor in enumerate(tensors):
            def scalar(x):
                local = [a.copy() for a in arrays]
                local[idx] = x
                return float((build(*[nk.Tensor(a) for a in local]).data * w).sum())
            fd = central_diff(scalar, arrays[idx].copy(), h)
            assert rel_err(tensor.grad, fd) <= tol

    # every differentiable kernel at 1e-6
    x = rng.normal(size=(4, 6))
    w1 = rng.normal(size=(6, 6))
    b1 = rng.normal(size=(6,))
    gain = rng.normal(size=(6,)) * 0.3 + 1.0
    bias = rng.normal(size=(6,)) * 0.2
    other = rng.normal(size=(4, 6))
    check(lambda a: nk.relu(a), [x + 0.03])
    check(lambda a: nk.gelu(a), [x])
    check(lambda a: nk.softmax(a), [x])
    check(lambda a, g, b: nk.layer_norm(a, g, b), [x, gain, bias])
    check(lambda a, ww, bb: nk.affine(a, ww, bb), [x, w1, b1])
    check(lambda a, c: nk.add(a, c), [x, other])
    check(lambda a, c: nk.mul(a, c), [x, other])
    check(lambda a, c: nk.concat([a, c], axis=1), [x, other])
    check(lambda a: nk.reduce_sum(a, axis=0), [x])
    check(lambda a: nk.reduce_mean(a), [x])
    check(lambda q, k, v: nk.attention(q, k, v, n_heads=2), [x, other, x + other])

    # every composed objective at 1e-4, probed away from grid-cell edges
    # and clamp boundaries
    grid = grid_from_obstacles([Disk((2.0, 2.0), 0.5), Rect((1.0, 3.0), (0.3, 0.2))],
                               ARENA, 128)
    spec = FootprintSpec()
    arm = ArmSpec()
    agrid = grid_from_obstacles([Disk((3.0, 2.0), 0.3)], ARENA, 128)
    pgrid = grid_from_obstacles([Rect((2.0, 2.0), (0.4, 0.4))], ARENA, 128)
    contact_pts = np.array([[1.0, 1.0], [3.0, 2.5], [0.5, 3.0]])
    goal = np.array([0.5, -0.4])

    cases = [
        ("sdf_clearance",
         lambda v: obj.sdf_clearance(v, grid, 0.12),
         np.array([2.0, 2.0]) + rng.uniform(-0.56, 0.56, size=(10, 2)), 1e-6),
        ("contact",
         lambda v: obj.contact_objective(v, spec, contact_pts),
         np.array([1.6, 1.4, 0.3]), 1e-6),
        ("smoothness", obj.smoothness, rng.normal(size=(7, 2)), 1e-6),
        ("arm_clearance",
         lambda v: obj.arm_clearance(v, arm, agrid),
         np.array([[0.120709, 0.207028, -0.121350]]), 1e-6),
        ("footprint_penetration",
         lambda v: obj.footprint_penetration(v, spec, pgrid),
         np.array([2.470473, 2.128019, 0.195766]), 1e-7),
    ]
    for variant in obj.GOAL_VARIANTS:
        cases.append((f"goal[{variant}]",
                      lambda v, _v=variant: obj.goal_objective(v, goal, _v),
                      rng.normal(size=(5, 2)), 1e-6))
    for name, fn, x0, h in cases:
        value, grad = fn(x0)
        assert np.any(np.asarray(grad) != 0.0), f"{name} probe is inactive"
        fd = central_diff(
            lambda v: float(np.atleast_1d(fn(v)[0])[0]), x0.copy(), h)
        assert rel_err(np.asarray(grad), fd) <= 1e-4, name

    report(1, "numerics", time.perf_counter() - t0, 60)


def test_c2_diffusion_correctness():
    t0 = time.perf_counter()
    sched = df.make_schedule()
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.posterior_var[0] == 0.0
    assert sched.alpha_bar[-1] <= 1e-2

    rng = np.random.default_rng(3)
    tau0 = np.array([[0.7, -1.3]])
    for t in (7, 40, 88):
        n = 10_000
        eps = rng.standard_normal((n, 1, 2))
        draws = np.sqrt(sched.alpha_bar[t - 1]) * tau0 \
            + np.sqrt(1 - sched.alpha_bar[t - 1]) * eps
        draws = draws[:, 0, :]
        ab = sched.alpha_bar[t - 1]
        mean_tol = 4 * np.sqrt(1 - ab) / np.sqrt(n)
        assert np.all(np.abs(draws.mean(0) - np.sqrt(ab) * tau0[0]) < mean_tol)
        assert np.all(np.abs(draws.var(0) / (1 - ab) - 1) < 0.05)

    clean = rng.normal(size=(6, 2))
    eps = rng.standard_normal((6, 2))
    tau1 = df.forward_diffuse(clean, 1, eps, sched)
    mu, var = df.reverse_moments(tau1, 1, eps, sched)
    assert np.abs(mu - clean).max() <= 1e-12
    assert var == 0.0

    report(2, "diffusion correctness", time.perf_counter() - t0, 120)


def test_c3_anti_collapse_bimodal(toy_gen_model):
    est, scene, build_s = toy_gen_model
    t0 = time.perf_counter()
    samples = est.sample(scene, 200, rng=np.random.default_rng(7))
    mid_y = np.array([s[np.argmin(np.abs(s[:, 0] - 2.0)), 1] for s in samples])
    up = float(np.mean(mid_y > 2.0))
    elapsed = build_s + (time.perf_counter() - t0)
    assert up >= 0.20 and (1 - up) >= 0.20, f"mode frequencies {up:.2f}/{1-up:.2f}"
    report(3, "anti-collapse", elapsed, 15 * 60,
           f"modes {up:.2f}/{1 - up:.2f}")


def test_c4_optimization_guidance(placement_model):
    est, scene, spec, build_s = placement_model
    t0 = time.perf_counter()
    context = GuidanceContext(grid=scene.sdf, footprint=spec,
                              scene_points=scene.points)

    def penetration(poses):
        total = 0.0
        for pose in poses:
            v, _ = obj.footprint_penetration(pose, spec, scene.sdf, clamp=True)
            total += -v
        return total / len(poses)

    def run(lam):
        guidance = None
        if lam > 0:
            guidance = GuidanceSpec(
                terms=(GuidanceTerm("placement_collision", 1.0),),
                scale=lam, mode="scheduled")
        s = est.sample(scene, 100, guidance=guidance, context=context,
                       rng=np.random.default_rng(123))
        poses = s[:, 0, :]
        return penetration(poses), feasibility_metrics(poses, scene, spec)

    pen0, _ = run(0.0)
    pen1, feats1 = run(1.0)
    _, feats100 = run(100.0)
    elapsed = build_s + (time.perf_counter() - t0)
    reduction = 1.0 - pen1 / max(pen0, 1e-12)
    assert reduction >= 0.30, f"penetration reduction {reduction:.2f}"
    assert feats1["feasibility"] > feats100["feasibility"]
    assert feats100["contact"] < feats1["contact"]
    report(4, "optimization guidance", elapsed, 10 * 60,
           f"reduction {reduction:.2f} feas {feats1['feasibility']:.0f}>"
           f"{feats100['feasibility']:.0f} contact {feats100['contact']:.0f}<"
           f"{feats1['contact']:.0f}")


def test_c5_planner_ordering(nav_models):
    est, bc, build_s = nav_models
    t0 = time.perf_counter()
    suite = build_nav_suite("dead-end", range(1000, 1010), 4, master_seed=5)
    assert len(suite) == 40
    guidance = default_guidance()
    report_, eps = evaluate_suite(
        suite, ("diffusion", "greedy", "bc"), model=est, bc_policy=bc,
        guidance=guidance, fixed_frames=15, master_seed=5)
    mets = report_.planners
    diff_s = mets["diffusion"]["success_rate"]
    greedy_s = mets["greedy"]["success_rate"]
    bc_s = mets["bc"]["success_rate"]
    assert diff_s > greedy_s > bc_s, (diff_s, greedy_s, bc_s)
    assert greedy_s <= 50.0, "greedy must fail at least half the dead-ends"
    assert diff_s >= 60.0

    open_suite = build_nav_suite("open", range(1100, 1105), 2, master_seed=6)
    rep_open, eps_open = evaluate_suite(open_suite, ("diffusion",), model=est,
                                        guidance=guidance, fixed_frames=15,
                                        master_seed=6)
    bounds = []
    for (task, goal), ep in zip(open_suite, eps_open["diffusion"]):
        d = float(np.linalg.norm(goal - task.scene.start))
        bounds.append(int(np.ceil(d / MAX_STEP)) + 15)
    steps = [e.steps for e in eps_open["diffusion"]]
    assert float(np.mean(steps)) <= float(np.mean(bounds))
    elapsed = build_s + (time.perf_counter() - t0)
    report(5, "planner ordering", elapsed, 30 * 60,
           f"diffusion {diff_s:.0f}% > greedy {greedy_s:.0f}% > bc {bc_s:.0f}%"
           f" | open steps {np.mean(steps):.0f} <= {np.mean(bounds):.0f}")


def test_c6_inpainting_prefix_clamp(nav_models):
    est, _, _ = nav_models
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    checked = 0
    for k in range(10):
        scene = generate_scene(1200 + k, ("open", "cluttered", "dead-end")[k % 3])
        records = []

        def hook(t, tau, clamp, prefix):
            records.append((tau[:clamp].copy(), prefix.copy()))

        ep = plan_inpaint(est.model_fn(scene), NavTask(scene, budget=12),
                          default_guidance(), rng, horizon=est.horizon,
                          fixed_frames=15, sched=est.schedule_,
                          denoise_hook=hook)
        assert records
        for clamped, prefix in records:
            assert np.array_equal(clamped, prefix)
        checked += len(records)
    report(6, "inpainting prefix clamp", time.perf_counter() - t0, 120,
           f"{checked} denoise steps verified bit-exact")


def test_c7_ablation_structure(nav_models):
    est, _, _ = nav_models
    t0 = time.perf_counter()
    suite = build_nav_suite("dead-end", range(1000, 1006), 2, master_seed=5)
    guidance = default_guidance()

    ff_rows = run_ablation("fixed_frames", [1, 15], model=est,
                           tasks_goals=suite, guidance=guidance, master_seed=5)
    by_ff = {r["fixed_frames"]: r["success_rate"] for r in ff_rows}
    assert by_ff[15] >= by_ff[1]

    gv_rows = run_ablation("goal_variant", ["sum_exp", "last_exp"], model=est,
                           tasks_goals=suite, guidance=guidance, master_seed=5)
    by_gv = {r["goal_variant"]: r["success_rate"] for r in gv_rows}
    assert by_gv["sum_exp"] >= by_gv["last_exp"]
    report(7, "ablation structure", time.perf_counter() - t0, 30 * 60,
           f"fixed-frames 15:{by_ff[15]:.0f}% >= 1:{by_ff[1]:.0f}% | "
           f"all-frames {by_gv['sum_exp']:.0f}% >= last {by_gv['last_exp']:.0f}%")


def test_c8_arm_task(arm_model):
    est, build_s = arm_model
    t0 = time.perf_counter()
    guidance = default_guidance(task="arm-plan")
    results = {}
    for kind, adv in (("cluttered", False), ("adversarial", True)):
        suite = build_arm_suite(range(1000, 1010), adversarial=adv)
        rep, _ = evaluate_suite(suite, ("greedy", "diffusion"), model=est,
                                guidance=guidance, fixed_frames=15,
                                master_seed=3, task_name="arm-plan")
        results[kind] = rep.planners
    overall_diff = np.mean([results[k]["diffusion"]["success_rate"]
                            for k in results])
    overall_greedy = np.mean([results[k]["greedy"]["success_rate"]
                              for k in results])
    assert overall_diff >= overall_greedy - 5.0
    adv = results["adversarial"]
    assert adv["diffusion"]["success_rate"] > adv["greedy"]["success_rate"]
    elapsed = build_s + (time.perf_counter() - t0)
    report(8, "arm task", elapsed, 30 * 60,
           f"overall {overall_diff:.0f}% vs greedy {overall_greedy:.0f}%; "
           f"adversarial {adv['diffusion']['success_rate']:.0f}% > "
           f"{adv['greedy']['success_rate']:.0f}%")


def test_c9_metrics_oracles(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    samples = rng.normal(size=(10, 6))
    apd, std = apd_std(samples)
    total, count = 0.0, 0
    for i in range(10):
        for j in range(i + 1, 10):
            total += float(np.sqrt(((samples[i] - samples[j]) ** 2).sum()))
            count += 1
    assert apd == total / count
    acc = 0.0
    for k in range(6):
        acc += float(np.std(samples[:, k]))
    assert std == acc / 6

    scene = generate_scene(0, "cluttered", n_points=256, resolution=64)
    spec = FootprintSpec()
    poses = np.concatenate([
        generate_placements(scene, 4, rng, spec),
        rng.uniform(0.4, 3.6, size=(5, 3)) * np.array([1, 1, 2]),
    ])
    out = feasibility_metrics(poses, scene, spec)
    ncs, cts, fes = [], [], []
    for pose in poses:
        verts, _ = footprint_vertices(pose, spec)
        vals = scene.clearance(verts)
        ncs.append(float((vals >= 0).mean()))
        contact = obj.contact_distance(pose, spec, scene.points) <= 0.02
        cts.append(contact)
        fes.append(contact and bool((vals >= 0).all()))
    assert out["non_collision"] == 100 * float(np.mean(ncs))
    assert out["contact"] == 100 * float(np.mean(cts))
    assert out["feasibility"] == 100 * float(np.mean(fes))

    from difftraj.checkpoint import load_checkpoint, save_checkpoint
    from difftraj.config import dict_hash
    arrays = {"w": rng.normal(size=(13, 7)), "t": rng.normal(size=(100,))}
    path = tmp_path / "oracle.ckpt"
    save_checkpoint(path, arrays, dict_hash({"seed": 1}))
    back, _ = load_checkpoint(path)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])

    report(9, "metrics oracles", time.perf_counter() - t0, 60)
