import numpy as np
import pytest

from difftraj import arm as arm_mod
from difftraj.arm import (ARM_LINK_RADIUS, ARM_MAX_STEP, ArmSpec, arm_forward,
                          collect_arm_expert, generate_arm_scene,
                          link_points, min_link_distance)
from difftraj.sdf import Disk


@pytest.fixture(scope="module")
def arm():
    return ArmSpec()


class TestKinematics:
    def test_zero_configuration_straight_along_x(self, arm):
        segments, end = arm_forward(np.zeros(3), arm)
        np.testing.assert_allclose(end, np.array(arm.base) + [arm.reach, 0.0])
        assert segments.shape == (3, 2, 2)
        np.testing.assert_allclose(segments[0, 0], arm.base)

    def test_first_joint_quarter_turn(self, arm):
        segments, _ = arm_forward([np.pi / 2, 0.0, 0.0], arm)
        # first link points along +y
        np.testing.assert_allclose(
            segments[0, 1], np.array(arm.base) + [0.0, arm.lengths[0]],
            atol=1e-12)

    def test_out_of_limit_rejected(self, arm):
        with pytest.raises(ValueError):
            arm_forward([4.0, 0.0, 0.0], arm)

    def test_wrong_joint_count_rejected(self, arm):
        with pytest.raises(ValueError):
            arm_forward([0.0, 0.0], arm)


class TestLinkDistance:
    def test_matches_dense_sampling_oracle(self, arm):
        obstacles = [Disk((2.9, 2.4), 0.25), Disk((1.2, 1.5), 0.2)]
        rng = np.random.default_rng(0)
        for _ in range(25):
            q = rng.uniform(-np.pi, np.pi, size=3)
            fast = min_link_distance(q, arm, obstacles)
            # independent oracle: plain loop, 100 points per link
            segs, _ = arm_forward(q, arm)
            best = np.inf
            for a, b in segs:
                for k in range(100):
                    p = a + (b - a) * (k + 1) / 100
                    for obs in obstacles:
                        best = min(best, float(obs.sdf(p)))
            assert abs(fast - best) <= 1e-3

    def test_batched_sampling_shape(self, arm):
        q = np.zeros((4, 5, 3))
        pts = link_points(q, arm, per_link=7)
        assert pts.shape == (4, 5, 21, 2)


class TestArmScenes:
    def test_deterministic(self):
        a = generate_arm_scene(2, n_points=64, resolution=32)
        b = generate_arm_scene(2, n_points=64, resolution=32)
        assert a.obstacles == b.obstacles
        np.testing.assert_array_equal(a.start, b.start)

    def test_endpoints_are_free(self):
        arm = ArmSpec()
        scene = generate_arm_scene(3, n_points=64, resolution=32)
        for q in (scene.start, scene.goal):
            assert min_link_distance(q, arm, scene.obstacles) >= ARM_LINK_RADIUS

    def test_adversarial_straight_line_collides(self):
        arm = ArmSpec()
        for seed in range(3):
            scene = generate_arm_scene(seed, adversarial=True,
                                       n_points=64, resolution=32)
            ts = np.linspace(0, 1, 80)[:, None]
            configs = scene.start + ts * (scene.goal - scene.start)
            pts = link_points(configs, arm, 60)
            d = np.full(pts.shape[:-1], np.inf)
            for obs in scene.obstacles:
                d = np.minimum(d, obs.sdf(pts))
            assert d.min() < ARM_LINK_RADIUS

    def test_nonadversarial_straight_line_clear(self):
        arm = ArmSpec()
        scene = generate_arm_scene(5, adversarial=False,
                                   n_points=64, resolution=32)
        ts = np.linspace(0, 1, 80)[:, None]
        configs = scene.start + ts * (scene.goal - scene.start)
        assert min(min_link_distance(q, arm, scene.obstacles)
                   for q in configs) >= ARM_LINK_RADIUS


class TestArmExpert:
    def test_expert_properties(self):
        arm = ArmSpec()
        scene = generate_arm_scene(7, adversarial=True,
                                   n_points=64, resolution=32)
        traj = collect_arm_expert(scene, arm)
        steps = np.linalg.norm(np.diff(traj, axis=0), axis=1)
        assert steps.max() <= ARM_MAX_STEP + 1e-12
        for q in traj[:: max(len(traj) // 20, 1)]:
            assert min_link_distance(q, arm, scene.obstacles) >= ARM_LINK_RADIUS
        assert np.linalg.norm(traj[0] - scene.start) <= 0.3
        assert np.linalg.norm(traj[-1] - scene.goal) <= 0.3
