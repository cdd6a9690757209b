import numpy as np
import pytest

from difftraj import diffusion as df
from difftraj import epsnet
from difftraj import numkit as nk

BOUNDS = ((0.0, 0.0), (4.0, 4.0))
DIMS = epsnet.ModelDims(state_dim=2, feature_dim=32, token_count=16,
                        n_heads=2, n_blocks=2, time_freqs=16)


@pytest.fixture(scope="module")
def params():
    return epsnet.init_params(0, DIMS)


@pytest.fixture(scope="module")
def points():
    rng = np.random.default_rng(1)
    return rng.uniform(0.2, 3.8, size=(120, 2))


class TestInitParams:
    def test_same_seed_is_bit_identical(self):
        a = epsnet.init_params(3, DIMS)
        b = epsnet.init_params(3, DIMS)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)

    def test_output_head_bias_is_zero(self, params):
        assert np.all(params["head.fc2.b"].data == 0.0)

    def test_different_seeds_differ(self):
        a = epsnet.init_params(0, DIMS)
        b = epsnet.init_params(1, DIMS)
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a)


class TestEncodeScene:
    def test_token_shape_fixed_for_any_cloud_size(self, params):
        for m in (1, 17, 300):
            pts = np.random.default_rng(m).uniform(0.1, 3.9, size=(m, 2))
            tokens = epsnet.encode_scene(pts, params, DIMS, BOUNDS)
            assert tokens.shape == (DIMS.token_count, DIMS.feature_dim)

    def test_permutation_invariance(self, params, points):
        base = epsnet.encode_scene(points, params, DIMS, BOUNDS).data
        perm = np.random.default_rng(2).permutation(len(points))
        again = epsnet.encode_scene(points[perm], params, DIMS, BOUNDS).data
        assert np.array_equal(base, again)

    def test_duplication_invariance(self, params, points):
        base = epsnet.encode_scene(points, params, DIMS, BOUNDS).data
        doubled = epsnet.encode_scene(np.concatenate([points, points]),
                                      params, DIMS, BOUNDS).data
        assert np.array_equal(base, doubled)

    def test_empty_cloud_rejected(self, params):
        with pytest.raises(ValueError):
            epsnet.encode_scene(np.zeros((0, 2)), params, DIMS, BOUNDS)


class TestPredictEpsilon:
    def test_output_matches_input_shape(self, params, points):
        tokens = epsnet.encode_scene(points, params, DIMS, BOUNDS)
        tau = np.random.default_rng(0).normal(size=(9, 2))
        out = epsnet.predict_epsilon(tau, 5, tokens, params, DIMS)
        assert out.shape == (9, 2)
        batched = epsnet.predict_epsilon(np.stack([tau] * 3), [5, 5, 5],
                                         tokens, params, DIMS)
        assert batched.shape == (3, 9, 2)

    def test_deterministic(self, params, points):
        tokens = epsnet.encode_scene(points, params, DIMS, BOUNDS)
        tau = np.random.default_rng(4).normal(size=(6, 2))
        a = epsnet.predict_epsilon(tau, 9, tokens, params, DIMS).data
        b = epsnet.predict_epsilon(tau, 9, tokens, params, DIMS).data
        assert np.array_equal(a, b)

    def test_no_overflow_on_bounded_inputs(self, params, points):
        tokens = epsnet.encode_scene(points, params, DIMS, BOUNDS)
        tau = np.full((12, 2), 10.0)
        out = epsnet.predict_epsilon(tau, 50, tokens, params, DIMS)
        assert np.all(np.isfinite(out.data))

    def test_all_parameter_groups_receive_gradient(self, params, points):
        sched = df.make_schedule(25, 1e-3, 0.2)
        rng = np.random.default_rng(8)
        windows = rng.normal(size=(4, 9, 2))

        def model(tau_t, t, scene):
            tokens = epsnet.encode_scene(points, params, DIMS, BOUNDS)
            return epsnet.predict_epsilon(tau_t, t, tokens, params, DIMS)

        loss = df.ddpm_loss(windows, None, model, sched, rng)
        loss.backward()
        for name, p in params.items():
            assert p.grad is not None, name
            assert np.any(p.grad != 0.0), f"no gradient reached {name}"


def test_position_table_is_readonly_and_cached():
    a = epsnet.position_table(8, 16)
    b = epsnet.position_table(8, 16)
    assert a is b
    with pytest.raises(ValueError):
        a[0, 0] = 1.0


def test_timestep_embedding_shape():
    emb = epsnet.timestep_embedding(np.array([1, 50, 100]), 16)
    assert emb.shape == (3, 32)
    assert np.all(np.isfinite(emb))
