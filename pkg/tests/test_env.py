import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rldiffusion.env import (
    ACTION_OFFSETS, DO_NOTHING, N_ACTIONS, apply_actions, apply_kernels, composite_kernels,
    decode_action_map, encode_action_map, kernel_matrix, replay, reward_map, run_episode,
)
from rldiffusion.image import reflect_pixel
from rldiffusion.noise import add_gaussian


def brute_apply(u, a):
    """Per-pixel loop over the action definition."""
    h, w = u.shape
    out = np.empty_like(u)
    for x in range(h):
        for y in range(w):
            k = a[x, y]
            if k == DO_NOTHING:
                out[x, y] = u[x, y]
            else:
                di, dj = ACTION_OFFSETS[k]
                out[x, y] = 0.5 * u[x, y] + 0.5 * reflect_pixel(u, x + di, y + dj)
    return out


def test_action_set():
    assert N_ACTIONS == 9
    offs = set(ACTION_OFFSETS[1:])
    assert len(offs) == 8
    assert offs == {(i, j) for i in (-1, 0, 1) for j in (-1, 0, 1)} - {(0, 0)}
    assert ACTION_OFFSETS[1] == (0, 1) and ACTION_OFFSETS[3] == (-1, 0)


def test_apply_basic_cases():
    u = np.random.default_rng(0).random((5, 4))
    np.testing.assert_array_equal(apply_actions(u, np.zeros((5, 4), int)), u)
    c = np.full((5, 4), 0.3)
    a = np.random.default_rng(1).integers(0, 9, (5, 4))
    np.testing.assert_array_equal(apply_actions(c, a), c)
    # 2x1 grid, both pixels average with each other (S for the top, N for the bottom)
    out = apply_actions(np.array([[0.0], [1.0]]), np.array([[7], [3]]))
    np.testing.assert_array_equal(out, [[0.5], [0.5]])
    with pytest.raises(ValueError):
        apply_actions(u, np.zeros((4, 5), int))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 7), st.integers(1, 7), st.integers(0, 2 ** 32 - 1))
def test_apply_matches_brute_force(h, w, seed):
    rng = np.random.default_rng(seed)
    u = rng.random((h, w))
    a = rng.integers(0, 9, (h, w))
    np.testing.assert_array_equal(apply_actions(u, a), brute_apply(u, a))


def test_apply_batched():
    rng = np.random.default_rng(2)
    u = rng.random((3, 6, 5))
    a = rng.integers(0, 9, (3, 6, 5))
    out = apply_actions(u, a)
    for b in range(3):
        np.testing.assert_array_equal(out[b], apply_actions(u[b], a[b]))


def test_mask_offgrid():
    u = np.random.default_rng(3).random((3, 3))
    a = np.full((3, 3), 2)  # NE
    out = apply_actions(u, a, mask_offgrid=True)
    assert out[0, 1] == u[0, 1] and out[1, 2] == u[1, 2]
    assert out[1, 1] == 0.5 * (u[1, 1] + u[0, 2])


def test_reward_map_cases():
    f = np.full((2, 2), 0.5)
    u = np.random.default_rng(4).random((2, 2))
    np.testing.assert_array_equal(reward_map(f, u, u), 0)
    r = reward_map(np.array([[0.5]]), np.array([[0.7]]), np.array([[0.6]]))
    assert r[0, 0] == pytest.approx(0.03)
    with pytest.raises(ValueError):
        reward_map(f, u, u[:1])


def random_policy(seed):
    rng = np.random.default_rng(seed)
    return lambda u, t: rng.integers(0, 9, u.shape)


def test_telescoping():
    rng = np.random.default_rng(5)
    for k in range(20):
        f = rng.random((8, 8))
        g = rng.random((8, 8))
        tr = run_episode(g, f, random_policy(k), 5)
        lhs = np.sum(tr.rewards, axis=0)
        rhs = (f - g) ** 2 - (f - tr.final) ** 2
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_run_episode_do_nothing():
    g = np.random.default_rng(6).random((4, 4))
    tr = run_episode(g, g * 0.5, lambda u, t: np.zeros(u.shape, int), 1)
    np.testing.assert_array_equal(tr.final, g)
    np.testing.assert_array_equal(tr.rewards[0], 0)
    assert tr.T == 1


def test_run_episode_errors():
    g = np.zeros((3, 3))
    with pytest.raises(ValueError):
        run_episode(g, g, lambda u, t: np.zeros((2, 2), int), 2)
    with pytest.raises(ValueError):
        run_episode(g, g, lambda u, t: np.zeros((3, 3), int), 0)


def test_replay_bitwise_and_bounds():
    rng = np.random.default_rng(7)
    g = rng.random((10, 10))
    tr = run_episode(g, None, random_policy(3), 5)
    u = g
    for t, a in enumerate(tr.actions):
        np.testing.assert_array_equal(u, tr.states[t])
        u = apply_actions(u, a)
    np.testing.assert_array_equal(u, tr.final)
    np.testing.assert_array_equal(replay(g, tr.actions), tr.final)
    assert tr.final.min() >= g.min() and tr.final.max() <= g.max()


def test_noise_decay_east():
    f = np.full((128, 128), 0.5)
    g = add_gaussian(f, 25, seed=12)
    tr = run_episode(g, f, lambda u, t: np.ones(u.shape, int), 1)
    ratio = np.mean((tr.final - f) ** 2) / np.mean((g - f) ** 2)
    assert abs(ratio - 0.5) < 0.05


def test_kernels_do_nothing_and_single_step():
    g = np.random.default_rng(8).random((4, 5))
    tr = run_episode(g, None, lambda u, t: np.zeros(u.shape, int), 3)
    for p, k in composite_kernels(tr).items():
        assert k.weights == {p: 1.0}
    a = np.zeros((4, 5), int)
    a[1, 2] = 1
    tr = run_episode(g, None, lambda u, t: a, 1)
    k = composite_kernels(tr, [(1, 2)])[(1, 2)]
    assert k.weights == {(1, 2): 0.5, (1, 3): 0.5}


def test_kernel_boundary_clamp_merges():
    # pixel on the top row averaging north averages with itself
    a = np.zeros((3, 3), int)
    a[0, 1] = 3
    tr = run_episode(np.zeros((3, 3)), None, lambda u, t: a, 1)
    assert composite_kernels(tr, [(0, 1)])[(0, 1)].weights == {(0, 1): 1.0}


def test_kernel_identity_t3():
    rng = np.random.default_rng(9)
    g = rng.random((8, 8))
    tr = run_episode(g, None, random_policy(11), 3)
    kernels = composite_kernels(tr)
    for (x, y), k in kernels.items():
        assert abs(k.apply(g) - tr.final[x, y]) < 1e-9
        assert abs(sum(k.weights.values()) - 1) < 1e-9
        assert k.support_radius() <= 3
        for wt in k.weights.values():
            assert wt > 0 and (wt * 8) == int(wt * 8)
    np.testing.assert_allclose(apply_kernels(kernel_matrix(tr.actions), g), tr.final, atol=1e-12)


def test_action_map_codec():
    a = np.random.default_rng(10).integers(0, 9, (5, 7)).astype(np.uint8)
    buf = encode_action_map(a, 3)
    assert len(buf) == 16 + 35
    out, step = decode_action_map(buf)
    np.testing.assert_array_equal(out, a)
    assert step == 3
    with pytest.raises(ValueError):
        decode_action_map(buf[:-1])
    with pytest.raises(ValueError):
        decode_action_map(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        encode_action_map(np.full((2, 2), 9), 0)
