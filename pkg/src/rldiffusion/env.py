"""Multi-agent diffusion MDP: one agent per pixel, nine actions per agent.

Action 0 leaves the pixel unchanged. Actions 1..8 replace the pixel by the
mean of itself and one neighbour (see ``ACTION_OFFSETS``). All agents read
the current state and write the next one (synchronous update); neighbours
off the grid are replicate-padded, so for most boundary pixels an outward
action averages the pixel with itself.
"""
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .image import shift

DO_NOTHING = 0
N_ACTIONS = 9
# index -> (row offset, column offset); E, NE, N, NW, W, SW, S, SE
ACTION_OFFSETS = (
    (0, 0),
    (0, 1), (-1, 1), (-1, 0), (-1, -1),
    (0, -1), (1, -1), (1, 0), (1, 1),
)
ACTION_NAMES = ("nothing", "E", "NE", "N", "NW", "W", "SW", "S", "SE")

ACTION_MAP_MAGIC = b"RDAM"


def _check_actions(u, a):
    if a.shape != u.shape:
        raise ValueError(f"action map shape {a.shape} does not match state shape {u.shape}")


def apply_actions(u, a, mask_offgrid=False):
    """One synchronous transition. Works on (H, W) grids or (..., H, W) batches.

    With ``mask_offgrid`` an action whose neighbour lies off the grid acts
    as do-nothing instead of averaging with the clamped coordinate.
    """
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a)
    _check_actions(u, a)
    out = u.copy()
    h, w = u.shape[-2:]
    for k in range(1, N_ACTIONS):
        di, dj = ACTION_OFFSETS[k]
        sel = a == k
        if mask_offgrid:
            rows = (np.arange(h) + di >= 0) & (np.arange(h) + di < h)
            cols = (np.arange(w) + dj >= 0) & (np.arange(w) + dj < w)
            sel = sel & rows[:, None] & cols[None, :]
        if sel.any():
            out[sel] = 0.5 * u[sel] + 0.5 * shift(u, di, dj)[sel]
    return out


def reward_map(f, u_prev, u_next):
    """Per-pixel decrease of squared error: (f - u_prev)^2 - (f - u_next)^2."""
    f, u_prev, u_next = (np.asarray(x, dtype=np.float64) for x in (f, u_prev, u_next))
    if not f.shape == u_prev.shape == u_next.shape:
        raise ValueError(f"shape mismatch: {f.shape}, {u_prev.shape}, {u_next.shape}")
    return (f - u_prev) ** 2 - (f - u_next) ** 2


@dataclass
class EpisodeTrace:
    """States, action maps and reward maps of one rollout.

    ``states[t]`` is the state before step t, so ``states[0]`` is the noisy
    input. Arrays may carry a leading batch axis. ``rewards`` is empty when
    no ground truth was available.
    """
    g: np.ndarray
    f: np.ndarray | None
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    final: np.ndarray | None = None
    clamp: bool = False

    @property
    def T(self):
        return len(self.actions)

    def all_states(self):
        return self.states + [self.final]


def transition(u, a, clamp=False, mask_offgrid=False):
    nxt = apply_actions(u, a, mask_offgrid=mask_offgrid)
    if clamp:
        np.clip(nxt, 0.0, 1.0, out=nxt)
    return nxt


def run_episode(g, f, policy, T, clamp=False):
    """Roll out T steps from g. ``policy(state, t)`` returns an action map.

    ``clamp`` clips each new state to [0, 1]; only needed when g itself can
    leave that range (Gaussian noise).
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    g = np.asarray(g, dtype=np.float64)
    if f is not None and np.shape(f) != g.shape:
        raise ValueError(f"ground truth shape {np.shape(f)} does not match {g.shape}")
    trace = EpisodeTrace(g=g, f=f, clamp=clamp)
    u = g
    for t in range(T):
        a = np.asarray(policy(u, t))
        if a.shape != u.shape:
            raise ValueError(f"policy returned shape {a.shape} for state {u.shape}")
        nxt = transition(u, a, clamp=clamp)
        trace.states.append(u)
        trace.actions.append(a)
        if f is not None:
            trace.rewards.append(reward_map(f, u, nxt))
        u = nxt
    trace.final = u
    return trace


def replay(g, actions, clamp=False):
    u = np.asarray(g, dtype=np.float64)
    for a in actions:
        u = transition(u, a, clamp=clamp)
    return u


def transition_matrix(a):
    """Sparse row-stochastic matrix M with apply_actions(u, a).ravel() == M @ u.ravel()."""
    a = np.asarray(a)
    h, w = a.shape
    n = h * w
    xs, ys = np.divmod(np.arange(n), w)
    flat = a.ravel()
    offs = np.array(ACTION_OFFSETS)
    nx = np.clip(xs + offs[flat, 0], 0, h - 1)
    ny = np.clip(ys + offs[flat, 1], 0, w - 1)
    moving = flat != DO_NOTHING
    stay = np.where(moving, 0.5, 1.0)
    rows = np.concatenate([np.arange(n), np.flatnonzero(moving)])
    cols = np.concatenate([np.arange(n), (nx * w + ny)[moving]])
    vals = np.concatenate([stay, np.full(moving.sum(), 0.5)])
    # duplicates (neighbour clamped onto the pixel itself) are summed by tocsr
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def kernel_matrix(actions):
    """Product of the per-step transition matrices; row p is the kernel of pixel p."""
    actions = list(actions)
    if not actions:
        raise ValueError("need at least one action map")
    h, w = np.shape(actions[0])
    P = sp.identity(h * w, format="csr")
    for a in actions:
        P = transition_matrix(a) @ P
    return P


@dataclass(frozen=True)
class CompositeKernel:
    anchor: tuple
    weights: dict  # (x, y) -> weight

    def support_radius(self):
        ax, ay = self.anchor
        return max(max(abs(x - ax), abs(y - ay)) for x, y in self.weights)

    def bounding_box(self):
        xs = [x for x, _ in self.weights]
        ys = [y for _, y in self.weights]
        return min(xs), min(ys), max(xs), max(ys)

    def apply(self, g):
        return sum(wt * g[x, y] for (x, y), wt in self.weights.items())


def composite_kernels(trace, pixels=None):
    """Effective averaging kernel of each requested pixel (all pixels by default).

    Composes the per-step transition matrices of the trace, so the kernel of
    pixel p holds the exact weights with which u^(T)[p] averages the input g.
    Only meaningful for unclamped traces (clamping is not linear).
    """
    if np.ndim(trace.g) != 2:
        raise ValueError("composite kernels need a single (unbatched) trace")
    h, w = trace.g.shape
    P = kernel_matrix(trace.actions)
    if pixels is None:
        pixels = [(x, y) for x in range(h) for y in range(w)]
    out = {}
    for x, y in pixels:
        if not (0 <= x < h and 0 <= y < w):
            raise ValueError(f"pixel {(x, y)} outside {h}x{w} grid")
        row = P.getrow(x * w + y)
        cx, cy = np.divmod(row.indices, w)
        out[(x, y)] = CompositeKernel(
            anchor=(x, y),
            weights={(int(a), int(b)): float(v) for a, b, v in zip(cx, cy, row.data) if v != 0},
        )
    return out


def apply_kernels(P, g):
    g = np.asarray(g, dtype=np.float64)
    return (P @ g.ravel()).reshape(g.shape)


def encode_action_map(a, step):
    """16-byte header (magic, height, width, step; little-endian u32) + one byte per pixel."""
    a = np.asarray(a)
    if a.ndim != 2 or a.min(initial=0) < 0 or a.max(initial=0) >= N_ACTIONS:
        raise ValueError("action map must be 2-D with indices in 0..8")
    h, w = a.shape
    return ACTION_MAP_MAGIC + struct.pack("<III", h, w, step) + a.astype(np.uint8).tobytes()


def decode_action_map(buf):
    if len(buf) < 16 or buf[:4] != ACTION_MAP_MAGIC:
        raise ValueError("not an action map (bad magic)")
    h, w, step = struct.unpack("<III", buf[4:16])
    body = buf[16:]
    if len(body) != h * w:
        raise ValueError(f"action map payload has {len(body)} bytes, expected {h * w}")
    a = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if a.max(initial=0) >= N_ACTIONS:
        raise ValueError("action index out of range")
    return a.copy(), step
