"""Greedy denoising with a trained policy and rendering of its behaviour."""
import colorsys
from dataclasses import dataclass

import numpy as np

from . import net as netlib
from .env import N_ACTIONS, run_episode
from .image import psnr

MAX_PIXELS = 4096 * 4096


@dataclass
class DenoiseResult:
    denoised: np.ndarray
    action_maps: list
    trace: object
    psnr_vs_truth: float | None = None


def greedy_policy(params):
    """Per-pixel argmax action; np.argmax breaks ties towards the lowest index."""
    def policy(u, t):
        logp, _ = netlib.forward_logp(params, u)
        return np.argmax(logp, axis=-1).astype(np.uint8)
    return policy


def denoise(g, params, T=5, truth=None, clamp=False):
    """Run T greedy diffusion steps from the noisy image g.

    ``clamp`` clips states to [0, 1] after each step. Without it every output
    pixel is an exact convex combination of input pixels.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.size > MAX_PIXELS:
        raise ValueError(f"input must be a 2-D grid of at most {MAX_PIXELS} pixels, got {g.shape}")
    if T < 1:
        raise ValueError("T must be at least 1")
    trace = run_episode(g, truth, greedy_policy(params), T, clamp=clamp)
    score = None if truth is None else psnr(np.clip(trace.final, 0, 1), truth)
    return DenoiseResult(denoised=trace.final, action_maps=list(trace.actions), trace=trace,
                         psnr_vs_truth=score)


def _palette():
    pal = np.empty((N_ACTIONS, 3), dtype=np.uint8)
    pal[0] = (255, 255, 255)
    for k in range(1, N_ACTIONS):
        # action 1 (east) is red, then 45 degree hue steps counter-clockwise
        r, g, b = colorsys.hsv_to_rgb((k - 1) / 8.0, 1.0, 0.9)
        pal[k] = (round(r * 255), round(g * 255), round(b * 255))
    return pal


PALETTE = _palette()


def render_action_map(a):
    """(H, W, 3) uint8 raster: do-nothing is white, directions follow a hue wheel."""
    a = np.asarray(a)
    if a.min(initial=0) < 0 or a.max(initial=0) >= N_ACTIONS:
        raise ValueError("action indices must lie in 0..8")
    return PALETTE[a.astype(np.intp)]


def render_kernel(kernel, zoom=1):
    """Grayscale raster of a composite kernel over its bounding box, max weight -> 1.

    Each kernel cell becomes a zoom x zoom block; for zoom >= 3 the anchor
    block gets a mid-gray frame.
    """
    if zoom < 1:
        raise ValueError("zoom must be positive")
    x0, y0, x1, y1 = kernel.bounding_box()
    grid = np.zeros((x1 - x0 + 1, y1 - y0 + 1))
    for (x, y), wt in kernel.weights.items():
        grid[x - x0, y - y0] = wt
    grid /= grid.max()
    out = np.kron(grid, np.ones((zoom, zoom)))
    if zoom >= 3:
        ax, ay = (kernel.anchor[0] - x0) * zoom, (kernel.anchor[1] - y0) * zoom
        block = out[ax:ax + zoom, ay:ay + zoom]
        block[[0, -1], :] = 0.5
        block[:, [0, -1]] = 0.5
    return out
