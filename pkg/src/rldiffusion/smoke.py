"""Desk-scale training preset and held-out evaluation helpers.

The preset trains on 16 synthetic 64x64 scenes and evaluates on 8 different
ones; it finishes in a few minutes on one CPU core.
"""
import numpy as np

from . import net as netlib
from .corpus import synthetic_corpus
from .env import replay
from .image import psnr
from .inference import denoise
from .noise import NoiseSpec
from .trainer import TrainConfig

TRAIN_SEED = 7
HELDOUT_SEED = 1001
NOISE_SEED_BASE = 100
SIGMA = 25.0


def smoke_corpora(n_train=16, n_test=8, size=64):
    return synthetic_corpus(n_train, TRAIN_SEED, size), synthetic_corpus(n_test, HELDOUT_SEED, size)


def smoke_config(**overrides):
    base = dict(T=5, batch_size=16, patch_size=32, episodes=3000, seed=7, workers=1,
                noise=NoiseSpec("gaussian", SIGMA), deterministic_log=True)
    base.update(overrides)
    return TrainConfig(**base)


def smoke_net_config():
    return netlib.NetConfig(trunk_layers=4, trunk_channels=16, seed=0)


def noisy_heldout(test, sigma=SIGMA):
    spec = NoiseSpec("gaussian", sigma)
    return [spec.apply(f, seed=NOISE_SEED_BASE + k) for k, f in enumerate(test)]


def mean_noisy_psnr(test, noisy):
    return float(np.mean([psnr(np.clip(g, 0, 1), f) for g, f in zip(noisy, test)]))


def mean_greedy_psnr(params, test, noisy, T=5):
    return float(np.mean([denoise(g, params, T, truth=f, clamp=True).psnr_vs_truth
                          for g, f in zip(noisy, test)]))


def uniform_policy_psnr(test, noisy, T=5):
    """Mean PSNR of each fixed policy 'every pixel takes action k at every step'."""
    out = []
    for k in range(9):
        scores = []
        for g, f in zip(noisy, test):
            u = replay(g, [np.full(g.shape, k, dtype=np.uint8)] * T, clamp=True)
            scores.append(psnr(np.clip(u, 0, 1), f))
        out.append(float(np.mean(scores)))
    return out
