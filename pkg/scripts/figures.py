"""Action maps and composite kernels of a trained network on one held-out image.

    python3 scripts/figures.py runs/smoke/checkpoint.bin --out runs/figures [--image 0]

Writes noisy/denoised/truth PGMs, one PPM action map per step, kernel PGMs for
a few pixels near edges and in flat regions, and prints action frequencies.
"""
import argparse
import os

import numpy as np

from rldiffusion.env import ACTION_NAMES, composite_kernels
from rldiffusion.image import save_image, save_ppm
from rldiffusion.inference import denoise, render_action_map, render_kernel
from rldiffusion.net import load_params
from rldiffusion.smoke import noisy_heldout, smoke_corpora


def pick_pixels(f, n=3):
    """n pixels next to strong edges and n in the flattest places."""
    gx, gy = np.gradient(f)
    mag = np.hypot(gx, gy)
    mag[:3], mag[-3:], mag[:, :3], mag[:, -3:] = -1, -1, -1, -1
    order = np.argsort(mag, axis=None)
    flat = [np.unravel_index(i, f.shape) for i in order if mag.flat[i] >= 0][:n]
    edge = [np.unravel_index(i, f.shape) for i in order[::-1][:n]]
    return [tuple(int(v) for v in p) for p in edge + flat]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--out", default="runs/figures")
    ap.add_argument("--image", type=int, default=0)
    ap.add_argument("--zoom", type=int, default=12)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    _, test_set = smoke_corpora()
    f = test_set[args.image]
    g = noisy_heldout(test_set)[args.image]
    res = denoise(g, load_params(args.checkpoint), T=5, truth=f, clamp=True)
    print(f"PSNR {res.psnr_vs_truth:.2f} dB")
    save_image(np.clip(g, 0, 1), os.path.join(args.out, "noisy.pgm"))
    save_image(np.clip(res.denoised, 0, 1), os.path.join(args.out, "denoised.pgm"))
    save_image(f, os.path.join(args.out, "truth.pgm"))
    for t, a in enumerate(res.action_maps):
        save_ppm(render_action_map(a), os.path.join(args.out, f"actions_t{t}.ppm"))
        freq = np.bincount(a.ravel(), minlength=9) / a.size
        print(f"t={t} " + " ".join(f"{n}:{p:.2f}" for n, p in zip(ACTION_NAMES, freq)))
    # kernels are exact only without clamping, so trace an unclamped rerun
    plain = denoise(np.clip(g, 0, 1), load_params(args.checkpoint), T=5)
    for (x, y), k in composite_kernels(plain.trace, pick_pixels(f)).items():
        save_image(render_kernel(k, args.zoom), os.path.join(args.out, f"kernel_{x}_{y}.pgm"))
        print(f"kernel at ({x},{y}): {len(k.weights)} taps, radius {k.support_radius()}")


if __name__ == "__main__":
    main()
