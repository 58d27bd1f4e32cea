"""Image corpora: directory manifests and a synthetic piecewise-constant generator."""
import os
from dataclasses import dataclass, field

import numpy as np

from .image import load_image, save_image


@dataclass
class CorpusManifest:
    root: str
    paths: list = field(default_factory=list)
    split: str = "train"
    augment: bool = False

    @classmethod
    def scan(cls, root, split="train", augment=False):
        """Collect ``*.pgm`` files under ``root`` in lexicographic order."""
        if not os.path.isdir(root):
            raise FileNotFoundError(f"corpus directory {root!r} does not exist")
        paths = sorted(
            os.path.join(dirpath, name)
            for dirpath, _, names in os.walk(root)
            for name in names if name.lower().endswith(".pgm")
        )
        return cls(root=root, paths=paths, split=split, augment=augment)

    def load(self):
        return [load_image(p) for p in self.paths]

    def names(self):
        return [os.path.relpath(p, self.root) for p in self.paths]


def synthetic_image(rng, size=64, n_shapes=(3, 7), texture=False):
    """Piecewise-constant scene: a background plus layered rectangles, disks and half-planes."""
    h = w = size
    xs, ys = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), rng.uniform(0.15, 0.85))
    for _ in range(int(rng.integers(n_shapes[0], n_shapes[1] + 1))):
        level = rng.uniform(0.05, 0.95)
        kind = rng.integers(3)
        if kind == 0:
            x0, y0 = rng.integers(0, size - 8, size=2)
            x1 = x0 + rng.integers(8, size - x0 + 1)
            y1 = y0 + rng.integers(8, size - y0 + 1)
            mask = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        elif kind == 1:
            cx, cy = rng.uniform(0, size, size=2)
            r = rng.uniform(size / 10, size / 3)
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        else:
            angle = rng.uniform(0, 2 * np.pi)
            cx, cy = rng.uniform(size / 4, 3 * size / 4, size=2)
            mask = (xs - cx) * np.cos(angle) + (ys - cy) * np.sin(angle) > 0
        img[mask] = level
    if texture:
        period = rng.integers(4, 9)
        stripes = ((xs + ys) // period % 2).astype(bool)
        x0, y0 = rng.integers(0, size // 2, size=2)
        region = (xs >= x0) & (xs < x0 + size // 2) & (ys >= y0) & (ys < y0 + size // 2)
        img[region & stripes] = np.clip(img[region & stripes] + 0.2, 0, 1)
    # round to 8-bit levels so saved files reload exactly
    return np.floor(img * 255 + 0.5) / 255


def synthetic_corpus(n, seed, size=64, texture=False):
    rng = np.random.Generator(np.random.PCG64(seed))
    return [synthetic_image(rng, size, texture=texture) for _ in range(n)]


def write_corpus(images, root, prefix="img"):
    os.makedirs(root, exist_ok=True)
    paths = []
    for k, img in enumerate(images):
        path = os.path.join(root, f"{prefix}{k:04d}.pgm")
        save_image(img, path)
        paths.append(path)
    return paths
