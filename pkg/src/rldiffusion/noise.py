"""Seeded noise synthesis: additive Gaussian, salt-and-pepper, Poisson.

All generators draw from numpy's PCG64 bit generator seeded with the given
integer, so each output is a pure function of (image, level, seed). Poisson
counts come from numpy's exact sampler (inversion for small rates, PTRS
rejection above 10); streams are stable for a fixed numpy version only.
"""
from dataclasses import dataclass

import numpy as np

KINDS = ("gaussian", "salt_pepper", "poisson")


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def add_gaussian(img, sigma255, seed):
    """Add i.i.d. N(0, (sigma255/255)^2) noise. The result is not clipped."""
    if sigma255 <= 0:
        raise ValueError(f"sigma must be positive, got {sigma255}")
    img = np.asarray(img, dtype=np.float64)
    return img + _rng(seed).standard_normal(img.shape) * (sigma255 / 255.0)


def add_salt_pepper(img, density, seed):
    """Replace each pixel with probability `density` by 0 or 1 (equal odds)."""
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    img = np.asarray(img, dtype=np.float64)
    rng = _rng(seed)
    hit = rng.random(img.shape) < density
    salt = rng.random(img.shape) < 0.5
    return np.where(hit, salt.astype(np.float64), img)


def add_poisson(img, peak, seed):
    """Each pixel becomes Poisson(pixel * peak) / peak."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    img = np.asarray(img, dtype=np.float64)
    lam = np.clip(img, 0.0, None) * peak
    return _rng(seed).poisson(lam).astype(np.float64) / peak


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"
    # sigma on the 0-255 scale, corruption density, or Poisson peak
    level: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "salt_pepper":
            if not 0 < self.level <= 1:
                raise ValueError(f"salt_pepper density must lie in (0, 1], got {self.level}")
        elif self.level <= 0:
            raise ValueError(f"{self.kind} level must be positive, got {self.level}")

    @property
    def exceeds_range(self):
        """True when noisy values can leave [0, 1]."""
        return self.kind == "gaussian"

    def apply(self, img, seed=None):
        seed = self.seed if seed is None else seed
        if self.kind == "gaussian":
            return add_gaussian(img, self.level, seed)
        if self.kind == "salt_pepper":
            return add_salt_pepper(img, self.level, seed)
        return add_poisson(img, self.level, seed)
