"""Procedural two-task image batches driven by shared latent shapes.

Every batch is a deterministic function of (seed, batch index). Images are
built from a few Gaussian bumps; the segmentation target quantile-bins the
latent field into balanced classes and the regression target is a smooth
transform of the same field, so both tasks are learnable from the shared
input and correlate through the latent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .network import Batch
from .rng import substream

SEG_TASK = 1
DEPTH_TASK = 2


@dataclass(frozen=True)
class SyntheticConfig:
    batch_size: int = 8
    channels: int = 3
    height: int = 12
    width: int = 12
    num_classes: int = 4
    bumps: int = 3
    noise: float = 0.05
    # regression target = tanh(depth_mix[0]*z1 + depth_mix[1]*z2); the first
    # latent also drives segmentation, so these coefficients set how strongly
    # the two tasks compete for shared features
    depth_mix: tuple[float, float] = (0.7, -0.7)

    def validate(self) -> None:
        if min(self.batch_size, self.channels, self.height, self.width, self.bumps) < 1:
            raise ConfigError("synthetic config sizes must be positive")
        if self.num_classes < 2:
            raise ConfigError("synthetic config needs >= 2 classes")
        if self.noise < 0:
            raise ConfigError("synthetic noise must be nonnegative")
        if len(self.depth_mix) != 2:
            raise ConfigError("depth_mix needs exactly two coefficients")


class SyntheticMtlDataset:
    """Seeded batch generator; identical (seed, index) gives identical bytes."""

    def __init__(self, config: SyntheticConfig, seed: int):
        config.validate()
        self.config = config
        self.seed = int(seed)

    def batch(self, index: int) -> Batch:
        return self._generate(f"train-{index}")

    def eval_batch(self, index: int) -> Batch:
        return self._generate(f"eval-{index}")

    def _generate(self, tag: str) -> Batch:
        cfg = self.config
        rng = substream(self.seed, f"synthetic-{tag}")
        ys, xs = np.meshgrid(np.linspace(0.0, 1.0, cfg.height),
                             np.linspace(0.0, 1.0, cfg.width), indexing="ij")

        def bump_field() -> np.ndarray:
            field = np.zeros((cfg.height, cfg.width))
            for _ in range(cfg.bumps):
                cx, cy = rng.uniform(0.0, 1.0, size=2)
                width = rng.uniform(0.15, 0.35)
                amp = rng.uniform(0.5, 1.5)
                field += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * width ** 2))
            centred = field - field.mean()
            scale = centred.std()
            return centred / scale if scale > 0 else centred

        x = np.empty((cfg.batch_size, cfg.channels, cfg.height, cfg.width))
        seg = np.empty((cfg.batch_size, cfg.height, cfg.width), dtype=np.int64)
        depth = np.empty((cfg.batch_size, 1, cfg.height, cfg.width))
        for n in range(cfg.batch_size):
            # two latent fields: segmentation reads the first, regression mixes
            # both, so the tasks share structure but compete for features
            z1 = bump_field()
            z2 = bump_field()
            feats = [z1, z2, (z1 + z2) / np.sqrt(2.0)]
            for c in range(cfg.channels):
                x[n, c] = feats[c % len(feats)] + cfg.noise * rng.normal(size=z1.shape)

            edges = np.quantile(z1, np.linspace(0.0, 1.0, cfg.num_classes + 1)[1:-1])
            seg[n] = np.digitize(z1, edges)
            depth[n, 0] = np.tanh(self.config.depth_mix[0] * z1
                                  + self.config.depth_mix[1] * z2)
        return Batch(x=x, targets={SEG_TASK: seg, DEPTH_TASK: depth})
