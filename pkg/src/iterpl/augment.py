"""Time/frequency masking over feature matrices, applied during training.

Masks follow the usual masking-augmentation convention: widths are sampled
uniformly including 0, offsets uniformly over valid positions, masks may
overlap, and time-mask width is additionally capped by a fraction of the
utterance length. Time warping is deliberately not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ctc import InvalidConfigError


@dataclass(frozen=True)
class AugmentConfig:
    num_freq_masks: int
    freq_param: int
    num_time_masks: int
    time_param: int
    max_time_ratio: float
    mask_value: float = 0.0

    def validate(self, feature_dim: int | None = None) -> None:
        if min(self.num_freq_masks, self.freq_param, self.num_time_masks, self.time_param) < 0:
            raise InvalidConfigError("mask counts and width parameters must be >= 0")
        if not 0.0 <= self.max_time_ratio <= 1.0:
            raise InvalidConfigError(f"max_time_ratio must be in [0, 1], got {self.max_time_ratio}")
        if feature_dim is not None and self.freq_param > feature_dim:
            raise InvalidConfigError(
                f"freq_param {self.freq_param} exceeds feature_dim {feature_dim}"
            )


# Mask geometry mirroring the common speech setup: two frequency masks of
# width parameter 30 plus ten time masks of width parameter 50 capped at 10%
# of the utterance. The second preset trades them for twenty shorter time
# masks (width parameter 25), the variant used with very small labeled sets.
PRESETS: dict[str, AugmentConfig] = {
    "standard": AugmentConfig(
        num_freq_masks=2, freq_param=30,
        num_time_masks=10, time_param=50, max_time_ratio=0.1,
    ),
    "many_short": AugmentConfig(
        num_freq_masks=2, freq_param=30,
        num_time_masks=20, time_param=25, max_time_ratio=0.1,
    ),
}


def sample_mask(length: int, max_width: int, rng: np.random.Generator) -> tuple[int, int]:
    """(start, width) with width ~ U{0..max_width}, start uniform over fits."""
    max_width = min(max_width, length)
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, length - width + 1))
    return start, width


def spec_augment(features: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Masked copy of a (T, F) feature matrix; the input is left untouched."""
    x = np.asarray(features, dtype=float)
    T, F = x.shape
    cfg.validate(feature_dim=F)
    out = x.copy()
    for _ in range(cfg.num_freq_masks):
        start, width = sample_mask(F, cfg.freq_param, rng)
        out[:, start : start + width] = cfg.mask_value
    time_cap = min(cfg.time_param, int(cfg.max_time_ratio * T))
    for _ in range(cfg.num_time_masks):
        start, width = sample_mask(T, time_cap, rng)
        out[start : start + width, :] = cfg.mask_value
    return out
