"""Trajectory-ensemble aggregation: mean prediction, label map, and
pixel-wise entropy uncertainty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ProbMap


@dataclass(frozen=True)
class EnsembleResult:
    mean_probs: np.ndarray  # (H, W, C)
    label_map: np.ndarray   # (H, W) int
    entropy_map: np.ndarray  # (H, W) float, in [0, ln C]

    @property
    def num_classes(self) -> int:
        return self.mean_probs.shape[-1]

    @property
    def max_entropy(self) -> float:
        return float(np.log(self.num_classes))

    def normalized_entropy(self) -> np.ndarray:
        """Entropy rescaled to [0, 1] by its ln C upper bound."""
        return self.entropy_map / self.max_entropy


def _as_probs(pm) -> np.ndarray:
    return pm.probs if isinstance(pm, ProbMap) else np.asarray(pm, float)


def ensemble_mean(prob_maps) -> np.ndarray:
    """Arithmetic mean of probability maps; stays on the simplex."""
    if not prob_maps:
        raise ValueError("prob_maps must be non-empty")
    arrs = [_as_probs(pm) for pm in prob_maps]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("prob maps have inconsistent shapes")
    return np.mean(arrs, axis=0)


def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Per-pixel entropy -sum_c p log p (natural log, 0 log 0 := 0)."""
    probs = np.asarray(probs, float)
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -plogp.sum(axis=-1)


def finalize(prob_maps) -> EnsembleResult:
    """Mean prediction, argmax label map (lowest index wins ties), entropy."""
    mean = ensemble_mean(prob_maps)
    return EnsembleResult(
        mean_probs=mean,
        label_map=np.argmax(mean, axis=-1),
        entropy_map=entropy_map(mean),
    )


def render_grayscale(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to uint8 for visual inspection."""
    v = np.asarray(values, float)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)
