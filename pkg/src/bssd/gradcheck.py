"""Central finite-difference verification of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3


@dataclass
class GradCheck:
    name: str
    point: int
    rel_error: float
    passed: bool

    def record(self) -> dict:
        return {"check": self.name, "point": self.point, "rel_error": self.rel_error,
                "passed": self.passed}


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _htm_is_smooth(batch: np.ndarray, beta: float) -> bool:
    """No anchor sits near its hinge, and hardest positive/negative are unique."""
    if np.any(np.abs(metrics.htm_slacks(batch, beta)) <= KINK_MARGIN):
        return False
    n_spk, n_utt, dim = batch.shape
    dist = metrics.pairwise_distances(batch.reshape(-1, dim))
    spk = np.repeat(np.arange(n_spk), n_utt)
    same = spk[:, None] == spk[None, :]
    for row, mask in zip(dist, same):
        pos = np.sort(row[mask])[::-1]
        neg = np.sort(row[~mask])
        if pos[0] - pos[1] <= KINK_MARGIN or (len(neg) > 1 and neg[1] - neg[0] <= KINK_MARGIN):
            return False
    return True


def _smooth_batch(rng: np.random.Generator, beta: float, shape=(3, 2, 8)) -> np.ndarray:
    while True:
        centers = rng.standard_normal((shape[0], 1, shape[2])) * 0.6
        batch = centers + 0.4 * rng.standard_normal(shape)
        if _htm_is_smooth(batch, beta):
            return batch


def run(points: int = 100, seed: int = 0, tolerance: float = TOLERANCE,
        weights: metrics.LossWeights = metrics.LossWeights()) -> list[GradCheck]:
    """Check SI-SDR, batch-hard triplet, CE regulariser and combined-loss gradients."""
    rng = np.random.default_rng(seed)
    beta = weights.beta
    out: list[GradCheck] = []

    def add(name, i, analytic, numeric):
        err = relative_error(analytic, numeric)
        out.append(GradCheck(name, i, err, err < tolerance))

    for i in range(points):
        r = rng.standard_normal(16)
        y = 0.7 * r + rng.standard_normal(16)
        _, g = metrics.si_sdr_grad(y, r)
        add("si_sdr", i, g, numeric_gradient(lambda v: metrics.si_sdr(v, r), y))

        batch = _smooth_batch(rng, beta)
        _, g = metrics.triplet_loss_htm_grad(batch, beta)
        add("triplet_htm", i, g, numeric_gradient(lambda b: metrics.triplet_loss_htm(b, beta), batch))

        _, g = metrics.triplet_ce_regularizer_grad(batch)
        add("triplet_ce", i, g, numeric_gradient(metrics.triplet_ce_regularizer, batch))

        _, g_y, g_b = metrics.combined_loss_grad(y, r, batch, weights)
        n_y = numeric_gradient(lambda v: metrics.combined_loss_grad(v, r, batch, weights)[0], y)
        n_b = numeric_gradient(lambda b: metrics.combined_loss_grad(y, r, b, weights)[0], batch)
        add("combined", i, np.concatenate([g_y, g_b.ravel()]), np.concatenate([n_y, n_b.ravel()]))
    return out
