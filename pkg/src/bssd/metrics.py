"""SI-SDR, triplet losses, the embedding regulariser and identification rates.

Every loss comes with an analytic gradient; :mod:`bssd.gradcheck` verifies
them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError

SDR_CAP = 300.0
CE_FLOOR = 1e-12
_DB = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.2
    lambda1: float = 1e-2
    lambda2: float = 1e-4

    def __post_init__(self):
        if self.beta <= 0:
            raise InvalidInputError("margin beta must be positive")


# -- SI-SDR -----------------------------------------------------------------

def si_sdr_grad(y: np.ndarray, r: np.ndarray) -> tuple[float, np.ndarray]:
    """SI-SDR in dB and its gradient with respect to ``y``.

    ``10 log10(|a r|^2 / |a r - y|^2)`` with ``a = y.r / r.r``. Values are
    clipped to +-300 dB; the gradient is zero where the clip is active.
    """
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if y.shape != r.shape:
        raise InvalidInputError(f"length mismatch: {y.shape} vs {r.shape}")
    rr = r @ r
    if rr == 0:
        raise InvalidInputError("reference signal is all zeros")
    target = (y @ r) / rr * r
    err = y - target
    pt, pe = target @ target, err @ err
    if pt == 0:
        return -SDR_CAP, np.zeros_like(y)
    if pe == 0:
        return SDR_CAP, np.zeros_like(y)
    value = _DB * np.log(pt / pe)
    if value >= SDR_CAP:
        return SDR_CAP, np.zeros_like(y)
    if value <= -SDR_CAP:
        return -SDR_CAP, np.zeros_like(y)
    grad = _DB * (2 * target / pt - 2 * err / pe)
    return float(value), grad


def si_sdr(y: np.ndarray, r: np.ndarray) -> float:
    return si_sdr_grad(y, r)[0]


def si_sdr_loss(y: np.ndarray, r: np.ndarray) -> tuple[float, np.ndarray]:
    """Negative SI-SDR and its gradient."""
    v, g = si_sdr_grad(y, r)
    return -v, -g


# -- triplet losses ---------------------------------------------------------

def triplet_loss(e_a: np.ndarray, e_p: np.ndarray, e_n: np.ndarray, beta: float) -> float:
    """``[|e_a - e_p| - |e_a - e_n| + beta]_+``."""
    e_a, e_p, e_n = (np.asarray(x, dtype=np.float64) for x in (e_a, e_p, e_n))
    if not e_a.shape == e_p.shape == e_n.shape:
        raise InvalidInputError("embedding dimensions differ")
    return max(np.linalg.norm(e_a - e_p) - np.linalg.norm(e_a - e_n) + beta, 0.0)


def _check_batch(batch: np.ndarray) -> np.ndarray:
    b = np.asarray(batch, dtype=np.float64)
    if b.ndim != 3 or b.shape[0] < 2 or b.shape[1] < 2:
        raise InvalidInputError(f"batch must be (B >= 2, P >= 2, E), got {b.shape}")
    return b


def _unit(diff: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(diff, axis=-1, keepdims=True)
    out = np.zeros_like(diff)
    np.divide(diff, n, out=out, where=n > 0)
    return out


def pairwise_distances(flat: np.ndarray) -> np.ndarray:
    diff = flat[:, None, :] - flat[None, :, :]
    return np.linalg.norm(diff, axis=-1)


def triplet_loss_htm_grad(batch: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss and its gradient (same shape as ``batch``).

    For each anchor, the farthest same-speaker embedding and the nearest
    other-speaker embedding form the triplet; the hinge is averaged over all
    ``B * P`` anchors.
    """
    b = _check_batch(batch)
    n_spk, n_utt, dim = b.shape
    flat = b.reshape(-1, dim)
    dist = pairwise_distances(flat)
    spk = np.repeat(np.arange(n_spk), n_utt)
    same = spk[:, None] == spk[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    anchors = np.arange(len(flat))
    slack = beta + dist[anchors, pos] - dist[anchors, neg]
    active = slack > 0
    value = float(np.sum(slack[active]) / len(flat))
    grad = np.zeros_like(flat)
    scale = 1.0 / len(flat)
    for a in np.flatnonzero(active):
        u_p = _unit(flat[a] - flat[pos[a]])
        u_n = _unit(flat[a] - flat[neg[a]])
        grad[a] += scale * (u_p - u_n)
        grad[pos[a]] -= scale * u_p
        grad[neg[a]] += scale * u_n
    return value, grad.reshape(b.shape)


def triplet_loss_htm(batch: np.ndarray, beta: float) -> float:
    return triplet_loss_htm_grad(batch, beta)[0]


def htm_slacks(batch: np.ndarray, beta: float) -> np.ndarray:
    """Per-anchor hinge argument ``beta + hardest positive - hardest negative``."""
    b = _check_batch(batch)
    flat = b.reshape(-1, b.shape[2])
    dist = pairwise_distances(flat)
    spk = np.repeat(np.arange(b.shape[0]), b.shape[1])
    same = spk[:, None] == spk[None, :]
    return beta + np.max(np.where(same, dist, -np.inf), axis=1) - np.min(np.where(same, np.inf, dist), axis=1)


def triplet_ce_regularizer_grad(batch: np.ndarray, flip_sign: bool = False) -> tuple[float, np.ndarray]:
    """``-1/((B^2-B) P^2) sum_{a != n} sum_{i,j} log |e~_a^i . e~_n^j|^2`` and its gradient.

    The squared cosine is clamped to ``[1e-12, 1]`` (zero gradient when
    clamped). As written this term is smallest when different speakers'
    embeddings are parallel; ``flip_sign=True`` returns the negated variant.
    """
    b = _check_batch(batch)
    n_spk, n_utt, dim = b.shape
    flat = b.reshape(-1, dim)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("zero embedding cannot be normalised")
    unit = flat / norms[:, None]
    cos = unit @ unit.T
    spk = np.repeat(np.arange(n_spk), n_utt)
    cross = spk[:, None] != spk[None, :]
    sq = cos ** 2
    clipped = np.clip(sq, CE_FLOOR, 1.0)
    norm = 1.0 / ((n_spk ** 2 - n_spk) * n_utt ** 2)
    sign = 1.0 if flip_sign else -1.0
    value = sign * norm * np.sum(np.log(clipped[cross]))
    # d log(c^2) / d unit_x = 2/c * unit_y for every ordered cross pair (x, y)
    live = cross & (sq > CE_FLOOR) & (sq < 1.0)
    coef = np.zeros_like(cos)
    np.divide(2.0, cos, out=coef, where=live)
    # each unordered pair appears as (x, y) and (y, x): both terms depend on x
    g_unit = 2 * coef @ unit
    radial = np.sum(g_unit * unit, axis=1, keepdims=True)
    g = (g_unit - radial * unit) / norms[:, None]
    return float(value), (sign * norm * g).reshape(b.shape)


def triplet_ce_regularizer(batch: np.ndarray, flip_sign: bool = False) -> float:
    return triplet_ce_regularizer_grad(batch, flip_sign)[0]


# -- combined loss ------------------------------------------------------------

def combined_loss(si_sdr_term: float, htm_term: float, ce_term: float,
                  weights: LossWeights = LossWeights()) -> float:
    """``L_SI-SDR + lambda1 L_HTM + lambda2 L_CE`` (the SI-SDR term is the negative SI-SDR)."""
    return si_sdr_term + weights.lambda1 * htm_term + weights.lambda2 * ce_term


def combined_loss_grad(y: np.ndarray, r: np.ndarray, batch: np.ndarray,
                       weights: LossWeights = LossWeights(),
                       flip_sign: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """Combined loss with gradients w.r.t. the output signal and the embedding batch."""
    l_sdr, g_y = si_sdr_loss(y, r)
    l_htm, g_htm = triplet_loss_htm_grad(batch, weights.beta)
    l_ce, g_ce = triplet_ce_regularizer_grad(batch, flip_sign)
    value = combined_loss(l_sdr, l_htm, l_ce, weights)
    return value, g_y, weights.lambda1 * g_htm + weights.lambda2 * g_ce


# -- identification rates -----------------------------------------------------

def _split_distances(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ordered inter-speaker distances (all i, j) and intra-speaker distances (i != j)."""
    b = _check_batch(batch)
    n_spk, n_utt, dim = b.shape
    dist = pairwise_distances(b.reshape(-1, dim))
    spk = np.repeat(np.arange(n_spk), n_utt)
    same = spk[:, None] == spk[None, :]
    off_diag = ~np.eye(len(spk), dtype=bool)
    return dist[~same], dist[same & off_diag]


def far(batch: np.ndarray, delta: float) -> float:
    """Fraction of different-speaker pairs closer than ``delta``."""
    inter, _ = _split_distances(batch)
    return float(np.mean(inter < delta))


def frr(batch: np.ndarray, delta: float) -> float:
    """Fraction of same-speaker pairs farther than ``delta``."""
    _, intra = _split_distances(batch)
    return float(np.mean(intra > delta))


def rate_curves(batch: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inter, intra = _split_distances(batch)
    inter, intra = np.sort(inter), np.sort(intra)
    deltas = np.asarray(deltas, dtype=np.float64)
    fa = np.searchsorted(inter, deltas, side="left") / len(inter)
    fr = (len(intra) - np.searchsorted(intra, deltas, side="right")) / len(intra)
    return fa, fr


def eer(batch: np.ndarray) -> tuple[float, float]:
    """Equal error rate and its threshold.

    FAR and FRR are step functions of the threshold, so sweeping the observed
    distances and the midpoints between them is exhaustive. Ties go to the
    smallest midpoint; an observed distance is returned only if strictly
    better. The reported rate is the mean of FAR and FRR at the threshold.
    """
    inter, intra = _split_distances(batch)
    observed = np.unique(np.concatenate([inter, intra]))
    mids = np.concatenate([[0.0], 0.5 * (observed[1:] + observed[:-1]), [2 * observed[-1] + 1]])
    fa_m, fr_m = rate_curves(batch, mids)
    fa_o, fr_o = rate_curves(batch, observed)
    gap_m, gap_o = np.abs(fa_m - fr_m), np.abs(fa_o - fr_o)
    if gap_o.min() < gap_m.min():
        i = int(np.argmin(gap_o))
        return float(0.5 * (fa_o[i] + fr_o[i])), float(observed[i])
    i = int(np.argmin(gap_m))
    return float(0.5 * (fa_m[i] + fr_m[i])), float(mids[i])


def block_error_rate(reference_embeddings: np.ndarray, block_embeddings: np.ndarray,
                     delta: float) -> float:
    """Share of (speaker, block) pairs whose block embedding is farther than ``delta``
    from the speaker's reference embedding.

    ``reference_embeddings`` is ``(C, E)``, ``block_embeddings`` ``(C, N_b, E)``.
    """
    ref = np.asarray(reference_embeddings, dtype=np.float64)
    blk = np.asarray(block_embeddings, dtype=np.float64)
    if blk.ndim != 3 or ref.ndim != 2 or blk.shape[0] != ref.shape[0] or blk.shape[2] != ref.shape[1]:
        raise InvalidInputError(f"shapes {ref.shape} and {blk.shape} do not line up")
    dist = np.linalg.norm(blk - ref[:, None, :], axis=-1)
    return float(np.mean(dist > delta))
