"""Evaluation metrics: mean Jaccard, Q-binned mortality, treatment difference, discounted return."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np


@dataclass
class JaccardReport:
    mean: float
    per_patient: np.ndarray


@dataclass
class MortalityCurve:
    edges: np.ndarray
    centers: np.ndarray
    rates: np.ndarray     # NaN where a bin is empty
    support: np.ndarray

    def filled_rates(self) -> np.ndarray:
        """Rates with empty bins taking the rate of the nearest non-empty bin."""
        rates = self.rates.copy()
        full = np.flatnonzero(self.support > 0)
        for j in np.flatnonzero(self.support == 0):
            rates[j] = self.rates[full[np.argmin(np.abs(full - j))]]
        return rates

    def rate_at(self, q: float) -> float:
        rate = np.interp(q, self.centers, self.filled_rates())
        return float(np.clip(rate, 0.0, 1.0))


@dataclass
class DifferenceCurve:
    values: np.ndarray    # distinct D
    rates: np.ndarray
    support: np.ndarray


def _jaccard_day(u: np.ndarray, v: np.ndarray) -> float:
    union = np.count_nonzero(u | v)
    if union == 0:
        return 1.0  # both prescribe nothing
    return np.count_nonzero(u & v) / union


def mean_jaccard(recommended: Sequence[np.ndarray], doctor: Sequence[np.ndarray]) -> JaccardReport:
    """Mean over patients of the mean daily Jaccard index.

    Each element of ``recommended``/``doctor`` is one patient's (T_i, K)
    binary matrix. Days where both sets are empty score 1.
    """
    if len(recommended) != len(doctor):
        raise ValueError(f"{len(recommended)} recommended patients vs {len(doctor)} doctor patients")
    if len(doctor) == 0:
        raise ValueError("no patients")
    per = np.empty(len(doctor))
    for i, (u, v) in enumerate(zip(recommended, doctor)):
        u = np.asarray(u) > 0.5
        v = np.asarray(v) > 0.5
        if u.shape != v.shape or u.ndim != 2 or len(u) == 0:
            raise ValueError(f"patient {i}: shapes {u.shape} and {v.shape} are not aligned")
        per[i] = np.mean([_jaccard_day(u[t], v[t]) for t in range(len(u))])
    return JaccardReport(float(per.mean()), per)


def batch_jaccard(recommended: np.ndarray, doctor: np.ndarray, mask: np.ndarray) -> float:
    """Vectorised :func:`mean_jaccard` on padded (B, T, K) arrays."""
    u = recommended > 0.5
    v = doctor > 0.5
    inter = np.count_nonzero(u & v, axis=2)
    union = np.count_nonzero(u | v, axis=2)
    day = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    lengths = mask.sum(axis=1)
    return float(np.mean((day * mask).sum(axis=1) / lengths))


def mortality_curve(q_values: np.ndarray, died: np.ndarray, bins: int = 50) -> MortalityCurve:
    """Equal-width bins over the observed Q range; per-bin mean death label."""
    q = np.asarray(q_values, dtype=np.float64).reshape(-1)
    d = np.asarray(died, dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ValueError("no Q samples")
    if q.shape != d.shape:
        raise ValueError(f"{q.size} Q values but {d.size} death labels")
    if bins < 2:
        raise ValueError("need at least two bins")
    lo, hi = float(q.min()), float(q.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, bins - 1)
    support = np.bincount(idx, minlength=bins)
    deaths = np.bincount(idx, weights=d, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = np.where(support > 0, deaths / np.maximum(support, 1), np.nan)
    return MortalityCurve(edges, 0.5 * (edges[1:] + edges[:-1]), rates, support)


def estimated_mortality(q_values: np.ndarray, died: np.ndarray, policy_expected_q: float, bins: int = 50) -> float:
    """Mortality read off the Q-binned death-rate curve at ``policy_expected_q``.

    ``q_values`` holds every step's Q and ``died`` the owning admission's
    death flag for that step. Linear interpolation between bin centres,
    clamped to [0, 1].
    """
    return mortality_curve(q_values, died, bins).rate_at(policy_expected_q)


def difference_curve(recommended: np.ndarray, doctor: np.ndarray, died: np.ndarray) -> DifferenceCurve:
    """Observed mortality grouped by the per-day Hamming distance between prescriptions.

    ``recommended``/``doctor`` are (N, K) binary rows (one per patient-day),
    ``died`` the owning admission's death flag per row.
    """
    u = np.asarray(recommended) > 0.5
    v = np.asarray(doctor) > 0.5
    died = np.asarray(died, dtype=np.float64).reshape(-1)
    if u.shape != v.shape or u.ndim != 2 or len(died) != len(u):
        raise ValueError(f"misaligned inputs {u.shape}, {v.shape}, {died.shape}")
    D = np.count_nonzero(u != v, axis=1)
    values = np.unique(D)
    support = np.array([np.count_nonzero(D == x) for x in values])
    rates = np.array([died[D == x].mean() for x in values])
    return DifferenceCurve(values, rates, support)


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    rewards = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def expected_return(reward_sequences: Sequence[np.ndarray], gamma: float) -> float:
    """Mean discounted return from the first step, ``R_1 = sum_i gamma^(i-1) r_i``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if len(reward_sequences) == 0:
        raise ValueError("no trajectories")
    return float(np.mean([discounted_return(r, gamma) for r in reward_sequences]))


def write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    tmp.replace(path)
