"""Survival evaluation, MC-dropout uncertainty and tumor/normal distance maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats


def concordance_index(times, events, risks, tie_credit: Optional[float] = 0.5) -> float:
    """Harrell's C: among pairs with T_i < T_j and an observed event at T_i,
    the fraction where the earlier failure carries the higher risk.

    Risk ties earn ``tie_credit``; pass ``None`` to drop tied pairs entirely.
    Raises ``ValueError`` when no comparable pair exists.
    """
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    r = np.asarray(risks, dtype=float)
    if not (t.shape == e.shape == r.shape) or t.ndim != 1:
        raise ValueError("times, events and risks must be 1-D arrays of equal length")
    comparable = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    higher = r[:, None] > r[None, :]
    tied = r[:, None] == r[None, :]
    concordant = np.sum(comparable & higher)
    n_tied = np.sum(comparable & tied)
    n_pairs = np.sum(comparable)
    if tie_credit is None:
        n_pairs -= n_tied
        n_tied = 0
        tie_credit = 0.0
    if n_pairs == 0:
        raise ValueError("no comparable pairs: concordance index is undefined")
    return float((concordant + tie_credit * n_tied) / n_pairs)


@dataclass(frozen=True)
class KMCurve:
    event_times: np.ndarray
    survival_probs: np.ndarray
    at_risk_counts: np.ndarray

    def survival_at(self, t: float) -> float:
        idx = np.searchsorted(self.event_times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival_probs[idx - 1])


def km_estimate(times, events) -> KMCurve:
    """Product-limit estimate evaluated at the distinct event times."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    if t.size == 0:
        raise ValueError("km_estimate needs at least one observation")
    uniq = np.unique(t[e == 1])
    at_risk = np.array([np.sum(t >= u) for u in uniq], dtype=int)
    deaths = np.array([np.sum((t == u) & (e == 1)) for u in uniq], dtype=int)
    surv = np.cumprod(1.0 - deaths / np.maximum(at_risk, 1)) if uniq.size else np.empty(0)
    return KMCurve(uniq, surv, at_risk)


def logrank_test(group_a, group_b):
    """Two-sample logrank test. Groups are ``(times, events)`` pairs.

    Returns ``(chi-square statistic, p-value)`` with one degree of freedom.
    """
    ta, ea = (np.asarray(x) for x in group_a)
    tb, eb = (np.asarray(x) for x in group_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be nonempty")
    t = np.concatenate([ta, tb]).astype(float)
    e = np.concatenate([ea, eb]).astype(int)
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    o_minus_e = 0.0
    var = 0.0
    for u in np.unique(t[e == 1]):
        risk = t >= u
        n = risk.sum()
        n_a = (risk & in_a).sum()
        d = ((t == u) & (e == 1)).sum()
        d_a = ((t == u) & (e == 1) & in_a).sum()
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        return 0.0, 1.0
    stat = o_minus_e ** 2 / var
    return float(stat), float(stats.chi2.sf(stat, df=1))


def median_split(risks) -> np.ndarray:
    """Boolean high-risk group: risk strictly above the median."""
    r = np.asarray(risks, dtype=float)
    return r > np.median(r)


@dataclass
class UncertaintyReport:
    per_instance_std: np.ndarray
    mean_prob: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    youden_J: Optional[float] = None
    confident_mask: Optional[np.ndarray] = None

    def apply_threshold(self, correct) -> "UncertaintyReport":
        self.threshold, self.youden_J = youden_threshold(self.per_instance_std, correct)
        self.confident_mask = self.per_instance_std < self.threshold
        return self


def mc_dropout_uncertainty(model, levels, mc_passes: int = 30, dropout_rate: float = 0.1,
                           seed: int = 0) -> UncertaintyReport:
    """Std of the final-branch high-risk probability over dropout-active passes.

    ``model`` must provide ``stochastic_high_prob(levels, dropout_rate, generator)``.
    """
    import torch

    if mc_passes < 2:
        raise ValueError("mc_passes must be at least 2")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        draws = torch.stack([model.stochastic_high_prob(levels, dropout_rate, gen) for _ in range(mc_passes)])
    draws = draws.double().numpy()
    return UncertaintyReport(per_instance_std=draws.std(axis=0), mean_prob=draws.mean(axis=0))


def youden_candidates(u: np.ndarray) -> np.ndarray:
    vals = np.unique(u)
    mids = (vals[:-1] + vals[1:]) / 2.0
    return np.concatenate([[vals[0]], mids, [np.nextafter(vals[-1], np.inf)]])


def youden_threshold(uncertainties, correctness):
    """Uncertainty cutoff maximizing J = TPR - FPR.

    A prediction counts as confident when its uncertainty is below the
    cutoff; "positive" means the prediction was correct. Ties in J resolve to
    the smallest cutoff.
    """
    u = np.asarray(uncertainties, dtype=float)
    c = np.asarray(correctness).astype(bool)
    if u.shape != c.shape:
        raise ValueError("uncertainties and correctness must have equal length")
    if c.all() or not c.any():
        raise ValueError("youden_threshold needs both correct and incorrect predictions")
    cand = youden_candidates(u)
    below = u[None, :] < cand[:, None]
    tpr = (below & c).sum(axis=1) / c.sum()
    fpr = (below & ~c).sum(axis=1) / (~c).sum()
    J = tpr - fpr
    best = int(np.argmax(J))
    return float(cand[best]), float(J[best])


def distance_heatmap(reference_reps, query_reps, bin_width: float = 5.0):
    """Euclidean distance of each query instance to the mean reference instance.

    Returns ``(distances, counts, edges)``; histogram bins are ``bin_width`` wide
    starting at 0.
    """
    ref = np.atleast_2d(np.asarray(reference_reps, dtype=float))
    qry = np.atleast_2d(np.asarray(query_reps, dtype=float))
    if ref.shape[1] != qry.shape[1]:
        raise ValueError(f"width mismatch: reference {ref.shape[1]} vs query {qry.shape[1]}")
    d = np.linalg.norm(qry - ref.mean(axis=0), axis=1)
    top = max(bin_width, bin_width * np.ceil(d.max() / bin_width + 1e-12))
    edges = np.arange(0.0, top + bin_width / 2, bin_width)
    counts, _ = np.histogram(d, bins=edges)
    return d, counts, edges
