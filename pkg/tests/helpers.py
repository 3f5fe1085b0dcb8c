"""Shared oracles for the test suite: finite differences, brute-force
enumerations and the categorical mutual-information toy."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from dcmil.core import RunConfig

FD_STEP = 1e-5
FD_TOL = 1e-4


def tiny_config(**changes) -> RunConfig:
    base = dict(S=2, tile_side=32, token_dim=8, n_heads=2, n_blocks=2, N_B=3, D=6, D_B=5, D_hat=4,
                aggregator_hidden=4, batch_size_c1=16, batch_size_c2=8, epochs_pretrain=1, epochs_joint=1,
                epochs_c2=1, k_folds=3, mc_passes=3)
    base.update(changes)
    return RunConfig(**base)


# ----------------------------------------------------------------------
# finite differences


def numeric_grad(fn, tensors, step: float = FD_STEP) -> list:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``tensors`` (edited in place)."""
    grads = []
    for t in tensors:
        g = torch.zeros_like(t)
        flat, gflat = t.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            hi = float(fn())
            flat[i] = orig - step
            lo = float(fn())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(fn, tensors) -> list:
    for t in tensors:
        t.grad = None
    fn().backward()
    return [torch.zeros_like(t) if t.grad is None else t.grad.clone() for t in tensors]


def grad_rel_error(fn, tensors) -> float:
    with torch.no_grad():
        num = numeric_grad(fn, tensors)
    ana = analytic_grad(fn, tensors)
    a = torch.cat([x.reshape(-1) for x in ana])
    n = torch.cat([x.reshape(-1) for x in num])
    return float((a - n).norm() / max(float(a.norm()), float(n.norm()), 1e-8))


# ----------------------------------------------------------------------
# brute-force survival oracles


def brute_concordance(times, events, risks, tie_credit=0.5):
    num, den = 0.0, 0
    n = len(times)
    for i in range(n):
        for j in range(n):
            if events[i] == 1 and times[i] < times[j]:
                if risks[i] == risks[j]:
                    if tie_credit is None:
                        continue
                    num += tie_credit
                elif risks[i] > risks[j]:
                    num += 1
                den += 1
    if den == 0:
        raise ValueError("no comparable pairs")
    return num / den


def direct_cox(risks, times, events) -> float:
    """Product form of the partial likelihood, evaluated without log-sum-exp."""
    lik = 1.0
    for n in range(len(risks)):
        if events[n] == 1:
            denom = sum(math.exp(risks[j]) for j in range(len(risks)) if times[j] >= times[n])
            lik *= math.exp(risks[n]) / denom
    return -math.log(lik)


def youden_scan(u, correct):
    """Every achievable split of the sorted uncertainties, scanned exhaustively."""
    u = np.asarray(u, float)
    c = np.asarray(correct, bool)
    vals = np.unique(u)
    cands = [vals[0]] + [(a + b) / 2 for a, b in zip(vals[:-1], vals[1:])] + [np.nextafter(vals[-1], np.inf)]
    best_t, best_j = None, -np.inf
    for t in cands:
        tpr = np.sum((u < t) & c) / c.sum()
        fpr = np.sum((u < t) & ~c) / (~c).sum()
        if tpr - fpr > best_j:
            best_t, best_j = t, tpr - fpr
    return float(best_t), float(best_j)


# ----------------------------------------------------------------------
# mutual-information toy


def compositions(n: int, k: int):
    if k == 1:
        yield (n,)
        return
    for i in range(n + 1):
        for rest in compositions(n - i, k - 1):
            yield (i,) + rest


def mi_bound_trial(rng: np.random.Generator, K: int, N: int, loss_tcl, independent_first: bool = False):
    """One enumerable toy; returns ``(log N - E[loss_tcl], sum of exact MI terms)``.

    The anchor ``b`` is categorical over ``K`` states and its three partners are
    conditionally independent given ``b``; the normal aggregate is independent of
    everything. The contrastive scores are the true log density ratios, and the
    expectation covers every anchor/partner assignment and every multiset of
    ``N - 1`` negatives drawn from the marginal.
    """
    p_b = rng.dirichlet(np.ones(K))
    conds = [rng.dirichlet(np.full(K, 0.5), size=K) for _ in range(3)]
    if independent_first:
        conds[0] = np.tile(rng.dirichlet(np.ones(K)), (K, 1))
    marg = [p_b @ c for c in conds]
    ratio = [c / m[None, :] for c, m in zip(conds, marg)]
    mi = sum(float(np.sum(p_b[:, None] * c * np.log(r))) for c, r in zip(conds, ratio))

    negs = list(compositions(N - 1, K))
    neg_prob = [math.factorial(N - 1) / np.prod([math.factorial(x) for x in c]) * np.prod(p_b ** np.array(c))
                for c in negs]
    expected = 0.0
    for b in range(K):
        for x1, x2, x3 in itertools.product(range(K), repeat=3):
            w = p_b[b] * conds[0][b, x1] * conds[1][b, x2] * conds[2][b, x3]
            pos = math.log(ratio[0][b, x1] * ratio[1][b, x2] * ratio[2][b, x3])
            # a negative in state i pairs with the normal aggregate (ratio 1) and the anchor's partners
            g = np.log(ratio[1][:, x2] * ratio[2][:, x3])
            for comp, pr in zip(negs, neg_prob):
                states = np.repeat(np.arange(K), comp)
                neg = torch.tensor(g[states], dtype=torch.float64).reshape(1, -1)
                val = float(loss_tcl(torch.tensor([pos], dtype=torch.float64), neg))
                expected += w * pr * val
    return math.log(N) - expected, mi
