"""Curriculum II: soft-bag selection, constrained self-attention,
triple-tier contrastive learning and Cox prognosis inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RunConfig

log = logging.getLogger(__name__)

# incremented whenever a cosine meets a zero vector
zero_cosine_warnings = 0


def gumbel_topk(scores: torch.Tensor, k: int, temperature: float = 1.0, noise_on: bool = True,
                generator: Optional[torch.Generator] = None):
    """Hard top-k indicator with a straight-through relaxed top-k for gradients.

    Returns ``(hard, soft, st)``. ``hard`` picks exactly ``k`` entries of the
    perturbed scores, lowest index first among ties. ``soft`` is the sum of
    ``k`` successive softmaxes with already-taken mass suppressed, which tends
    to ``hard`` as the temperature goes to zero. ``st`` equals ``hard`` in the
    forward pass and carries the gradient of ``soft``.
    """
    n = scores.shape[0]
    if k > n:
        raise ValueError(f"cannot select {k} of {n} instances")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    perturbed = scores
    if noise_on:
        u = torch.rand(scores.shape, generator=generator, dtype=scores.dtype).clamp(1e-12, 1 - 1e-12)
        perturbed = scores - torch.log(-torch.log(u))
    order = torch.sort(-perturbed.detach(), stable=True).indices
    hard = torch.zeros_like(scores)
    hard[order[:k]] = 1.0

    # the suppression acts on the unscaled weights so that each round sharpens with the temperature
    weights = perturbed
    soft = torch.zeros_like(scores)
    for _ in range(k):
        a = torch.softmax(weights / temperature, dim=0)
        soft = soft + a
        weights = weights + torch.log((1.0 - a).clamp_min(1e-30))
    st = hard + (soft - soft.detach())
    return hard, soft, st


def select_instances(E: torch.Tensor, h: torch.Tensor, W_logits: torch.Tensor, hard: Optional[torch.Tensor] = None,
                     literal: bool = False) -> torch.Tensor:
    """Fuse the selected rows of ``E`` into ``N_B`` slots.

    Each slot softmaxes its column of ``W_logits`` over the instances, with
    unselected instances masked out, and takes the weighted sum of the
    ``h``-scaled rows. ``literal=True`` softmaxes ``diag(h) @ W_logits``
    instead, letting unselected rows keep weight ``exp(0)``.
    """
    hard = h.detach() if hard is None else hard
    n_sel = int(round(float(hard.sum())))
    if n_sel != min(W_logits.shape[1], E.shape[0]):
        raise ValueError(f"indicator selects {n_sel} instances, expected {min(W_logits.shape[1], E.shape[0])}")
    if literal:
        A = torch.softmax(hard[:, None] * W_logits, dim=0)
    else:
        A = torch.softmax(W_logits.masked_fill(hard[:, None] == 0, float("-inf")), dim=0)
    return A.T @ (h[:, None] * E)


class GatedAggregator(nn.Module):
    """Gated-attention pooling: softmax over items of w . (tanh(V x) * sigmoid(U x))."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.V = nn.Linear(dim, hidden)
        self.U = nn.Linear(dim, hidden)
        self.w = nn.Linear(hidden, 1)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.w(torch.tanh(self.V(x)) * torch.sigmoid(self.U(x))).squeeze(-1)


def aggregate_K(vectors: torch.Tensor, net: GatedAggregator, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Pool (M, D) vectors into one D vector, or one per row of an (A, M) mask."""
    if vectors.shape[0] == 0:
        raise RuntimeError("aggregate_K needs at least one vector")
    s = net.scores(vectors)
    if mask is None:
        return torch.softmax(s, dim=0) @ vectors
    if not bool(mask.any(dim=1).all()):
        raise RuntimeError("aggregate_K: a row of the mask selects no vector")
    w = torch.softmax(s[None, :].masked_fill(~mask, float("-inf")), dim=1)
    return w @ vectors


def log_bilinear(B, B_tilde, B_hat, B_bar, W_L, V_L) -> torch.Tensor:
    """log of exp(B'W B~ + B'W B^ + B'V B-); broadcasts over leading dims."""
    return (torch.einsum("...i,ij,...j->...", B, W_L, B_tilde)
            + torch.einsum("...i,ij,...j->...", B, W_L, B_hat)
            + torch.einsum("...i,ij,...j->...", B, V_L, B_bar))


def tcl_logits(B_anchor, B_tilde, B_hat, B_bar, B_under, B_all, W_L, V_L):
    """Log-scores for the contrastive loss.

    ``B_anchor``, ``B_tilde``, ``B_hat``, ``B_bar`` are (A, D); ``B_all`` is the
    (M, D) pool the negatives come from and ``B_under`` the normal aggregate.
    Returns ``pos`` (A,) and ``neg`` (A, M) with neg[a, i] = log L(B_i, B_under, B_hat_a, B_bar_a).
    """
    pos = log_bilinear(B_anchor, B_tilde, B_hat, B_bar, W_L, V_L)
    neg = (B_all @ W_L @ B_under)[None, :] + (B_all @ W_L @ B_hat.T).T + (B_all @ V_L @ B_bar.T).T
    return pos, neg


def loss_tcl(pos: torch.Tensor, neg: torch.Tensor, neg_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """InfoNCE over anchors: -mean log(e^pos / (e^pos + sum of masked e^neg))."""
    if neg_mask is not None:
        neg = neg.masked_fill(~neg_mask, float("-inf"))
    both = torch.cat([pos[:, None], neg], dim=1)
    return (torch.logsumexp(both, dim=1) - pos).mean()


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    global zero_cosine_warnings
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    zero = (na == 0) | (nb == 0)
    if bool(zero.any()):
        zero_cosine_warnings += int(zero.sum())
        log.warning("cosine similarity with a zero vector treated as 0")
    denom = torch.where(zero, torch.ones_like(na), na * nb)
    return torch.where(zero, torch.zeros_like(na), (a * b).sum(-1) / denom)


def loss_adc(B, B_tilde, B_hat, B_bar, B_under, kappa: float = 1.0) -> torch.Tensor:
    """Absolute distance constraint, summed over anchors (rows)."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    hinge = F.relu(_cos(B, B_under) - _cos(B, B_tilde) + kappa)
    return (hinge + (1 - _cos(B, B_hat)) + (1 - _cos(B, B_bar))).sum()


def loss_cox(risks: torch.Tensor, times, events) -> torch.Tensor:
    """Negative Cox log partial likelihood (Breslow ties: risk set is T_j >= T_n)."""
    t = torch.as_tensor(times, dtype=risks.dtype)
    e = torch.as_tensor(events).bool()
    if not bool(e.any()):
        log.warning("Cox loss on a batch without events is 0")
        return risks.sum() * 0.0
    at_risk = t[None, :] >= t[:, None]  # row n: j in R(T_n)
    lse = torch.logsumexp(risks[None, :].masked_fill(~at_risk, float("-inf")), dim=1)
    return -(risks - lse)[e].sum()


def loss_c2(cox, tcl, adc, s, beta_tcl: float = 1.0, beta_adc: float = 0.1, beta_s: float = 1e-4):
    if min(beta_tcl, beta_adc, beta_s) < 0:
        raise ValueError("loss weights must be nonnegative")
    return cox + beta_tcl * tcl + beta_adc * adc + beta_s * s


@dataclass
class BagRepresentation:
    E: torch.Tensor
    scores: torch.Tensor
    h_hat: torch.Tensor
    E_sel: torch.Tensor
    B: torch.Tensor
    B_bar: torch.Tensor
    risk: torch.Tensor


class SoftBagModel(nn.Module):
    def __init__(self, cfg: RunConfig, in_dim: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        C = cfg.token_dim if in_dim is None else in_dim
        self.project = nn.Linear(C, cfg.D)
        self.scorer = nn.Linear(cfg.D, 1)
        self.slot1 = nn.Linear(cfg.D, cfg.D)
        self.slot2 = nn.Linear(cfg.D, cfg.N_B)
        self.W_Q = nn.Linear(cfg.D, cfg.D_hat, bias=False)
        self.W_K = nn.Linear(cfg.D, cfg.D_hat, bias=False)
        self.W_V = nn.Linear(cfg.D, cfg.D_hat, bias=False)
        self.pool = nn.Linear(cfg.D_hat, cfg.D_B)
        self.K1 = GatedAggregator(cfg.D_B, cfg.aggregator_hidden)
        self.K2 = GatedAggregator(cfg.D_B, cfg.aggregator_hidden)
        self.W_L = nn.Parameter(0.01 * torch.randn(cfg.D_B, cfg.D_B))
        self.V_L = nn.Parameter(0.01 * torch.randn(cfg.D_B, cfg.D_B))
        self.W_S = nn.Linear(cfg.D_B, 1, bias=False)

    def project_bag(self, G: torch.Tensor) -> torch.Tensor:
        if G.shape[-1] != self.project.in_features:
            raise ValueError(f"expected width {self.project.in_features}, got {G.shape[-1]}")
        return self.project(G)

    def attend(self, E_sel: torch.Tensor):
        """Constrained self-attention; returns ``(B, attention)``."""
        Q, K, V = self.W_Q(E_sel), self.W_K(E_sel), self.W_V(E_sel)
        att = torch.softmax(Q @ K.T / math.sqrt(Q.shape[-1]), dim=-1)
        return self.pool((att @ V).mean(dim=0)), att

    def sparseness(self) -> torch.Tensor:
        return self.W_Q.weight.abs().sum() + self.W_K.weight.abs().sum() + self.W_V.weight.abs().sum()

    def instance_vectors(self, E: torch.Tensor) -> torch.Tensor:
        """Each row as a one-instance bag through the attention module."""
        return self.pool(self.W_V(E))

    def infer_risk(self, B: torch.Tensor) -> torch.Tensor:
        return self.W_S(B).squeeze(-1)

    def forward(self, G: torch.Tensor, noise_on: bool = False, generator=None) -> BagRepresentation:
        E = self.project_bag(G)
        n = E.shape[0]
        scores = self.scorer(E).squeeze(-1)
        k = min(self.cfg.N_B, n)
        if k < self.cfg.N_B:
            log.debug("bag with %d instances is smaller than N_B=%d; selecting all", n, self.cfg.N_B)
        hard, _, st = gumbel_topk(scores, k, self.cfg.gumbel_temperature, noise_on, generator)
        W = self.slot2(torch.tanh(self.slot1(E)))
        E_sel = select_instances(E, st, W, hard=hard, literal=self.cfg.literal_selection)
        B, _ = self.attend(E_sel)
        inst = self.instance_vectors(E)
        discarded = hard == 0
        if bool(discarded.any()):
            B_bar = aggregate_K(inst[discarded] * (1 - st[discarded])[:, None], self.K2)
        else:
            B_bar = inst.mean(dim=0)
        return BagRepresentation(E, scores, hard, E_sel, B, B_bar, self.infer_risk(B))
