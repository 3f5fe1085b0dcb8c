"""Curriculum I: saliency-guided multi-magnification instance encoding.

Each magnification has its own branch (patch projection, transformer blocks,
token aggregator, risk head). Branch ``s`` sees its tile multiplied by the
saliency mask of branch ``s - 1`` and adds that branch's representation
through a skip connection, so the last branch summarizes every scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TOKEN_SIDE, RunConfig

EPS = 1e-7


def dropout(x: torch.Tensor, p: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverted dropout that can draw from an explicit generator."""
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class Block(nn.Module):
    """Pre-norm transformer block: attention then a 4x GELU MLP, both residual."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x, p_drop: float = 0.0, generator=None):
        B, T, C = x.shape
        h = self.norm1(x)
        q, k, v = self.qkv(h).reshape(B, T, 3, self.n_heads, C // self.n_heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(C // self.n_heads), dim=-1)
        h = (att @ v).transpose(1, 2).reshape(B, T, C)
        x = x + dropout(self.proj(h), p_drop, generator)
        h = self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x + dropout(h, p_drop, generator)


class Branch(nn.Module):
    def __init__(self, tile_side: int, token_dim: int, n_blocks: int, n_heads: int, channels: int = 1):
        super().__init__()
        if tile_side % TOKEN_SIDE:
            raise ValueError(f"tile side {tile_side} is not divisible by {TOKEN_SIDE}")
        self.tile_side = tile_side
        self.grid = tile_side // TOKEN_SIDE
        self.patchify = nn.Linear(channels * TOKEN_SIDE * TOKEN_SIDE, token_dim)
        self.pos = nn.Parameter(0.02 * torch.randn(self.grid * self.grid, token_dim))
        self.blocks = nn.ModuleList(Block(token_dim, n_heads) for _ in range(n_blocks))
        self.agg_norm = nn.LayerNorm(token_dim)
        self.agg_mlp = nn.Sequential(nn.Linear(token_dim, 4 * token_dim), nn.Tanh(), nn.Linear(4 * token_dim, 1))
        self.head = nn.Linear(token_dim, 2)

    @property
    def token_dim(self) -> int:
        return self.pos.shape[1]


def to_tokens(tiles: torch.Tensor) -> torch.Tensor:
    """(B, H, W) -> (B, n_tokens, 256), tokens in row-major grid order."""
    B, H, W = tiles.shape
    if H % TOKEN_SIDE or W % TOKEN_SIDE:
        raise ValueError(f"tile side {H}x{W} is not divisible by {TOKEN_SIDE}")
    g_h, g_w = H // TOKEN_SIDE, W // TOKEN_SIDE
    t = tiles.reshape(B, g_h, TOKEN_SIDE, g_w, TOKEN_SIDE).permute(0, 1, 3, 2, 4)
    return t.reshape(B, g_h * g_w, TOKEN_SIDE * TOKEN_SIDE)


def patchify_embed(tiles: torch.Tensor, branch: Branch) -> torch.Tensor:
    tokens = branch.patchify(to_tokens(tiles))
    if tokens.shape[1] != branch.pos.shape[0]:
        raise ValueError(f"branch expects {branch.pos.shape[0]} tokens, got {tokens.shape[1]}")
    return tokens + branch.pos


def transformer_forward(tokens: torch.Tensor, branch: Branch, p_drop: float = 0.0, generator=None):
    if tokens.ndim != 3 or tokens.shape[-1] != branch.token_dim:
        raise ValueError(f"expected (batch, n_tokens, {branch.token_dim}) tokens, got {tuple(tokens.shape)}")
    z = tokens
    for block in branch.blocks:
        z = block(z, p_drop, generator)
    return z


def aggregate_tokens(z: torch.Tensor, g_prev: Optional[torch.Tensor], branch: Branch):
    """Attention-pool tokens and add the previous scale's representation.

    Returns ``(g, attention)``; ``g_prev=None`` means the first scale.
    """
    a = torch.softmax(branch.agg_mlp(branch.agg_norm(z)).squeeze(-1), dim=-1)
    g = torch.einsum("bt,btc->bc", a, z)
    if g_prev is not None:
        if g_prev.shape != g.shape:
            raise ValueError(f"g_prev shape {tuple(g_prev.shape)} does not match {tuple(g.shape)}")
        g = g + g_prev
    return g, a


def classify(g: torch.Tensor, branch: Branch) -> torch.Tensor:
    """(low, high) risk probabilities."""
    return torch.softmax(branch.head(g), dim=-1)


@dataclass
class SaliencyMask:
    values: torch.Tensor     # (B, grid, grid) in {0, 1}
    relevance: torch.Tensor  # (B, grid, grid) in [0, 1]


def mask_from_relevance(raw: torch.Tensor, iota: float) -> SaliencyMask:
    """Max-normalize per instance, threshold at ``iota``; empty masks become all-ones."""
    peak = raw.amax(dim=1, keepdim=True)
    rel = torch.where(peak > 0, raw / torch.where(peak > 0, peak, torch.ones_like(peak)), torch.zeros_like(raw))
    values = (rel >= iota).to(raw.dtype)
    empty = values.sum(dim=1, keepdim=True) == 0
    values = torch.where(empty, torch.ones_like(values), values)
    side = int(round(math.sqrt(raw.shape[1])))
    return SaliencyMask(values.reshape(-1, side, side), rel.reshape(-1, side, side))


def saliency_mask(score: torch.Tensor, z: torch.Tensor, iota: float) -> SaliencyMask:
    """Grad-CAM style token mask from the gradient of ``score`` w.r.t. tokens ``z``.

    ``score`` holds one scalar per instance; instances must be independent so
    that the gradient of the summed score is per-instance.
    """
    if not (score.requires_grad and z.requires_grad):
        raise RuntimeError("saliency_mask needs a score and tokens that carry gradients")
    (alpha,) = torch.autograd.grad(score.sum(), z, retain_graph=True)
    raw = F.relu((alpha * z).sum(dim=-1)).detach()
    return mask_from_relevance(raw, iota)


def highlight_input(tile_next: torch.Tensor, mask_prev: Optional[SaliencyMask]) -> torch.Tensor:
    """Block-replicate the coarser token mask onto the finer tile and multiply."""
    if mask_prev is None:
        return tile_next
    m = mask_prev.values
    H, W = tile_next.shape[-2:]
    if H % m.shape[-2] or W % m.shape[-1]:
        raise ValueError(f"mask grid {tuple(m.shape[-2:])} does not tile a {H}x{W} image")
    up = m.repeat_interleave(H // m.shape[-2], dim=-2).repeat_interleave(W // m.shape[-1], dim=-1)
    if up.shape[-2:] != tile_next.shape[-2:]:
        raise ValueError("mask grid and tile shape disagree after replication")
    return up * tile_next


class MultiScaleEncoder(nn.Module):
    """S branches, coarse -> fine."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleList(
            Branch(side, cfg.token_dim, cfg.n_blocks, cfg.n_heads) for side in cfg.tile_sides
        )

    @property
    def S(self) -> int:
        return len(self.branches)

    def forward(self, levels, n_branches: Optional[int] = None, p_drop: Optional[float] = None,
                generator=None, with_masks: bool = True):
        """Run branches 1..n_branches on a batch of instances.

        ``levels[s]`` is a (B, side_s, side_s) tensor. Returns a dict with per-
        branch lists ``p`` (B, 2), ``g`` (B, C), ``z`` and ``masks``.
        """
        n_branches = self.S if n_branches is None else n_branches
        p_drop = self.cfg.dropout if p_drop is None else p_drop
        if with_masks and n_branches > 1 and not torch.is_grad_enabled():
            # the masks need gradients of the scores w.r.t. the tokens
            with torch.enable_grad():
                return self.forward(levels, n_branches, p_drop, generator, with_masks)
        out = {"p": [], "g": [], "z": [], "masks": [], "attn": []}
        g_prev, mask = None, None
        for s in range(n_branches):
            br = self.branches[s]
            x = highlight_input(levels[s], mask)
            z = transformer_forward(patchify_embed(x, br), br, p_drop, generator)
            g, a = aggregate_tokens(z, g_prev, br)
            p = classify(dropout(g, p_drop, generator), br)
            out["p"].append(p)
            out["g"].append(g)
            out["z"].append(z)
            out["attn"].append(a)
            if s + 1 < n_branches and with_masks:
                mask = saliency_mask(p[:, 1], z, self.cfg.iota)
                out["masks"].append(mask)
            elif s + 1 < n_branches:
                mask = None
            g_prev = g
        return out

    def high_prob(self, levels) -> torch.Tensor:
        with torch.enable_grad():
            out = self.forward(levels)
        return out["p"][-1][:, 1].detach()

    def stochastic_high_prob(self, levels, dropout_rate: float, generator) -> torch.Tensor:
        with torch.enable_grad():
            out = self.forward(levels, p_drop=dropout_rate, generator=generator)
        return out["p"][-1][:, 1].detach()

    def share_from_first(self) -> None:
        """Copy branch 1 into every finer branch (positional grids are resampled)."""
        src = self.branches[0]
        for br in list(self.branches)[1:]:
            state = {k: v.clone() for k, v in src.state_dict().items() if k != "pos"}
            br.load_state_dict(state, strict=False)
            g0 = src.grid
            pos = src.pos.detach().T.reshape(1, -1, g0, g0)
            pos = F.interpolate(pos, size=(br.grid, br.grid), mode="bilinear", align_corners=False)
            with torch.no_grad():
                br.pos.copy_(pos.reshape(-1, br.grid * br.grid).T)


# ----------------------------------------------------------------------
# losses


def loss_empirical(p_high: torch.Tensor, y: torch.Tensor, bag_index: Optional[torch.Tensor] = None):
    """Binary cross-entropy over instances and branches.

    ``p_high`` is (n_instances, n_branches). With ``bag_index`` every bag is
    normalized by its own instance count before averaging over bags.
    """
    p = p_high.clamp(EPS, 1 - EPS)
    y = y.to(p.dtype).reshape(-1, 1)
    bce = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean(dim=1)
    if bag_index is None:
        return bce.mean()
    bags, inverse = torch.unique(bag_index, return_inverse=True)
    per_bag = torch.zeros(len(bags), dtype=p.dtype).index_add(0, inverse, bce)
    counts = torch.zeros(len(bags), dtype=p.dtype).index_add(0, inverse, torch.ones_like(bce))
    return (per_bag / counts).mean()


def block_parameters(blocks) -> torch.Tensor:
    return torch.cat([p.reshape(-1) for blk in blocks for p in blk.parameters()])


def loss_structural(branch_s: Branch, branch_prev: Branch, s: int) -> torch.Tensor:
    """2-norm between the first ``s - 1`` blocks of branch ``s`` and branch ``s - 1`` (1-based ``s``)."""
    if s < 2:
        raise ValueError("the structural loss applies to branches s > 1")
    if len(branch_s.blocks) != len(branch_prev.blocks):
        raise ValueError("branches must have the same number of blocks")
    n = min(s - 1, len(branch_s.blocks))
    diff = block_parameters(branch_s.blocks[:n]) - block_parameters(branch_prev.blocks[:n])
    sq = (diff * diff).sum()
    # the norm is not differentiable at 0; use the zero subgradient there
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, torch.sqrt(safe), sq)


def loss_ranking(p_high: torch.Tensor, y: torch.Tensor, eta: float = 1e-3) -> torch.Tensor:
    """Hinge on the log-ratio of adjacent-branch probabilities, summed.

    ``p_high`` is (n_instances, S); terms cover branches 2..S.
    """
    p = p_high.clamp(EPS, 1 - EPS)
    y = y.to(p.dtype).reshape(-1, 1)
    fine, coarse = p[:, 1:], p[:, :-1]
    margin = eta - y * torch.log(fine / coarse) - (1 - y) * torch.log((1 - fine) / (1 - coarse))
    return F.relu(margin).sum()


def loss_c1(l_emp, omega, rank, beta_omega: float = 1e-5, beta_R: float = 1.0):
    if beta_omega < 0 or beta_R < 0:
        raise ValueError("loss weights must be nonnegative")
    return l_emp + beta_omega * omega + beta_R * rank


def self_paced_select(instance_losses, lam: float):
    """Indices of "easy" instances: loss strictly below ``lam``."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return [i for i, v in enumerate(instance_losses) if float(v) < lam]
