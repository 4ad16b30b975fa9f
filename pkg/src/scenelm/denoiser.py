"""Conditional diffusion machinery supervising the backbone's visual outputs.

A small transformer denoiser predicts the noise added to frozen-teacher
latents, conditioned on learnable queries that attend over the visual-prefix
hidden states. The same denoiser serves masked-view and BEV targets,
distinguished by a 2-way source embedding. It exists purely as a training
loss; there is no sampling path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import ViewMask
from .teacher import LatentGrid

SOURCES = ("view", "bev")


@dataclass
class NoiseSchedule:
    """Linear-beta schedule; alpha_bars[t] = prod_{i<=t}(1 - beta_i), alpha_bars[0] = 1."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, t_diff: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, t_diff, dtype=np.float64)
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(betas=betas, alpha_bars=alpha_bars)

    @property
    def t_diff(self) -> int:
        return len(self.betas)

    def check_t(self, t: int):
        if not (0 <= t <= self.t_diff):
            raise ValueError(f"timestep {t} outside [0, {self.t_diff}]")

    def snr(self) -> np.ndarray:
        ab = self.alpha_bars[1:]
        return np.sqrt(ab / (1.0 - ab))


@dataclass
class NoisySample:
    z_t: torch.Tensor
    t: int
    eps: torch.Tensor


def forward_diffuse(schedule: NoiseSchedule, z0: torch.Tensor, t: int, eps: torch.Tensor) -> NoisySample:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, exactly."""
    schedule.check_t(t)
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    ab = float(schedule.alpha_bars[t])
    z_t = math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps
    return NoisySample(z_t=z_t, t=t, eps=eps)


def timestep_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = float(t) * freqs
    emb = torch.cat([torch.sin(ang), torch.cos(ang)])
    if dim % 2:
        emb = torch.cat([emb, emb.new_zeros(1)])
    return emb.to(dtype)


@dataclass
class DenoiserConfig:
    width: int = 128
    blocks: int = 3
    queries: int = 16
    heads: int = 4
    latent_dim: int = 8
    latent_patch: int = 2
    max_tokens: int = 64
    cond_dim: int = 128  # must match the backbone hidden width
    t_diff: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


class CrossAttention(nn.Module):
    def __init__(self, dim: int, kv_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        lq, d = x.shape
        lk = ctx.shape[0]
        q = self.q(x).view(lq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k(ctx).view(lk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v(ctx).view(lk, self.heads, self.head_dim).transpose(0, 1)
        att = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim), dim=-1)
        return self.proj((att @ v).transpose(0, 1).reshape(lq, d))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        L, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(L, self.heads, self.head_dim).transpose(0, 1)
        k = k.view(L, self.heads, self.head_dim).transpose(0, 1)
        v = v.view(L, self.heads, self.head_dim).transpose(0, 1)
        att = torch.softmax((q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim), dim=-1)
        return self.proj((att @ v).transpose(0, 1).reshape(L, d))


def modulate(x, shift, scale):
    return x * (1.0 + scale) + shift


class DenoiserBlock(nn.Module):
    """Self-attention + cross-attention to the condition + MLP, with
    adaptive layer modulation driven by the timestep embedding."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = SelfAttention(dim, heads)
        self.ln_c = nn.LayerNorm(dim, elementwise_affine=False)
        self.cross = CrossAttention(dim, dim, heads)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))
        self.ada = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def forward(self, x, c, t_emb):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(t_emb).chunk(6)
        x = x + gate1 * self.attn(modulate(self.ln1(x), shift1, scale1))
        x = x + self.cross(self.ln_c(x), c)
        return x + gate2 * self.mlp(modulate(self.ln2(x), shift2, scale2))


class Denoiser(nn.Module):
    """Query-conditioned noise predictor over teacher latent grids."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.schedule = NoiseSchedule.linear(cfg.t_diff, cfg.beta_start, cfg.beta_end)
        self.queries = nn.Parameter(torch.randn(cfg.queries, w) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        # keep the default init: a zeroed output projection here would cut
        # the only gradient path from the loss into the backbone
        self.cond_attn = CrossAttention(w, cfg.cond_dim, cfg.heads)
        self.source_embed = nn.Embedding(len(SOURCES), w)
        patch_in = cfg.latent_patch * cfg.latent_patch * cfg.latent_dim
        self.patch_in = nn.Linear(patch_in, w)
        self.token_pos = nn.Parameter(torch.randn(cfg.max_tokens, w) * 0.02)
        self.blocks = nn.ModuleList(DenoiserBlock(w, cfg.heads) for _ in range(cfg.blocks))
        self.ln_out = nn.LayerNorm(w, elementwise_affine=False)
        self.head = nn.Linear(w, patch_in)

    @property
    def dtype(self):
        return self.patch_in.weight.dtype

    def make_condition(self, x_visual: torch.Tensor, t: int, source: str = "view") -> torch.Tensor:
        """Learnable queries attend over visual hidden states; timestep and
        source embeddings ride along. Output (Q, width)."""
        if x_visual.shape[0] == 0:
            raise ValueError("empty visual hidden states")
        self.schedule.check_t(t)
        t_emb = self.t_mlp(timestep_embedding(t, self.cfg.width, self.dtype))
        src = self.source_embed(torch.tensor(SOURCES.index(source)))
        base = self.queries + t_emb + src
        return base + self.cond_attn(base, x_visual)

    def _patchify(self, z: torch.Tensor) -> Tuple[torch.Tensor, Tuple[int, int]]:
        h, w, d = z.shape
        p = self.cfg.latent_patch
        if h % p or w % p:
            raise ValueError(f"latent grid {h}x{w} not divisible by patch {p}")
        gh, gw = h // p, w // p
        tokens = z.reshape(gh, p, gw, p, d).permute(0, 2, 1, 3, 4).reshape(gh * gw, -1)
        return tokens, (gh, gw)

    def _unpatchify(self, tokens: torch.Tensor, grid: Tuple[int, int], d: int) -> torch.Tensor:
        gh, gw = grid
        p = self.cfg.latent_patch
        return tokens.reshape(gh, gw, p, p, d).permute(0, 2, 1, 3, 4).reshape(gh * p, gw * p, d)

    def predict_noise(self, z_t: torch.Tensor, c: torch.Tensor, t: int) -> torch.Tensor:
        """eps_hat with the same (h, w, d) shape as z_t."""
        tokens, grid = self._patchify(z_t)
        n = tokens.shape[0]
        if n > self.cfg.max_tokens:
            raise ValueError(f"{n} latent tokens exceed capacity {self.cfg.max_tokens}")
        x = self.patch_in(tokens) + self.token_pos[:n]
        t_emb = self.t_mlp(timestep_embedding(t, self.cfg.width, self.dtype))
        for block in self.blocks:
            x = block(x, c, t_emb)
        return self._unpatchify(self.head(self.ln_out(x)), grid, z_t.shape[-1])


def _draw_t_eps(schedule: NoiseSchedule, shape, rng: np.random.Generator, dtype):
    t = int(rng.integers(1, schedule.t_diff + 1))
    eps = torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    return t, eps


def diffusion_loss(
    denoiser: Denoiser,
    z0: LatentGrid,
    x_visual: torch.Tensor,
    rng: Optional[np.random.Generator] = None,
    valid_mask: Optional[np.ndarray] = None,
    t: Optional[int] = None,
    eps: Optional[torch.Tensor] = None,
):
    """Noise-prediction MSE at a random (t, eps), masked-mean over tokens.

    valid_mask selects latent grid positions (h, w); all positions count
    when absent. Returns (loss, applied); an empty mask yields (0, False).
    """
    tokens = z0.tokens.to(denoiser.dtype)
    if valid_mask is not None and not np.asarray(valid_mask).any():
        return x_visual.new_zeros(()), False
    if t is None or eps is None:
        if rng is None:
            raise ValueError("need rng when (t, eps) are not fixed")
        t_draw, eps_draw = _draw_t_eps(denoiser.schedule, tokens.shape, rng, denoiser.dtype)
        t = t if t is not None else t_draw
        eps = eps if eps is not None else eps_draw
    sample = forward_diffuse(denoiser.schedule, tokens, t, eps)
    c = denoiser.make_condition(x_visual, t, source=z0.source)
    eps_hat = denoiser.predict_noise(sample.z_t, c, t)
    err = (eps_hat - eps) ** 2
    if valid_mask is None:
        return err.mean(), True
    sel = torch.from_numpy(np.asarray(valid_mask, dtype=bool))
    return err[sel].mean(), True


def cross_view_loss(
    denoiser: Denoiser,
    z0_views: Sequence[LatentGrid],
    view_mask: ViewMask,
    x_visual: torch.Tensor,
    rng: Optional[np.random.Generator] = None,
    fixed: Optional[Sequence[Tuple[int, torch.Tensor]]] = None,
):
    """Masked-view reconstruction: mean diffusion loss over masked views.

    Masked views each get their own denoising pass and (t, eps) draw; the
    1/(gamma M) normalizer of the per-view sum is exactly that mean.
    Unmasked views' latents never enter. (0, False) when nothing is masked.
    """
    masked = view_mask.masked_indices
    if masked.size == 0:
        return x_visual.new_zeros(()), False
    total = x_visual.new_zeros(())
    for slot, j in enumerate(masked):
        t, eps = (None, None) if fixed is None else fixed[slot]
        loss_j, _ = diffusion_loss(denoiser, z0_views[j], x_visual, rng=rng, t=t, eps=eps)
        total = total + loss_j
    return total / len(masked), True


def global_view_loss(
    denoiser: Denoiser,
    z0_bev: LatentGrid,
    valid_tokens: np.ndarray,
    x_visual: torch.Tensor,
    rng: Optional[np.random.Generator] = None,
    t: Optional[int] = None,
    eps: Optional[torch.Tensor] = None,
):
    """BEV reconstruction restricted to occupancy-valid latent tokens."""
    if z0_bev.source != "bev":
        raise ValueError("global-view target must be a bev latent")
    return diffusion_loss(denoiser, z0_bev, x_visual, rng=rng, valid_mask=valid_tokens, t=t, eps=eps)


def vanilla_loss(
    denoiser: Denoiser,
    z0_views: Sequence[LatentGrid],
    x_visual: torch.Tensor,
    rng: Optional[np.random.Generator] = None,
    fixed: Optional[Sequence[Tuple[int, torch.Tensor]]] = None,
):
    """Reconstruct the input views themselves (identity transforms):
    mean of per-view diffusion losses, each with its own (t, eps)."""
    total = x_visual.new_zeros(())
    for slot, z0 in enumerate(z0_views):
        t, eps = (None, None) if fixed is None else fixed[slot]
        loss_v, _ = diffusion_loss(denoiser, z0, x_visual, rng=rng, t=t, eps=eps)
        total = total + loss_v
    return total / len(z0_views), True
