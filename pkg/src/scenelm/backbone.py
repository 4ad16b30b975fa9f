"""Toy multimodal causal LM over position-aware multi-view tokens.

Visual tokens (patch embeddings + sinusoidal encodings of per-patch mean
world coordinates) form a strict prefix; text tokens follow. Masked views
contribute a single learnable mask vector per patch, with the position
pathway withheld as well, so downstream losses cannot shortcut through
geometry on masked views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import position_features, unproject_frame

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    dim: int = 128
    heads: int = 4
    layers: int = 4
    vocab_size: int = 512
    patch: int = 16
    max_seq: int = 320
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class ViewMask:
    """Per-view visibility bits: 1 = visible, 0 = masked."""

    bits: np.ndarray
    gamma: float

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        expected = int(round(self.gamma * self.bits.size))
        if int((self.bits == 0).sum()) != expected:
            raise ValueError(
                f"mask has {(self.bits == 0).sum()} zeros, expected round({self.gamma}*{self.bits.size})={expected}"
            )

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits == 0)


def full_view_mask(num_views: int) -> ViewMask:
    return ViewMask(bits=np.ones(num_views, dtype=np.int64), gamma=0.0)


@dataclass
class ScenePack:
    """Precomputed per-view patch inputs for one scene (teacher-independent)."""

    patches: np.ndarray  # (M, P, patch*patch*3) float32
    centers: np.ndarray  # (M, P, 3) per-patch mean world coordinate
    points: list  # [M][P] arrays (n_valid, 3) of patch world points
    num_views: int
    patches_per_view: int


@dataclass
class VisualTokens:
    tokens: torch.Tensor  # (N, D)
    view_index: np.ndarray  # (N,)
    centers: np.ndarray  # (N, 3)
    points: list  # length N
    num_views: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.view_index.shape[0]:
            raise ValueError("token/view_index length mismatch")


@dataclass
class MultimodalSequence:
    """Visual prefix followed by text ids; labels ignore-marked with -100."""

    visual: VisualTokens
    text_ids: torch.Tensor  # (T_text,) long
    labels: torch.Tensor  # (T_text,) long, -100 on unsupervised positions


def build_scene_pack(frames: Sequence, patch: int = 16) -> ScenePack:
    """Patchify frames and attach per-patch world geometry from depth."""
    num_views = len(frames)
    h, w = frames[0].rgb.shape[:2]
    if h % patch or w % patch:
        raise ValueError(f"frame size {h}x{w} not divisible by patch {patch}")
    ph, pw = h // patch, w // patch
    per_view = ph * pw
    patches = np.empty((num_views, per_view, patch * patch * 3), dtype=np.float32)
    centers = np.zeros((num_views, per_view, 3), dtype=np.float64)
    points: list = []
    for v, f in enumerate(frames):
        grid = f.rgb.reshape(ph, patch, pw, patch, 3).transpose(0, 2, 1, 3, 4)
        patches[v] = grid.reshape(per_view, -1)
        pm = unproject_frame(f)
        coords = pm.coords.reshape(ph, patch, pw, patch, 3).transpose(0, 2, 1, 3, 4).reshape(per_view, -1, 3)
        valid = pm.valid.reshape(ph, patch, pw, patch).transpose(0, 2, 1, 3).reshape(per_view, -1)
        view_pts = []
        for p in range(per_view):
            pts = coords[p][valid[p]]
            view_pts.append(pts.astype(np.float32))
            if len(pts):
                centers[v, p] = pts.mean(axis=0)
        points.append(view_pts)
    return ScenePack(patches=patches, centers=centers, points=points,
                     num_views=num_views, patches_per_view=per_view)


class CausalSelfAttention(nn.Module):
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
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(L, L, dtype=torch.bool, device=x.device), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        out = torch.softmax(att, dim=-1) @ v
        return self.proj(out.transpose(0, 1).reshape(L, d))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class MultimodalLm(nn.Module):
    """Patch projector + learnable mask token + causal transformer + LM head."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * 3, cfg.dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_seq, cfg.dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)
        )
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)

    @property
    def dtype(self):
        return self.patch_embed.weight.dtype

    def embed_pack(self, pack: ScenePack, view_mask: ViewMask) -> VisualTokens:
        """Assemble the visual prefix; masked views become the shared mask token."""
        if pack.num_views != view_mask.bits.size:
            raise ValueError(f"{pack.num_views} views but mask of length {view_mask.bits.size}")
        per_view = pack.patches_per_view
        tokens = []
        for v in range(pack.num_views):
            if view_mask.bits[v]:
                x = self.patch_embed(torch.from_numpy(pack.patches[v]).to(self.dtype))
                pos = position_features(pack.centers[v], self.cfg.dim)
                x = x + torch.from_numpy(pos).to(self.dtype)
            else:
                x = self.mask_token.unsqueeze(0).expand(per_view, -1)
            tokens.append(x)
        n = pack.num_views * per_view
        return VisualTokens(
            tokens=torch.cat(tokens, dim=0),
            view_index=np.repeat(np.arange(pack.num_views), per_view),
            centers=pack.centers.reshape(n, 3),
            points=[p for view_pts in pack.points for p in view_pts],
            num_views=pack.num_views,
        )

    def embed_video(self, frames: Sequence, view_mask: ViewMask) -> VisualTokens:
        if len(frames) != view_mask.bits.size:
            raise ValueError(f"{len(frames)} frames but mask of length {view_mask.bits.size}")
        return self.embed_pack(build_scene_pack(frames, self.cfg.patch), view_mask)

    def forward(self, seq: MultimodalSequence):
        """Causal pass; returns (hidden (L, D), text logits (T_text, vocab))."""
        n = seq.visual.tokens.shape[0]
        t = seq.text_ids.shape[0]
        if n + t > self.cfg.max_seq:
            raise ValueError(f"sequence length {n + t} exceeds context {self.cfg.max_seq}")
        x = seq.visual.tokens
        if t:
            x = torch.cat([x, self.tok_embed(seq.text_ids)], dim=0)
        x = x + self.pos_embed[: n + t]
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        if t:
            logits = self.lm_head(hidden[n - 1 : n + t - 1])
        else:
            logits = hidden.new_zeros((0, self.cfg.vocab_size))
        return hidden, logits

    @torch.no_grad()
    def generate(self, visual: VisualTokens, prompt_ids: Sequence[int],
                 max_new_tokens: int = 8, eos_id: Optional[int] = None) -> List[int]:
        """Greedy decoding after the prompt; stops at eos_id or the budget."""
        ids = list(prompt_ids)
        out: List[int] = []
        for _ in range(max_new_tokens):
            seq = MultimodalSequence(
                visual=visual,
                text_ids=torch.tensor(ids, dtype=torch.long),
                labels=torch.full((len(ids),), -100, dtype=torch.long),
            )
            n = visual.tokens.shape[0]
            x = torch.cat([visual.tokens, self.tok_embed(seq.text_ids)], dim=0)
            x = x + self.pos_embed[: x.shape[0]]
            for block in self.blocks:
                x = block(x)
            nxt = int(self.lm_head(self.ln_f(x)[-1]).argmax())
            if eos_id is not None and nxt == eos_id:
                break
            ids.append(nxt)
            out.append(nxt)
        return out


def text_loss(logits: torch.Tensor, labels: torch.Tensor):
    """Mean cross-entropy over supervised positions; (0, False) when none."""
    supervised = labels != -100
    if not bool(supervised.any()):
        return logits.new_zeros(()), False
    return F.cross_entropy(logits[supervised], labels[supervised]), True


def save_backbone(model: MultimodalLm, path):
    torch.save({"version": CHECKPOINT_VERSION, "config": model.cfg.__dict__,
                "state": model.state_dict()}, path)


def load_backbone(path) -> MultimodalLm:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported backbone checkpoint version in {path}")
    model = MultimodalLm(BackboneConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    return model
