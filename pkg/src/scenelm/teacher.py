"""Frozen latent tokenizer: a tiny KL-regularized convolutional autoencoder.

Trained once on synthetic frames, then frozen; encoding uses the posterior
mean so reconstruction targets are deterministic. After training, a
per-channel scale (std of the posterior mean over the training set) is
folded into encode/decode so latents arrive roughly unit-variance for the
diffusion losses downstream.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

TEACHER_VERSION = 1


class TeacherTrainingError(RuntimeError):
    pass


@dataclass
class TeacherConfig:
    latent_dim: int = 8
    stride: int = 8
    base_channels: int = 32
    kl_weight: float = 1e-3
    lr: float = 2e-3
    batch_size: int = 32
    epochs: int = 60
    mse_threshold: float = 0.01
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class LatentGrid:
    """Teacher latents for one image: (h, w, d) tokens at a fixed stride."""

    tokens: torch.Tensor
    stride: int
    source: str  # "view" or "bev"

    def __post_init__(self):
        if self.source not in ("view", "bev"):
            raise ValueError(f"unknown latent source {self.source!r}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("latent tokens contain non-finite values")


class LatentTeacher(nn.Module):
    """stride-8 conv encoder/decoder with a diagonal-Gaussian bottleneck."""

    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        if cfg.stride != 8:
            raise ValueError("architecture is fixed at stride 8")
        self.cfg = cfg
        c = cfg.base_channels
        d = cfg.latent_dim
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 3 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(3 * c, 3 * c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(3 * c, 2 * d, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(d, 3 * c, 1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(3 * c, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * c, c, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, 3, 3, padding=1),
        )
        # identity until train_teacher measures the latent statistics
        self.register_buffer("latent_scale", torch.ones(d))
        self.frozen = False

    def posterior(self, images: torch.Tensor):
        """images (B, 3, H, W) -> (mean, logvar), each (B, d, h, w)."""
        h = self.encoder(images)
        mean, logvar = torch.chunk(h, 2, dim=1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    # -- frozen-teacher API ------------------------------------------------

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        if image.shape[0] % self.cfg.stride or image.shape[1] % self.cfg.stride:
            raise ValueError(f"image size {image.shape[:2]} not divisible by stride {self.cfg.stride}")
        return image

    @torch.no_grad()
    def encode(self, image: np.ndarray, source: str = "view") -> LatentGrid:
        """Posterior mean (no sampling), scaled per channel; deterministic."""
        image = self._check_image(image)
        x = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
        mean, _ = self.posterior(x)
        z = mean[0] / self.latent_scale[:, None, None]
        return LatentGrid(tokens=z.permute(1, 2, 0).contiguous(), stride=self.cfg.stride, source=source)

    @torch.no_grad()
    def decode(self, z: LatentGrid | torch.Tensor) -> np.ndarray:
        tokens = z.tokens if isinstance(z, LatentGrid) else z
        zc = tokens.permute(2, 0, 1).unsqueeze(0) * self.latent_scale[:, None, None]
        img = self.decode_latent(zc)[0].permute(1, 2, 0)
        return img.clamp(0.0, 1.0).numpy()

    def state_checksum(self) -> str:
        buf = io.BytesIO()
        torch.save({k: v for k, v in sorted(self.state_dict().items())}, buf)
        return hashlib.sha256(buf.getvalue()).hexdigest()


def _to_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2)


def teacher_corpus(bundles) -> List[np.ndarray]:
    """Standard teacher training corpus for a list of SceneBundles.

    All rendered views and BEV targets, plus flat-field images (black, white,
    gray) so degenerate constant inputs are in-domain for the tokenizer.
    Flat fields match the frame resolution (frames and BEVs must agree).
    """
    images = [f.rgb for b in bundles for f in b.frames]
    images += [b.bev for b in bundles]
    resolution = images[0].shape[0]
    if any(im.shape != images[0].shape for im in images):
        raise ValueError("teacher corpus requires equal-sized frames and BEVs")
    # oversampled so constant fields reconstruct as well as scene content
    for _ in range(4):
        for level in (0.0, 0.25, 0.5, 0.75, 1.0):
            images.append(np.full((resolution, resolution, 3), level, dtype=np.float32))
    return images


def reconstruction_mse(teacher: LatentTeacher, images: Sequence[np.ndarray]) -> float:
    with torch.no_grad():
        x = _to_batch(images)
        mean, _ = teacher.posterior(x)
        rec = teacher.decode_latent(mean)
        return float(F.mse_loss(rec, x))


def train_teacher(images: Sequence[np.ndarray], cfg: TeacherConfig | None = None) -> LatentTeacher:
    """Train, validate against cfg.mse_threshold, freeze, and scale latents.

    Raises TeacherTrainingError (with the final MSE) if the held-out
    reconstruction error stays above the threshold.
    """
    cfg = cfg or TeacherConfig()
    if len(images) < 100:
        raise ValueError(f"need at least 100 training images, got {len(images)}")
    torch.manual_seed(cfg.seed)
    teacher = LatentTeacher(cfg)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(images))
    n_val = max(1, int(len(images) * cfg.val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train = _to_batch([images[i] for i in train_idx])
    x_val = [images[i] for i in val_idx]

    opt = torch.optim.Adam(teacher.parameters(), lr=cfg.lr)
    n = x_train.shape[0]
    for _ in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(n))
        for s in range(0, n, cfg.batch_size):
            xb = x_train[perm[s : s + cfg.batch_size]]
            mean, logvar = teacher.posterior(xb)
            z = mean + torch.exp(0.5 * logvar) * torch.randn_like(mean)
            rec = teacher.decode_latent(z)
            rec_loss = F.mse_loss(rec, xb)
            kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).mean()
            loss = rec_loss + cfg.kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()

    val_mse = reconstruction_mse(teacher, x_val)
    if val_mse > cfg.mse_threshold:
        raise TeacherTrainingError(
            f"teacher failed to converge: held-out MSE {val_mse:.5f} > {cfg.mse_threshold}"
        )

    with torch.no_grad():
        mean, _ = teacher.posterior(x_train)
        std = mean.permute(1, 0, 2, 3).reshape(cfg.latent_dim, -1).std(dim=1)
        teacher.latent_scale.copy_(torch.clamp(std, min=1e-3))

    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.frozen = True
    return teacher


def save_teacher(teacher: LatentTeacher, path) -> str:
    """Write a versioned checkpoint; returns the content checksum."""
    path = Path(path)
    checksum = teacher.state_checksum()
    torch.save(
        {"version": TEACHER_VERSION, "config": asdict(teacher.cfg),
         "state": teacher.state_dict(), "checksum": checksum},
        path,
    )
    return checksum


def load_teacher(path) -> LatentTeacher:
    path = Path(path)
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != TEACHER_VERSION:
        raise ValueError(f"unsupported teacher checkpoint version in {path}")
    teacher = LatentTeacher(TeacherConfig(**blob["config"]))
    teacher.load_state_dict(blob["state"])
    if teacher.state_checksum() != blob["checksum"]:
        raise ValueError(f"teacher checkpoint {path} failed its checksum")
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.frozen = True
    return teacher
