"""Object-centric grounding: proposal features, InfoNCE, selection rules.

Proposal features average the backbone's visual hidden states over patches
whose world points fall mostly (strictly more than half) inside the proposal
box, plus a sinusoidal embedding of the box center. The hidden state of the
special ground token is contrastively matched against these features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Set, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import VisualTokens
from .geometry import position_features


@dataclass
class ObjectProposal:
    id: int
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self):
        self.box_min = np.asarray(self.box_min, dtype=np.float64)
        self.box_max = np.asarray(self.box_max, dtype=np.float64)
        if not (self.box_max > self.box_min).all():
            raise ValueError(f"degenerate proposal box for id {self.id}")

    @property
    def center(self) -> np.ndarray:
        return (self.box_min + self.box_max) / 2.0


@dataclass
class GroundingBatch:
    proposals: List[ObjectProposal]
    expression: str
    targets: Set[int]
    ground_token_position: int

    def __post_init__(self):
        ids = {p.id for p in self.proposals}
        if not set(self.targets) <= ids:
            raise ValueError("targets reference unknown proposal ids")


def make_proposals(scene, n_distractors_per_object: int = 1, rng: np.random.Generator | None = None) -> List[ObjectProposal]:
    """Ground-truth boxes plus jittered distractor boxes, ids disjoint."""
    rng = rng or np.random.default_rng(scene.seed + 31)
    proposals = [ObjectProposal(id=o.id, box_min=o.box_min, box_max=o.box_max) for o in scene.objects]
    next_id = max(p.id for p in proposals) + 1 if proposals else 0
    room = scene.room_size
    for o in scene.objects:
        for _ in range(n_distractors_per_object):
            size = (o.box_max - o.box_min) * rng.uniform(0.7, 1.3, size=3)
            shift = rng.uniform(-0.6, 0.6, size=3) * np.array([1.0, 1.0, 0.0])
            bmin = np.clip(o.box_min + shift, 0.0, room - 0.05)
            bmax = np.minimum(bmin + size, room)
            bmax = np.maximum(bmax, bmin + 0.05)
            proposals.append(ObjectProposal(id=next_id, box_min=bmin, box_max=bmax))
            next_id += 1
    return proposals


def aggregate_object_features(
    visual: VisualTokens, hidden_visual: torch.Tensor, proposal: ObjectProposal
) -> Tuple[torch.Tensor, bool]:
    """Mean hidden state over qualifying patches plus the center's position
    embedding. A patch qualifies when strictly more than 50% of its world
    points lie inside the proposal box. Returns (feature, had_patches);
    with no qualifying patch the feature is the position embedding alone.
    """
    dim = hidden_visual.shape[1]
    qualifying = []
    for n, pts in enumerate(visual.points):
        if len(pts) == 0:
            continue
        inside = ((pts >= proposal.box_min) & (pts <= proposal.box_max)).all(axis=1)
        if inside.mean() > 0.5:
            qualifying.append(n)
    pos = torch.from_numpy(position_features(proposal.center[None], dim)[0]).to(hidden_visual.dtype)
    if not qualifying:
        return pos, False
    feat = hidden_visual[torch.tensor(qualifying)].mean(dim=0)
    return feat + pos, True


class GroundingHead(nn.Module):
    """Learnable-temperature cosine scorer between the ground token and proposals."""

    def __init__(self, init_temperature: float = 0.07):
        super().__init__()
        self.log_temperature = nn.Parameter(torch.tensor(math.log(init_temperature)))

    def similarities(
        self, batch: GroundingBatch, hidden: torch.Tensor, visual: VisualTokens
    ) -> torch.Tensor:
        """Cosine similarity / temperature for every proposal, in order."""
        g = hidden[batch.ground_token_position]
        n = visual.tokens.shape[0]
        feats = torch.stack(
            [aggregate_object_features(visual, hidden[:n], p)[0] for p in batch.proposals]
        )
        sims = F.cosine_similarity(feats, g.unsqueeze(0), dim=1)
        return sims / torch.exp(self.log_temperature)


def grounding_loss(
    head: GroundingHead, batch: GroundingBatch, hidden: torch.Tensor, visual: VisualTokens
):
    """InfoNCE toward the target proposals (mean CE over targets for
    multi-target expressions). Zero-target batches are skipped: (0, False)."""
    if len(batch.proposals) < 2:
        raise ValueError("need at least 2 proposals for a contrastive loss")
    if not batch.targets:
        return hidden.new_zeros(()), False
    sims = head.similarities(batch, hidden, visual)
    id_to_index = {p.id: k for k, p in enumerate(batch.proposals)}
    losses = [
        F.cross_entropy(sims.unsqueeze(0), torch.tensor([id_to_index[t]]))
        for t in sorted(batch.targets)
    ]
    return torch.stack(losses).mean(), True


def select_single(similarities: Sequence[float], proposal_ids: Sequence[int] | None = None) -> int:
    """Highest-similarity proposal; ties resolve to the lowest id."""
    sims = np.asarray([float(s) for s in similarities])
    if sims.size == 0:
        raise ValueError("no proposals to select from")
    ids = np.asarray(proposal_ids if proposal_ids is not None else np.arange(sims.size))
    best = sims.max()
    return int(ids[sims == best].min())


def select_multi(probabilities: Sequence[float], proposal_ids: Sequence[int] | None = None) -> Set[int]:
    """Take proposals by descending probability until the cumulative
    probability strictly surpasses 0.25."""
    probs = np.asarray([float(p) for p in probabilities])
    if abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {probs.sum():.8f}, expected 1")
    ids = np.asarray(proposal_ids if proposal_ids is not None else np.arange(probs.size))
    order = np.lexsort((ids, -probs))
    chosen: Set[int] = set()
    cum = 0.0
    for k in order:
        chosen.add(int(ids[k]))
        cum += probs[k]
        if cum > 0.25:
            break
    return chosen
