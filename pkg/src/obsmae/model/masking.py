"""Per-modality visible-token selection under a global budget."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tokens import TokenSet


@dataclass(frozen=True, eq=False)
class MaskPlan:
    budget: int
    counts: dict[str, int]
    visible: dict[str, np.ndarray]  # sorted token indices per modality
    alpha: float = 1.0
    proportions: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def is_visible(self, name: str, n_tokens: int) -> np.ndarray:
        flag = np.zeros(n_tokens, dtype=bool)
        flag[self.visible.get(name, np.empty(0, int))] = True
        return flag


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights / weights.sum() * total
    out = np.floor(raw).astype(int)
    short = total - out.sum()
    if short > 0:
        order = np.argsort(-(raw - out), kind="stable")
        out[order[:short]] += 1
    return out


def allocate_counts(proportions: np.ndarray, capacity: np.ndarray, budget: int) -> np.ndarray:
    """Largest-remainder split of ``budget``, clipped to ``capacity``; surplus
    goes to modalities with room, in proportion to their share."""
    proportions = np.asarray(proportions, dtype=float)
    capacity = np.asarray(capacity, dtype=int)
    budget = min(budget, int(capacity.sum()))
    counts = np.zeros(len(capacity), dtype=int)
    remaining = budget
    while remaining > 0:
        room = capacity - counts
        open_ = room > 0
        w = np.where(open_, proportions, 0.0)
        if w.sum() <= 0:
            w = open_.astype(float)
        add = np.minimum(_largest_remainder(w, remaining), room)
        if add.sum() == 0:
            # proportions round every open slot to zero; give it to the largest share with room
            k = int(np.argmax(np.where(open_, w, -1.0)))
            add[k] = 1
        counts += add
        remaining = budget - counts.sum()
    return counts


def sample_mask_plan(tokensets: Mapping[str, TokenSet], K: int, alpha: float, rng) -> MaskPlan:
    """Dirichlet-proportioned visible-token draw over the modalities given."""
    if K < 1:
        raise ValueError("budget K must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    names = list(tokensets)
    capacity = np.array([tokensets[n].n_valid for n in names])
    if capacity.sum() == 0:
        raise ValueError("no valid tokens in any modality")
    p = rng.dirichlet(np.full(len(names), float(alpha))) if len(names) > 1 else np.ones(1)
    counts = allocate_counts(p, capacity, K)
    visible = {}
    for n, k in zip(names, counts):
        pool = np.flatnonzero(tokensets[n].valid)
        visible[n] = np.sort(rng.choice(pool, size=int(k), replace=False)) if k else np.empty(0, dtype=int)
    return MaskPlan(
        budget=K,
        counts={n: int(k) for n, k in zip(names, counts)},
        visible=visible,
        alpha=float(alpha),
        proportions={n: float(x) for n, x in zip(names, p)},
    )


def full_plan(tokensets: Mapping[str, TokenSet], visible_modalities, drop=None) -> MaskPlan:
    """Every valid token of ``visible_modalities`` visible; ``drop(name, index)``
    may return a boolean mask of additional tokens to hide."""
    visible = {}
    for n, ts in tokensets.items():
        keep = ts.valid.copy() if n in visible_modalities else np.zeros(len(ts), bool)
        if drop is not None:
            keep &= ~drop(n, ts.index)
        visible[n] = np.flatnonzero(keep)
    counts = {n: len(v) for n, v in visible.items()}
    return MaskPlan(budget=sum(counts.values()), counts=counts, visible=visible, alpha=float("nan"))
