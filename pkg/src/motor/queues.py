"""Bounded FIFO feature queues and momentum parameter updates.

Queues hold unit-norm projected features plus the corpus record id each
feature came from. They provide the negative pools for the contrastive
objective and the report pool that triplet-knowledge retrieval searches.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

NORM_TOL = 1e-5


class FeatureQueue:
    """Ring buffer of unit-norm feature vectors with parallel payload ids.

    Single-writer: callers must not interleave `enqueue` with reads inside
    one training step.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.vectors = torch.zeros(capacity, dim)
        self.stamps = torch.full((capacity,), -1, dtype=torch.long)  # insertion counter
        self.ids: list[str | None] = [None] * capacity
        self.cursor = 0
        self.count = 0
        self._next_stamp = 0

    def __len__(self) -> int:
        return self.count

    def enqueue(self, vectors: torch.Tensor, ids: Sequence[str]) -> None:
        """FIFO overwrite starting at the write cursor; oldest evicted first."""
        vectors = vectors.detach().to(self.vectors.dtype)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ValueError(f"expected (n, {self.dim}) vectors, got {tuple(vectors.shape)}")
        n = vectors.shape[0]
        if n != len(ids):
            raise ValueError("vectors and ids must have equal length")
        if n > self.capacity:
            raise ValueError(f"batch of {n} exceeds queue capacity {self.capacity}")
        norms = vectors.norm(dim=1)
        if n and (norms - 1.0).abs().max().item() > NORM_TOL:
            raise ValueError("queue vectors must be unit-norm")
        for row in range(n):
            slot = (self.cursor + row) % self.capacity
            self.vectors[slot] = vectors[row]
            self.stamps[slot] = self._next_stamp + row
            self.ids[slot] = ids[row]
        self.cursor = (self.cursor + n) % self.capacity
        self.count = min(self.count + n, self.capacity)
        self._next_stamp += n

    def _occupied(self) -> torch.Tensor:
        return (self.stamps >= 0).nonzero(as_tuple=True)[0]

    def snapshot(self) -> tuple[torch.Tensor, list[str]]:
        """Stored vectors and ids in insertion order (oldest first)."""
        occ = self._occupied()
        order = torch.argsort(self.stamps[occ])
        slots = occ[order]
        return self.vectors[slots].clone(), [self.ids[s] for s in slots.tolist()]

    def rank_all(self, query: torch.Tensor) -> tuple[list[str], torch.Tensor]:
        """All stored ids ranked by dot product with `query`, descending.

        Ties keep the older insertion first.
        """
        if abs(query.norm().item() - 1.0) > NORM_TOL:
            raise ValueError("query must be unit-norm")
        if self.count == 0:
            return [], torch.empty(0)
        occ = self._occupied()
        sims = self.vectors[occ] @ query.to(self.vectors.dtype)
        stamps = self.stamps[occ]
        order = sorted(range(len(occ)),
                       key=lambda i: (-sims[i].item(), stamps[i].item()))
        slots = [occ[i].item() for i in order]
        return [self.ids[s] for s in slots], sims[order]

    def top_k(self, query: torch.Tensor, k: int) -> tuple[list[str], torch.Tensor]:
        if k < 1:
            raise ValueError("k must be >= 1")
        ids, sims = self.rank_all(query)
        return ids[:k], sims[:k]

    def state_dict(self) -> dict:
        return {
            "version": 1,
            "capacity": self.capacity,
            "dim": self.dim,
            "vectors": self.vectors.clone(),
            "stamps": self.stamps.clone(),
            "ids": list(self.ids),
            "cursor": self.cursor,
            "count": self.count,
            "next_stamp": self._next_stamp,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "FeatureQueue":
        if state.get("version") != 1:
            raise ValueError(f"unsupported queue state version {state.get('version')!r}")
        q = cls(state["capacity"], state["dim"])
        q.vectors = state["vectors"].clone()
        q.stamps = state["stamps"].clone()
        q.ids = list(state["ids"])
        q.cursor = state["cursor"]
        q.count = state["count"]
        q._next_stamp = state["next_stamp"]
        return q


@torch.no_grad()
def momentum_update(online: nn.Module, momentum: nn.Module, coeff: float) -> None:
    """EMA update `m <- coeff * m + (1 - coeff) * theta`, elementwise.

    The two modules must share parameter structure exactly. coeff=0 copies
    the online parameters outright; coeff=1 (a frozen copy) is rejected.
    """
    if not 0.0 <= coeff < 1.0:
        raise ValueError("momentum coefficient must lie in [0, 1)")
    online_params = dict(online.named_parameters())
    momentum_params = dict(momentum.named_parameters())
    if online_params.keys() != momentum_params.keys():
        raise ValueError("online/momentum parameter structures differ")
    for name, p in online_params.items():
        m = momentum_params[name]
        if m.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {m.shape} vs {p.shape}")
        m.mul_(coeff).add_(p, alpha=1.0 - coeff)
