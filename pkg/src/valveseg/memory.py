"""Bi-directional phase memory: storage, key affinity and top-k value readout.

A bank holds encoder keys/values of previously seen phases at each readout
level. The forward bank is filled in ascending phase order and the backward
bank in descending order; a query at phase ``t`` reads only the entries on
its own side (``visible_to``), so training and two-sweep inference see the
same kind of context.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch

FORWARD = "forward"
BACKWARD = "backward"


class EmptyMemoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class Entry:
    phase_index: int
    keys: tuple  # per readout level, (C^k, D, H, W)
    values: tuple  # per readout level, (C^v, D, H, W)
    stamp: int  # insertion order, for FIFO eviction


@dataclass(frozen=True)
class MemoryBank:
    direction: str = FORWARD
    capacity: int = 4
    anchors: frozenset = frozenset()
    entries: tuple = ()
    eviction: str = "fifo-pinned-anchors"
    clock: int = 0

    def __post_init__(self):
        if self.direction not in (FORWARD, BACKWARD):
            raise ValueError(f"direction must be forward or backward, got {self.direction!r}")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")

    def __len__(self):
        return len(self.entries)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    @property
    def phase_indices(self) -> list:
        return [e.phase_index for e in self.entries]

    def reset(self) -> "MemoryBank":
        return replace(self, entries=(), clock=0)

    def visible_to(self, t: int) -> "MemoryBank":
        """Entries strictly before ``t`` (forward) or strictly after it (backward)."""
        if self.direction == FORWARD:
            keep = tuple(e for e in self.entries if e.phase_index < t)
        else:
            keep = tuple(e for e in self.entries if e.phase_index > t)
        return replace(self, entries=keep)

    def stacked(self, level: int):
        """Memory keys (C^k, T*DHW) and values (C^v, T*DHW) at one readout level."""
        if not self.entries:
            raise EmptyMemoryError(f"{self.direction} bank is empty")
        k = torch.cat([e.keys[level].reshape(e.keys[level].shape[0], -1) for e in self.entries], 1)
        v = torch.cat([e.values[level].reshape(e.values[level].shape[0], -1) for e in self.entries], 1)
        return k, v


def write(bank: MemoryBank, phase_index: int, keys, values) -> MemoryBank:
    """Store one phase's features, replacing that phase if present and evicting FIFO.

    Anchor phases are never evicted. Stored tensors are detached.
    """
    keys = tuple(k.detach() for k in keys)
    values = tuple(v.detach() for v in values)
    entries = [e for e in bank.entries if e.phase_index != phase_index]
    entries.append(Entry(int(phase_index), keys, values, bank.clock))
    while len(entries) > bank.capacity:
        candidates = [e for e in entries if e.phase_index not in bank.anchors]
        if not candidates:
            raise RuntimeError("memory bank full of pinned anchors; raise the capacity")
        oldest = min(candidates, key=lambda e: e.stamp)
        entries.remove(oldest)
    entries.sort(key=lambda e: e.phase_index, reverse=bank.direction == BACKWARD)
    return replace(bank, entries=tuple(entries), clock=bank.clock + 1)


def affinity(k_M: torch.Tensor, k_Q: torch.Tensor) -> torch.Tensor:
    """Softmax over memory positions of key dot products; shape (M, N), columns sum to 1."""
    if k_M.shape[1] == 0:
        raise EmptyMemoryError("no memory positions")
    if k_M.shape[0] != k_Q.shape[0]:
        raise ValueError(f"key channels differ: memory {k_M.shape[0]}, query {k_Q.shape[0]}")
    logits = k_M.transpose(0, 1) @ k_Q.reshape(k_Q.shape[0], -1)
    logits = logits - logits.max(dim=0, keepdim=True).values
    e = torch.exp(logits)
    return e / e.sum(dim=0, keepdim=True)


def topk_readout(v_M: torch.Tensor, W: torch.Tensor, k: int) -> torch.Tensor:
    """Per query column, the renormalized weighted sum of the k highest-affinity values."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if v_M.shape[1] != W.shape[0]:
        raise ValueError(f"values cover {v_M.shape[1]} positions, affinity has {W.shape[0]}")
    if k >= W.shape[0]:
        return v_M @ W
    w, idx = torch.topk(W, k, dim=0)  # (k, N)
    w = w / w.sum(dim=0, keepdim=True)
    gathered = v_M[:, idx]  # (C^v, k, N)
    return (gathered * w.unsqueeze(0)).sum(dim=1)


def read_level(bank: MemoryBank, level: int, q_key: torch.Tensor, k: int) -> torch.Tensor:
    k_M, v_M = bank.stacked(level)
    W = affinity(k_M, q_key)
    out = topk_readout(v_M, W, k)
    return out.reshape(v_M.shape[0], *q_key.shape[1:])


def bidirectional_read(M_f: Optional[MemoryBank], M_b: Optional[MemoryBank], query_keys, k: int,
                       null_features):
    """Concatenate forward and backward readouts per level: (2*C^v, D, H, W) each.

    ``query_keys`` holds one (C^k, D, H, W) key per readout level and
    ``null_features`` one (C^v,) vector per level used for an empty side.
    """
    f_empty = M_f is None or M_f.is_empty
    b_empty = M_b is None or M_b.is_empty
    if f_empty and b_empty:
        raise EmptyMemoryError("both memory banks are empty")
    fused = []
    for level, (q, null) in enumerate(zip(query_keys, null_features)):
        spatial = q.shape[1:]
        halves = []
        for bank, empty in ((M_f, f_empty), (M_b, b_empty)):
            if empty:
                halves.append(null.reshape(-1, 1, 1, 1).expand(-1, *spatial))
            else:
                halves.append(read_level(bank, level, q, k))
        fused.append(torch.cat(halves, 0))
    return fused
