"""Adaptive memory banks and their attention-based retrieval.

Axis convention, used by every attention here and locked by the brute-force
oracles in the tests: softmax normalizes over the key axis (the last axis of
the score tensor), so each query row sums to one. The speaker-bank pooled
weights are the row-mean of that row-stochastic matrix and therefore also sum
to one; the contextual per-position weights are softmaxed over the slot axis
and sum to one at every latent position.

Banks hold content; retrieval modules hold the learned projections. A bank
remembers the slot scores of its most recent retrieval so the attention-based
eviction policy can act on them at the next store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class EmptyBankError(RuntimeError):
    """Raised when retrieving from a bank with no slots.

    Callers fall back to cue-only extraction; silent zero-features are not an
    acceptable substitute because they are indistinguishable from real
    content.
    """


@dataclass
class RetrievalResult:
    feature: torch.Tensor  # (L, C): repeated speaker vector or per-position mix
    slot_scores: torch.Tensor  # (N,), nonnegative, sums to 1


class SpeakerRetrieval(nn.Module):
    """Self-attention pooling over speaker-embedding slots.

    Scores between projected slots are row-softmaxed, the rows are averaged
    into one weight per slot, and the output is the weight-blended value
    projection. With a single slot the weights collapse to [1.0] regardless of
    temperature and the output equals that slot's value projection.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.query = nn.Linear(channels, channels)
        self.key = nn.Linear(channels, channels)
        self.value = nn.Linear(channels, channels)

    def forward(self, slots: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """slots (B, N, C) -> (pooled (B, C), weights (B, N))."""
        if slots.ndim != 3:
            raise ValueError("expected (batch, slots, channels)")
        if slots.shape[1] < 1:
            raise EmptyBankError("speaker bank is empty")
        q = self.query(slots)
        k = self.key(slots)
        v = self.value(slots)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.channels)
        attn = torch.softmax(scores, dim=-1)  # each query row sums to 1
        weights = attn.mean(dim=1)  # (B, N), sums to 1
        pooled = torch.einsum("bn,bnc->bc", weights, v)
        return pooled, weights


class ContextRetrieval(nn.Module):
    """Two-stage cross-attention between context slots and the mixture.

    Stage one filters each slot against the mixture: keys come from the
    mixture, queries and values from the slot, and each slot position gathers
    slot content weighted by its affinity to mixture positions. Stage two
    scores the filtered slots against the mixture per latent position (keys
    from the mixture, queries from the filtered slots, values from the raw
    slots) and softmaxes over the slot axis, yielding one weight per slot per
    position; the output blends raw slot values with those weights.

    Slot latent length must equal the mixture's: the per-position products
    pair position l of every slot with position l of the mixture.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.filter_key = nn.Linear(channels, channels)
        self.filter_query = nn.Linear(channels, channels)
        self.filter_value = nn.Linear(channels, channels)
        self.select_key = nn.Linear(channels, channels)
        self.select_query = nn.Linear(channels, channels)
        self.select_value = nn.Linear(channels, channels)

    def forward(
        self, slots: torch.Tensor, mixture: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B, N, L, C) slots + (B, L, C) mixture ->
        (blended (B, L, C), position weights (B, L, N), slot scores (B, N))."""
        if slots.ndim != 4:
            raise ValueError("expected (batch, slots, steps, channels)")
        if mixture.ndim != 3:
            raise ValueError("expected (batch, steps, channels)")
        if slots.shape[1] < 1:
            raise EmptyBankError("context bank is empty")
        if slots.shape[2] != mixture.shape[1]:
            raise ValueError(
                f"slot latent length {slots.shape[2]} != mixture latent length {mixture.shape[1]}"
            )
        scale = math.sqrt(self.channels)

        k1 = self.filter_key(mixture)  # (B, L, C)
        q1 = self.filter_query(slots)  # (B, N, L, C)
        v1 = self.filter_value(slots)  # (B, N, L, C)
        scores1 = torch.einsum("bnlc,bmc->bnlm", q1, k1) / scale
        attn1 = torch.softmax(scores1, dim=-1)  # over mixture positions
        filtered = torch.einsum("bnlm,bnmc->bnlc", attn1, v1)

        k2 = self.select_key(mixture)  # (B, L, C)
        q2 = self.select_query(filtered)  # (B, N, L, C)
        v2 = self.select_value(slots)  # (B, N, L, C)
        scores2 = torch.einsum("bnlc,blc->bln", q2, k2) / scale
        pos_weights = torch.softmax(scores2, dim=-1)  # over slots, per position
        blended = torch.einsum("bln,bnlc->blc", pos_weights, v2)
        slot_scores = pos_weights.mean(dim=1)  # (B, N)
        return blended, pos_weights, slot_scores


class MemoryBank:
    """Ordered slot container with FIFO or attention-based eviction.

    Slots are stored in insertion order, oldest first. FIFO evicts the oldest
    slot when full. The attention policy ("abs") evicts the slot whose score
    in the most recent retrieval was lowest, breaking ties toward the oldest;
    before any retrieval has recorded scores it falls back to FIFO.
    """

    POLICIES = ("fifo", "abs")

    def __init__(self, capacity: int, policy: str = "fifo"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if policy not in self.POLICIES:
            raise ValueError(f"unknown eviction policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.slots: list[torch.Tensor] = []
        self.last_scores: list[float] | None = None

    def __len__(self) -> int:
        return len(self.slots)

    def store(self, item: torch.Tensor) -> None:
        item = item.detach()
        if self.slots and item.shape != self.slots[0].shape:
            raise ValueError(
                f"slot shape {tuple(item.shape)} != bank shape {tuple(self.slots[0].shape)}"
            )
        usable_scores = (
            self.policy == "abs"
            and self.last_scores is not None
            and len(self.last_scores) == len(self.slots)
        )
        if len(self.slots) < self.capacity:
            self.slots.append(item)
        else:
            if usable_scores:
                scores = self.last_scores
                evict = min(range(len(scores)), key=lambda i: (scores[i], i))
            else:
                evict = 0
            self.slots.pop(evict)
            self.slots.append(item)
        # any mutation invalidates recorded scores (slot indices shifted)
        self.last_scores = None

    def reset(self) -> None:
        self.slots.clear()
        self.last_scores = None

    def note_scores(self, scores: torch.Tensor) -> None:
        """Record slot scores from a retrieval for the eviction policy."""
        if scores.numel() != len(self.slots):
            raise ValueError("score count must match slot count")
        self.last_scores = scores.detach().flatten().tolist()

    def as_tensor(self) -> torch.Tensor:
        if not self.slots:
            raise EmptyBankError("bank is empty")
        return torch.stack(self.slots, dim=0)


def retrieve_speaker(
    bank: MemoryBank, retrieval: SpeakerRetrieval, length: int
) -> RetrievalResult:
    """Pool the speaker bank and repeat the result to a latent sequence."""
    slots = bank.as_tensor().unsqueeze(0)  # (1, N, C)
    pooled, weights = retrieval(slots)
    bank.note_scores(weights[0])
    feature = pooled.squeeze(0).unsqueeze(0).expand(length, -1)
    return RetrievalResult(feature=feature, slot_scores=weights[0])


def retrieve_context(
    bank: MemoryBank, retrieval: ContextRetrieval, mixture: torch.Tensor
) -> RetrievalResult:
    """Blend the context bank against a (L, C) mixture encoding."""
    slots = bank.as_tensor().unsqueeze(0)  # (1, N, L, C)
    blended, _, slot_scores = retrieval(slots, mixture.unsqueeze(0))
    bank.note_scores(slot_scores[0])
    return RetrievalResult(feature=blended.squeeze(0), slot_scores=slot_scores[0])
