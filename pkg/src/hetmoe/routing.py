"""Two-level token routing over grouped experts.

Per token: sigmoid group scores pick the top ``top_groups`` groups; a
softmax over each selected group's experts gives intra-group scores; those
are scaled by the group score, the ``top_experts`` largest survive
globally, and the survivors are normalized to sum to one. All stages are
pure functions of (tokens, parameters); ties in any top-k break toward
the lower index so results are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

import numpy as np

from hetmoe.config import ModelConfig


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (branch on sign)."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=z.dtype)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction along ``axis``."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class GatingParameters:
    """Learnable routing state: one centroid per group, one embedding per expert."""

    group_embeddings: np.ndarray  # [num_groups, model_dim]
    expert_embeddings: np.ndarray  # [num_groups, experts_per_group, model_dim]

    @classmethod
    def init_random(
        cls,
        config: ModelConfig,
        rng: np.random.Generator,
        scale: float | None = None,
        dtype=np.float64,
    ) -> "GatingParameters":
        # Default scale keeps logits O(1) for tokens with O(1) entries.
        if scale is None:
            scale = 1.0 / np.sqrt(config.model_dim)
        d = config.model_dim
        return cls(
            group_embeddings=(rng.standard_normal((config.num_groups, d)) * scale).astype(dtype),
            expert_embeddings=(
                rng.standard_normal((config.num_groups, config.experts_per_group, d)) * scale
            ).astype(dtype),
        )

    def check_shapes(self, config: ModelConfig) -> None:
        expect_g = (config.num_groups, config.model_dim)
        expect_e = (config.num_groups, config.experts_per_group, config.model_dim)
        if self.group_embeddings.shape != expect_g:
            raise ValueError(
                f"group_embeddings shape {self.group_embeddings.shape}, expected {expect_g}"
            )
        if self.expert_embeddings.shape != expect_e:
            raise ValueError(
                f"expert_embeddings shape {self.expert_embeddings.shape}, expected {expect_e}"
            )


@dataclass
class RoutingDecision:
    """Per-token record of every routing stage."""

    group_scores: np.ndarray  # [num_groups]
    selected_groups: np.ndarray  # [top_groups], ascending
    intra_scores: np.ndarray  # [num_groups, experts_per_group]
    scaled_scores: np.ndarray  # [num_groups, experts_per_group]
    masked_scores: np.ndarray  # [num_groups, experts_per_group]
    final_scores: np.ndarray  # [num_groups, experts_per_group]
    selected_experts: np.ndarray  # [top_experts, 2] of (group, index), ascending


class RoutingBatch:
    """Routing stages for a batch of tokens, stored as stacked arrays.

    Indexing returns the per-token :class:`RoutingDecision` view; iterating
    yields them in token order.
    """

    def __init__(
        self,
        group_scores: np.ndarray,
        selected_groups: np.ndarray,
        intra_scores: np.ndarray,
        scaled_scores: np.ndarray,
        masked_scores: np.ndarray,
        final_scores: np.ndarray,
        selected_experts: np.ndarray,
    ):
        self.group_scores = group_scores
        self.selected_groups = selected_groups
        self.intra_scores = intra_scores
        self.scaled_scores = scaled_scores
        self.masked_scores = masked_scores
        self.final_scores = final_scores
        self.selected_experts = selected_experts

    def __len__(self) -> int:
        return self.group_scores.shape[0]

    def __getitem__(self, t: int) -> RoutingDecision:
        return RoutingDecision(
            group_scores=self.group_scores[t],
            selected_groups=self.selected_groups[t],
            intra_scores=self.intra_scores[t],
            scaled_scores=self.scaled_scores[t],
            masked_scores=self.masked_scores[t],
            final_scores=self.final_scores[t],
            selected_experts=self.selected_experts[t],
        )

    def __iter__(self) -> Iterator[RoutingDecision]:
        for t in range(len(self)):
            yield self[t]


def _as_batch(tokens: np.ndarray) -> tuple[np.ndarray, bool]:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        return tokens[None, :], True
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    return tokens, False


def group_scores(tokens: np.ndarray, params: GatingParameters) -> np.ndarray:
    """Sigmoid of token-centroid dot products; [T, num_groups] (or 1-D in, 1-D out)."""
    batch, single = _as_batch(tokens)
    d = params.group_embeddings.shape[1]
    if batch.shape[1] != d:
        raise ValueError(f"token dim {batch.shape[1]} != embedding dim {d}")
    gs = sigmoid(batch @ params.group_embeddings.T)
    return gs[0] if single else gs


def select_groups(gs: np.ndarray, k_g: int) -> np.ndarray:
    """Indices of the ``k_g`` largest scores, ascending; ties take the lower index."""
    batch, single = _as_batch(gs)
    n_g = batch.shape[1]
    if not 1 <= k_g <= n_g:
        raise ValueError(f"k_g must be in [1, {n_g}], got {k_g}")
    # Stable argsort of the negated scores keeps the lower index first on ties.
    order = np.argsort(-batch, axis=-1, kind="stable")
    sel = np.sort(order[:, :k_g], axis=-1)
    return sel[0] if single else sel


def _selection_mask(selected: np.ndarray, n_g: int) -> np.ndarray:
    mask = np.zeros((selected.shape[0], n_g), dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    return mask


def intra_group_scores(
    tokens: np.ndarray, params: GatingParameters, selected: np.ndarray
) -> np.ndarray:
    """Softmax over each selected group's experts; zero rows for the rest."""
    batch, single = _as_batch(tokens)
    sel = selected[None, :] if selected.ndim == 1 else selected
    if sel.shape[1] == 0:
        raise ValueError("selected group set is empty")
    n_g, n, d = params.expert_embeddings.shape
    if batch.shape[1] != d:
        raise ValueError(f"token dim {batch.shape[1]} != embedding dim {d}")
    logits = batch @ params.expert_embeddings.reshape(n_g * n, d).T
    logits = logits.reshape(batch.shape[0], n_g, n)
    probs = stable_softmax(logits, axis=-1)
    mask = _selection_mask(sel, n_g)
    out = np.where(mask[:, :, None], probs, 0.0)
    return out[0] if single else out


def scale_and_select(
    es_prime: np.ndarray, gs: np.ndarray, k_e: int
) -> tuple[np.ndarray, np.ndarray]:
    """Scale intra-group scores by group scores and keep the top ``k_e`` globally.

    Returns the masked score array and the surviving (group, index) pairs in
    ascending order. Ties break toward (lower group, lower expert index).
    """
    single = es_prime.ndim == 2
    ep = es_prime[None] if single else es_prime
    g = gs[None] if gs.ndim == 1 else gs
    t, n_g, n = ep.shape
    scaled = ep * g[:, :, None]
    flat = scaled.reshape(t, n_g * n)
    available = (flat > 0).sum(axis=-1)
    if not 1 <= k_e:
        raise ValueError(f"k_e must be >= 1, got {k_e}")
    if (available < k_e).any():
        bad = int(np.argmax(available < k_e))
        raise ValueError(
            f"k_e={k_e} exceeds the {int(available[bad])} nonzero scaled scores "
            f"for token {bad}"
        )
    order = np.argsort(-flat, axis=-1, kind="stable")
    top = np.sort(order[:, :k_e], axis=-1)  # ascending flat index == (group, expert) lexicographic
    keep = np.zeros_like(flat, dtype=bool)
    np.put_along_axis(keep, top, True, axis=-1)
    masked = np.where(keep, flat, 0.0).reshape(t, n_g, n)
    pairs = np.stack(np.divmod(top, n), axis=-1)
    if single:
        return masked[0], pairs[0]
    return masked, pairs


def normalize_global(es_triple: np.ndarray) -> np.ndarray:
    """Divide the surviving scores by their per-token total so they sum to 1."""
    single = es_triple.ndim == 2
    masked = es_triple[None] if single else es_triple
    totals = masked.sum(axis=(1, 2), keepdims=True)
    if (totals == 0).any():
        raise ValueError("cannot normalize an all-zero score array")
    out = masked / totals
    return out[0] if single else out


def route(tokens: np.ndarray, params: GatingParameters, config: ModelConfig) -> RoutingBatch:
    """Run the full pipeline on a token batch; deterministic given inputs."""
    batch, _ = _as_batch(tokens)
    if batch.shape[0] == 0:
        raise ValueError("token batch is empty")
    params.check_shapes(config)
    if batch.shape[1] != config.model_dim:
        raise ValueError(f"token dim {batch.shape[1]} != model_dim {config.model_dim}")
    gs = group_scores(batch, params)
    selected = select_groups(gs, config.top_groups)
    intra = intra_group_scores(batch, params, selected)
    masked, pairs = scale_and_select(intra, gs, config.top_experts)
    scaled = intra * gs[:, :, None]
    final = normalize_global(masked)
    return RoutingBatch(
        group_scores=gs,
        selected_groups=selected,
        intra_scores=intra,
        scaled_scores=scaled,
        masked_scores=masked,
        final_scores=final,
        selected_experts=pairs,
    )


# --- Trace serialization -------------------------------------------------
#
# One JSON object per token line: token index, selected groups, and the
# selected (group, expert, final score) triples. Replaying a trace must
# reproduce load reports bit-identically, so scores round-trip via JSON's
# shortest-repr floats.


def write_trace(fh: IO[str], batch: RoutingBatch, start_index: int = 0) -> int:
    """Append one line per token; returns the next token index."""
    t = start_index
    n = batch.final_scores.shape[2]
    for i in range(len(batch)):
        pairs = batch.selected_experts[i]
        flat = batch.final_scores[i].reshape(-1)
        experts = [
            [int(g), int(e), float(flat[g * n + e])] for g, e in pairs
        ]
        record = {
            "t": t,
            "groups": [int(g) for g in batch.selected_groups[i]],
            "experts": experts,
        }
        fh.write(json.dumps(record, separators=(",", ":")) + "\n")
        t += 1
    return t


def read_trace(fh: IO[str]) -> Iterator[dict]:
    """Yield trace records in token order."""
    for line in fh:
        line = line.strip()
        if line:
            yield json.loads(line)


def save_trace(path: str, batches: Iterable[RoutingBatch]) -> int:
    """Write a sequence of routed batches to ``path``; returns token count."""
    t = 0
    with open(path, "w", encoding="utf-8") as fh:
        for batch in batches:
            t = write_trace(fh, batch, start_index=t)
    return t
