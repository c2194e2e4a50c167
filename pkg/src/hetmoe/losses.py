"""Auxiliary balance losses for grouped-expert routing.

Two penalties discourage routing collapse: a group-wise loss that charges
each group's traffic in proportion to its parameter width, and an
intra-group loss that pushes expert usage inside every active group toward
uniform. Both follow the load-balance recipe of multiplying a selection
frequency ``f`` (hard counts, treated as constant) with a mean routing
probability ``p`` (soft scores, carries the gradient). All accumulators
average over tokens so the losses are batch-size invariant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig
from .routing import GatingParameters, RoutingBatch, RoutingDecision, route

__all__ = [
    "RoutingBatchStats",
    "LossGradients",
    "accumulate_stats",
    "merge_stats",
    "group_wise_loss",
    "intra_group_loss",
    "loss_gradients",
]


@dataclass
class RoutingBatchStats:
    """Token-averaged selection frequencies and routing probabilities.

    ``group_freq`` is scaled so that perfectly uniform group selection gives
    1.0 everywhere; ``expert_freq`` likewise for uniform expert usage.
    ``group_prob`` rows sum to 1 across groups, ``expert_prob`` rows sum to
    roughly the fraction of tokens that selected the group.
    """

    token_count: int
    group_freq: np.ndarray  # [num_groups]
    group_prob: np.ndarray  # [num_groups]
    expert_freq: np.ndarray  # [num_groups, experts_per_group]
    expert_prob: np.ndarray  # [num_groups, experts_per_group]


def _stacked(decisions) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Accept a RoutingBatch or a list of RoutingDecision records."""
    if isinstance(decisions, RoutingBatch):
        return (
            decisions.group_scores,
            decisions.selected_groups,
            decisions.intra_scores,
            decisions.selected_experts,
        )
    decisions = list(decisions)
    if decisions and not isinstance(decisions[0], RoutingDecision):
        raise TypeError("expected a RoutingBatch or RoutingDecision records")
    return (
        np.stack([d.group_scores for d in decisions]) if decisions else np.zeros((0, 0)),
        np.stack([d.selected_groups for d in decisions]) if decisions else np.zeros((0, 0), int),
        np.stack([d.intra_scores for d in decisions]) if decisions else np.zeros((0, 0, 0)),
        np.stack([d.selected_experts for d in decisions]) if decisions else np.zeros((0, 0, 2), int),
    )


def accumulate_stats(decisions, config: ModelConfig) -> RoutingBatchStats:
    """Reduce a batch of routing decisions to balance-loss statistics."""
    gs, sel_groups, intra, sel_experts = _stacked(decisions)
    t = gs.shape[0]
    if t == 0:
        raise ValueError("cannot accumulate statistics over an empty batch")
    n_g, n_e = config.num_groups, config.experts_per_group

    group_hits = np.zeros(n_g)
    np.add.at(group_hits, sel_groups.reshape(-1), 1.0)
    group_freq = group_hits * (n_g / (config.top_groups * t))

    group_prob = (gs / gs.sum(axis=-1, keepdims=True)).mean(axis=0)

    expert_hits = np.zeros((n_g, n_e))
    np.add.at(
        expert_hits, (sel_experts[:, :, 0].reshape(-1), sel_experts[:, :, 1].reshape(-1)), 1.0
    )
    expert_freq = expert_hits * (n_e / (config.top_experts * t))

    denom = intra.sum(axis=-1, keepdims=True) + config.epsilon
    expert_prob = (intra / denom).mean(axis=0)

    return RoutingBatchStats(
        token_count=t,
        group_freq=group_freq,
        group_prob=group_prob,
        expert_freq=expert_freq,
        expert_prob=expert_prob,
    )


def merge_stats(parts: Iterable[RoutingBatchStats]) -> RoutingBatchStats:
    """Combine shard statistics; every field is a token-count-weighted mean."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to merge")
    total = sum(p.token_count for p in parts)
    weights = [p.token_count / total for p in parts]

    def avg(field):
        return sum(w * getattr(p, field) for w, p in zip(weights, parts))

    return RoutingBatchStats(
        token_count=total,
        group_freq=avg("group_freq"),
        group_prob=avg("group_prob"),
        expert_freq=avg("expert_freq"),
        expert_prob=avg("expert_prob"),
    )


def group_wise_loss(stats: RoutingBatchStats, widths: Sequence[int], alpha_g: float) -> float:
    """Width-weighted group balance penalty.

    Each group contributes ``(W_i / W_max) * f_i * p_i`` so concentrating
    traffic on wide groups costs more than the same traffic on narrow ones.
    Expects ``widths`` ascending, so the last entry is the maximum.
    """
    w = np.asarray(widths, dtype=float)
    return float(alpha_g * np.sum((w / w[-1]) * stats.group_freq * stats.group_prob))


def intra_group_loss(stats: RoutingBatchStats, alpha_e: float) -> float:
    """Expert balance penalty summed over all groups."""
    return float(alpha_e * np.sum(stats.expert_freq * stats.expert_prob))


@dataclass
class LossGradients:
    """Loss values plus analytic gradients for the gating parameters."""

    loss_group: float
    loss_expert: float
    group_embeddings: np.ndarray  # same shape as params.group_embeddings
    expert_embeddings: np.ndarray  # same shape as params.expert_embeddings


def loss_gradients(
    tokens: np.ndarray,
    params: GatingParameters,
    config: ModelConfig,
    batch: RoutingBatch | None = None,
) -> LossGradients:
    """Evaluate both balance losses and their gating-parameter gradients.

    Selection indicators (the ``f`` factors and the top-k masks) are held
    constant; the gradient flows through the sigmoid group scores for the
    group-wise loss and through the intra-group softmax for the expert
    loss. Pass ``batch`` to reuse routing output computed elsewhere.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    if batch is None:
        batch = route(tokens, params, config)
    stats = accumulate_stats(batch, config)
    t = stats.token_count

    loss_g = group_wise_loss(stats, config.group_widths, config.alpha_group)
    loss_e = intra_group_loss(stats, config.alpha_expert)

    # Group-wise loss: differentiate the normalized group score mean. With
    # u_i = alpha_g * (W_i/W_max) * f_i and s = gs / sum(gs), the chain rule
    # through the normalization gives (u_i - u.s) / sum(gs) per token.
    w = np.asarray(config.group_widths, dtype=float)
    u = config.alpha_group * (w / w[-1]) * stats.group_freq
    gs = batch.group_scores
    totals = gs.sum(axis=-1, keepdims=True)
    s_norm = gs / totals
    d_gs = (u[None, :] - (s_norm @ u)[:, None]) / totals / t
    d_logits_g = d_gs * gs * (1.0 - gs)  # sigmoid backward
    grad_group = d_logits_g.T @ tokens

    # Intra-group loss: quotient rule through the epsilon-padded row
    # normalization, then the softmax backward on each selected row.
    # Unselected rows are identically zero, so their contribution vanishes.
    a = batch.intra_scores
    denom = a.sum(axis=-1, keepdims=True) + config.epsilon
    w_e = config.alpha_expert * stats.expert_freq / t
    d_a = w_e[None] / denom - (a * w_e[None]).sum(axis=-1, keepdims=True) / denom**2
    inner = (a * d_a).sum(axis=-1, keepdims=True)
    d_logits_e = a * (d_a - inner)  # softmax backward, zero on zero rows
    grad_expert = np.einsum("tgn,td->gnd", d_logits_e, tokens)

    if not (np.isfinite(grad_group).all() and np.isfinite(grad_expert).all()):
        raise FloatingPointError("non-finite loss gradient; check inputs and scores")
    return LossGradients(
        loss_group=loss_g,
        loss_expert=loss_e,
        group_embeddings=grad_group,
        expert_embeddings=grad_expert,
    )
