"""Synthetic streams, toy training, and load/difficulty analyses.

The stream generator produces difficulty-labeled token embeddings: each
bucket has its own mean direction (so difficulty is linearly detectable)
and harder buckets get a larger noise amplitude (so mistakes on hard
tokens cost more reconstruction loss). The toy trainer fits the layer to
a fixed random linear target with plain SGD, optionally adding either
auxiliary balance loss. Analyses route a stream once and reduce the
selections to per-GPU load fractions, group-traffic histograms, and
difficulty-versus-group ratio tables.

Everything is reproducible from explicit seeds: stream blocks are seeded
by block index, so a shorter stream is an exact prefix of a longer one
with the same seed, and sharding blocks across workers cannot change any
reported count.
"""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .allocation import PlacementPlan, per_gpu_params
from .config import ModelConfig
from .layer import GroupedExpertLayer, layer_forward, layer_gradients
from .losses import loss_gradients
from .routing import GatingParameters, read_trace, route, write_trace

__all__ = [
    "RANK_BUCKETS",
    "PERPLEXITY_BUCKETS",
    "TokenStream",
    "StreamRoutingCounts",
    "LoadReport",
    "GroupTrafficHistogram",
    "DifficultyReport",
    "TrainingDiverged",
    "TrainMetrics",
    "TrainResult",
    "generate_stream",
    "collect_stream_counts",
    "counts_from_trace",
    "load_report",
    "run_load_sim",
    "replay_load_sim",
    "difficulty_analysis",
    "train_toy",
    "width_weighted_traffic",
    "expert_usage_std",
]

RANK_BUCKETS = ("Top1K", "1K-5K", "5K-10K", "Beyond10K")
PERPLEXITY_BUCKETS = ("<=5", "<=10", ">10")

_SCHEMES = {"rank": RANK_BUCKETS, "perplexity": PERPLEXITY_BUCKETS}


class TokenStream:
    """Deterministic labeled token stream, generated block by block.

    Bucket ``b`` draws tokens as ``mean_b + amplitude_b * noise``: the mean
    offsets are orthogonal directions scaled by ``mean_scale``, and the
    amplitude grows linearly from 1 for the easiest bucket to
    ``1 + amp_gain`` for the hardest.
    """

    def __init__(
        self,
        model_dim: int,
        scheme: str,
        num_tokens: int,
        seed: int,
        proportions=None,
        mean_scale: float = 1.0,
        amp_gain: float = 1.0,
        block_size: int = 16384,
    ):
        if scheme not in _SCHEMES:
            raise ValueError(f"unknown difficulty scheme {scheme!r}")
        if num_tokens < 1:
            raise ValueError("need at least one token")
        self.model_dim = model_dim
        self.scheme = scheme
        self.bucket_names = _SCHEMES[scheme]
        self.num_tokens = num_tokens
        self.seed = seed
        self.block_size = block_size
        b = len(self.bucket_names)
        if proportions is None:
            proportions = np.full(b, 1.0 / b)
        proportions = np.asarray(proportions, dtype=float)
        if proportions.shape != (b,) or abs(proportions.sum() - 1.0) > 1e-9:
            raise ValueError(f"need {b} bucket proportions summing to 1")
        self.proportions = proportions
        # fixed per-stream bucket geometry
        rng = np.random.default_rng([seed, 2])
        raw = rng.standard_normal((model_dim, b))
        directions, _ = np.linalg.qr(raw)
        difficulty = np.arange(b) / max(b - 1, 1)
        self.means = (mean_scale * np.sqrt(model_dim) * directions.T).astype(np.float32)
        self.amplitudes = (1.0 + amp_gain * difficulty).astype(np.float32)

    def __len__(self) -> int:
        return self.num_tokens

    @property
    def num_buckets(self) -> int:
        return len(self.bucket_names)

    def blocks(self):
        """Yield ``(tokens[float32], labels[int64])`` in a fixed order.

        Every block is generated at full size and sliced, so the stream is
        prefix-stable: the first tokens do not depend on ``num_tokens``.
        """
        emitted = 0
        k = 0
        while emitted < self.num_tokens:
            rng = np.random.default_rng([self.seed, 1, k])
            labels = rng.choice(self.num_buckets, size=self.block_size, p=self.proportions)
            noise = rng.standard_normal((self.block_size, self.model_dim), dtype=np.float32)
            x = self.means[labels] + self.amplitudes[labels, None] * noise
            take = min(self.block_size, self.num_tokens - emitted)
            yield x[:take], labels[:take]
            emitted += take
            k += 1

    def materialize(self, limit: int | None = None):
        """Concatenate the first ``limit`` tokens into memory."""
        want = self.num_tokens if limit is None else min(limit, self.num_tokens)
        xs, ls, have = [], [], 0
        for x, labels in self.blocks():
            xs.append(x[: want - have])
            ls.append(labels[: want - have])
            have += len(xs[-1])
            if have >= want:
                break
        return np.concatenate(xs), np.concatenate(ls)


def generate_stream(
    config: ModelConfig, scheme: str, num_tokens: int, seed: int, **kwargs
) -> TokenStream:
    return TokenStream(config.model_dim, scheme, num_tokens, seed, **kwargs)


@dataclass
class StreamRoutingCounts:
    """Integer routing tallies over a stream; exact, so merge order is moot."""

    token_count: int
    group_counts: np.ndarray  # [num_groups] group selections (sum = top_groups * T)
    expert_counts: np.ndarray  # [num_groups, experts_per_group] (sum = top_experts * T)
    bucket_group_counts: np.ndarray | None = None  # [buckets, num_groups] expert selections


def _count_block(gating, config, x, labels, num_buckets):
    batch = route(x, gating, config)
    t = len(batch)
    group_counts = np.bincount(batch.selected_groups.reshape(-1), minlength=config.num_groups)
    expert_counts = np.zeros((config.num_groups, config.experts_per_group), dtype=np.int64)
    pairs = batch.selected_experts.reshape(-1, 2)
    np.add.at(expert_counts, (pairs[:, 0], pairs[:, 1]), 1)
    bucket_counts = None
    if labels is not None and num_buckets:
        bucket_counts = np.zeros((num_buckets, config.num_groups), dtype=np.int64)
        sel_groups = batch.selected_experts[:, :, 0]
        wide_labels = np.repeat(labels, config.top_experts)
        np.add.at(bucket_counts, (wide_labels, sel_groups.reshape(-1)), 1)
    return t, group_counts.astype(np.int64), expert_counts, bucket_counts, batch


def collect_stream_counts(
    gating: GatingParameters,
    stream: TokenStream,
    config: ModelConfig,
    workers: int = 1,
    trace_fh=None,
    with_buckets: bool = False,
) -> StreamRoutingCounts:
    """Route the whole stream and tally selections.

    ``workers`` shards blocks across threads; the tallies are integer sums,
    so any worker count produces the identical result. When ``trace_fh``
    is given, per-token decisions are appended in stream order.
    """
    nb = stream.num_buckets if with_buckets else 0
    total_t = 0
    group_counts = np.zeros(config.num_groups, dtype=np.int64)
    expert_counts = np.zeros((config.num_groups, config.experts_per_group), dtype=np.int64)
    bucket_counts = np.zeros((nb, config.num_groups), dtype=np.int64) if nb else None

    def work(block):
        x, labels = block
        return _count_block(gating, config, x, labels if nb else None, nb)

    if workers <= 1:
        results = map(work, stream.blocks())
        for t, gc, ec, bc, batch in results:
            total_t += t
            group_counts += gc
            expert_counts += ec
            if bc is not None:
                bucket_counts += bc
            if trace_fh is not None:
                write_trace(trace_fh, batch, start_index=total_t - t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for t, gc, ec, bc, batch in pool.map(work, stream.blocks()):
                total_t += t
                group_counts += gc
                expert_counts += ec
                if bc is not None:
                    bucket_counts += bc
                if trace_fh is not None:
                    write_trace(trace_fh, batch, start_index=total_t - t)
    return StreamRoutingCounts(
        token_count=total_t,
        group_counts=group_counts,
        expert_counts=expert_counts,
        bucket_group_counts=bucket_counts,
    )


def counts_from_trace(fh, config: ModelConfig) -> StreamRoutingCounts:
    """Rebuild routing tallies from a serialized trace."""
    t = 0
    group_counts = np.zeros(config.num_groups, dtype=np.int64)
    expert_counts = np.zeros((config.num_groups, config.experts_per_group), dtype=np.int64)
    for record in read_trace(fh):
        t += 1
        for g in record["groups"]:
            group_counts[g] += 1
        for g, e, _score in record["experts"]:
            expert_counts[g, e] += 1
    if t == 0:
        raise ValueError("trace contains no tokens")
    return StreamRoutingCounts(t, group_counts, expert_counts)


@dataclass
class LoadReport:
    """Per-GPU routing load under a placement plan.

    ``fractions`` rows are each group's split of its routed selections
    across GPUs (rows sum to 1 unless the group saw no traffic, which is
    flagged). ``per_group_std`` is the population standard deviation of a
    row. ``param_weighted_load`` multiplies each selection by the expert's
    parameter count, normalized to a fraction of the total.
    """

    token_count: int
    num_gpus: int
    counts: np.ndarray  # [num_groups, num_gpus]
    fractions: np.ndarray
    per_group_std: np.ndarray
    param_weighted_load: np.ndarray  # [num_gpus]
    per_group_tokens: np.ndarray  # [num_groups] selection totals per group
    empty_groups: list = field(default_factory=list)


def load_report(
    counts: StreamRoutingCounts, plan: PlacementPlan, config: ModelConfig
) -> LoadReport:
    if plan.assignment.shape != (config.num_groups, config.experts_per_group):
        raise ValueError("plan does not cover this config's expert grid")
    gpu_counts = np.zeros((config.num_groups, plan.num_gpus), dtype=np.int64)
    np.add.at(
        gpu_counts,
        (np.arange(config.num_groups)[:, None], plan.assignment),
        counts.expert_counts,
    )
    row_tot = gpu_counts.sum(axis=1)
    empty = [g for g in range(config.num_groups) if row_tot[g] == 0]
    safe = np.where(row_tot == 0, 1, row_tot)
    fractions = gpu_counts / safe[:, None]
    std = fractions.std(axis=1)  # population std across the gpu axis
    widths = np.asarray(config.group_widths, dtype=np.int64)
    per_expert_params = 2 * config.model_dim * widths
    weighted = np.zeros(plan.num_gpus, dtype=np.float64)
    np.add.at(weighted, plan.assignment.reshape(-1),
              (counts.expert_counts * per_expert_params[:, None]).reshape(-1).astype(np.float64))
    total_weight = weighted.sum()
    return LoadReport(
        token_count=counts.token_count,
        num_gpus=plan.num_gpus,
        counts=gpu_counts,
        fractions=fractions,
        per_group_std=std,
        param_weighted_load=weighted / (total_weight if total_weight else 1.0),
        per_group_tokens=row_tot,
        empty_groups=empty,
    )


def run_load_sim(
    gating: GatingParameters,
    stream: TokenStream,
    plan: PlacementPlan,
    config: ModelConfig,
    workers: int = 1,
    trace_fh=None,
) -> LoadReport:
    counts = collect_stream_counts(gating, stream, config, workers=workers, trace_fh=trace_fh)
    return load_report(counts, plan, config)


def replay_load_sim(trace_fh, plan: PlacementPlan, config: ModelConfig) -> LoadReport:
    return load_report(counts_from_trace(trace_fh, config), plan, config)


@dataclass
class GroupTrafficHistogram:
    counts: np.ndarray  # [num_groups] group selections; sum = top_groups * T
    condition: str


def width_weighted_traffic(group_counts: np.ndarray, config: ModelConfig) -> float:
    """Traffic share per group weighted by relative width; lower means the
    routing leans on cheaper groups."""
    counts = np.asarray(group_counts, dtype=float)
    shares = counts / counts.sum()
    w = np.asarray(config.group_widths, dtype=float)
    return float(np.sum((w / w.max()) * shares))


def expert_usage_std(expert_counts: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-group population std of within-group expert usage fractions,
    plus the mean over groups that saw traffic."""
    expert_counts = np.asarray(expert_counts, dtype=float)
    totals = expert_counts.sum(axis=1)
    safe = np.where(totals == 0, 1, totals)
    usage = expert_counts / safe[:, None]
    stds = usage.std(axis=1)
    seen = totals > 0
    mean = float(stds[seen].mean()) if seen.any() else 0.0
    return stds, mean


@dataclass
class DifficultyReport:
    scheme: str
    bucket_names: tuple
    counts: np.ndarray  # [buckets, num_groups] expert selections
    ratios: np.ndarray  # rows sum to 1, except flagged empty buckets
    mean_selected_width: np.ndarray  # [buckets]
    empty_buckets: list


def difficulty_analysis(
    gating: GatingParameters,
    stream: TokenStream,
    config: ModelConfig,
    workers: int = 1,
) -> DifficultyReport:
    counts = collect_stream_counts(gating, stream, config, workers=workers, with_buckets=True)
    table = counts.bucket_group_counts
    row_tot = table.sum(axis=1)
    empty = [b for b in range(len(row_tot)) if row_tot[b] == 0]
    safe = np.where(row_tot == 0, 1, row_tot)
    ratios = table / safe[:, None]
    widths = np.asarray(config.group_widths, dtype=float)
    mean_width = (table * widths[None, :]).sum(axis=1) / safe
    mean_width[row_tot == 0] = np.nan
    return DifficultyReport(
        scheme=stream.scheme,
        bucket_names=stream.bucket_names,
        counts=table,
        ratios=ratios,
        mean_selected_width=mean_width,
        empty_buckets=empty,
    )


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (loss {value!r})")
        self.step = step
        self.value = value


@dataclass
class TrainMetrics:
    step: int
    task_loss: float
    loss_group: float
    loss_expert: float
    group_counts: list


@dataclass
class TrainResult:
    layer: GroupedExpertLayer
    history: list
    final_histogram: GroupTrafficHistogram
    final_expert_counts: np.ndarray


def train_toy(
    layer: GroupedExpertLayer,
    stream: TokenStream,
    use_group_loss: bool = True,
    use_expert_loss: bool = True,
    steps: int = 2000,
    lr: float = 1e-2,
    batch_size: int = 32,
    seed: int = 0,
    log_interval: int = 100,
    pool_size: int = 16384,
    gating_lr_scale: float = 1.0,
) -> TrainResult:
    """SGD on a reconstruction task plus the enabled balance losses.

    The task is to match a fixed random linear map of the input; the map
    and the batch order derive from ``seed`` alone, so paired runs that
    share a seed see identical data and differ only in the loss switches.
    The input layer is left untouched; the trained copy is returned.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    cfg = layer.config
    layer = copy.deepcopy(layer)
    pool, _labels = stream.materialize(limit=pool_size)
    target_map = (
        np.random.default_rng([seed, 8]).standard_normal((cfg.model_dim, cfg.model_dim))
        / np.sqrt(cfg.model_dim)
    ).astype(pool.dtype)
    batch_rng = np.random.default_rng([seed, 7])

    history = []
    for step in range(steps):
        idx = batch_rng.integers(0, len(pool), size=batch_size)
        x = pool[idx]
        try:
            fwd = layer_forward(x, layer)
        except ValueError:
            if step == 0:
                raise  # a first-forward failure is a caller error, not divergence
            # exploded weights saturate the gates to exact zeros, which the
            # router rejects as degenerate; report it as the divergence it is
            raise TrainingDiverged(step, float("nan")) from None
        residual = fwd.outputs - x @ target_map
        task_loss = float(np.mean(residual**2))
        if not np.isfinite(task_loss):
            raise TrainingDiverged(step, task_loss)
        upstream = (2.0 / residual.size) * residual
        try:
            grads = layer_gradients(x, layer, upstream, batch=fwd.batch, cache=fwd.cache)
            aux = loss_gradients(x, layer.gating, cfg, batch=fwd.batch)
        except FloatingPointError:
            # overflow in the backward counts as divergence too
            raise TrainingDiverged(step, float("nan")) from None

        # scale the fresh gradients in place; one less full-size temporary
        # per parameter array, and the update loop is bandwidth bound
        for row, grow in zip(layer.experts, grads.experts):
            for expert, g in zip(row, grow):
                np.multiply(g.up_proj, lr, out=g.up_proj)
                np.multiply(g.down_proj, lr, out=g.down_proj)
                expert.up_proj -= g.up_proj
                expert.down_proj -= g.down_proj
        for expert, g in zip(layer.shared_experts, grads.shared_experts):
            np.multiply(g.up_proj, lr, out=g.up_proj)
            np.multiply(g.down_proj, lr, out=g.down_proj)
            expert.up_proj -= g.up_proj
            expert.down_proj -= g.down_proj
        glr = lr * gating_lr_scale
        layer.gating.group_embeddings -= glr * grads.group_embeddings
        layer.gating.expert_embeddings -= glr * grads.expert_embeddings
        if use_group_loss:
            # the group loss only reaches the group embeddings
            layer.gating.group_embeddings -= glr * aux.group_embeddings
        if use_expert_loss:
            # and the expert loss only the expert embeddings
            layer.gating.expert_embeddings -= glr * aux.expert_embeddings

        if step % log_interval == 0 or step == steps - 1:
            hist = np.bincount(
                fwd.batch.selected_groups.reshape(-1), minlength=cfg.num_groups
            )
            history.append(
                TrainMetrics(
                    step=step,
                    task_loss=task_loss,
                    loss_group=fwd.loss_group,
                    loss_expert=fwd.loss_expert,
                    group_counts=hist.tolist(),
                )
            )

    eval_batch = route(pool, layer.gating, cfg)
    final_counts = np.bincount(
        eval_batch.selected_groups.reshape(-1), minlength=cfg.num_groups
    ).astype(np.int64)
    expert_counts = np.zeros((cfg.num_groups, cfg.experts_per_group), dtype=np.int64)
    pairs = eval_batch.selected_experts.reshape(-1, 2)
    np.add.at(expert_counts, (pairs[:, 0], pairs[:, 1]), 1)
    condition = []
    if use_group_loss:
        condition.append("+group-loss")
    if use_expert_loss:
        condition.append("+expert-loss")
    label = "task" + "".join(condition)
    return TrainResult(
        layer=layer,
        history=history,
        final_histogram=GroupTrafficHistogram(counts=final_counts, condition=label),
        final_expert_counts=expert_counts,
    )
