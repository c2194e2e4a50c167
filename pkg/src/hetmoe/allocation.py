"""Expert-to-GPU placement.

The balanced scheme works on all-size expert sets: the column of i-th
experts, one from every group. A set always contains one expert of every
width, so its parameter total is the same for every i, and handing whole
columns out round-robin equalizes per-GPU parameter totals exactly
whenever the GPU count divides the experts-per-group. A contiguous
whole-group layout is kept as the strawman baseline; its per-GPU totals
scale with the group widths and demonstrate the imbalance the set scheme
removes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig

__all__ = [
    "PlacementPlan",
    "allocate",
    "naive_group_allocation",
    "per_gpu_params",
    "parameter_spread",
    "save_plan",
    "load_plan",
]


@dataclass
class PlacementPlan:
    """Maps every expert (group, index) to a GPU id."""

    num_gpus: int
    assignment: np.ndarray  # [num_groups, experts_per_group] of gpu ids
    mode: str = "strict"

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.num_gpus < 1:
            raise ValueError("need at least one gpu")
        if self.assignment.ndim != 2:
            raise ValueError("assignment must be a group-by-expert table")
        if self.assignment.min() < 0 or self.assignment.max() >= self.num_gpus:
            raise ValueError("gpu ids out of range")

    def gpu_of(self, group: int, index: int) -> int:
        return int(self.assignment[group, index])

    @property
    def sets_per_gpu(self) -> list[int]:
        """Whole all-size columns owned per GPU (a split column counts for
        nobody)."""
        owned = [0] * self.num_gpus
        for i in range(self.assignment.shape[1]):
            col = self.assignment[:, i]
            if (col == col[0]).all():
                owned[int(col[0])] += 1
        return owned

    def preserves_all_size_sets(self) -> bool:
        return (self.assignment == self.assignment[0]).all()


def allocate(config: ModelConfig, num_gpus: int, mode: str = "strict") -> PlacementPlan:
    """Round-robin all-size sets: expert (g, i) lands on gpu ``i mod D``.

    Strict mode insists the GPU count divides experts-per-group, which is
    what makes every per-GPU parameter total identical; relaxed mode keeps
    the same layout but lets set counts differ by one.
    """
    n = config.experts_per_group
    if mode not in ("strict", "relaxed"):
        raise ValueError(f"unknown allocation mode {mode!r}")
    if not 1 <= num_gpus <= n:
        raise ValueError(f"num_gpus must be in [1, {n}], got {num_gpus}")
    if mode == "strict" and n % num_gpus != 0:
        raise ValueError(
            f"strict mode needs num_gpus to divide experts_per_group ({num_gpus} does not divide {n})"
        )
    column = np.arange(n, dtype=np.int64) % num_gpus
    assignment = np.tile(column, (config.num_groups, 1))
    return PlacementPlan(num_gpus=num_gpus, assignment=assignment, mode=mode)


def naive_group_allocation(config: ModelConfig, num_gpus: int) -> PlacementPlan:
    """Strawman layout: whole groups assigned to GPUs contiguously.

    Each GPU's parameter total then tracks the widths of the groups it
    hosts, so any heterogeneous schedule leaves the GPUs unbalanced.
    """
    if not 1 <= num_gpus <= config.num_groups:
        raise ValueError(
            f"num_gpus must be in [1, {config.num_groups}] for the group layout, got {num_gpus}"
        )
    assignment = np.empty((config.num_groups, config.experts_per_group), dtype=np.int64)
    for gpu, chunk in enumerate(np.array_split(np.arange(config.num_groups), num_gpus)):
        assignment[chunk] = gpu
    return PlacementPlan(num_gpus=num_gpus, assignment=assignment, mode="naive")


def per_gpu_params(plan: PlacementPlan, config: ModelConfig) -> np.ndarray:
    """Exact integer expert-parameter total hosted by each GPU."""
    if plan.assignment.shape != (config.num_groups, config.experts_per_group):
        raise ValueError("plan shape does not match the config")
    per_expert = 2 * config.model_dim * np.asarray(config.group_widths, dtype=np.int64)
    totals = np.zeros(plan.num_gpus, dtype=np.int64)
    np.add.at(totals, plan.assignment.reshape(-1), np.repeat(per_expert, config.experts_per_group))
    return totals


def parameter_spread(plan: PlacementPlan, config: ModelConfig) -> int:
    totals = per_gpu_params(plan, config)
    return int(totals.max() - totals.min())


def save_plan(path: str, plan: PlacementPlan, config: ModelConfig) -> None:
    """One row per expert: group, index, gpu, width, parameter count."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# mode={plan.mode} num_gpus={plan.num_gpus}\n")
        writer = csv.writer(fh)
        writer.writerow(["group", "index", "gpu", "width", "params"])
        for g in range(config.num_groups):
            width = config.group_widths[g]
            for i in range(config.experts_per_group):
                writer.writerow([g, i, plan.gpu_of(g, i), width, 2 * config.model_dim * width])


def load_plan(path: str) -> PlacementPlan:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if not header.startswith("# mode="):
            raise ValueError(f"{path} is missing the plan header line")
        fields = dict(part.split("=", 1) for part in header[2:].split())
        rows = [r for r in csv.DictReader(fh)]
    if not rows:
        raise ValueError(f"{path} contains no expert rows")
    n_g = max(int(r["group"]) for r in rows) + 1
    n_e = max(int(r["index"]) for r in rows) + 1
    assignment = np.full((n_g, n_e), -1, dtype=np.int64)
    for r in rows:
        assignment[int(r["group"]), int(r["index"])] = int(r["gpu"])
    if (assignment < 0).any():
        raise ValueError(f"{path} does not cover every expert exactly once")
    return PlacementPlan(
        num_gpus=int(fields["num_gpus"]), assignment=assignment, mode=fields["mode"]
    )
