"""Hyperparameters for the grouped heterogeneous mixture-of-experts layer.

Experts are organized into groups: equal hidden width within a group,
widths varying across groups on a schedule that is symmetric around a base
width, so that ``widths[i] + widths[-1 - i] == 2 * base_width`` for every
pair. Widths are stored ascending and indexed 0-based; 1-based group
numbering appears only in rendered reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

PRESET_SCALES = ("1B", "3B", "14B")

# Published reference configurations at three scales. The width schedules
# are data, not a formula: each is an ascending run of eight hidden dims
# whose symmetric pairs sum to twice the base width.
_PRESET_WIDTHS = {
    "1B": ((256, 320, 384, 512, 640, 768, 832, 896), 576, 32),
    "3B": ((384, 512, 640, 768, 896, 1024, 1152, 1280), 832, 64),
    "14B": ((640, 768, 896, 1024, 1152, 1280, 1408, 1536), 1088, 128),
}


@dataclass(frozen=True)
class ModelConfig:
    """Everything the layer, router, losses, and allocator need to agree on.

    Immutable after construction; safe to share across threads. Use
    :func:`validate` to get a list of violated invariants (empty == valid).
    """

    model_dim: int
    num_groups: int
    experts_per_group: int
    top_groups: int
    top_experts: int
    num_shared_experts: int
    group_widths: tuple[int, ...]
    base_width: int
    alpha_group: float = 1e-4
    alpha_expert: float = 2.5e-3
    epsilon: float = 1e-9

    def __post_init__(self):
        # Normalize list input from JSON so equality and hashing behave.
        object.__setattr__(self, "group_widths", tuple(self.group_widths))

    @property
    def total_experts(self) -> int:
        return self.num_groups * self.experts_per_group

    @property
    def max_width(self) -> int:
        return max(self.group_widths)

    def to_dict(self) -> dict:
        return {
            "model_dim": self.model_dim,
            "num_groups": self.num_groups,
            "experts_per_group": self.experts_per_group,
            "top_groups": self.top_groups,
            "top_experts": self.top_experts,
            "num_shared_experts": self.num_shared_experts,
            "group_widths": list(self.group_widths),
            "base_width": self.base_width,
            "alpha_group": self.alpha_group,
            "alpha_expert": self.alpha_expert,
            "epsilon": self.epsilon,
        }


def build_group_widths(
    base_width: int, num_groups: int, half_schedule: list[int] | tuple[int, ...]
) -> tuple[int, ...]:
    """Construct a symmetric width schedule from per-pair offsets.

    ``half_schedule`` holds ``num_groups // 2`` strictly ascending positive
    offsets, each below ``base_width``. The lower half of the schedule is
    ``base_width - offset`` (largest offset first), the upper half is
    ``base_width + offset``, so every symmetric pair sums to
    ``2 * base_width`` by construction. ``num_groups == 1`` is the
    degenerate homogeneous case and takes an empty schedule.
    """
    if base_width < 1:
        raise ValueError(f"base_width must be positive, got {base_width}")
    if num_groups == 1:
        if half_schedule:
            raise ValueError("half_schedule must be empty when num_groups == 1")
        return (base_width,)
    if num_groups < 1 or num_groups % 2 != 0:
        raise ValueError(f"num_groups must be 1 or even, got {num_groups}")
    offsets = tuple(int(o) for o in half_schedule)
    if len(offsets) != num_groups // 2:
        raise ValueError(
            f"half_schedule has {len(offsets)} offsets, expected {num_groups // 2}"
        )
    if any(o < 1 for o in offsets):
        raise ValueError(f"offsets must be positive, got {offsets}")
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ValueError(f"offsets must be strictly ascending, got {offsets}")
    if offsets[-1] >= base_width:
        raise ValueError(
            f"offset {offsets[-1]} >= base_width {base_width} would give a "
            "non-positive width"
        )
    lower = tuple(base_width - o for o in reversed(offsets))
    upper = tuple(base_width + o for o in offsets)
    return lower + upper


def validate(config: ModelConfig) -> list[str]:
    """Return one message per violated invariant; an empty list means valid."""
    v: list[str] = []
    for name in ("model_dim", "num_groups", "experts_per_group", "top_groups", "top_experts"):
        if getattr(config, name) < 1:
            v.append(f"positivity: {name} must be >= 1, got {getattr(config, name)}")
    if config.num_shared_experts < 0:
        v.append(
            f"positivity: num_shared_experts must be >= 0, got {config.num_shared_experts}"
        )
    if config.top_groups > config.num_groups:
        v.append(
            f"selection-capacity: top_groups ({config.top_groups}) exceeds "
            f"num_groups ({config.num_groups})"
        )
    cap = config.top_groups * config.experts_per_group
    if config.top_experts > cap:
        v.append(
            f"selection-capacity: top_experts ({config.top_experts}) exceeds "
            f"top_groups * experts_per_group ({cap})"
        )
    widths = config.group_widths
    if len(widths) != config.num_groups:
        v.append(
            f"width-schedule: expected {config.num_groups} group_widths, got {len(widths)}"
        )
    else:
        if any(w < 1 for w in widths):
            v.append(f"width-schedule: widths must be positive, got {widths}")
        if any(b <= a for a, b in zip(widths, widths[1:])):
            v.append(f"width-schedule: widths must be strictly ascending, got {widths}")
        target = 2 * config.base_width
        for i in range(config.num_groups // 2 + config.num_groups % 2):
            j = config.num_groups - 1 - i
            if widths[i] + widths[j] != target:
                v.append(
                    f"symmetric-pair: group_widths[{i}] + group_widths[{j}] = "
                    f"{widths[i] + widths[j]}, expected 2 * base_width = {target}"
                )
    if config.base_width < 1:
        v.append(f"positivity: base_width must be >= 1, got {config.base_width}")
    if config.alpha_group < 0:
        v.append(f"coefficients: alpha_group must be >= 0, got {config.alpha_group}")
    if config.alpha_expert < 0:
        v.append(f"coefficients: alpha_expert must be >= 0, got {config.alpha_expert}")
    if not config.epsilon > 0:
        v.append(f"coefficients: epsilon must be > 0, got {config.epsilon}")
    return v


def preset(scale: str) -> ModelConfig:
    """Reference configuration at one of the published scales (1B, 3B, 14B).

    All three share model_dim 1024, eight groups with three routed, six
    routed experts plus two shared, and the default balance coefficients
    alpha_expert 2.5e-3 / alpha_group 1e-4.
    """
    if scale not in _PRESET_WIDTHS:
        raise ValueError(f"unknown scale {scale!r}; expected one of {PRESET_SCALES}")
    widths, base, total = _PRESET_WIDTHS[scale]
    return ModelConfig(
        model_dim=1024,
        num_groups=8,
        experts_per_group=total // 8,
        top_groups=3,
        top_experts=6,
        num_shared_experts=2,
        group_widths=widths,
        base_width=base,
    )


_REQUIRED_KEYS = frozenset(
    f.name for f in fields(ModelConfig)
) - {"alpha_group", "alpha_expert", "epsilon"}
_ALL_KEYS = frozenset(f.name for f in fields(ModelConfig))


def config_from_dict(data: dict) -> ModelConfig:
    """Build a config from a plain dict with keys matching the field names."""
    unknown = set(data) - _ALL_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    missing = _REQUIRED_KEYS - set(data)
    if missing:
        raise ValueError(f"missing config keys: {sorted(missing)}")
    return ModelConfig(**data)


def load_config(path: str) -> ModelConfig:
    """Load a config from a JSON file (top-level keys = field names)."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return config_from_dict(data)


def save_config(config: ModelConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
