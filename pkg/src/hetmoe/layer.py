"""Grouped-expert feed-forward layer.

Each expert is a two-matrix FFN (up projection, nonlinearity, down
projection) sized by its group's width, so parameter counts stay the
transparent ``2 * model_dim * width``. A layer bundles the gating
parameters, the grid of routed experts, and always-on shared experts of
the base width. Forward routes a token batch, mixes the selected expert
outputs by the normalized routing weights, and adds the shared outputs
unweighted. Backward differentiates through the expert networks, the
global weight normalization, and the sigmoid/softmax score product, with
the top-k selection masks held constant.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .config import ModelConfig, config_from_dict
from .losses import accumulate_stats, group_wise_loss, intra_group_loss
from .routing import GatingParameters, RoutingBatch, route

__all__ = [
    "ExpertNetwork",
    "GroupedExpertLayer",
    "LayerForward",
    "LayerGradients",
    "ParameterCounts",
    "expert_forward",
    "layer_forward",
    "layer_gradients",
    "count_parameters",
    "save_weights",
    "load_weights",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error-linear unit."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


_ACTIVATIONS = {
    "gelu": (gelu, gelu_grad),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass
class ExpertNetwork:
    """Two-matrix FFN; width is the hidden size between the projections."""

    up_proj: np.ndarray  # [model_dim, width]
    down_proj: np.ndarray  # [width, model_dim]
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.up_proj.shape[1] != self.down_proj.shape[0]:
            raise ValueError("up/down projection widths disagree")
        if self.up_proj.shape[0] != self.down_proj.shape[1]:
            raise ValueError("up/down projection model dims disagree")

    @property
    def width(self) -> int:
        return self.up_proj.shape[1]

    @property
    def param_count(self) -> int:
        return self.up_proj.size + self.down_proj.size

    @classmethod
    def init_random(
        cls,
        model_dim: int,
        width: int,
        rng: np.random.Generator,
        activation: str = "gelu",
        dtype=np.float64,
    ) -> "ExpertNetwork":
        up = rng.standard_normal((model_dim, width)) / np.sqrt(model_dim)
        down = rng.standard_normal((width, model_dim)) / np.sqrt(width)
        return cls(up.astype(dtype), down.astype(dtype), activation)


def expert_forward(tokens: np.ndarray, expert: ExpertNetwork) -> np.ndarray:
    """Apply one expert to a token or a batch."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != expert.up_proj.shape[0]:
        raise ValueError(
            f"token dim {tokens.shape[-1]} does not match expert dim {expert.up_proj.shape[0]}"
        )
    act, _ = _ACTIVATIONS[expert.activation]
    return act(tokens @ expert.up_proj) @ expert.down_proj


class GroupedExpertLayer:
    """Gating parameters plus the expert grid and shared experts."""

    def __init__(
        self,
        config: ModelConfig,
        gating: GatingParameters,
        experts: list[list[ExpertNetwork]],
        shared_experts: list[ExpertNetwork],
    ):
        gating.check_shapes(config)
        if len(experts) != config.num_groups or any(
            len(row) != config.experts_per_group for row in experts
        ):
            raise ValueError("expert grid shape does not match the config")
        for g, row in enumerate(experts):
            for e in row:
                if e.width != config.group_widths[g]:
                    raise ValueError(
                        f"group {g} expert width {e.width} != schedule {config.group_widths[g]}"
                    )
        if len(shared_experts) != config.num_shared_experts:
            raise ValueError("shared expert count does not match the config")
        for e in shared_experts:
            if e.width != config.base_width:
                raise ValueError("shared experts must use the base width")
        self.config = config
        self.gating = gating
        self.experts = experts
        self.shared_experts = shared_experts

    @classmethod
    def init_random(
        cls,
        config: ModelConfig,
        rng: np.random.Generator,
        activation: str = "gelu",
        dtype=np.float64,
    ) -> "GroupedExpertLayer":
        gating = GatingParameters.init_random(config, rng, dtype=dtype)
        experts = [
            [
                ExpertNetwork.init_random(config.model_dim, w, rng, activation, dtype)
                for _ in range(config.experts_per_group)
            ]
            for w in config.group_widths
        ]
        shared = [
            ExpertNetwork.init_random(config.model_dim, config.base_width, rng, activation, dtype)
            for _ in range(config.num_shared_experts)
        ]
        return cls(config, gating, experts, shared)


def _combine_with_cache(
    tokens: np.ndarray, layer: GroupedExpertLayer, weights: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Combine outputs while keeping per-expert activations for the backward."""
    out = np.zeros_like(tokens)
    cache: dict = {}
    for g, row in enumerate(layer.experts):
        for i, expert in enumerate(row):
            mask = weights[:, g, i] != 0
            if mask.any():
                act, _ = _ACTIVATIONS[expert.activation]
                h = tokens[mask] @ expert.up_proj
                a = act(h)
                y = a @ expert.down_proj
                out[mask] += weights[mask, g, i, None] * y
                cache["routed", g, i] = (mask, h, a, y)
    for k, expert in enumerate(layer.shared_experts):
        act, _ = _ACTIVATIONS[expert.activation]
        h = tokens @ expert.up_proj
        a = act(h)
        out += a @ expert.down_proj
        cache["shared", k] = (h, a)
    return out, cache


def combine_outputs(
    tokens: np.ndarray, layer: GroupedExpertLayer, weights: np.ndarray
) -> np.ndarray:
    """Weighted sum of routed expert outputs plus unweighted shared outputs.

    ``weights`` is [tokens, groups, experts]; experts with weight zero are
    never evaluated, which is what makes the layer sparse.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    out, _ = _combine_with_cache(tokens, layer, weights)
    return out


@dataclass
class LayerForward:
    outputs: np.ndarray  # [tokens, model_dim]
    batch: RoutingBatch
    loss_group: float
    loss_expert: float
    cache: dict | None = field(default=None, repr=False, compare=False)


def layer_forward(tokens: np.ndarray, layer: GroupedExpertLayer) -> LayerForward:
    """Route, combine, and evaluate both auxiliary losses on the same batch."""
    tokens = np.atleast_2d(np.asarray(tokens))
    batch = route(tokens, layer.gating, layer.config)
    outputs, cache = _combine_with_cache(tokens, layer, batch.final_scores)
    stats = accumulate_stats(batch, layer.config)
    cfg = layer.config
    return LayerForward(
        outputs=outputs,
        batch=batch,
        loss_group=group_wise_loss(stats, cfg.group_widths, cfg.alpha_group),
        loss_expert=intra_group_loss(stats, cfg.alpha_expert),
        cache=cache,
    )


@dataclass
class ExpertGrads:
    up_proj: np.ndarray
    down_proj: np.ndarray


@dataclass
class LayerGradients:
    group_embeddings: np.ndarray
    expert_embeddings: np.ndarray
    experts: list[list[ExpertGrads]]
    shared_experts: list[ExpertGrads]


def layer_gradients(
    tokens: np.ndarray,
    layer: GroupedExpertLayer,
    upstream: np.ndarray,
    batch: RoutingBatch | None = None,
    cache: dict | None = None,
) -> LayerGradients:
    """Backward pass for the scalar ``sum_t <upstream_t, output_t>``.

    Covers expert weights, shared expert weights, and both gating arrays.
    Selection masks are constants; the gradient into the routing weights
    flows through the normalization, then splits into the softmax branch
    and the sigmoid group-score branch of the score product.

    Passing the ``cache`` of a matching :func:`layer_forward` call skips the
    recomputation of expert activations; the result is bitwise identical.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    upstream = np.atleast_2d(np.asarray(upstream))
    if upstream.shape != tokens.shape[:1] + (layer.config.model_dim,):
        raise ValueError("upstream gradient shape must match the layer output")
    if batch is None:
        batch = route(tokens, layer.gating, layer.config)
    fs = batch.final_scores

    d_weights = np.zeros_like(fs)
    expert_grads: list[list[ExpertGrads]] = []
    for g, row in enumerate(layer.experts):
        grads_row = []
        for i, expert in enumerate(row):
            act, act_grad = _ACTIVATIONS[expert.activation]
            if cache is not None:
                hit = ("routed", g, i) in cache
                mask = cache["routed", g, i][0] if hit else None
            else:
                mask = fs[:, g, i] != 0
                hit = bool(mask.any())
            if not hit:
                grads_row.append(
                    ExpertGrads(np.zeros_like(expert.up_proj), np.zeros_like(expert.down_proj))
                )
                continue
            if cache is not None:
                mask, h, a, out = cache["routed", g, i]
                x = tokens[mask]
            else:
                x = tokens[mask]
                h = x @ expert.up_proj
                a = act(h)
                out = a @ expert.down_proj
            d_weights[mask, g, i] = np.einsum("td,td->t", upstream[mask], out)
            weighted_up = fs[mask, g, i, None] * upstream[mask]
            d_down = a.T @ weighted_up
            d_h = (weighted_up @ expert.down_proj.T) * act_grad(h)
            d_up = x.T @ d_h
            grads_row.append(ExpertGrads(d_up, d_down))
        expert_grads.append(grads_row)

    shared_grads = []
    for k, expert in enumerate(layer.shared_experts):
        act, act_grad = _ACTIVATIONS[expert.activation]
        if cache is not None:
            h, a = cache["shared", k]
        else:
            h = tokens @ expert.up_proj
            a = act(h)
        d_down = a.T @ upstream
        d_h = (upstream @ expert.down_proj.T) * act_grad(h)
        shared_grads.append(ExpertGrads(tokens.T @ d_h, d_down))

    # Normalization backward: final = masked / Z with Z the per-token sum of
    # the surviving scores; unselected entries are constants.
    z = batch.masked_scores.sum(axis=(1, 2))[:, None, None]
    inner = (d_weights * fs).sum(axis=(1, 2))[:, None, None]
    selected = batch.masked_scores > 0
    d_masked = np.where(selected, (d_weights - inner) / z, 0.0)

    # Product backward: masked entries are intra * group score.
    gs = batch.group_scores
    intra = batch.intra_scores
    d_intra = d_masked * gs[:, :, None]
    d_gs = (d_masked * intra).sum(axis=-1)

    # Softmax rows for selected groups, sigmoid for group scores.
    row_inner = (intra * d_intra).sum(axis=-1, keepdims=True)
    d_logits_e = intra * (d_intra - row_inner)
    grad_expert_emb = np.einsum("tgn,td->gnd", d_logits_e, tokens)
    d_z = d_gs * gs * (1.0 - gs)
    grad_group_emb = d_z.T @ tokens

    flat = [grad_group_emb, grad_expert_emb]
    flat += [a for row in expert_grads for g_ in row for a in (g_.up_proj, g_.down_proj)]
    flat += [a for g_ in shared_grads for a in (g_.up_proj, g_.down_proj)]
    # A float64 sum stays finite for any finite float32 array, so one scalar
    # check per array replaces a full isfinite scan.
    with np.errstate(invalid="ignore", over="ignore"):
        if not all(np.isfinite(a.sum(dtype=np.float64)) for a in flat):
            raise FloatingPointError("non-finite layer gradient; check inputs and weights")
    return LayerGradients(
        group_embeddings=grad_group_emb,
        expert_embeddings=grad_expert_emb,
        experts=expert_grads,
        shared_experts=shared_grads,
    )


@dataclass
class ParameterCounts:
    """Expert parameter totals; shared experts are kept separate so either
    counting convention (with or without them) is recoverable."""

    total: int
    routed: int
    shared: int
    worst_activated: int
    expected_activated: float | None = None


def count_parameters(layer: GroupedExpertLayer, decisions=None) -> ParameterCounts:
    """Exact totals plus worst-case and trace-averaged activated counts.

    Worst case takes the ``top_experts`` widest experts in the layer; the
    expected value averages the selected widths over ``decisions`` (any
    iterable with per-token ``selected_experts``). Both include the shared
    experts, which every token activates.
    """
    cfg = layer.config
    routed = sum(e.param_count for row in layer.experts for e in row)
    shared = sum(e.param_count for e in layer.shared_experts)
    all_widths = np.repeat(cfg.group_widths, cfg.experts_per_group)
    widest = np.sort(all_widths)[::-1][: cfg.top_experts]
    worst = int(widest.sum()) * 2 * cfg.model_dim + shared

    expected = None
    if decisions is not None:
        widths = np.asarray(cfg.group_widths)
        per_token = []
        for dec in decisions:
            sel = np.asarray(dec.selected_experts)
            per_token.append(widths[sel[:, 0]].sum() * 2 * cfg.model_dim + shared)
        if not per_token:
            raise ValueError("empty decision trace")
        expected = float(np.mean(per_token))
    return ParameterCounts(
        total=routed + shared,
        routed=routed,
        shared=shared,
        worst_activated=worst,
        expected_activated=expected,
    )


_MAGIC = b"HGEW"
_FORMAT_VERSION = 1


def _array_entries(layer: GroupedExpertLayer):
    yield "gating/group_embeddings", layer.gating.group_embeddings
    yield "gating/expert_embeddings", layer.gating.expert_embeddings
    for g, row in enumerate(layer.experts):
        for i, expert in enumerate(row):
            yield f"expert/{g}/{i}/up", expert.up_proj
            yield f"expert/{g}/{i}/down", expert.down_proj
    for s, expert in enumerate(layer.shared_experts):
        yield f"shared/{s}/up", expert.up_proj
        yield f"shared/{s}/down", expert.down_proj


def save_weights(path: str, layer: GroupedExpertLayer) -> None:
    """Write magic, a JSON manifest, then every array as little-endian fp32."""
    arrays, manifest_arrays, offset = [], [], 0
    for name, arr in _array_entries(layer):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest_arrays.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        arrays.append(data)
        offset += len(data)
    activation = layer.experts[0][0].activation if layer.experts[0] else "gelu"
    manifest = {
        "format_version": _FORMAT_VERSION,
        "config": layer.config.to_dict(),
        "activation": activation,
        "arrays": manifest_arrays,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for data in arrays:
            fh.write(data)


def load_weights(path: str) -> GroupedExpertLayer:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a layer weights file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        if manifest.get("format_version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported weights format {manifest.get('format_version')!r}")
        payload = fh.read()
    config = config_from_dict(manifest["config"])
    activation = manifest["activation"]
    loaded = {}
    for entry in manifest["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype="<f4")
        loaded[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    gating = GatingParameters(
        group_embeddings=loaded["gating/group_embeddings"],
        expert_embeddings=loaded["gating/expert_embeddings"],
    )
    experts = [
        [
            ExpertNetwork(
                loaded[f"expert/{g}/{i}/up"], loaded[f"expert/{g}/{i}/down"], activation
            )
            for i in range(config.experts_per_group)
        ]
        for g in range(config.num_groups)
    ]
    shared = [
        ExpertNetwork(loaded[f"shared/{s}/up"], loaded[f"shared/{s}/down"], activation)
        for s in range(config.num_shared_experts)
    ]
    return GroupedExpertLayer(config, gating, experts, shared)
