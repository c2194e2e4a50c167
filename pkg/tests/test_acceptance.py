"""Top-level acceptance checks, one test per contract item.

The first six are exact or statistical facts that hold at any scale. The
three directional checks train seed-paired 1B layers (no auxiliary loss,
expert loss only, both losses) through a module-scoped fixture; the runs
take a few minutes each, so they are built once and shared. Coefficients
and step counts here are desk-scale calibrations: large enough that each
balancing effect clearly beats its paired control, small enough that the
whole module stays in the tens of minutes.
"""

import itertools

import numpy as np
import pytest
from scipy.stats import spearmanr

from hetmoe.allocation import allocate, naive_group_allocation, parameter_spread, per_gpu_params
from hetmoe.cli import EXIT_OK, main
from hetmoe.config import ModelConfig, preset, validate
from hetmoe.layer import GroupedExpertLayer, combine_outputs, count_parameters, layer_gradients
from hetmoe.losses import (
    RoutingBatchStats,
    accumulate_stats,
    group_wise_loss,
    intra_group_loss,
    loss_gradients,
)
from hetmoe.routing import GatingParameters, route, stable_softmax
from hetmoe.simulator import (
    TokenStream,
    difficulty_analysis,
    replay_load_sim,
    run_load_sim,
    train_toy,
    width_weighted_traffic,
)

# Desk-scale training calibration for the directional checks. The balance
# coefficients are far above the full-scale defaults because the toy task
# gradient is the only opponent here and the run is short.
LAYER_SEED = 11
TRAIN_SEED = 5
STREAM_SEED = 3
ALPHA_GROUP = 0.05
ALPHA_EXPERT = 5.0
TRAIN = dict(steps=600, lr=5e-3, batch_size=64, seed=TRAIN_SEED, pool_size=8192)
STREAM_SHAPE = dict(mean_scale=1.0, amp_gain=3.0)

TABLE_WIDTHS = {
    "1B": (256, 320, 384, 512, 640, 768, 832, 896),
    "3B": (384, 512, 640, 768, 896, 1024, 1152, 1280),
    "14B": (640, 768, 896, 1024, 1152, 1280, 1408, 1536),
}


def test_width_schedules_exact():
    for scale, widths in TABLE_WIDTHS.items():
        cfg = preset(scale)
        assert cfg.group_widths == widths, scale
        assert validate(cfg) == []
        for i in range(cfg.num_groups):
            j = cfg.num_groups - 1 - i
            assert widths[i] + widths[j] == 2 * cfg.base_width


def test_routing_invariants_bulk():
    total = 100_000
    chunk = 10_000
    for scale in ("1B", "3B", "14B"):
        cfg = preset(scale)
        gating = GatingParameters.init_random(cfg, np.random.default_rng(1), dtype=np.float32)
        rng = np.random.default_rng(2)
        for _ in range(total // chunk):
            x = rng.standard_normal((chunk, cfg.model_dim), dtype=np.float32)
            batch = route(x, gating, cfg)
            fs = batch.final_scores
            nonzero = (fs != 0).sum(axis=(1, 2))
            assert (nonzero == cfg.top_experts).all()
            assert np.abs(fs.sum(axis=(1, 2)) - 1.0).max() <= 1e-6
            sel_groups = batch.selected_experts[:, :, 0]
            inside = (sel_groups[:, :, None] == batch.selected_groups[:, None, :]).any(axis=2)
            assert inside.all()

    # relabeling the groups must relabel the decisions: selections map
    # through the permutation exactly, weights to reduction roundoff
    cfg = preset("1B")
    gating = GatingParameters.init_random(cfg, np.random.default_rng(3), dtype=np.float64)
    x = np.random.default_rng(4).standard_normal((256, cfg.model_dim))
    base = route(x, gating, cfg)
    perm_rng = np.random.default_rng(5)
    for _ in range(100):
        perm = perm_rng.permutation(cfg.num_groups)
        inv = np.argsort(perm)
        permuted = GatingParameters(
            group_embeddings=gating.group_embeddings[perm],
            expert_embeddings=gating.expert_embeddings[perm],
        )
        out = route(x, permuted, cfg)
        assert np.array_equal(out.group_scores, base.group_scores[:, perm])
        assert np.array_equal(out.selected_groups, np.sort(inv[base.selected_groups], axis=1))
        expected = base.final_scores[:, perm, :]
        assert np.array_equal(out.final_scores != 0, expected != 0)
        assert np.abs(out.final_scores - expected).max() <= 1e-12


def test_homogeneous_baseline_equivalence():
    # one group of uniform experts must reduce to plain softmax top-k
    cfg = ModelConfig(
        model_dim=64,
        num_groups=1,
        experts_per_group=8,
        top_groups=1,
        top_experts=3,
        num_shared_experts=0,
        group_widths=(64,),
        base_width=64,
    )
    gating = GatingParameters.init_random(cfg, np.random.default_rng(6), dtype=np.float64)
    x = np.random.default_rng(7).standard_normal((10_000, cfg.model_dim))
    batch = route(x, gating, cfg)

    logits = x @ gating.expert_embeddings[0].T
    probs = stable_softmax(logits)
    order = np.argsort(-probs, axis=1, kind="stable")[:, : cfg.top_experts]
    ours = batch.selected_experts[:, :, 1]
    assert np.array_equal(np.sort(ours, axis=1), np.sort(order, axis=1))

    picked = np.take_along_axis(probs, order, axis=1)
    reference = picked / picked.sum(axis=1, keepdims=True)
    got = np.take_along_axis(batch.final_scores[:, 0, :], order, axis=1)
    assert np.abs(got - reference).max() < 1e-9


def _tiny_config(rng) -> ModelConfig:
    dim = int(rng.integers(4, 9))
    n_g = int(rng.choice([2, 4]))
    n_e = int(rng.integers(2, 5))
    base = int(rng.integers(4, 7))
    if n_g == 2:
        widths = (base - 1, base + 1)
    else:
        widths = (base - 2, base - 1, base + 1, base + 2)
    k_g = int(rng.integers(1, n_g + 1))
    k_e = int(rng.integers(1, min(k_g * n_e, 4) + 1))
    return ModelConfig(
        model_dim=dim,
        num_groups=n_g,
        experts_per_group=n_e,
        top_groups=k_g,
        top_experts=k_e,
        num_shared_experts=int(rng.integers(0, 2)),
        group_widths=widths,
        base_width=base,
        alpha_group=0.7,
        alpha_expert=1.3,
    )


def _routing_margins(tokens, gating, cfg):
    """Distance to the nearest selection flip; guards finite differences."""
    batch = route(tokens, gating, cfg)
    gs = np.sort(batch.group_scores, axis=1)[:, ::-1]
    if cfg.top_groups < cfg.num_groups:
        group_gap = (gs[:, cfg.top_groups - 1] - gs[:, cfg.top_groups]).min()
    else:
        group_gap = np.inf
    flat = np.sort(batch.scaled_scores.reshape(len(batch), -1), axis=1)[:, ::-1]
    k = cfg.top_experts
    expert_gap = (flat[:, k - 1] - flat[:, k]).min() if flat.shape[1] > k else np.inf
    return min(group_gap, expert_gap)


def _aux_total(tokens, gating, cfg) -> float:
    stats = accumulate_stats(route(tokens, gating, cfg), cfg)
    return group_wise_loss(stats, cfg.group_widths, cfg.alpha_group) + intra_group_loss(
        stats, cfg.alpha_expert
    )


def _fd_grad(fun, arr, h=1e-4):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = fun()
        flat[i] = keep - h
        lo = fun()
        flat[i] = keep
        out[i] = (hi - lo) / (2 * h)
    return g


def _max_rel_err(pairs):
    scale = max(np.abs(f).max() for _, f in pairs)
    if scale == 0:
        return None
    worst = 0.0
    for a, f in pairs:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-3 * scale)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst


def test_gradient_fd_suite():
    need = 20
    done_loss = 0
    done_layer = 0
    for seed in range(200):
        if done_loss >= need and done_layer >= need:
            break
        rng = np.random.default_rng(seed)
        cfg = _tiny_config(rng)
        tokens = rng.standard_normal((5, cfg.model_dim))

        if done_loss < need:
            gating = GatingParameters.init_random(cfg, rng, dtype=np.float64)
            if _routing_margins(tokens, gating, cfg) >= 1e-2:
                grads = loss_gradients(tokens, gating, cfg)
                pairs = [
                    (
                        grads.group_embeddings,
                        _fd_grad(lambda: _aux_total(tokens, gating, cfg), gating.group_embeddings),
                    ),
                    (
                        grads.expert_embeddings,
                        _fd_grad(lambda: _aux_total(tokens, gating, cfg), gating.expert_embeddings),
                    ),
                ]
                err = _max_rel_err(pairs)
                if err is not None:
                    assert err < 1e-4, f"loss gradient mismatch {err:.2e} at seed {seed}"
                    done_loss += 1

        if done_layer < need:
            layer = GroupedExpertLayer.init_random(cfg, rng, dtype=np.float64)
            if _routing_margins(tokens, layer.gating, cfg) >= 1e-2:
                upstream = rng.standard_normal(tokens.shape)

                def scalar():
                    batch = route(tokens, layer.gating, cfg)
                    return float((upstream * combine_outputs(tokens, layer, batch.final_scores)).sum())

                grads = layer_gradients(tokens, layer, upstream)
                params = [layer.gating.group_embeddings, layer.gating.expert_embeddings]
                analytic = [grads.group_embeddings, grads.expert_embeddings]
                for g, row in enumerate(layer.experts):
                    for i, expert in enumerate(row):
                        params += [expert.up_proj, expert.down_proj]
                        analytic += [grads.experts[g][i].up_proj, grads.experts[g][i].down_proj]
                for k, expert in enumerate(layer.shared_experts):
                    params += [expert.up_proj, expert.down_proj]
                    analytic += [grads.shared_experts[k].up_proj, grads.shared_experts[k].down_proj]
                pairs = [(a, _fd_grad(scalar, p)) for a, p in zip(analytic, params)]
                err = _max_rel_err(pairs)
                if err is not None:
                    assert err < 1e-4, f"layer gradient mismatch {err:.2e} at seed {seed}"
                    done_layer += 1

    assert done_loss >= need and done_layer >= need, (done_loss, done_layer)


def test_closed_form_uniform_losses():
    for scale in ("1B", "3B", "14B"):
        cfg = preset(scale)
        n_g, n_e = cfg.num_groups, cfg.experts_per_group
        stats = RoutingBatchStats(
            token_count=1,
            group_freq=np.ones(n_g),
            group_prob=np.full(n_g, 1.0 / n_g),
            expert_freq=np.ones((n_g, n_e)),
            expert_prob=np.full((n_g, n_e), 1.0 / (n_e * (1.0 + cfg.epsilon))),
        )
        lg = group_wise_loss(stats, cfg.group_widths, cfg.alpha_group)
        expected = cfg.alpha_group * sum(cfg.group_widths) / (n_g * cfg.max_width)
        assert abs(lg - expected) < 1e-9
        le = intra_group_loss(stats, cfg.alpha_expert)
        assert abs(le - cfg.alpha_expert * n_g) < 1e-9
    cfg3 = preset("3B")
    assert abs(sum(cfg3.group_widths) / (8 * cfg3.max_width) - 0.65) < 1e-12


def test_allocation_balance_and_naive_ratio():
    for scale in ("1B", "3B", "14B"):
        cfg = preset(scale)
        for d in (2, 4, 8):
            if cfg.experts_per_group % d == 0:
                assert parameter_spread(allocate(cfg, d), cfg) == 0, (scale, d)

    for scale, hi, lo in (("3B", 1280, 384), ("14B", 1536, 640)):
        cfg = preset(scale)
        totals = per_gpu_params(naive_group_allocation(cfg, 8), cfg)
        # ratio must equal the widest/narrowest width ratio, integer-exactly
        assert totals.max() * lo == totals.min() * hi, scale


@pytest.fixture(scope="module")
def paired_runs():
    cfg = ModelConfig(
        **{
            **preset("1B").to_dict(),
            "alpha_group": ALPHA_GROUP,
            "alpha_expert": ALPHA_EXPERT,
        }
    )
    layer0 = GroupedExpertLayer.init_random(
        cfg, np.random.default_rng(LAYER_SEED), dtype=np.float32
    )
    stream = TokenStream(cfg.model_dim, "rank", 1_000_000, seed=STREAM_SEED, **STREAM_SHAPE)
    runs = {}
    for name, (use_g, use_e) in {
        "plain": (False, False),
        "expert_loss": (False, True),
        "both_losses": (True, True),
    }.items():
        runs[name] = train_toy(
            layer0, stream, use_group_loss=use_g, use_expert_loss=use_e, **TRAIN
        )
    return cfg, stream, runs


def test_trained_balance_flattens_gpu_load(paired_runs):
    cfg, _, runs = paired_runs
    plan = allocate(cfg, 4)
    load_stream = TokenStream(cfg.model_dim, "rank", 1_000_000, seed=STREAM_SEED, **STREAM_SHAPE)
    balanced = run_load_sim(runs["expert_loss"].layer.gating, load_stream, plan, cfg)
    control = run_load_sim(runs["plain"].layer.gating, load_stream, plan, cfg)
    assert balanced.token_count == 1_000_000
    assert (balanced.per_group_std <= 0.02).all(), balanced.per_group_std
    assert balanced.per_group_std.mean() < control.per_group_std.mean()


def test_group_loss_shifts_traffic_cheaper(paired_runs):
    cfg, stream, runs = paired_runs
    with_g = runs["both_losses"]
    without_g = runs["expert_loss"]
    assert width_weighted_traffic(
        with_g.final_histogram.counts, cfg
    ) < width_weighted_traffic(without_g.final_histogram.counts, cfg)

    probe, _ = stream.materialize(limit=4096)
    act = {
        name: count_parameters(
            runs[name].layer, route(probe, runs[name].layer.gating, cfg)
        ).expected_activated
        for name in ("both_losses", "expert_loss")
    }
    assert act["both_losses"] < act["expert_loss"], act


def test_difficulty_sorts_traffic_by_width(paired_runs):
    cfg, _, runs = paired_runs
    probe_stream = TokenStream(cfg.model_dim, "rank", 200_000, seed=STREAM_SEED, **STREAM_SHAPE)
    report = difficulty_analysis(runs["both_losses"].layer.gating, probe_stream, cfg)
    assert report.empty_buckets == []
    rho = spearmanr(np.asarray(cfg.group_widths), report.ratios[0]).statistic
    assert rho < 0, f"easiest-bucket share should fall with width, rho={rho:.3f}"
    widths = report.mean_selected_width
    assert widths[-1] > widths[0], f"hardest {widths[-1]:.1f} <= easiest {widths[0]:.1f}"


def test_rerun_and_replay_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    base = [
        "train",
        "--preset",
        "1B",
        "--seed",
        "9",
        "--steps",
        "3",
        "--tokens",
        "3000",
        "--out",
        str(a),
    ]
    assert main(base) == EXIT_OK
    assert main(["train", "--manifest", str(a / "manifest.json"), "--out", str(b)]) == EXIT_OK
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()

    cfg = preset("1B")
    gating = GatingParameters.init_random(cfg, np.random.default_rng(9), dtype=np.float32)
    stream = TokenStream(cfg.model_dim, "rank", 20_000, seed=9)
    plan = allocate(cfg, 4)
    trace_path = tmp_path / "trace.jsonl"
    with open(trace_path, "w", encoding="utf-8") as fh:
        direct = run_load_sim(gating, stream, plan, cfg, workers=1, trace_fh=fh)
    with open(trace_path, "r", encoding="utf-8") as fh:
        replayed = replay_load_sim(fh, plan, cfg)
    assert np.array_equal(replayed.counts, direct.counts)
    assert np.array_equal(replayed.fractions, direct.fractions)
    assert np.array_equal(replayed.per_group_std, direct.per_group_std)
    assert np.array_equal(replayed.param_weighted_load, direct.param_weighted_load)
