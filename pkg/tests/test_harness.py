"""Paired-training harness: seed policies, splits, studies."""

import dataclasses

import numpy as np
import pytest

from smelubench import activations as act
from smelubench import harness, metrics
from smelubench.config import (DataConfig, EnsembleConfig, ExperimentConfig,
                               LandscapeConfig, NondetConfig, OptimConfig,
                               RunConfig, SweepConfig)
from smelubench.data import generate_packed
from smelubench.net import ModelConfig


def tiny_exp(**kw) -> ExperimentConfig:
    base = dict(
        model=ModelConfig(tables=3, vocab=60, embed_dim=4, hidden=(16, 8)),
        data=DataConfig(queries=1200, informative=3),
        run=RunConfig(base_seed=5, reps=2),
        sweep=SweepConfig(betas=(0.5, 1.0)),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_seed_derivation_is_stable_and_purpose_separated():
    a = harness.derive_int(3, 0, 1)
    assert a == harness.derive_int(3, 0, 1)
    assert a != harness.derive_int(3, 1, 1)
    assert a != harness.derive_int(3, 0, 2)
    assert a != harness.derive_int(4, 0, 1)


def test_param_count_matches_model_arrays():
    for norm in ("layer", "none", "weight"):
        cfg = ModelConfig(tables=2, vocab=9, embed_dim=3, hidden=(6, 4), norm=norm)
        from smelubench.net import Model

        model = Model(cfg, rng=0)
        total = sum(t.size for t in model.emb)
        total += sum(arr.size for _, arr, _ in model.dense_params())
        assert harness.param_count(cfg) == total


def test_holdout_split_whole_queries():
    exp = tiny_exp(run=RunConfig(base_seed=5, reps=1, holdout_fraction=0.1))
    n_train = harness.split_train_holdout(exp, generate_packed(exp.synth_config(0)))
    assert n_train == (1200 - 120) * 4
    exp2 = tiny_exp(run=RunConfig(base_seed=5, reps=1, holdout_fraction=0.9999))
    with pytest.raises(ValueError, match="holdout"):
        harness.split_train_holdout(exp2, generate_packed(exp2.synth_config(0)))


def test_twin_zero_when_all_seeds_shared():
    exp = tiny_exp(nondet=NondetConfig(distinct_shuffle_seeds=False, shared_init=True))
    pair = harness.train_pair(exp, exp.model, rep=0)
    assert pair.pd == 0.0


def test_window_one_is_pure_online_and_full_shuffle_diverges():
    # window=1 leaves the canonical order untouched, so even distinct
    # shuffle seeds produce identical twins; a full-stream window does not
    online = tiny_exp(nondet=NondetConfig(shuffle_window=1))
    full = tiny_exp(nondet=NondetConfig(shuffle_window=10**9))
    online_pds, full_pds = [], []
    for rep in range(10):
        stream = generate_packed(online.synth_config(harness.derive_int(5, 0, rep)))
        online_pds.append(harness.train_pair(online, online.model, rep, stream=stream).pd)
        full_pds.append(harness.train_pair(full, full.model, rep, stream=stream).pd)
    assert all(p == 0.0 for p in online_pds)
    assert all(p > 0.0 for p in full_pds)
    assert np.mean(full_pds) >= np.mean(online_pds)


def test_distinct_init_seeds_give_nonzero_pd():
    exp = tiny_exp(nondet=NondetConfig(shuffle_window=1, distinct_shuffle_seeds=False,
                                       shared_init=False))
    pair = harness.train_pair(exp, exp.model, rep=0)
    assert pair.pd > 0.0


def test_shared_prefix_limits_where_orders_differ():
    exp = tiny_exp(nondet=NondetConfig(shuffle_window=10**9, shared_prefix=3000))
    a = harness._training_order(4320, exp, rep=0, model_idx=0)
    b = harness._training_order(4320, exp, rep=0, model_idx=1)
    assert np.array_equal(a[:3000], np.arange(3000))
    assert np.array_equal(b[:3000], np.arange(3000))
    assert not np.array_equal(a[3000:], b[3000:])
    assert np.array_equal(np.sort(a), np.arange(4320))
    # a prefix covering the whole stream makes the twins exact duplicates
    # even with distinct shuffle seeds and interleaving switched on
    whole = tiny_exp(nondet=NondetConfig(shuffle_window=10**9, shared_prefix=10**7,
                                         interleave_window=64))
    assert harness.train_pair(whole, whole.model, rep=0).pd == 0.0


def test_interleave_window_adds_divergence_on_its_own():
    exp = tiny_exp(nondet=NondetConfig(shuffle_window=1, distinct_shuffle_seeds=False,
                                       interleave_window=64))
    pair = harness.train_pair(exp, exp.model, rep=0)
    assert pair.pd > 0.0


def test_divergence_raises_with_step():
    exp = tiny_exp(optim=OptimConfig(kind="sgd", lr_embed=1e150, lr_dense=1e150),
                   model=ModelConfig(tables=3, vocab=60, embed_dim=4, hidden=(16, 8),
                                     norm="none", act_clip=1e300, logit_clip=1e300))
    with pytest.raises(harness.DivergenceError) as ei:
        harness.train_pair(exp, exp.model, rep=0)
    assert ei.value.step >= 0


def test_pair_metrics_match_direct_recomputation():
    exp = tiny_exp()
    stream = generate_packed(exp.synth_config(harness.derive_int(5, 0, 0)))
    pair = harness.train_pair(exp, exp.model, rep=0, stream=stream, keep_runs=True)
    run0, run1 = pair.runs
    n_train = harness.split_train_holdout(exp, stream)
    labels = stream.labels[n_train:]
    assert pair.pd == metrics.relative_pd(run0.hold_probs, run1.hold_probs)
    assert pair.logloss == pytest.approx(
        0.5 * (metrics.log_loss(run0.hold_probs, labels)
               + metrics.log_loss(run1.hold_probs, labels)), abs=0)
    assert pair.progressive.count == n_train


def test_engine_and_reference_paths_agree_in_harness():
    # gsmelu with a trainable parameter vector forces the python path; the
    # same spec with trainable off runs the compiled kernel
    exp = tiny_exp(data=DataConfig(queries=150, informative=3))
    fixed = dataclasses.replace(
        exp.model, activation=act.gsmelu(0.8, 1.2, 0.05, 0.9, -0.1))
    trail = dataclasses.replace(
        exp.model,
        activation=dataclasses.replace(fixed.activation, trainable=True))
    stream = generate_packed(exp.synth_config(0))
    fast = harness.train_pair(exp, fixed, rep=0, stream=stream)
    slow_exp = tiny_exp(data=DataConfig(queries=150, informative=3),
                        optim=OptimConfig(lr_activation=0.0))
    slow = harness.train_pair(slow_exp, trail, rep=0, stream=stream)
    assert fast.pd == pytest.approx(slow.pd, rel=1e-7)
    assert fast.logloss == pytest.approx(slow.logloss, rel=1e-7)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_specs_grid():
    exp = tiny_exp(sweep=SweepConfig(family="smelu", betas=(0.5, 2.0)))
    names = [act.format_activation(s) for s in harness.sweep_specs(exp)]
    assert names == ["relu", "smelu:beta=0.5", "smelu:beta=2.0"]
    exp2 = tiny_exp(sweep=SweepConfig(family="swish", betas=(0.5, 2.0), include_relu=False))
    specs = harness.sweep_specs(exp2)
    assert [s.kind for s in specs] == ["swish", "swish"]
    # grid value is the smoothing width: reciprocal of the sharpness beta
    assert [s.beta for s in specs] == [2.0, 0.5]


def test_sweep_rows_have_zero_deltas_for_relu():
    exp = tiny_exp(data=DataConfig(queries=400, informative=3),
                   sweep=SweepConfig(betas=(1.0,)))
    rows = harness.beta_sweep(exp)
    assert len(rows) == 2 * exp.run.reps
    for row in rows:
        if row.activation == "relu":
            assert row.d_logloss_pct == 0.0
            assert row.d_pqauc_pct == 0.0
        else:
            base = next(r for r in rows if r.rep == row.rep and r.activation == "relu")
            expect = 100.0 * (row.logloss - base.logloss) / base.logloss
            assert row.d_logloss_pct == pytest.approx(expect, abs=0)
        assert row.pd_pct >= 0.0


def test_sweep_rows_sorted_and_csv_shape():
    exp = tiny_exp(data=DataConfig(queries=400, informative=3))
    rows = harness.beta_sweep(exp)
    keys = [(r.rep, r.activation) for r in rows]
    assert keys == sorted(keys)
    for row in rows:
        assert len(row.csv().split(",")) == len(harness.SWEEP_COLUMNS)


# ---------------------------------------------------------------------------
# landscape
# ---------------------------------------------------------------------------


def test_strict_minima_count_hand_cases():
    assert harness.strict_minima_count(np.array([3.0, 1.0, 2.0])) == 1
    assert harness.strict_minima_count(np.array([1.0, 2.0, 3.0])) == 0
    assert harness.strict_minima_count(np.array([2.0, 1.0, 1.0, 2.0])) == 0
    assert harness.strict_minima_count(np.array([5.0, 1.0, 4.0, 0.0, 9.0, 2.0, 3.0])) == 3


def test_landscape_scan_shapes_and_determinism():
    exp = tiny_exp(landscape=LandscapeConfig(preset="wn", points=301, seeds=2,
                                             hidden=(12, 8)))
    grid, losses = harness.landscape_scan(exp, act.smelu(1.0), seed_idx=1)
    assert grid.shape == (301, 1) and losses.shape == (301,)
    assert np.isfinite(losses).all()
    grid2, losses2 = harness.landscape_scan(exp, act.smelu(1.0), seed_idx=1)
    assert np.array_equal(losses, losses2)
    _, other = harness.landscape_scan(exp, act.smelu(1.0), seed_idx=0)
    assert not np.array_equal(losses, other)


def test_landscape_identity_activation_is_unimodal():
    # a width-1 chain of identity units is monotone in the scanned input
    # (clipping preserves monotonicity), so the logistic loss has at most
    # one strict interior minimum
    exp = tiny_exp(landscape=LandscapeConfig(preset="wn", points=501, seeds=4,
                                             hidden=(1,)))
    for s in range(4):
        _, losses = harness.landscape_scan(exp, act.identity(), seed_idx=s)
        assert harness.strict_minima_count(losses) <= 1


def test_landscape_reg2d_regression_surface():
    exp = tiny_exp(landscape=LandscapeConfig(preset="reg2d", points=41, seeds=1,
                                             hidden=(12, 8)))
    grid, losses = harness.landscape_scan(exp, act.smelu(2.0))
    assert grid.shape == (41 * 41, 2) and losses.shape == (41 * 41,)
    assert np.isfinite(losses).all()
    assert losses.min() >= 0.0


def test_landscape_study_rejects_2d_preset():
    exp = tiny_exp(landscape=LandscapeConfig(preset="reg2d", points=41, seeds=1,
                                             hidden=(12, 8)))
    with pytest.raises(ValueError, match="1-d"):
        harness.landscape_study(exp, [act.relu()])


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def test_ensemble_budget_within_tolerance():
    for k in (2, 3, 5):
        exp = tiny_exp(ensemble=EnsembleConfig(components=k))
        d = harness.design_ensemble(exp)
        assert abs(d.ensemble_params - d.single_params) <= 0.02 * d.single_params
        assert d.components == k
        assert d.component_cfg.embed_dim <= exp.model.embed_dim


def test_ensemble_budget_infeasible_raises():
    exp = tiny_exp(model=ModelConfig(tables=1, vocab=2, embed_dim=1, hidden=(1,)),
                   data=DataConfig(queries=1200, informative=1),
                   ensemble=EnsembleConfig(components=40))
    with pytest.raises(ValueError, match="budget"):
        harness.design_ensemble(exp)


def test_ensemble_twin_zero_with_shared_seeds():
    exp = tiny_exp(nondet=NondetConfig(distinct_shuffle_seeds=False),
                   data=DataConfig(queries=600, informative=3),
                   run=RunConfig(base_seed=5, reps=1))
    reps = harness.ensemble_study(exp)
    assert reps[0].single.pd == 0.0
    assert reps[0].ensemble_pd == 0.0


def test_ensemble_rows_shape():
    exp = tiny_exp(data=DataConfig(queries=600, informative=3),
                   run=RunConfig(base_seed=5, reps=2))
    design = harness.design_ensemble(exp)
    rows = harness.ensemble_rows(design, harness.ensemble_study(exp))
    assert len(rows) == 4
    kinds = [r[0] for r in rows]
    assert kinds == ["ensemble", "single", "ensemble", "single"]
    for row in rows:
        assert len(row) == len(harness.ENSEMBLE_COLUMNS)


# ---------------------------------------------------------------------------
# ground-truth recoverability
# ---------------------------------------------------------------------------


def test_well_tuned_model_approaches_bayes_floor():
    # drift-free additive truth over a small vocabulary: a relu net should
    # land within 5% of the generator's own log-loss floor
    from smelubench.data import bayes_logloss

    exp = ExperimentConfig(
        model=ModelConfig(tables=3, vocab=40, embed_dim=8, hidden=(32, 16)),
        data=DataConfig(queries=30_000, informative=3, drift=0.0,
                        interaction_scale=0.0, main_scale=1.0),
        optim=OptimConfig(lr_embed=0.1, lr_dense=0.02),
        run=RunConfig(base_seed=1, reps=1),
    )
    stream = generate_packed(exp.synth_config(harness.derive_int(1, 0, 0)))
    n_train = harness.split_train_holdout(exp, stream)
    run = harness.run_model(exp, exp.model, stream, n_train, rep=0, model_idx=0)
    floor = bayes_logloss(stream.probs[n_train:])
    model_ll = metrics.log_loss(run.hold_probs, stream.labels[n_train:])
    assert model_ll <= 1.05 * floor
