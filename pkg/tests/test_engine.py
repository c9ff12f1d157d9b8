"""Fast path vs reference path: same parameters, same predictions."""

import numpy as np
import pytest

import smelubench.activations as act
import smelubench.engine as engine
from smelubench.net import Model, ModelConfig
from smelubench.optim import Optimizer, train_example

RNG = lambda s: np.random.Generator(np.random.PCG64(s))

STEPS = 300
HOLDOUT = 50


def make_pair(activation, norm, kind, identity_input=True, seed=23):
    cfg = ModelConfig(tables=3, vocab=40, embed_dim=4, hidden=(16, 8),
                      activation=activation, norm=norm,
                      identity_input_activation=identity_input)
    model_ref = Model(cfg, rng=seed)
    model_fast = Model(cfg, rng=seed)
    lrs = dict(lr_embed=0.08, lr_dense=0.04, lr_activation=0.01)
    return (model_ref, Optimizer(model_ref, kind=kind, **lrs),
            model_fast, Optimizer(model_fast, kind=kind, **lrs), cfg)


def stream(cfg, n, seed=91):
    rng = RNG(seed)
    ids = rng.integers(0, cfg.vocab, size=(n, cfg.tables))
    # sprinkle out-of-vocabulary ids to exercise the bucket row
    oov = rng.random(n) < 0.05
    ids[oov, 0] = cfg.vocab + 3
    labels = rng.integers(0, 2, size=n).astype(np.float64)
    return ids, labels


def rel_gap(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


CASES = [
    ("smelu-layer-adagrad_embed", act.smelu(1.0), "layer", "adagrad_embed", True),
    ("relu-layer-adagrad_embed", act.relu(), "layer", "adagrad_embed", True),
    ("smelu-none-sgd", act.smelu(0.5), "none", "sgd", True),
    ("smelu-weight-sgd", act.smelu(1.0), "weight", "sgd", True),
    ("smelu-weight-adagrad", act.smelu(1.0), "weight", "adagrad", True),
    ("gsmelu-layer-adagrad", act.gsmelu(0.7, 1.3, -0.05, 1.0, -0.02), "layer", "adagrad", True),
    ("swish-layer-adagrad_embed", act.swish(1.0), "layer", "adagrad_embed", True),
    ("gelu-layer-adagrad_embed", act.gelu(1.0), "layer", "adagrad_embed", True),
    ("gelu-exact-layer-sgd", act.gelu(1.0, exact=True), "layer", "sgd", True),
    ("softplus-none-adagrad", act.softplus(2.0), "none", "adagrad", True),
    ("rescu-layer-adagrad_embed",
     act.rescu(knots=((-1.0, 0.0), (0.5, 0.4), (2.0, 1.0)), anchor=(-1.0, -0.1)),
     "layer", "adagrad_embed", True),
    ("smelu-layer-input-act", act.smelu(1.0), "layer", "adagrad_embed", False),
]


@pytest.mark.parametrize("name,activation,norm,kind,identity_input",
                         CASES, ids=[c[0] for c in CASES])
def test_engine_matches_reference(name, activation, norm, kind, identity_input):
    model_ref, opt_ref, model_fast, opt_fast, cfg = make_pair(
        activation, norm, kind, identity_input)
    ids, labels = stream(cfg, STEPS + HOLDOUT)
    train_ids, hold_ids = ids[:STEPS], ids[STEPS:]
    train_labels = labels[:STEPS]

    probs_ref = np.array([
        train_example(model_ref, opt_ref, train_ids[i], train_labels[i])
        for i in range(STEPS)
    ])

    packed = engine.pack(model_fast, opt_fast)
    probs_fast, diverged = engine.train_stream(packed, train_ids, train_labels)
    assert diverged == -1
    assert rel_gap(probs_ref, probs_fast) < 1e-9

    hold_ref = model_ref.predict_ids(hold_ids)
    hold_fast = engine.predict_stream(packed, hold_ids)
    assert rel_gap(hold_ref, hold_fast) < 1e-9

    engine.unpack(packed, model_fast, opt_fast)
    for t in range(cfg.tables):
        assert rel_gap(model_ref.emb[t], model_fast.emb[t]) < 1e-9
    for (n1, a1, _), (n2, a2, _) in zip(model_ref.dense_params(), model_fast.dense_params()):
        assert n1 == n2
        assert rel_gap(a1, a2) < 1e-9, n1
    if opt_ref.G_emb is not None:
        for t in range(cfg.tables):
            assert rel_gap(opt_ref.G_emb[t], opt_fast.G_emb[t]) < 1e-9
    if opt_ref.G_dense is not None:
        for key in opt_ref.G_dense:
            assert rel_gap(opt_ref.G_dense[key], opt_fast.G_dense[key]) < 1e-9


def test_engine_run_is_deterministic():
    model, opt = None, None
    results = []
    for _ in range(2):
        m_ref, o_ref, m, o, cfg = make_pair(act.smelu(1.0), "layer", "adagrad_embed")
        ids, labels = stream(cfg, 200)
        packed = engine.pack(m, o)
        probs, diverged = engine.train_stream(packed, ids, labels[:200])
        results.append((probs.copy(), packed.params.copy()))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


def test_engine_reports_divergence_step():
    # act_clip pushed out of the way so the overflow reaches the logit
    cfg = ModelConfig(tables=2, vocab=10, embed_dim=3, hidden=(8,),
                      activation=act.identity(), norm="none", act_clip=1e300)
    model = Model(cfg, rng=1)
    opt = Optimizer(model, kind="sgd", lr_dense=1e155, lr_embed=1e155)
    ids = np.zeros((20, 2), dtype=np.int64)
    labels = np.ones(20)
    packed = engine.pack(model, opt)
    probs, diverged = engine.train_stream(packed, ids, labels)
    assert 0 < diverged < 20
    assert np.isfinite(probs[:diverged]).all()
    assert np.isnan(probs[diverged:]).all()


def test_engine_rejects_trainable_activation():
    spec = act.gsmelu(1.0, 1.0, 0.0, 1.0, -0.01, trainable=True)
    cfg = ModelConfig(tables=2, vocab=5, embed_dim=2, hidden=(4,), activation=spec)
    model = Model(cfg, rng=0)
    opt = Optimizer(model)
    assert not engine.supports(model)
    with pytest.raises(engine.EngineError):
        engine.pack(model, opt)


def test_window_permutation_matches_python_fallback():
    from smelubench.data import _window_permutation_py

    rng = RNG(6)
    for n, w in [(0, 3), (1, 1), (50, 1), (50, 7), (50, 50), (50, 99)]:
        u = rng.random(n)
        assert np.array_equal(engine.window_permutation(u, w), _window_permutation_py(u, w))
