"""Tests for the synthetic stream generator, text IO, and windowed shuffle."""

import math

import numpy as np
import pytest

import smelubench.data as data
from smelubench.data import (
    DataError,
    DataFormatError,
    GroundTruth,
    SparseExample,
    SynthConfig,
    bayes_logloss,
    examples_to_packed,
    generate,
    generate_packed,
    packed_to_examples,
    read_stream,
    shuffle_indices,
    shuffle_window,
    stable_sigmoid,
    write_stream,
)

SMALL = SynthConfig(tables=3, vocab=50, informative=2, queries=400, items_per_query=3, seed=7)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def test_generate_packed_shapes_and_ranges():
    s = generate_packed(SMALL)
    n = SMALL.n_examples
    assert s.ids.shape == (n, 3)
    assert s.labels.shape == (n,)
    assert s.qids.shape == (n,)
    assert s.probs.shape == (n,)
    assert s.ids.min() >= 0 and s.ids.max() < SMALL.vocab
    assert set(np.unique(s.labels)) <= {0, 1}
    assert np.all((s.probs > 0.0) & (s.probs < 1.0))
    assert np.array_equal(np.unique(s.qids), np.arange(SMALL.queries))
    # each query id appears exactly items_per_query times, contiguously
    assert np.array_equal(s.qids, np.repeat(np.arange(SMALL.queries), SMALL.items_per_query))


def test_generate_packed_deterministic():
    a = generate_packed(SMALL)
    b = generate_packed(SMALL)
    assert np.array_equal(a.ids, b.ids)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.probs, b.probs)


def test_seed_changes_stream():
    a = generate_packed(SMALL)
    b = generate_packed(SynthConfig(**{**SMALL.__dict__, "seed": 8}))
    assert not np.array_equal(a.labels, b.labels)


def test_positive_rate_within_three_sigma():
    cfg = SynthConfig(tables=4, vocab=200, informative=4, queries=25_000, items_per_query=4,
                      positive_rate=0.3, interaction_scale=1.0, seed=11)
    s = generate_packed(cfg)
    n = len(s)
    rate = s.labels.mean()
    # two noise sources: Monte Carlo bias calibration and label sampling
    sigma = math.sqrt(cfg.positive_rate * (1 - cfg.positive_rate)) * math.sqrt(1 / n + 1 / 400_000)
    assert abs(rate - cfg.positive_rate) < 3.0 * sigma, f"rate {rate} vs target {cfg.positive_rate}"


def test_labels_match_probs_statistically():
    s = generate_packed(SynthConfig(tables=2, vocab=20, informative=2, queries=20_000,
                                    items_per_query=2, seed=3))
    # binned calibration: among examples with prob in [a,b), label mean is close to prob mean
    bins = np.digitize(s.probs, np.quantile(s.probs, [0.25, 0.5, 0.75]))
    for b in range(4):
        m = bins == b
        assert m.sum() > 1000
        diff = abs(s.labels[m].mean() - s.probs[m].mean())
        assert diff < 4.0 * math.sqrt(0.25 / m.sum())


def test_deterministic_labels_with_saturated_truth():
    # huge main effects push sigmoid to exactly 0.0 / 1.0 in float64
    main = np.array([[4000.0, -4000.0]])
    gt = GroundTruth(main=main, drift_dir=np.zeros((1, 2)),
                     latent=np.zeros((1, 2, 1)), bias=0.0, interaction_coeff=0.0)
    ids = np.array([[0], [1], [0], [1]])
    p = stable_sigmoid(gt.logits(ids))
    assert np.array_equal(p, np.array([1.0, 0.0, 1.0, 0.0]))


def test_drift_changes_late_stream_only_statistically():
    base = SynthConfig(tables=2, vocab=40, informative=2, queries=4000, items_per_query=2,
                       drift=0.0, seed=5)
    drifted = SynthConfig(**{**base.__dict__, "drift": 0.05})
    a = generate_packed(base)
    b = generate_packed(drifted)
    # same ids and truth; drift only perturbs logits
    assert np.array_equal(a.ids, b.ids)
    assert not np.allclose(a.probs, b.probs)
    # the walk starts near zero, so early probabilities move less than late ones
    n = len(a)
    early = np.abs(a.probs[: n // 10] - b.probs[: n // 10]).mean()
    late = np.abs(a.probs[-n // 10 :] - b.probs[-n // 10 :]).mean()
    assert late > early


def test_interaction_scale_adds_logit_variance():
    base = SynthConfig(tables=4, vocab=100, informative=4, queries=5000, items_per_query=2,
                       interaction_scale=0.0, seed=9)
    inter = SynthConfig(**{**base.__dict__, "interaction_scale": 2.0})
    ga = generate_packed(base)
    gb = generate_packed(inter)
    la = np.log(ga.probs / (1 - ga.probs))
    lb = np.log(gb.probs / (1 - gb.probs))
    # interaction_scale=2 adds roughly 4 to the logit variance
    assert lb.var() > la.var() + 2.5


def test_interaction_coeff_normalization():
    # coefficient scales the summed pair dot products to roughly unit std per
    # unit of interaction_scale: var(sum of P dots of q-dim N(0,1)) = P * q
    cfg = SynthConfig(tables=5, vocab=300, informative=5, latent_dim=4,
                      interaction_scale=1.5, queries=1, items_per_query=1, seed=2)
    ss = np.random.SeedSequence(0)
    r1, r2 = (np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(2))
    gt = GroundTruth.random(cfg, r1, r2)
    ids = r2.integers(0, cfg.vocab, size=(200_000, 5))
    zsum = np.zeros((200_000, 4))
    sq = np.zeros(200_000)
    for t in range(5):
        z = gt.latent[t][ids[:, t]]
        zsum += z
        sq += np.einsum("ij,ij->i", z, z)
    pair = 0.5 * (np.einsum("ij,ij->i", zsum, zsum) - sq)
    contrib = gt.interaction_coeff * pair
    assert abs(contrib.std() - 1.5) < 0.15


def test_config_validation():
    with pytest.raises(DataError):
        SynthConfig(tables=2, informative=3)
    with pytest.raises(DataError):
        SynthConfig(positive_rate=0.0)
    with pytest.raises(DataError):
        SynthConfig(drift=-0.1)
    with pytest.raises(DataError):
        SynthConfig(queries=0)


def test_bayes_logloss_hand_value():
    # all probs 0.5: entropy ln 2; certain probs: 0
    assert abs(bayes_logloss([0.5, 0.5]) - math.log(2)) < 1e-12
    assert bayes_logloss([1.0, 0.0]) < 1e-12


# ---------------------------------------------------------------------------
# example objects and text IO
# ---------------------------------------------------------------------------


def test_packed_examples_roundtrip():
    s = generate_packed(SMALL)
    back = examples_to_packed(packed_to_examples(s), n_tables=SMALL.tables)
    assert np.array_equal(back.ids, s.ids)
    assert np.array_equal(back.labels, s.labels)
    assert np.array_equal(back.qids, s.qids)


def test_examples_to_packed_rejects_bad_rows():
    ok = SparseExample(qid=0, label=1, features=((0, 3, 1.0), (1, 4, 1.0)))
    missing = SparseExample(qid=1, label=0, features=((0, 3, 1.0),))
    dup = SparseExample(qid=2, label=0, features=((0, 3, 1.0), (0, 5, 1.0)))
    weighted = SparseExample(qid=3, label=0, features=((0, 3, 2.0), (1, 1, 1.0)))
    with pytest.raises(DataError, match="missing"):
        examples_to_packed([ok, missing], n_tables=2)
    with pytest.raises(DataError, match="multiple"):
        examples_to_packed([dup], n_tables=2)
    with pytest.raises(DataError, match="value 1.0"):
        examples_to_packed([weighted], n_tables=2)


def test_sparse_example_label_validation():
    with pytest.raises(DataError):
        SparseExample(qid=0, label=2, features=())


def test_file_roundtrip(tmp_path):
    path = tmp_path / "stream.tsv"
    examples = [
        SparseExample(qid=3, label=1, features=((0, 17, 1.0),)),
        SparseExample(qid=4, label=0, features=((0, 2, 0.5), (1, 9, 1.0), (1, 10, 0.25))),
    ]
    assert write_stream(path, examples) == 2
    text = path.read_text()
    assert text.splitlines()[0] == "3\t1\t0:17:1.0"
    back = list(read_stream(path))
    assert back == examples


def test_file_roundtrip_generated(tmp_path):
    path = tmp_path / "gen.tsv"
    cfg = SynthConfig(tables=2, vocab=10, informative=2, queries=50, items_per_query=2, seed=1)
    write_stream(path, generate(cfg))
    back = examples_to_packed(read_stream(path), n_tables=2)
    orig = generate_packed(cfg)
    assert np.array_equal(back.ids, orig.ids)
    assert np.array_equal(back.labels, orig.labels)


@pytest.mark.parametrize(
    "line,col_hint",
    [
        ("3\t1", None),                       # missing features field
        ("x\t1\t0:1:1.0", 1),                # bad qid
        ("3\t7\t0:1:1.0", 3),                # label out of range
        ("3\tz\t0:1:1.0", 3),                # non-integer label
        ("3\t1\t0:1", None),                  # incomplete triple
        ("3\t1\t0:1:abc", None),              # bad value
        ("3\t1\ta:1:1.0", None),              # bad table
        ("3\t1\t0:1:inf", None),              # non-finite value
        ("3\t1\t-1:1:1.0", None),             # negative table
        ("3\t1\t", None),                     # empty feature list
    ],
)
def test_read_stream_malformed(tmp_path, line, col_hint):
    path = tmp_path / "bad.tsv"
    path.write_text("0\t0\t0:0:1.0\n" + line + "\n")
    with pytest.raises(DataFormatError) as exc:
        list(read_stream(path))
    assert exc.value.line == 2
    if col_hint is not None:
        assert exc.value.col == col_hint
    assert "line 2" in str(exc.value)


def test_read_stream_error_column_points_at_feature():
    # second feature starts after "9<TAB>0<TAB>0:1:1.0," -> column 5 + 8 = 13
    import tempfile, os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.tsv")
        with open(path, "w") as fh:
            fh.write("9\t0\t0:1:1.0,1:x:1.0\n")
        with pytest.raises(DataFormatError) as exc:
            list(read_stream(path))
        assert exc.value.line == 1
        assert exc.value.col == 15  # the id token inside the second triple


# ---------------------------------------------------------------------------
# windowed shuffle
# ---------------------------------------------------------------------------


def test_shuffle_window_one_is_identity():
    items = list(range(57))
    assert list(shuffle_window(iter(items), 1, seed=0)) == items
    assert np.array_equal(shuffle_indices(57, 1, seed=0), np.arange(57))


def test_shuffle_is_permutation():
    for w in (1, 2, 7, 64, 200):
        out = shuffle_indices(200, w, seed=3)
        assert np.array_equal(np.sort(out), np.arange(200))


def test_shuffle_deterministic_and_seed_sensitive():
    a = shuffle_indices(500, 32, seed=4)
    b = shuffle_indices(500, 32, seed=4)
    c = shuffle_indices(500, 32, seed=5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("n,w", [(100, 1), (100, 7), (100, 100), (100, 350), (5, 2), (0, 3), (1, 1)])
def test_shuffle_iterator_matches_index_form(n, w):
    it = list(shuffle_window(iter(range(n)), w, seed=12))
    idx = shuffle_indices(n, w, seed=12)
    assert it == list(idx)


def test_shuffle_never_emits_unseen_items():
    # emitted k-th item must have arrived: out[k] <= k + w - 1
    for w in (1, 5, 40):
        out = shuffle_indices(300, w, seed=9)
        k = np.arange(300)
        assert np.all(out <= k + w - 1)


def test_full_window_shuffle_is_uniform():
    # n=3, w>=n: all 6 permutations occur with roughly equal frequency
    from collections import Counter

    counts = Counter(tuple(shuffle_indices(3, 3, seed=s)) for s in range(3000))
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / 3000 - 1 / 6) < 0.05


def test_scalar_and_vector_rng_draws_agree():
    # the iterator draws rng.random() one at a time, the index form draws a
    # block; PCG64 must produce the same stream either way
    r1 = np.random.Generator(np.random.PCG64(77))
    r2 = np.random.Generator(np.random.PCG64(77))
    block = r2.random(100)
    singles = np.array([r1.random() for _ in range(100)])
    assert np.array_equal(block, singles)


def test_shuffle_window_rejects_bad_window():
    with pytest.raises(DataError):
        list(shuffle_window(iter([1]), 0, seed=0))
    with pytest.raises(DataError):
        shuffle_indices(5, 0, seed=0)
