"""Sparse example streams: synthetic generator, text IO, windowed shuffling.

Examples are sparse categorical rows: a query id, a binary engagement label,
and one (table, id, value) feature per categorical table. The synthetic
generator hides a ground-truth logistic model over the informative tables --
per-id main effects, optional low-rank pairwise interactions between tables
(capacity pressure on embedding width), and an optional slow temporal drift
implemented as a per-query scalar random walk along a fixed random direction
per table. Every random draw derives from the config's master seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


class DataFormatError(DataError):
    """Parse failure; carries 1-based line and column of the offending token."""

    def __init__(self, line: int, col: int, msg: str):
        super().__init__(f"line {line}, col {col}: {msg}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class SparseExample:
    """features holds (table index, feature id, value) triples."""

    qid: int
    label: int
    features: tuple

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class SynthConfig:
    tables: int = 5
    vocab: int = 2000
    informative: int = 5
    queries: int = 25_000
    items_per_query: int = 4
    positive_rate: float = 0.3
    drift: float = 0.0
    main_scale: float = 1.0
    latent_dim: int = 4
    interaction_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.tables < 1 or self.informative < 1 or self.informative > self.tables:
            raise DataError(f"need 1 <= informative <= tables, got {self.informative}/{self.tables}")
        if self.vocab < 1:
            raise DataError("vocab must be >= 1")
        if self.queries < 1 or self.items_per_query < 1:
            raise DataError("queries and items_per_query must be >= 1")
        if not 0.0 < self.positive_rate < 1.0:
            raise DataError(f"positive_rate must be in (0,1), got {self.positive_rate}")
        if self.drift < 0.0 or self.interaction_scale < 0.0 or self.main_scale < 0.0:
            raise DataError("scales must be >= 0")
        if self.latent_dim < 1:
            raise DataError("latent_dim must be >= 1")

    @property
    def n_examples(self) -> int:
        return self.queries * self.items_per_query


@dataclass
class PackedStream:
    """Struct-of-arrays stream: exactly one id per table, value 1.0."""

    ids: np.ndarray     # (n, tables) int64
    labels: np.ndarray  # (n,) int64 in {0,1}
    qids: np.ndarray    # (n,) int64
    probs: np.ndarray   # (n,) float64 true engagement probability (nan for file data)

    def __len__(self):
        return self.ids.shape[0]

    def take(self, idx) -> "PackedStream":
        return PackedStream(self.ids[idx], self.labels[idx], self.qids[idx], self.probs[idx])


def stable_sigmoid(logit):
    """sigmoid without overflow for arbitrarily large |logit|."""
    logit = np.asarray(logit, dtype=np.float64)
    out = np.empty_like(logit)
    pos = logit >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-logit[pos]))
    e = np.exp(logit[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class GroundTruth:
    """Hidden logistic model: bias + sum of per-id main effects
    + interaction_coeff * sum over table pairs of latent dot products
    + drift_state * sum of per-id drift directions."""

    def __init__(self, main, drift_dir, latent, bias, interaction_coeff):
        self.main = main                  # (informative, vocab)
        self.drift_dir = drift_dir        # (informative, vocab)
        self.latent = latent              # (informative, vocab, q)
        self.bias = float(bias)
        self.interaction_coeff = float(interaction_coeff)

    @property
    def informative(self):
        return self.main.shape[0]

    def logits(self, ids, drift_state=None):
        """ids: (n, tables); only the first `informative` columns matter.
        drift_state: per-example scalar walk value, or None for 0."""
        n = ids.shape[0]
        k = self.informative
        total = np.full(n, self.bias)
        for t in range(k):
            total += self.main[t][ids[:, t]]
        if drift_state is not None:
            d = np.zeros(n)
            for t in range(k):
                d += self.drift_dir[t][ids[:, t]]
            total += drift_state * d
        if self.interaction_coeff != 0.0:
            q = self.latent.shape[2]
            zsum = np.zeros((n, q))
            sq = np.zeros(n)
            for t in range(k):
                z = self.latent[t][ids[:, t]]
                zsum += z
                sq += np.einsum("ij,ij->i", z, z)
            pair = 0.5 * (np.einsum("ij,ij->i", zsum, zsum) - sq)
            total += self.interaction_coeff * pair
        return total

    @staticmethod
    def random(cfg: SynthConfig, truth_rng, calib_rng) -> "GroundTruth":
        k, v, q = cfg.informative, cfg.vocab, cfg.latent_dim
        main = cfg.main_scale * truth_rng.normal(size=(k, v))
        drift_dir = truth_rng.normal(size=(k, v))
        latent = truth_rng.normal(size=(k, v, q))
        n_pairs = k * (k - 1) // 2
        if cfg.interaction_scale > 0.0 and n_pairs > 0:
            coeff = cfg.interaction_scale / math.sqrt(n_pairs * q)
        else:
            coeff = 0.0
        gt = GroundTruth(main, drift_dir, latent, 0.0, coeff)
        gt.bias = _calibrate_bias(gt, cfg, calib_rng)
        return gt


def _calibrate_bias(gt: GroundTruth, cfg: SynthConfig, rng, n_mc: int = 400_000) -> float:
    """Bisection for the intercept hitting the configured base rate at drift 0."""
    ids = rng.integers(0, cfg.vocab, size=(n_mc, cfg.informative))
    raw = gt.logits(ids)  # bias is 0 here
    lo, hi = -40.0, 40.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if float(np.mean(stable_sigmoid(raw + mid))) < cfg.positive_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_packed(cfg: SynthConfig) -> PackedStream:
    """Materialize the full stream as arrays; deterministic in cfg.seed."""
    ss = np.random.SeedSequence(cfg.seed)
    truth_rng, id_rng, label_rng, drift_rng, calib_rng = (
        np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(5)
    )
    gt = GroundTruth.random(cfg, truth_rng, calib_rng)
    n = cfg.n_examples
    ids = id_rng.integers(0, cfg.vocab, size=(n, cfg.tables)).astype(np.int64)
    qids = np.repeat(np.arange(cfg.queries, dtype=np.int64), cfg.items_per_query)
    if cfg.drift > 0.0:
        walk = cfg.drift * np.cumsum(drift_rng.normal(size=cfg.queries))
        drift_state = np.repeat(walk, cfg.items_per_query)
    else:
        drift_state = None
    probs = stable_sigmoid(gt.logits(ids, drift_state))
    labels = (label_rng.random(n) < probs).astype(np.int64)
    return PackedStream(ids=ids, labels=labels, qids=qids, probs=probs)


def generate(cfg: SynthConfig):
    """Stream of SparseExample; thin wrapper over the packed form."""
    return packed_to_examples(generate_packed(cfg))


def bayes_logloss(probs) -> float:
    """Mean binary entropy of the true probabilities: the log-loss floor."""
    p = np.clip(np.asarray(probs, dtype=np.float64), 1e-15, 1.0 - 1e-15)
    return float(np.mean(-p * np.log(p) - (1.0 - p) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# packed <-> example objects
# ---------------------------------------------------------------------------


def packed_to_examples(stream: PackedStream):
    for i in range(len(stream)):
        feats = tuple((t, int(stream.ids[i, t]), 1.0) for t in range(stream.ids.shape[1]))
        yield SparseExample(qid=int(stream.qids[i]), label=int(stream.labels[i]), features=feats)


def examples_to_packed(examples, n_tables: int) -> PackedStream:
    """Requires exactly one id per table with value 1.0 per example."""
    rows = []
    labels = []
    qids = []
    for ex in examples:
        row = [-1] * n_tables
        for t, fid, value in ex.features:
            if not 0 <= t < n_tables:
                raise DataError(f"table index {t} out of range 0..{n_tables - 1}")
            if row[t] != -1:
                raise DataError(f"example qid={ex.qid} has multiple ids for table {t}")
            if value != 1.0:
                raise DataError(f"packed streams need value 1.0, got {value} (table {t})")
            row[t] = fid
        if any(r == -1 for r in row):
            raise DataError(f"example qid={ex.qid} is missing an id for some table")
        rows.append(row)
        labels.append(ex.label)
        qids.append(ex.qid)
    n = len(rows)
    return PackedStream(
        ids=np.asarray(rows, dtype=np.int64).reshape(n, n_tables),
        labels=np.asarray(labels, dtype=np.int64),
        qids=np.asarray(qids, dtype=np.int64),
        probs=np.full(n, np.nan),
    )


# ---------------------------------------------------------------------------
# text format: qid<TAB>label<TAB>table:id:value,table:id:value,...
# ---------------------------------------------------------------------------


def _fmt_value(v: float) -> str:
    return repr(float(v))


def write_stream(path, examples):
    count = 0
    with open(path, "w") as fh:
        for ex in examples:
            feats = ",".join(f"{t}:{fid}:{_fmt_value(value)}" for t, fid, value in ex.features)
            fh.write(f"{ex.qid}\t{ex.label}\t{feats}\n")
            count += 1
    return count


def _parse_int(token: str, lineno: int, col: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise DataFormatError(lineno, col, f"bad {what} {token!r}") from None


def read_stream(path):
    """Yield SparseExample per line; malformed input raises DataFormatError."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(lineno, 1, f"expected 3 tab-separated fields, got {len(parts)}")
            qid = _parse_int(parts[0], lineno, 1, "qid")
            label_col = len(parts[0]) + 2
            label = _parse_int(parts[1], lineno, label_col, "label")
            if label not in (0, 1):
                raise DataFormatError(lineno, label_col, f"label must be 0 or 1, got {label}")
            feat_col = label_col + len(parts[1]) + 1
            feats = []
            col = feat_col
            if not parts[2]:
                raise DataFormatError(lineno, feat_col, "empty feature list")
            for item in parts[2].split(","):
                triple = item.split(":")
                if len(triple) != 3:
                    raise DataFormatError(lineno, col, f"feature {item!r} is not table:id:value")
                table = _parse_int(triple[0], lineno, col, "table index")
                fid = _parse_int(triple[1], lineno, col + len(triple[0]) + 1, "feature id")
                try:
                    value = float(triple[2])
                except ValueError:
                    raise DataFormatError(
                        lineno, col + len(triple[0]) + len(triple[1]) + 2, f"bad value {triple[2]!r}"
                    ) from None
                if not math.isfinite(value):
                    raise DataFormatError(lineno, col, f"non-finite value {triple[2]!r}")
                if table < 0 or fid < 0:
                    raise DataFormatError(lineno, col, f"negative table or id in {item!r}")
                feats.append((table, fid, value))
                col += len(item) + 1
            yield SparseExample(qid=qid, label=label, features=tuple(feats))


# ---------------------------------------------------------------------------
# windowed shuffle
# ---------------------------------------------------------------------------


def shuffle_window(stream, window_size: int, seed: int):
    """Reservoir-style windowed shuffle: emit a uniformly random buffer slot,
    refill from the stream. window_size=1 is the identity; window >= stream
    length is a full uniform shuffle."""
    if window_size < 1:
        raise DataError(f"window_size must be >= 1, got {window_size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    buf = []
    for item in stream:
        buf.append(item)
        if len(buf) >= window_size:
            j = int(rng.random() * len(buf))
            buf[j], buf[-1] = buf[-1], buf[j]
            yield buf.pop()
    while buf:
        j = int(rng.random() * len(buf))
        buf[j], buf[-1] = buf[-1], buf[j]
        yield buf.pop()


def _window_permutation_py(u, window: int) -> np.ndarray:
    n = u.shape[0]
    w = min(window, n) if n else 0
    out = np.empty(n, dtype=np.int64)
    buf = np.empty(max(w, 1), dtype=np.int64)
    fill = 0
    k = 0
    for item in range(n):
        buf[fill] = item
        fill += 1
        if fill >= w:
            j = int(u[k] * fill)
            out[k] = buf[j]
            buf[j] = buf[fill - 1]
            fill -= 1
            k += 1
    while fill > 0:
        j = int(u[k] * fill)
        out[k] = buf[j]
        buf[j] = buf[fill - 1]
        fill -= 1
        k += 1
    return out


def shuffle_indices(n: int, window_size: int, seed: int) -> np.ndarray:
    """Permutation equal to shuffle_window(range(n), window_size, seed)."""
    if window_size < 1:
        raise DataError(f"window_size must be >= 1, got {window_size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random(n)
    try:
        from .engine import window_permutation

        return window_permutation(u, window_size)
    except ImportError:  # pragma: no cover - numba is a hard dependency
        return _window_permutation_py(u, window_size)
