"""Experiment harness: duplicate-model training and the benchmark studies.

The core operation trains two models that differ only in the enabled
nondeterminism sources (by default: the order examples arrive in) and
measures how far apart their holdout predictions land (relative prediction
difference) next to ordinary accuracy metrics. On top of that:

  beta_sweep          activation grid vs the relu baseline, paired per rep
  landscape_scan      loss surface of frozen random nets over input scans
  landscape_study     strict-minima counts per activation over many seeds
  ensemble_study      budget-matched ensembles vs a single wide model

Seeds derive from run.base_seed through named SeedSequence spawn keys, so
any piece can be recomputed independently and parallel execution cannot
change results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import activations as act
from . import engine, metrics
from .config import ExperimentConfig
from .data import PackedStream, generate_packed, shuffle_indices
from .net import Model, ModelConfig
from .optim import Optimizer, train_example

# spawn-key purposes for seed derivation
_DATA, _INIT, _SHUFFLE, _INTERLEAVE, _LANDSCAPE = 0, 1, 2, 3, 4


class DivergenceError(RuntimeError):
    """Training produced a non-finite logit; .step is the 0-based example."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step} ({detail})")
        self.step = step


def derive_seq(base_seed: int, purpose: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(base_seed), spawn_key=(purpose, *map(int, key)))


def derive_rng(base_seed: int, purpose: int, *key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seq(base_seed, purpose, *key)))


def derive_int(base_seed: int, purpose: int, *key) -> int:
    return int(derive_seq(base_seed, purpose, *key).generate_state(1, dtype=np.uint64)[0])


def param_count(cfg: ModelConfig) -> int:
    n = cfg.tables * (cfg.vocab + 1) * cfg.embed_dim
    dims = cfg.dims
    for i in range(len(dims) - 1):
        n += dims[i] * dims[i + 1] + dims[i + 1]
        if cfg.norm == "weight":
            n += dims[i + 1]
    return n


# ---------------------------------------------------------------------------
# single-model training (fast path when possible, reference otherwise)
# ---------------------------------------------------------------------------


@dataclass
class ModelRun:
    order: np.ndarray          # canonical index of the example seen at each step
    train_probs: np.ndarray    # pre-update probability per training step
    hold_probs: np.ndarray
    progressive: metrics.ProgressiveMetrics


def _training_order(n_train: int, exp: ExperimentConfig, rep: int, model_idx: int) -> np.ndarray:
    nd = exp.nondet
    base = exp.run.base_seed
    shuffle_key = (rep, model_idx) if nd.distinct_shuffle_seeds else (rep,)
    p = min(nd.shared_prefix, n_train)
    order = shuffle_indices(n_train - p, nd.shuffle_window,
                            derive_int(base, _SHUFFLE, *shuffle_key))
    if nd.interleave_window > 1:
        second = shuffle_indices(n_train - p, nd.interleave_window,
                                 derive_int(base, _INTERLEAVE, rep, model_idx))
        order = order[second]
    if p == 0:
        return order
    # every model consumes the first p examples in raw stream order; the
    # seeded reorderings only apply past the shared prefix
    return np.concatenate([np.arange(p, dtype=order.dtype), p + order])


def run_model(exp: ExperimentConfig, model_cfg: ModelConfig, stream: PackedStream,
              n_train: int, rep: int, model_idx: int,
              init_key: tuple | None = None) -> ModelRun:
    """Train one model online over its own ordering of the first n_train
    examples; evaluate on the remaining holdout."""
    base = exp.run.base_seed
    if init_key is None:
        init_key = (rep,) if exp.nondet.shared_init else (rep, model_idx)
    init_rng = derive_rng(base, _INIT, *init_key)
    model = Model(model_cfg, rng=init_rng)
    opt = Optimizer(model, kind=exp.optim.kind, lr_embed=exp.optim.lr_embed,
                    lr_dense=exp.optim.lr_dense, lr_activation=exp.optim.lr_activation)

    order = _training_order(n_train, exp, rep, model_idx)
    ids = stream.ids[:n_train][order]
    labels = stream.labels[:n_train][order].astype(np.float64)
    qids = stream.qids[:n_train][order]
    hold_ids = stream.ids[n_train:]

    detail = f"rep {rep} model {model_idx} {act.format_activation(model_cfg.activation)}"
    if engine.supports(model):
        packed = engine.pack(model, opt)
        train_probs, step = engine.train_stream(packed, ids, labels)
        if step != -1:
            raise DivergenceError(step, detail)
        hold_probs = engine.predict_stream(packed, hold_ids)
    else:
        train_probs = np.empty(n_train)
        for i in range(n_train):
            train_probs[i] = train_example(model, opt, ids[i], labels[i])
            if not math.isfinite(train_probs[i]):
                raise DivergenceError(i, detail)
        hold_probs = model.predict_ids(hold_ids)
        if not np.isfinite(hold_probs).all():
            raise DivergenceError(n_train, detail)

    acc = metrics.ProgressiveAccumulator()
    acc.update_batch(train_probs, labels, qids)
    return ModelRun(order=order, train_probs=train_probs, hold_probs=hold_probs,
                    progressive=acc.finalize())


# ---------------------------------------------------------------------------
# paired training
# ---------------------------------------------------------------------------


@dataclass
class PairResult:
    activation: str
    rep: int
    params: int
    pd: float          # mean relative prediction difference on holdout
    logloss: float     # pair-mean holdout log loss
    auc: float         # pair-mean holdout AUC loss
    pqauc: float       # pair-mean holdout per-query AUC loss
    progressive: metrics.ProgressiveMetrics
    runs: tuple = ()


def split_train_holdout(exp: ExperimentConfig, stream: PackedStream) -> int:
    """Holdout is the trailing fraction, rounded to whole queries."""
    queries = exp.data.queries
    hold_q = max(1, int(round(exp.run.holdout_fraction * queries)))
    if hold_q >= queries:
        raise ValueError("holdout fraction leaves no training queries")
    return (queries - hold_q) * exp.data.items_per_query


def _pair_mean_progressive(a: metrics.ProgressiveMetrics,
                           b: metrics.ProgressiveMetrics) -> metrics.ProgressiveMetrics:
    return metrics.ProgressiveMetrics(
        logloss=0.5 * (a.logloss + b.logloss),
        auc=0.5 * (a.auc + b.auc),
        pqauc=0.5 * (a.pqauc + b.pqauc),
        count=a.count,
    )


def train_pair(exp: ExperimentConfig, model_cfg: ModelConfig, rep: int,
               stream: PackedStream | None = None, keep_runs: bool = False) -> PairResult:
    if stream is None:
        stream = generate_packed(exp.synth_config(derive_int(exp.run.base_seed, _DATA, rep)))
    n_train = split_train_holdout(exp, stream)
    run0 = run_model(exp, model_cfg, stream, n_train, rep, 0)
    run1 = run_model(exp, model_cfg, stream, n_train, rep, 1)

    hold_labels = stream.labels[n_train:]
    hold_qids = stream.qids[n_train:]
    pd = metrics.relative_pd(run0.hold_probs, run1.hold_probs)
    ll = 0.5 * (metrics.log_loss(run0.hold_probs, hold_labels)
                + metrics.log_loss(run1.hold_probs, hold_labels))
    auc = 0.5 * (metrics.auc_loss(run0.hold_probs, hold_labels)
                 + metrics.auc_loss(run1.hold_probs, hold_labels))
    pqauc = 0.5 * (metrics.pq_auc(run0.hold_probs, hold_labels, hold_qids)
                   + metrics.pq_auc(run1.hold_probs, hold_labels, hold_qids))
    return PairResult(
        activation=act.format_activation(model_cfg.activation),
        rep=rep,
        params=param_count(model_cfg),
        pd=pd, logloss=ll, auc=auc, pqauc=pqauc,
        progressive=_pair_mean_progressive(run0.progressive, run1.progressive),
        runs=(run0, run1) if keep_runs else (),
    )


# ---------------------------------------------------------------------------
# activation sweep (accuracy/reproducibility trade-off)
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("activation", "params", "rep", "logloss", "auc", "pqauc",
                 "pd_pct", "d_logloss_pct", "d_pqauc_pct")


def sweep_specs(exp: ExperimentConfig) -> list:
    """Activation grid. For the exponential-family kinds a grid value means
    the smoothing half-width, which is the reciprocal of their sharpness
    parameter: spec beta = 1 / width."""
    specs = []
    if exp.sweep.include_relu:
        specs.append(act.relu())
    family = exp.sweep.family
    for width in exp.sweep.betas:
        if family == "smelu":
            specs.append(act.smelu(width))
        elif family == "gsmelu":
            specs.append(act.gsmelu(width, width, 0.0, 1.0, -1e-3))
        else:
            specs.append(act.ActivationSpec(kind=family, beta=1.0 / width))
    return specs


@dataclass
class SweepRow:
    activation: str
    params: int
    rep: int
    logloss: float
    auc: float
    pqauc: float
    pd_pct: float
    d_logloss_pct: float
    d_pqauc_pct: float

    def csv(self) -> str:
        return ",".join([
            self.activation, str(self.params), str(self.rep),
            repr(self.logloss), repr(self.auc), repr(self.pqauc),
            repr(self.pd_pct), repr(self.d_logloss_pct), repr(self.d_pqauc_pct),
        ])


def sweep_task(exp: ExperimentConfig, spec: act.ActivationSpec, rep: int) -> PairResult:
    """One (activation, rep) cell; safe to run in any process."""
    model_cfg = replace(exp.model, activation=spec)
    stream = generate_packed(exp.synth_config(derive_int(exp.run.base_seed, _DATA, rep)))
    return train_pair(exp, model_cfg, rep, stream=stream)


def rep_pairs(exp: ExperimentConfig, rep: int) -> list:
    """All grid cells for one rep, sharing that rep's generated stream."""
    stream = generate_packed(exp.synth_config(derive_int(exp.run.base_seed, _DATA, rep)))
    return [train_pair(exp, replace(exp.model, activation=spec), rep, stream=stream)
            for spec in sweep_specs(exp)]


def sweep_rows_from_pairs(pairs: list) -> list:
    """PairResults -> rows with per-rep paired deltas against the relu row."""
    by_rep = {}
    for p in pairs:
        by_rep.setdefault(p.rep, []).append(p)
    rows = []
    for rep in sorted(by_rep):
        group = by_rep[rep]
        baseline = next((p for p in group if p.activation == "relu"), None)
        for p in sorted(group, key=lambda q: q.activation):
            if baseline is None:
                d_ll = float("nan")
                d_pq = float("nan")
            elif p is baseline:
                d_ll = 0.0
                d_pq = 0.0
            else:
                d_ll = 100.0 * (p.logloss - baseline.logloss) / baseline.logloss
                d_pq = 100.0 * (p.pqauc - baseline.pqauc) / baseline.pqauc
            rows.append(SweepRow(
                activation=p.activation, params=p.params, rep=rep,
                logloss=p.logloss, auc=p.auc, pqauc=p.pqauc,
                pd_pct=100.0 * p.pd, d_logloss_pct=d_ll, d_pqauc_pct=d_pq,
            ))
    return rows


def beta_sweep(exp: ExperimentConfig, jobs: int = 1) -> list:
    """Full grid x reps; returns SweepRows sorted (rep, activation).

    Parallel workers each take whole reps and re-derive every seed from the
    config, so the rows do not depend on the job count."""
    if jobs > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(jobs) as pool:
            groups = pool.starmap(rep_pairs, [(exp, r) for r in range(exp.run.reps)])
    else:
        groups = [rep_pairs(exp, r) for r in range(exp.run.reps)]
    return sweep_rows_from_pairs([p for g in groups for p in g])


# ---------------------------------------------------------------------------
# loss landscape scans over frozen nets
# ---------------------------------------------------------------------------


@dataclass
class LandscapePreset:
    name: str
    n_inputs: int
    norm: str
    weight_std: float
    bias_std: float
    mode: str          # "logistic" or "regression"
    act_clip: float    # activated values clipped into [-act_clip, act_clip]
    scan: float        # inputs scanned over [-scan, scan]
    p1: float = 0.1
    target: float = -2.0


LANDSCAPE_PRESETS = {
    # 1-d scans used for minima counting; the 2-d regression surface is for
    # plotting only
    "wn": LandscapePreset("wn", 1, "weight", 5.0, 0.5, "logistic", 6.0, 6.0),
    "ln": LandscapePreset("ln", 1, "layer", 1.0, 1.0, "logistic", 6.0, 6.0),
    "reg2d": LandscapePreset("reg2d", 2, "weight", 1.0, 1.0, "regression", 4.0, 6.0),
}


def _landscape_model(preset: LandscapePreset, hidden: tuple,
                     activation: act.ActivationSpec, seed_seq) -> Model:
    """Frozen random net whose input is the scanned vector. Under weight
    norm every unit's incoming vector is rescaled to the fixed constant
    v = 1, so the draw contributes only its direction and activations stay
    mostly inside the clip window."""
    cfg = ModelConfig(tables=1, vocab=1, embed_dim=preset.n_inputs, hidden=tuple(hidden),
                      activation=activation, norm=preset.norm,
                      act_clip=preset.act_clip, identity_input_activation=True)
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    model = Model(cfg, rng=rng)
    for layer in model.layers:
        draw = rng.normal(0.0, preset.weight_std, size=layer.W.shape)
        layer.b = rng.normal(0.0, preset.bias_std, size=layer.b.shape)
        if layer.v is not None:
            layer.W = draw / np.linalg.norm(draw, axis=0)
            layer.v = np.ones_like(layer.v)
        else:
            layer.W = draw
    return model


def _landscape_loss(preset: LandscapePreset, logits: np.ndarray) -> np.ndarray:
    if preset.mode == "logistic":
        # expected log loss when the true positive rate is p1
        return (preset.p1 * np.logaddexp(0.0, -logits)
                + (1.0 - preset.p1) * np.logaddexp(0.0, logits))
    return (logits - preset.target) ** 2


def landscape_scan(exp: ExperimentConfig, activation: act.ActivationSpec,
                   seed_idx: int = 0):
    """Loss over the input grid for one frozen net. Returns (grid_columns,
    loss) where grid_columns has one column per scanned input."""
    preset = LANDSCAPE_PRESETS[exp.landscape.preset]
    seq = derive_seq(exp.run.base_seed, _LANDSCAPE, seed_idx)
    model = _landscape_model(preset, exp.landscape.hidden, activation, seq)
    pts = exp.landscape.points
    axis = np.linspace(-preset.scan, preset.scan, pts)
    if preset.n_inputs == 1:
        grid = axis[:, None]
    else:
        g1, g2 = np.meshgrid(axis, axis, indexing="ij")
        grid = np.column_stack([g1.reshape(-1), g2.reshape(-1)])
    losses = np.empty(grid.shape[0])
    chunk = 65536
    for lo in range(0, grid.shape[0], chunk):
        part = grid[lo : lo + chunk]
        logits = model.forward_input(part).logit_raw
        losses[lo : lo + chunk] = _landscape_loss(preset, logits)
    return grid, losses


def strict_minima_count(losses: np.ndarray) -> int:
    """Interior points strictly below both neighbors (1-d scans only)."""
    inner = losses[1:-1]
    return int(np.sum((inner < losses[:-2]) & (inner < losses[2:])))


def landscape_study(exp: ExperimentConfig, activations: list) -> dict:
    """Median strict-minima count per activation over landscape.seeds nets."""
    preset = LANDSCAPE_PRESETS[exp.landscape.preset]
    if preset.n_inputs != 1:
        raise ValueError("minima counting is defined for 1-d presets")
    out = {}
    for spec in activations:
        counts = []
        for s in range(exp.landscape.seeds):
            _, losses = landscape_scan(exp, spec, seed_idx=s)
            counts.append(strict_minima_count(losses))
        out[act.format_activation(spec)] = float(np.median(counts))
    return out


# ---------------------------------------------------------------------------
# budget-matched ensembles
# ---------------------------------------------------------------------------


@dataclass
class EnsembleDesign:
    component_cfg: ModelConfig
    components: int
    single_params: int
    ensemble_params: int


def design_ensemble(exp: ExperimentConfig, k: int | None = None) -> EnsembleDesign:
    """Scale embed_dim and hidden widths so k components together spend the
    single model's parameter budget (within ensemble.budget_tolerance)."""
    k = exp.ensemble.components if k is None else k
    single = param_count(exp.model)

    def cfg_with(e: int, r: float) -> ModelConfig:
        return replace(exp.model, embed_dim=e,
                       hidden=tuple(max(1, int(round(r * h))) for h in exp.model.hidden))

    # embedding width sets the coarse budget; for each candidate width the
    # hidden widths are scaled to spend the remainder
    best, best_err = None, None
    for e in range(1, exp.model.embed_dim + 1):
        if k * param_count(cfg_with(e, 0.0)) > single * (1 + exp.ensemble.budget_tolerance):
            break
        # hidden scale may exceed 1 when narrow embeddings free up most of
        # the budget (the tables dominate the single model's count)
        lo, hi = 0.02, 1.0
        while k * param_count(cfg_with(e, hi)) <= single and hi < 16.0:
            lo, hi = hi, hi * 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if k * param_count(cfg_with(e, mid)) > single:
                hi = mid
            else:
                lo = mid
        cand = cfg_with(e, lo)
        err = abs(k * param_count(cand) - single)
        if best is None or err < best_err:
            best, best_err = cand, err
    if best is None:
        raise ValueError(
            f"cannot match budget: {k} minimal components already exceed "
            f"the single model's {single} parameters")
    # fine adjustment of +-1 on each hidden width, keeping proportions
    base = best
    improved = True
    while improved:
        improved = False
        for delta in (-1, 1):
            for i in range(len(best.hidden)):
                hidden = list(best.hidden)
                hidden[i] += delta
                if abs(hidden[i] - base.hidden[i]) > 1 or hidden[i] < 1:
                    continue
                cand = replace(best, hidden=tuple(hidden))
                err = abs(k * param_count(cand) - single)
                if err < best_err and k * param_count(cand) <= single * (1 + exp.ensemble.budget_tolerance):
                    best, best_err = cand, err
                    improved = True
    total = k * param_count(best)
    if abs(total - single) > exp.ensemble.budget_tolerance * single:
        raise ValueError(
            f"cannot match budget: k={k} components reach {total} vs single {single}")
    return EnsembleDesign(component_cfg=best, components=k,
                          single_params=single, ensemble_params=total)


@dataclass
class EnsembleRep:
    rep: int
    single: PairResult
    ensemble_pd: float
    ensemble_logloss: float
    ensemble_auc: float
    ensemble_pqauc: float


def run_ensemble_pair(exp: ExperimentConfig, design: EnsembleDesign, rep: int,
                      stream: PackedStream) -> tuple:
    """Two k-component ensembles; component i shares its init seed across the
    two ensembles, shuffle seeds differ per (ensemble, component)."""
    n_train = split_train_holdout(exp, stream)
    hold_probs = []
    for e in (0, 1):
        parts = []
        for comp in range(design.components):
            run = run_model(exp, design.component_cfg, stream, n_train,
                            rep=rep, model_idx=10 * (1 + e) + comp,
                            init_key=(rep, 100 + comp))
            parts.append(run.hold_probs)
        hold_probs.append(np.mean(parts, axis=0))
    return hold_probs[0], hold_probs[1]


def ensemble_study(exp: ExperimentConfig) -> list:
    design = design_ensemble(exp)
    out = []
    for rep in range(exp.run.reps):
        stream = generate_packed(exp.synth_config(derive_int(exp.run.base_seed, _DATA, rep)))
        single = train_pair(exp, exp.model, rep, stream=stream)
        ens0, ens1 = run_ensemble_pair(exp, design, rep, stream)
        n_train = split_train_holdout(exp, stream)
        labels = stream.labels[n_train:]
        qids = stream.qids[n_train:]
        out.append(EnsembleRep(
            rep=rep,
            single=single,
            ensemble_pd=metrics.relative_pd(ens0, ens1),
            ensemble_logloss=0.5 * (metrics.log_loss(ens0, labels)
                                    + metrics.log_loss(ens1, labels)),
            ensemble_auc=0.5 * (metrics.auc_loss(ens0, labels)
                                + metrics.auc_loss(ens1, labels)),
            ensemble_pqauc=0.5 * (metrics.pq_auc(ens0, labels, qids)
                                  + metrics.pq_auc(ens1, labels, qids)),
        ))
    return out


ENSEMBLE_COLUMNS = ("kind", "rep", "params", "logloss", "auc", "pqauc", "pd_pct")


def ensemble_rows(design: EnsembleDesign, reps: list) -> list:
    rows = []
    for r in reps:
        rows.append(("single", r.rep, design.single_params, r.single.logloss,
                     r.single.auc, r.single.pqauc, 100.0 * r.single.pd))
        rows.append(("ensemble", r.rep, design.ensemble_params, r.ensemble_logloss,
                     r.ensemble_auc, r.ensemble_pqauc, 100.0 * r.ensemble_pd))
    rows.sort(key=lambda t: (t[1], t[0]))
    return rows


# ---------------------------------------------------------------------------
# deterministic emission
# ---------------------------------------------------------------------------


def format_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, meta: dict):
    """CSV with `# key = value` header comments; byte-identical across reruns
    of the same config (floats via repr, meta sorted)."""
    with open(path, "w") as fh:
        for key in sorted(meta):
            fh.write(f"# {key} = {meta[key]}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            if hasattr(row, "csv"):
                fh.write(row.csv() + "\n")
            else:
                fh.write(",".join(format_cell(v) for v in row) + "\n")


def run_meta(exp: ExperimentConfig) -> dict:
    return {"config_sha256": exp.sha256(), "base_seed": exp.run.base_seed}
