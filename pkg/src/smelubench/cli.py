"""Command line front end.

Subcommands map one-to-one onto the harness studies:

  gen         write a synthetic example stream as TSV
  train-pair  train one duplicate pair, report holdout metrics
  sweep       activation grid vs relu baseline, paired per rep
  landscape   strict-minima study (1-d presets) or a raw surface dump
  ensemble    budget-matched ensemble vs single model

Exit codes: 0 success, 2 configuration problems (bad file, bad key, bad
activation string), 3 training divergence. All outputs are deterministic
functions of the config, so rerunning a command reproduces its files byte
for byte.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import activations as act
from . import data, harness, metrics
from .config import ConfigError, ExperimentConfig, load_config


def _load(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        exp = replace(exp, run=replace(exp.run, base_seed=args.seed))
    return exp


def _parse_spec(text: str) -> act.ActivationSpec:
    try:
        return act.parse_activation(text)
    except act.ActivationError as e:
        raise ConfigError(f"bad activation {text!r}: {e}") from e


def cmd_gen(args) -> int:
    exp = _load(args)
    seed = harness.derive_int(exp.run.base_seed, 0, args.rep)
    stream = data.generate_packed(exp.synth_config(seed))
    data.write_stream(args.out, data.packed_to_examples(stream))
    print(f"wrote {len(stream)} examples to {args.out} "
          f"(bayes logloss {data.bayes_logloss(stream.probs):.6f})")
    return 0


def cmd_train_pair(args) -> int:
    exp = _load(args)
    model_cfg = exp.model
    if args.activation:
        model_cfg = replace(model_cfg, activation=_parse_spec(args.activation))
    pair = harness.train_pair(exp, model_cfg, args.rep)
    row = metrics.pair_row_dict(pair.activation, pair.params, str(pair.rep),
                                metrics.ProgressiveMetrics(pair.logloss, pair.auc,
                                                           pair.pqauc, 0),
                                pair.pd)
    print(metrics.pair_row_csv(row))
    if args.out:
        with open(args.out, "w") as fh:
            for key in sorted(harness.run_meta(exp)):
                fh.write(f"# {key} = {harness.run_meta(exp)[key]}\n")
            fh.write(",".join(metrics.PAIR_CSV_COLUMNS) + "\n")
            fh.write(metrics.pair_row_csv(row) + "\n")
    return 0


def cmd_sweep(args) -> int:
    exp = _load(args)
    rows = harness.beta_sweep(exp, jobs=args.jobs)
    harness.write_csv(args.out, harness.SWEEP_COLUMNS, rows, harness.run_meta(exp))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_landscape(args) -> int:
    exp = _load(args)
    preset = harness.LANDSCAPE_PRESETS[exp.landscape.preset]
    if args.activation:
        spec = _parse_spec(args.activation)
        grid, losses = harness.landscape_scan(exp, spec, seed_idx=args.scan_seed)
        cols = ("x", "loss") if preset.n_inputs == 1 else ("x1", "x2", "loss")
        rows = [(*map(float, grid[i]), float(losses[i])) for i in range(len(losses))]
        meta = dict(harness.run_meta(exp), preset=preset.name,
                    activation=act.format_activation(spec), scan_seed=args.scan_seed)
        harness.write_csv(args.out, cols, rows, meta)
        print(f"wrote {len(rows)} surface points to {args.out}")
        return 0
    if preset.n_inputs != 1:
        raise ConfigError(
            f"preset {preset.name!r} dumps a surface; pass --activation")
    specs = harness.sweep_specs(exp)
    medians = harness.landscape_study(exp, specs)
    rows = sorted(medians.items())
    meta = dict(harness.run_meta(exp), preset=preset.name,
                points=exp.landscape.points, seeds=exp.landscape.seeds)
    harness.write_csv(args.out, ("activation", "median_strict_minima"), rows, meta)
    for name, med in rows:
        print(f"{name}: median strict minima {med}")
    return 0


def cmd_ensemble(args) -> int:
    exp = _load(args)
    design = harness.design_ensemble(exp)
    reps = harness.ensemble_study(exp)
    rows = harness.ensemble_rows(design, reps)
    meta = dict(harness.run_meta(exp), components=design.components,
                component_embed_dim=design.component_cfg.embed_dim,
                component_hidden=",".join(map(str, design.component_cfg.hidden)))
    harness.write_csv(args.out, harness.ENSEMBLE_COLUMNS, rows, meta)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smelubench",
        description="reproducibility benchmark for smooth activation families")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="config file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the base seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output CSV/TSV path")

    p = sub.add_parser("gen", help="write a synthetic stream as TSV")
    common(p)
    p.add_argument("--rep", type=int, default=0, help="rep whose stream to write")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-pair", help="train one duplicate pair")
    common(p, needs_out=False)
    p.add_argument("--out", help="optional one-row CSV")
    p.add_argument("--activation", help="override the model activation")
    p.add_argument("--rep", type=int, default=0)
    p.set_defaults(func=cmd_train_pair)

    p = sub.add_parser("sweep", help="activation grid vs relu baseline")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="loss landscape study or surface dump")
    common(p)
    p.add_argument("--activation", help="dump one raw surface instead of the study")
    p.add_argument("--scan-seed", type=int, default=0,
                   help="which frozen net to dump (surface mode)")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("ensemble", help="budget-matched ensemble vs single")
    common(p)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except harness.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
