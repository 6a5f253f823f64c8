"""Command-line entry point.

Subcommands: generate, reorder, evolve, evaluate, ablate, zeroshot, sweep,
audit. All take --config (JSON); --seed, --out and --variant override the
file. Exit code 0 on success, 2 with a phase-tagged message on failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .backbone import load_params
from .container import load_container
from .datagen import export_csv, gen_graph, gen_series
from .harness import ExperimentConfig, PipelineError, load_config


def _config_from_args(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed, dataset=replace(config.dataset, seed=args.seed))
    if getattr(args, "variant", None) is not None:
        config = replace(config, variant=args.variant)
    return config


def _out_dir(args) -> Path:
    out = Path(args.out or "evost_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=float)


def cmd_generate(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    graph = gen_graph(config.dataset)
    np.savetxt(out / "adjacency.csv", graph.adjacency, delimiter=",", fmt="%.1f")
    for gid, series in gen_series(config.dataset, graph):
        export_csv(series, out / f"{gid}.csv", layout="wide")
    _write_json(config.to_dict(), out / "config.json")
    print(f"wrote {config.dataset.domain_count + config.dataset.unrelated_count} domains to {out}")


def cmd_reorder(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    report = harness.ordering_report(config)
    _write_json(report, out / "ordering.json")
    print(json.dumps(report, indent=2, default=float))


def cmd_evolve(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    result = harness.run_full(config)
    paths = harness.write_artifacts(result, out)
    print(f"evolved {len(result.report['absorbed'])} absorptions, "
          f"{len(result.report['isolated'])} isolated; report at {paths['report']}")


def cmd_evaluate(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    prepared = harness.prepare_domains(config)
    checkpoint = Path(args.checkpoint)
    if checkpoint.name.startswith("container"):
        params = load_container(checkpoint).params
    else:
        params = load_params(checkpoint)
    source_eval, temporal_eval = harness._evaluate_container(config, prepared, lambda gid: params)
    report = {
        "checkpoint": str(checkpoint),
        "source_eval": source_eval,
        "temporal_eval": temporal_eval,
        "aggregate": {
            "source": harness._aggregate(source_eval),
            "temporal": harness._aggregate(temporal_eval),
        },
    }
    _write_json(report, out / "report.json")
    print(json.dumps(report["aggregate"], indent=2))


def cmd_ablate(args):
    config = _config_from_args(args)
    if config.variant == "full":
        raise PipelineError("harness", "ablate needs --variant from REO/Ela/PE/H2E/IL/DER")
    out = _out_dir(args)
    result = harness.run_ablation(config)
    paths = harness.write_artifacts(result, out)
    agg = result.report["aggregate"]
    print(f"{config.variant}: source mae {agg['source']['mae']}, "
          f"temporal mae {agg['temporal']['mae']}; report at {paths['report']}")


def cmd_zeroshot(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    report = harness.run_zero_shot(config)
    _write_json(report, out / "report.json")
    evolved = report["evolved"]["aggregate"]["mae"]
    baseline = report["baseline"]["aggregate"]["mae"]
    print(f"zero-shot holdout mae: evolved {evolved:.4f} vs single-domain {baseline:.4f}")


def _parse_grid(text, fallback):
    if text is None:
        return fallback
    return tuple(float(v) for v in text.split(",") if v.strip())


def cmd_sweep(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    rows = harness.sweep(
        config,
        p0_grid=_parse_grid(args.p0_grid, harness.P0_GRID),
        lambda0_grid=_parse_grid(args.lambda0_grid, harness.LAMBDA0_GRID),
        kappa_grid=_parse_grid(args.kappa_grid, harness.KAPPA_GRID),
    )
    harness.write_sweep_csv(rows, out / "sweep.csv")
    failures = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} cells ({failures} failed) -> {out / 'sweep.csv'}")


def cmd_audit(args):
    config = _config_from_args(args)
    out = _out_dir(args)
    report = harness.audit(config)
    report.to_json(out / "entropy.json")
    print(json.dumps(report.to_dict(), indent=2, default=float))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evost", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, grids=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--variant", choices=harness.VARIANTS, help="override config variant")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="container or params JSON")
        if grids:
            p.add_argument("--p0-grid", dest="p0_grid")
            p.add_argument("--lambda0-grid", dest="lambda0_grid")
            p.add_argument("--kappa-grid", dest="kappa_grid")

    for name, fn, kwargs in (
        ("generate", cmd_generate, {}),
        ("reorder", cmd_reorder, {}),
        ("evolve", cmd_evolve, {}),
        ("evaluate", cmd_evaluate, {"checkpoint": True}),
        ("ablate", cmd_ablate, {}),
        ("zeroshot", cmd_zeroshot, {}),
        ("sweep", cmd_sweep, {"grids": True}),
        ("audit", cmd_audit, {}),
    ):
        p = sub.add_parser(name)
        common(p, **kwargs)
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PipelineError as err:
        print(f"[{err.phase}] {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"[harness] {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
