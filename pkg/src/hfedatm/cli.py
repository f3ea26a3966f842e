"""Command-line entry point: ``run``, ``merge`` and ``inspect-gram``.

Exit codes: 0 success, 2 configuration error, 3 run aborted, 4 bad or
mismatched file, 5 linear system singular even after jitter.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from . import container, merge, orchestrator
from .client import GramStat, ambiguity_trials, load_grams, save_grams
from .linalg import SingularSystemError, symmetry_residual
from .model import ArchitectureMismatchError, load_checkpoint, save_checkpoint

logger = logging.getLogger("hfedatm")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_FORMAT, EXIT_SINGULAR = 0, 2, 3, 4, 5


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    try:
        cfg = cfgmod.load(args.config)
        cfg = cfgmod.apply_overrides(cfg, seed=args.seed, lam=args.lam, mode=args.mode, dp_eps=args.dp_eps)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))

    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_CONFIG, f"output_dir: cannot create {out}: {exc}")

    topo = cfgmod.topology(cfg)
    dcfg = cfgmod.data_config(cfg)
    summary = {"config": cfgmod.to_json(cfg), "final_accuracy": {}, "jitter_counts": {}, "overhead": {}}
    metrics, timings = out / "metrics.csv", out / "timings.csv"
    first = True
    for seed in cfg["seeds"]:
        fed = orchestrator.build_federation(dcfg, topo, seed)
        per_mode = {}
        for mode in cfg["modes"]:
            rc = cfgmod.run_configs(cfg, seed, mode)
            try:
                result = orchestrator.run(rc, topo, fed)
            except orchestrator.RunAborted as exc:
                return _fail(EXIT_ABORT, f"training phase, seed {seed}, mode {mode}: {exc}")
            except SingularSystemError as exc:
                return _fail(EXIT_SINGULAR, f"merge phase, seed {seed}, mode {mode}: {exc}")
            orchestrator.write_metrics_csv(result.records, metrics, append=not first,
                                           timings=cfg["output"]["timings_in_metrics"])
            orchestrator.write_timings_csv(result.records, timings, append=not first)
            first = False
            key = f"{mode}/seed{seed}"
            summary["final_accuracy"][key] = result.records[-1].target_acc
            summary["jitter_counts"][key] = sum(r.jitter_count for r in result.records)
            per_mode[mode] = orchestrator.per_round_seconds(result.records)
            if cfg["output"]["checkpoints"]:
                save_checkpoint(result.final, out / f"final_{mode}_seed{seed}.hfam")
            if cfg["output"]["station_artifacts"]:
                for p in result.packages:
                    stem = out / f"station{p.station_id}_{mode}_seed{seed}"
                    save_checkpoint(p.model, stem.with_suffix(".hfam"))
                    save_grams([p.grams[l] for l in sorted(p.grams)], stem.with_suffix(".hfgm"))
            print(f"seed {seed} mode {mode}: final target accuracy {result.records[-1].target_acc:.4f}")
        if "avg" in per_mode and "hfedatm" in per_mode:
            summary["overhead"][f"seed{seed}"] = (per_mode["hfedatm"] - per_mode["avg"]) / per_mode["avg"]

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {metrics}, {timings} and {out / 'summary.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# merge


def merge_checkpoints(models, gram_sets: List[List[GramStat]], alpha: float, reg: float, iters: int):
    """FOT-align to the first model, equal-gamma conv merge and RegMean linear merge."""
    packages = []
    for i, (m, grams) in enumerate(zip(models, gram_sets)):
        by_layer = {}
        for g in grams:
            if g.shrunk:
                by_layer[g.layer_id] = g
            else:
                by_layer[g.layer_id] = GramStat(g.layer_id, merge.shrink(g.g, alpha), g.batch_size, g.clipped,
                                                g.clip_bound, g.dp, True, alpha)
        missing = [l for l in m.spec.linear_layers() if l not in by_layer]
        if missing:
            raise container.ContainerFormatError(f"Gram sidecar {i} has no record for linear layers {missing}")
        for l in m.spec.linear_layers():
            d_in = m.spec.layers[l].d_in
            if by_layer[l].dim != d_in:
                raise container.ContainerFormatError(
                    f"Gram sidecar {i}, layer {l}: dim {by_layer[l].dim} does not match d_in {d_in}")
        packages.append(merge.StationPackage(i, m, by_layer, 1))
    return merge.merge_hfedatm(packages, reg, iters, gamma="uniform", reference=0)


def cmd_merge(args) -> int:
    if len(args.checkpoints) < 2:
        return _fail(EXIT_CONFIG, "merge needs at least two checkpoints")
    if len(args.grams) != len(args.checkpoints):
        return _fail(EXIT_CONFIG, f"--grams needs one sidecar per checkpoint "
                                  f"({len(args.checkpoints)} checkpoints, {len(args.grams)} sidecars)")
    if not 0.0 <= args.alpha <= 1.0:
        return _fail(EXIT_CONFIG, "--alpha must lie in [0, 1]")
    try:
        models = [load_checkpoint(p) for p in args.checkpoints]
        gram_sets = [load_grams(p) for p in args.grams]
    except FileNotFoundError as exc:
        return _fail(EXIT_FORMAT, f"cannot read {exc.filename}")
    except container.ContainerFormatError as exc:
        return _fail(EXIT_FORMAT, str(exc))
    ref = models[0].spec.fingerprint(structural=True)
    for path, m in zip(args.checkpoints[1:], models[1:]):
        if m.spec.fingerprint(structural=True) != ref:
            return _fail(EXIT_FORMAT, f"{path}: architecture fingerprint {m.spec.fingerprint(structural=True)} "
                                      f"differs from {args.checkpoints[0]} ({ref})")
    try:
        merged, report = merge_checkpoints(models, gram_sets, args.alpha, args.lambda_ot, args.sinkhorn_iters)
    except (ArchitectureMismatchError, container.ContainerFormatError) as exc:
        return _fail(EXIT_FORMAT, str(exc))
    except SingularSystemError as exc:
        return _fail(EXIT_SINGULAR, f"RegMean system singular after jitter: {exc}")
    save_checkpoint(merged, args.out)
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".report.json")
    report_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"merged {len(models)} checkpoints into {args.out} (report: {report_path}, "
          f"jitter events: {report.jitter_count})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect-gram


def _describe(g: GramStat) -> List[str]:
    eig = np.linalg.eigvalsh(0.5 * (g.g + g.g.T))
    flags = []
    if g.clipped:
        flags.append(f"clipped(C={g.clip_bound:g})")
    if g.dp is not None:
        eps, delta = g.dp
        flags.append(f"dp(eps={eps:g}, delta={delta:g})")
    if g.shrunk:
        flags.append(f"shrunk(alpha={g.alpha:g})")
    return [
        f"layer {g.layer_id}: dim {g.dim}x{g.dim}, batch {g.batch_size}",
        f"  symmetry residual {symmetry_residual(g.g):.3e}",
        f"  eigenvalues [{eig.min():.6e}, {eig.max():.6e}]",
        f"  flags: {', '.join(flags) if flags else 'none'}",
    ]


def cmd_inspect_gram(args) -> int:
    if args.path is None and not args.demo_ambiguity:
        return _fail(EXIT_CONFIG, "give a sidecar path and/or --demo-ambiguity")
    if args.path is not None:
        try:
            grams = load_grams(args.path)
        except FileNotFoundError:
            return _fail(EXIT_FORMAT, f"cannot read {args.path}")
        except container.ContainerFormatError as exc:
            return _fail(EXIT_FORMAT, f"{args.path}: {exc}")
        for g in grams:
            print("\n".join(_describe(g)))
    if args.demo_ambiguity:
        res = ambiguity_trials(args.trials, args.seed)
        worst = max(res)
        print(f"ambiguity demo: {args.trials} random (X, orthogonal Q acting on samples); "
              f"max ||G(X) - G(QX)||_F = {worst:.3e} ({'within' if worst <= 1e-10 else 'EXCEEDS'} 1e-10)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfedatm", description="Hierarchical federated merging experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured experiment for every seed and mode")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="override data.lambda")
    p.add_argument("--mode", choices=orchestrator.MODES)
    p.add_argument("--dp-eps", type=float, help="override privacy.epsilon (inf disables noise)")
    p.add_argument("--output-dir", help="override output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("merge", help="align and merge checkpoints using their Gram sidecars")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--grams", nargs="+", required=True)
    p.add_argument("--alpha", type=float, default=merge.DEFAULT_ALPHA)
    p.add_argument("--lambda-ot", type=float, default=0.05)
    p.add_argument("--sinkhorn-iters", type=int, default=25)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="MergeReport JSON path (default: <out>.report.json)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("inspect-gram", help="summarise a Gram sidecar")
    p.add_argument("path", nargs="?")
    p.add_argument("--demo-ambiguity", action="store_true",
                   help="show that X and QX (orthogonal Q) share a Gram")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_inspect_gram)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "merge" and (args.lambda_ot <= 0 or args.sinkhorn_iters < 1):
        return _fail(EXIT_CONFIG, "--lambda-ot must be positive and --sinkhorn-iters >= 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
