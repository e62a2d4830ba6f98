"""Command-line entry points.

Subcommands: train, eval, neighbors, stats, gradcheck, synth. Every run
logs its fully resolved configuration; all failures exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .errors import DuetError
from .graph import Graph
from .model import DuetModel
from .training import TrainConfig, evaluate, resolved_config_lines, train

log = logging.getLogger("duet")

MODE_TASK = {"ego-node": "node-classification", "kg": "kg-completion", "whole-graph": "graph-regression"}


def _load_graph_for_stats(path: str) -> Graph:
    p = Path(path)
    if p.is_dir():
        bundle = datamod.load_dataset(p)
        if bundle.kind == "node":
            return bundle.graph
        if bundle.kind == "kg":
            return bundle.graph()
        raise DuetError("stats needs a single graph; graph-set bundles hold many")
    return datamod.load_edge_list(p)


def cmd_train(args) -> int:
    config, data_path, out_path = datamod.run_config_from_file(args.config, seed_override=args.seed)
    if args.threads is not None:
        config.threads = args.threads
    for line in resolved_config_lines(config):
        log.info("config: %s", line)
    bundle = datamod.load_dataset(data_path)
    model, report = train(config, bundle)
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    model.save(out / "model.ckpt")
    with open(out / "config.resolved.txt", "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(resolved_config_lines(config)) + "\n")
    log.info("wrote %s and %s", out / "metrics.csv", out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    model = DuetModel.load(args.checkpoint)
    bundle = datamod.load_dataset(args.data)
    task = MODE_TASK[model.config.mode]
    splits = [args.split] if args.split else ["valid", "test"]
    for split in splits:
        metrics = evaluate(task, model, bundle, split)
        for name, value in sorted(metrics.items()):
            print(f"{split}\t{name}\t{value:.6f}")
    return 0


def cmd_neighbors(args) -> int:
    model = DuetModel.load(args.checkpoint)
    bundle = datamod.load_dataset(args.data)
    g = bundle.graph() if bundle.kind == "kg" else bundle.graph
    index = model.refresh_semantic_index(
        g, k=args.k, candidate_count=args.candidates, rng=np.random.default_rng(args.seed)
    )
    if args.out:
        index.write_tsv(args.out)
        log.info("wrote %s", args.out)
    for node, score in index.scored(args.node):
        print(f"{args.node}\t{node}\t{score:.6f}")
    return 0


def cmd_stats(args) -> int:
    g = _load_graph_for_stats(args.data)
    stats = g.hop_statistics(args.max_hop)
    print(" ".join(f"{k + 1}:{round(v, 4)}" for k, v in enumerate(stats)))
    return 0


def cmd_gradcheck(args) -> int:
    from . import autodiff as ad
    from .gradcheck import run_model_suite, run_op_suite

    with ad.precision(np.float64):
        op_results = run_op_suite(cases=40 if args.quick else 200, seed=args.seed)
        model_results = run_model_suite(seed=args.seed, quick=args.quick)
    failed = 0
    worst_op = max(op_results, key=lambda r: r.max_rel_err)
    print(f"ops: {len(op_results)} cases, worst {worst_op.name} rel err {worst_op.max_rel_err:.3e} "
          f"(tolerance {worst_op.tolerance:.0e})")
    failed += sum(not r.ok for r in op_results)
    for r in model_results:
        status = "ok" if r.ok else "FAIL"
        print(f"model[{r.name}]: max rel err {r.max_rel_err:.3e} (tolerance {r.tolerance:.0e}) {status}")
        failed += not r.ok
    if failed:
        print(f"{failed} gradient checks failed")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_synth(args) -> int:
    params = {}
    for item in args.param or []:
        if "=" not in item:
            raise DuetError(f"--param expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            params[key] = int(value)
        except ValueError:
            try:
                params[key] = float(value)
            except ValueError:
                params[key] = value
    bundle = datamod.generate_synthetic(args.kind, params, seed=args.seed)
    datamod.save_bundle(bundle, args.out)
    log.info("wrote %s bundle to %s", args.kind, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duet", description="dual-encoder graph transformer")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="workers for index refresh")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("neighbors", help="print a node's semantic neighbors with scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--candidates", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="also dump the full index as TSV")
    p.set_defaults(fn=cmd_neighbors)

    p = sub.add_parser("stats", help="per-hop average shell sizes of a graph")
    p.add_argument("--data", required=True)
    p.add_argument("--max-hop", type=int, default=3)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="reduced case count")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset bundle")
    p.add_argument("--kind", required=True, choices=datamod.SYNTHETIC_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", help="generator parameter key=value")
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except DuetError as e:
        log.error("%s", e)
        return 1
    except FileNotFoundError as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
