"""``gridsplit`` command line."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .discrete_opt import SolverConfig
from .grid_model import PRESETS, Instance
from .lgnn import LgnnHyper
from .persist import DatasetManifest, StageError, read_json, write_json
from .train_pipeline import HeteroHyper


def _instance(path) -> Instance:
    return Instance.from_dict(read_json(path))


def _config(path) -> np.ndarray:
    d = read_json(path)
    return np.asarray(d["z"] if isinstance(d, dict) else d, dtype=int)


def _emit(obj, out=None) -> None:
    if out:
        write_json(out, obj)
    else:
        print(json.dumps(obj, sort_keys=True))


def cmd_generate(a):
    from .workflow import generate_dataset

    man = generate_dataset(a.out, a.preset, a.n_instances, a.seed, a.width)
    print(f"wrote {len(man.entries)} instances to {a.out}")


def cmd_label(a):
    from .workflow import label_dataset

    cfg = SolverConfig(time_limit=a.time_limit, heuristic_budget=a.budget)
    man = label_dataset(a.data, a.method, cfg, a.ids.split(",") if a.ids else None)
    print(f"labelled {sum(e.label is not None for e in man.entries)} instances with {a.method}")


def cmd_split(a):
    from .workflow import split_stage

    man = split_stage(a.data, tuple(a.ratios), a.seed)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    print(json.dumps(counts))


def cmd_train_lgnn(a):
    from .workflow import train_lgnn_stage

    hyper = LgnnHyper(hidden=a.hidden, epochs=a.epochs, patience=a.patience, batch=a.batch, lr=a.lr, seed=a.seed)
    metrics = train_lgnn_stage(a.data, a.out, a.seed, hyper, a.n_random, a.log)
    print(json.dumps(metrics, sort_keys=True))


def cmd_train_hetero(a):
    from .workflow import train_hetero_stage

    hyper = HeteroHyper(hidden=a.hidden, epochs=a.epochs, patience=a.patience, batch=a.batch, lr=a.lr,
                        seed=a.seed, threshold=a.threshold)
    res = train_hetero_stage(a.data, a.lgnn, a.out, a.rho1, a.rho2, a.seed, hyper, a.log)
    print(json.dumps(res, sort_keys=True))


def cmd_predict(a):
    from .heterognn import predict_proba
    from .workflow import load_hetero

    nbg = DatasetManifest.load(a.data).node_breaker()
    p = predict_proba(load_hetero(a.model), nbg, _instance(a.instance))
    _emit({"z": (p >= a.threshold).astype(int).tolist(), "probabilities": p.tolist()}, a.out)


def cmd_repair(a):
    from .repair_eval import repair
    from .workflow import Surrogate, load_lgnn

    nbg = DatasetManifest.load(a.data).node_breaker()
    inst = _instance(a.instance) if a.instance else None
    flow_fn = None
    if a.lgnn and inst is not None:
        flow_fn = Surrogate(nbg, None, load_lgnn(a.lgnn)).flow_fn(inst)
    z, trace = repair(nbg, _config(a.config), flow_fn, None, inst)
    _emit({"z": z.tolist(), "trace": trace.to_dict()}, a.out)


def cmd_evaluate(a):
    from .dcopf import build_dcopf, solve_dcopf
    from .numerics import dump_lp
    from .topo import structural_check, to_bus_branch

    nbg = DatasetManifest.load(a.data).node_breaker()
    inst = _instance(a.instance)
    z = _config(a.config) if a.config else nbg.all_closed()
    rep = structural_check(nbg, z)
    sol = solve_dcopf(nbg, z, inst, check=False)
    if a.dump_topology:
        write_json(a.dump_topology, to_bus_branch(nbg, z, inst).to_dict())
    if a.dump_lp:
        Path(a.dump_lp).write_text(dump_lp(build_dcopf(nbg, z, inst)))
    _emit({"structurally_feasible": rep.feasible, "feasible": bool(sol.feasible),
           "lambda": sol.lam if sol.feasible else None, "mu": sol.mu if sol.feasible else None}, a.out)


def cmd_benchmark(a):
    from .workflow import benchmark_stage

    models = dict(m.split("=", 1) if "=" in m else (Path(m).stem, m) for m in a.models)
    rep = benchmark_stage(a.data, models, a.lgnn, a.out, a.split, a.include_labels, a.repeats)
    print(rep.table())


def cmd_pipeline(a):
    from .workflow import PipelineConfig, run_pipeline

    cfg = PipelineConfig()
    if a.config:
        cfg = PipelineConfig(**{**cfg.to_dict(), **read_json(a.config)})
    overrides = {k: getattr(a, k) for k in ("preset", "seed", "n_instances", "labeler", "rho1", "rho2",
                                            "lgnn_epochs", "hetero_epochs", "patience")
                 if getattr(a, k) is not None}
    if a.no_ablations:
        overrides["ablations"] = False
    if a.stages:
        overrides["stages"] = tuple(a.stages.split(","))
    cfg = PipelineConfig(**{**cfg.to_dict(), **overrides})
    cfg.ratios, cfg.stages = tuple(cfg.ratios), tuple(cfg.stages)
    run_pipeline(cfg, a.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridsplit", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a grid and perturbed instances")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk50")
    g.add_argument("--n-instances", type=int, default=300)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=float, default=0.2, help="relative perturbation half-width")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    g = sub.add_parser("label", help="compute optimal or heuristic breaker labels")
    g.add_argument("--data", required=True)
    g.add_argument("--method", choices=["heuristic", "mip", "mip-highs", "bruteforce"], default="heuristic")
    g.add_argument("--time-limit", type=float, default=600.0)
    g.add_argument("--budget", type=int, default=5000, help="heuristic evaluation budget")
    g.add_argument("--ids", help="comma-separated instance ids (default: all)")
    g.set_defaults(fn=cmd_label)

    g = sub.add_parser("split", help="assign instances to train/val/test")
    g.add_argument("--data", required=True)
    g.add_argument("--ratios", type=float, nargs=3, default=[0.8, 0.1, 0.1])
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_split)

    g = sub.add_parser("train-lgnn", help="train the line-graph flow encoder")
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--patience", type=int, default=20)
    g.add_argument("--batch", type=int, default=32)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--n-random", type=int, default=5, help="random legal topologies per instance")
    g.add_argument("--log", help="training curve CSV")
    g.set_defaults(fn=cmd_train_lgnn)

    g = sub.add_parser("train-hetero", help="train the breaker predictor")
    g.add_argument("--data", required=True)
    g.add_argument("--lgnn", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--rho1", type=float, default=1.2)
    g.add_argument("--rho2", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--epochs", type=int, default=300)
    g.add_argument("--patience", type=int, default=20)
    g.add_argument("--batch", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--log", help="training log CSV")
    g.set_defaults(fn=cmd_train_hetero)

    g = sub.add_parser("predict", help="predict a breaker configuration")
    g.add_argument("--model", required=True)
    g.add_argument("--data", required=True, help="dataset directory holding the grid")
    g.add_argument("--instance", required=True)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_predict)

    g = sub.add_parser("repair", help="make a configuration structurally legal")
    g.add_argument("--data", required=True)
    g.add_argument("--config", required=True, help='JSON file with {"z": [...]}')
    g.add_argument("--instance", help="enables the dispatch check (and the thermal rule with --lgnn)")
    g.add_argument("--lgnn")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_repair)

    g = sub.add_parser("evaluate", help="solve the DCOPF of a configuration")
    g.add_argument("--data", required=True)
    g.add_argument("--instance", required=True)
    g.add_argument("--config", help="default: all breakers closed")
    g.add_argument("--dump-topology", help="write the bus-branch graph as JSON")
    g.add_argument("--dump-lp", help="write the DCOPF linear program as text")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_evaluate)

    g = sub.add_parser("benchmark", help="predict, repair and score a test split")
    g.add_argument("--data", required=True)
    g.add_argument("--models", nargs="+", required=True, help="NAME=CKPT or CKPT")
    g.add_argument("--lgnn", help="flow encoder for the thermal repair rule")
    g.add_argument("--split", default="test")
    g.add_argument("--include-labels", action="store_true", help="add a label-echo row")
    g.add_argument("--repeats", type=int, default=5, help="timing repeats (median)")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_benchmark)

    g = sub.add_parser("pipeline", help="generate -> label -> split -> train -> benchmark")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--config", help="JSON config file (flags take precedence)")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-instances", type=int)
    g.add_argument("--labeler", choices=["heuristic", "mip", "mip-highs", "bruteforce"])
    g.add_argument("--rho1", type=float)
    g.add_argument("--rho2", type=float)
    g.add_argument("--lgnn-epochs", type=int)
    g.add_argument("--hetero-epochs", type=int)
    g.add_argument("--patience", type=int)
    g.add_argument("--no-ablations", action="store_true")
    g.add_argument("--stages", help="comma-separated subset of stages")
    g.add_argument("--out", default="run")
    g.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except StageError as exc:
        print(json.dumps(exc.record), file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(json.dumps({"stage": args.command, "error": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
