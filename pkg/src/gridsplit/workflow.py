"""Pipeline stages: generate, label, split, train, benchmark."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dcopf import base_lambda
from .discrete_opt import SolverConfig, brute_force_enum, heuristic_search, solve_mip_bnb, solve_mip_highs
from .grid_model import PRESETS, Instance, NodeBreakerGraph, build_node_breaker, generate_grid, perturb_instance
from .heterognn import HeteroModel, predict_proba
from .lgnn import (FlowSample, LgnnHyper, LgnnModel, PsiStructure, dataset_mse, flow_encoder_psi, flow_sample,
                   train_lgnn, zero_baseline_mse)
from .nn.checkpoint import read_checkpoint, save_checkpoint
from .persist import (DatasetManifest, InstanceEntry, StageError, config_hash, derive_seed, file_hash, read_json,
                      split_dataset, tool_version, worker_count, write_csv, write_json)
from .repair_eval import REPORT_COLUMNS, BenchmarkReport, run_benchmark
from .topo import random_feasible_config
from .train_pipeline import HeteroHyper, LabeledInstance, LossWeights, train_hetero

LABELERS = {
    "heuristic": heuristic_search,
    "mip": solve_mip_bnb,
    "mip-highs": solve_mip_highs,
    "bruteforce": lambda nbg, inst, cfg=None: brute_force_enum(nbg, inst),
}

TIMING_COLUMNS = ["variant", "infer_ms", "repair_ms", "solver_ms", "speedup"]
QUALITY_COLUMNS = [c for c in REPORT_COLUMNS if c not in TIMING_COLUMNS[1:]] + ["config_hash"]


# ---------------------------------------------------------------------------
# generate / label / split


def generate_dataset(out, preset: str = "desk50", n_instances: int = 300, seed: int = 0,
                     width: float = 0.2, chash: str = "") -> DatasetManifest:
    if preset not in PRESETS:
        raise StageError("generate", f"unknown preset {preset!r}")
    root = Path(out)
    spec = generate_grid(PRESETS[preset], derive_seed(seed, "grid"))
    write_json(root / "grid.json", spec.to_dict())
    nbg = build_node_breaker(spec)
    man = DatasetManifest(root, "grid.json", file_hash(root / "grid.json"))
    for i in range(n_instances):
        s = derive_seed(seed, "instance", i)
        inst = perturb_instance(nbg, s, width)
        iid = f"i{i:05d}"
        rel = f"instances/{iid}.json"
        write_json(root / rel, inst.to_dict())
        man.entries.append(InstanceEntry(iid, rel, file_hash(root / rel), s))
    man.provenance = {"preset": preset, "seed": int(seed), "n_instances": n_instances, "width": width,
                      "tool_version": tool_version(), "config_hash": chash}
    man.save()
    return man


def _label_one(args):
    nbg, inst, method, cfg = args
    t0 = time.perf_counter()
    res = LABELERS[method](nbg, inst, cfg)
    return res.to_label(), time.perf_counter() - t0


def label_dataset(root, method: str = "heuristic", cfg: SolverConfig | None = None,
                  ids: list[str] | None = None) -> DatasetManifest:
    """Label every (or the listed) instance; wall times go to timings.csv."""
    if method not in LABELERS:
        raise StageError("label", f"unknown method {method!r}")
    man = DatasetManifest.load(root)
    man.verify()
    nbg = man.node_breaker()
    cfg = cfg or SolverConfig()
    todo = [e for e in man.entries if ids is None or e.id in ids]
    jobs = [(nbg, man.instance(e), method, cfg) for e in todo]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_label_one, jobs))
    else:
        results = [_label_one(j) for j in jobs]
    timings = []
    for e, (lab, wall) in zip(todo, results):
        solver = dict(lab["solver"])
        solver.pop("wall_time", None)
        lab["solver"] = solver
        rel = f"labels/{e.id}.json"
        write_json(man.root / rel, lab)
        e.label, e.label_sha256 = rel, file_hash(man.root / rel)
        timings.append({"id": e.id, "method": method, "wall_time": wall, "nodes": solver["node_count"]})
    _merge_timings(man.root / "timings.csv", timings)
    man.provenance["labeler"] = {"method": method, "config": asdict(cfg)}
    man.save()
    return man


def _merge_timings(path: Path, rows: list[dict]) -> None:
    old = {}
    if path.exists():
        with path.open() as fh:
            old = {r["id"]: r for r in csv.DictReader(fh)}
    for r in rows:
        old[r["id"]] = r
    write_csv(path, [old[k] for k in sorted(old)], ["id", "method", "wall_time", "nodes"])


def read_timings(root) -> dict[str, float]:
    path = Path(root) / "timings.csv"
    if not path.exists():
        return {}
    with path.open() as fh:
        return {r["id"]: float(r["wall_time"]) for r in csv.DictReader(fh)}


def split_stage(root, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    man = DatasetManifest.load(root)
    split_dataset(man, ratios, seed)
    man.save()
    return man


def labeled_items(man: DatasetManifest, split: str) -> list[LabeledInstance]:
    timings = read_timings(man.root)
    items = []
    for e in man.split(split):
        if not e.label or not (man.root / e.label).exists():
            raise StageError("load", f"instance {e.id} has no label file")
        lab = man.label(e)
        items.append(LabeledInstance(man.instance(e), np.asarray(lab["z"], dtype=int), float(lab["lambda"]),
                                     float(lab["mu"]), timings.get(e.id, float("nan")), lab["solver"]["method"]))
    return items


# ---------------------------------------------------------------------------
# LGNN


def flow_dataset(nbg: NodeBreakerGraph, items: list[LabeledInstance], n_random: int, seed: int) -> list[FlowSample]:
    out = []
    for k, it in enumerate(items):
        rng = np.random.default_rng(derive_seed(seed, "aug", k))
        for z in [it.z] + [random_feasible_config(nbg, rng) for _ in range(n_random)]:
            s = flow_sample(nbg, it.inst, z)
            if s is not None:
                out.append(s)
    return out


def train_lgnn_stage(root, out, seed: int = 0, hyper: LgnnHyper | None = None, n_random: int = 5,
                     log_path=None, chash: str = "") -> dict:
    man = DatasetManifest.load(root)
    man.verify()
    nbg = man.node_breaker()
    try:
        splits = {s: labeled_items(man, s) for s in ("train", "val", "test")}
    except StageError as exc:
        raise StageError("train-lgnn", str(exc)) from None
    if not splits["train"]:
        raise StageError("train-lgnn", "empty training split (run split first)")
    data = {s: flow_dataset(nbg, items, n_random, derive_seed(seed, "lgnn-data", s)) for s, items in splits.items()}
    hyper = hyper or LgnnHyper(seed=derive_seed(seed, "lgnn-init"))
    model, curve = train_lgnn(data["train"], data["val"], hyper)
    test = data["test"] or data["val"]
    metrics = {"test_mse": dataset_mse(model, test), "zero_mse": zero_baseline_mse(test),
               "n_train": len(data["train"]), "n_val": len(data["val"]), "n_test": len(test),
               "epochs_run": len(curve) - 1}
    metrics["ratio"] = metrics["test_mse"] / metrics["zero_mse"]
    ckpt = model.checkpoint()
    ckpt["extra"].update(metrics=metrics, config_hash=chash, hyper=asdict(hyper), n_random=n_random)
    save_checkpoint(out, ckpt)
    if log_path:
        write_csv(log_path, curve, ["epoch", "train_mse", "val_mse"])
    return metrics


def load_lgnn(path) -> LgnnModel:
    if not Path(path).exists():
        from .train_pipeline import MissingCheckpoint

        raise MissingCheckpoint(f"no LGNN checkpoint at {path}")
    return LgnnModel.from_checkpoint(read_checkpoint(path))


def load_hetero(path) -> HeteroModel:
    return HeteroModel.from_checkpoint(read_checkpoint(path))


# ---------------------------------------------------------------------------
# HeteroGNN


def train_hetero_stage(root, lgnn_path, out, rho1: float = 1.2, rho2: float = 2.0, seed: int = 0,
                       hyper: HeteroHyper | None = None, log_path=None, chash: str = "") -> dict:
    man = DatasetManifest.load(root)
    man.verify()
    nbg = man.node_breaker()
    try:
        train, val = labeled_items(man, "train"), labeled_items(man, "val")
    except StageError as exc:
        raise StageError("train-hetero", str(exc)) from None
    if not train:
        raise StageError("train-hetero", "empty training split (run split first)")
    lgnn = load_lgnn(lgnn_path) if (rho1 or rho2) else None
    hyper = hyper or HeteroHyper(seed=derive_seed(seed, "hetero-init"))
    hyper.weights = LossWeights(rho1, rho2)
    model, rows = train_hetero(train, val, nbg, lgnn, hyper)
    ckpt = model.checkpoint({"config_hash": chash, "weights": asdict(hyper.weights),
                             "hyper": {k: v for k, v in asdict(hyper).items() if k != "weights"},
                             "epochs_run": len(rows) - 1, "best_val": min(r["val_total"] for r in rows)})
    save_checkpoint(out, ckpt)
    if log_path:
        write_csv(log_path, rows)
    return {"epochs_run": len(rows) - 1, "best_val_total": min(r["val_total"] for r in rows),
            "best_val_bce": min(r["val_L_br"] for r in rows)}


# ---------------------------------------------------------------------------
# inference helpers and benchmark


@dataclass
class Surrogate:
    """Frozen breaker predictor plus the flow encoder used by the thermal repair rule."""

    nbg: NodeBreakerGraph
    model: HeteroModel
    lgnn: LgnnModel | None = None
    threshold: float = 0.5
    _st: PsiStructure | None = field(default=None, repr=False)

    def predict(self, inst: Instance):
        p = predict_proba(self.model, self.nbg, inst)
        return (p >= self.threshold).astype(int), p

    def flow_fn(self, inst: Instance):
        if self.lgnn is None:
            return None
        if self._st is None:
            self._st = PsiStructure.build(self.nbg)
        lam = base_lambda(self.nbg, inst)
        mu = inst.alpha * lam + inst.beta
        return lambda z: flow_encoder_psi(self.lgnn, self.nbg, z, inst, lam, mu, self._st)


def benchmark_stage(root, models: dict[str, str], lgnn_path, out_csv, split: str = "test",
                    include_labels: bool = False, repeats: int = 1, chash: str = "") -> BenchmarkReport:
    """Write the quality report to ``out_csv`` and timings next to it."""
    man = DatasetManifest.load(root)
    man.verify()
    nbg = man.node_breaker()
    items = labeled_items(man, split)
    if not items:
        raise StageError("benchmark", f"split {split!r} is empty")
    lgnn = load_lgnn(lgnn_path) if lgnn_path else None
    variants = {}
    for name, path in models.items():
        sur = Surrogate(nbg, load_hetero(path), lgnn)
        variants[name] = (sur.predict, sur.flow_fn)
    if include_labels:
        by_id = {id(it.inst): it for it in items}
        variants["label_echo"] = (lambda inst: (by_id[id(inst)].z, None), None)
    report = run_benchmark(nbg, items, variants, repeats)
    for r in report.rows:
        r["config_hash"] = chash
    out_csv = Path(out_csv)
    write_csv(out_csv, report.rows, QUALITY_COLUMNS)
    write_csv(out_csv.with_name(out_csv.stem + "_timing.csv"), report.rows, TIMING_COLUMNS)
    return report


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineConfig:
    preset: str = "desk50"
    seed: int = 0
    n_instances: int = 300
    labeler: str = "heuristic"
    ratios: tuple = (0.8, 0.1, 0.1)
    rho1: float = 1.2
    rho2: float = 2.0
    ablations: bool = True
    lgnn_epochs: int = 200
    hetero_epochs: int = 300
    patience: int = 20
    n_random: int = 5
    stages: tuple = ("generate", "label", "split", "train-lgnn", "train-hetero", "benchmark")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["stages"] = list(self.stages)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def run_pipeline(cfg: PipelineConfig, out, log=print) -> dict:
    """Run the requested stages in order; each one reads the previous one's files."""
    out = Path(out)
    data = out / "data"
    models = out / "models"
    logs = out / "logs"
    chash = cfg.hash()
    write_json(out / "pipeline.json", {"config": cfg.to_dict(), "config_hash": chash,
                                       "tool_version": tool_version()})
    variants = {"full": (cfg.rho1, cfg.rho2)}
    if cfg.ablations:
        variants.update(no_flow=(0.0, cfg.rho2), no_feasibility=(cfg.rho1, 0.0))
    summary: dict = {"config_hash": chash}
    for stage in cfg.stages:
        t0 = time.perf_counter()
        if stage == "generate":
            generate_dataset(data, cfg.preset, cfg.n_instances, cfg.seed, chash=chash)
        elif stage == "label":
            label_dataset(data, cfg.labeler)
        elif stage == "split":
            split_stage(data, cfg.ratios, derive_seed(cfg.seed, "split"))
        elif stage == "train-lgnn":
            hyper = LgnnHyper(epochs=cfg.lgnn_epochs, patience=cfg.patience, seed=derive_seed(cfg.seed, "lgnn-init"))
            summary["lgnn"] = train_lgnn_stage(data, models / "lgnn.json", cfg.seed, hyper, cfg.n_random,
                                               logs / "lgnn_curve.csv", chash)
        elif stage == "train-hetero":
            for name, (r1, r2) in variants.items():
                t1 = time.perf_counter()
                hyper = HeteroHyper(epochs=cfg.hetero_epochs, patience=cfg.patience,
                                    seed=derive_seed(cfg.seed, "hetero-init"))
                summary[f"hetero_{name}"] = train_hetero_stage(
                    data, models / "lgnn.json", models / f"hetero_{name}.json", r1, r2, cfg.seed, hyper,
                    logs / f"hetero_{name}.csv", chash)
                log(f"[train-hetero:{name}] done in {time.perf_counter() - t1:.1f}s")
        elif stage == "benchmark":
            paths = {name: str(models / f"hetero_{name}.json") for name in variants}
            rep = benchmark_stage(data, paths, models / "lgnn.json", out / "report.csv", repeats=5, chash=chash)
            summary["report"] = rep.rows
            log(rep.table())
        else:
            raise StageError("pipeline", f"unknown stage {stage!r}")
        log(f"[{stage}] done in {time.perf_counter() - t0:.1f}s")
    write_json(out / "summary.json", {k: v for k, v in summary.items() if k != "report"})
    return summary


def load_report(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


__all__ = [
    "LABELERS", "PipelineConfig", "Surrogate", "benchmark_stage", "flow_dataset", "generate_dataset",
    "label_dataset", "labeled_items", "load_hetero", "load_lgnn", "load_report", "read_json", "read_timings",
    "run_pipeline", "split_stage", "train_hetero_stage", "train_lgnn_stage",
]
