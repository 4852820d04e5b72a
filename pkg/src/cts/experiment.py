"""Experiment orchestration: sweeps over (method, sparsity, seed) grids.

Each grid cell is fully isolated (its own seeds and output files) and
resumable: a finished cell leaves a JSON record plus a ticket file with a
recorded checksum, and reruns skip cells whose outputs verify. The summary
CSV is assembled from cell records in canonical order, so reruns with the
same config are byte-identical. Wall times go to a separate sidecar, which
is the one deliberately non-deterministic output.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import mask as mk
from . import objectives as obj
from .data import Dataset, load_dataset
from .models import TrainConfig, build_model, evaluate, train
from .search import SearchConfig, run_cts

CSV_SCHEMA = 1
METHODS = ("cts", "ltr", "snip", "grasp", "synflow", "magnitude", "random")


class ExperimentError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "blobs:classes=4,dim=20,n=4000,seed=7"
    arch: str = "mlp-2x256"
    method: str = "cts"
    sparsities: tuple = (0.95,)
    repeats: int = 1
    seed: int = 0
    out_dir: str = "out"
    workers: int = 1
    sanity: bool = False  # emit paired base-vs-ablated rows
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ltr_prune_fraction: float = 0.20

    def __post_init__(self):
        if self.method not in METHODS:
            raise ExperimentError(f"unknown method '{self.method}'")
        if self.repeats < 1:
            raise ExperimentError("repeats must be >= 1")
        for s in self.sparsities:
            if not 0 < s < 1:
                raise ExperimentError(f"sparsities must lie in (0, 1), got {s}")


@dataclass
class MetricsRecord:
    method: str
    sparsity: float
    seed: int
    accuracy: float
    objective_at_draw: float
    wall_time: float
    per_layer_density: list  # [(layer, density), ...]

    def __post_init__(self):
        if not 0 <= self.accuracy <= 1:
            raise ExperimentError(f"accuracy out of range: {self.accuracy}")
        if not 0 < self.sparsity < 1:
            raise ExperimentError(f"sparsity out of range: {self.sparsity}")
        for _, dens in self.per_layer_density:
            if not 0 <= dens <= 1:
                raise ExperimentError(f"per-layer density out of range: {dens}")


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def _cell_seeds(base_seed: int, rep: int) -> int:
    return base_seed * 1000 + rep


def run_cell(cfg: ExperimentConfig, sparsity: float, rep: int,
             variant: str = "") -> tuple[MetricsRecord, mk.Ticket]:
    """Execute one (method, sparsity, repeat) cell. Pure given the config."""
    data = load_dataset(cfg.dataset)
    kappa = 1.0 - sparsity
    seed = _cell_seeds(cfg.seed, rep)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    t0 = time.perf_counter()

    method = cfg.method
    if method == "cts":
        scfg = SearchConfig(**{**asdict(cfg.search), "kappa": kappa,
                               "seed_init": seed, "seed_search": seed + 1,
                               "seed_train": seed + 2})
        ticket, final, info = run_cts(scfg, cfg.arch, data, tcfg)
        rewind = info["rewind_model"]
        if variant:
            ticket, final = _apply_ablation(variant, ticket, info, rewind, data, tcfg, seed)
        acc, _ = evaluate(final, data.x_test, data.y_test)
        ex, ey = data.eval_batch(seed=seed + 1)
        value = obj.hard_value(scfg.objective, rewind, ex, ey, ticket.mask.astype(np.float64))
    elif method == "ltr":
        p = cfg.ltr_prune_fraction
        rounds = max(1, int(round(math.log(max(kappa, 1e-12)) / math.log(1 - p))))
        lcfg = bl.LtrConfig(prune_fraction=p, rounds=rounds, train=tcfg)
        results, model_k = bl.run_ltr(lcfg, cfg.arch, data)
        ticket, final = results[-1]
        acc, _ = evaluate(final, data.x_test, data.y_test, mask=ticket.mask.astype(np.float64))
        ex, ey = data.eval_batch(seed=seed + 1)
        value = obj.hard_value(cfg.search.objective, model_k, ex, ey,
                               ticket.mask.astype(np.float64))
    else:
        ticket, final, value = _run_pai_cell(cfg, method, data, kappa, seed, tcfg)
        acc, _ = evaluate(final, data.x_test, data.y_test)
    wall = time.perf_counter() - t0

    name = f"{method}{'+' + variant if variant else ''}"
    record = MetricsRecord(method=name, sparsity=sparsity, seed=seed,
                           accuracy=acc, objective_at_draw=value, wall_time=wall,
                           per_layer_density=ticket.per_layer_density())
    return record, ticket


def _apply_ablation(variant, ticket, info, rewind, data, tcfg, seed):
    if variant == "shuffle":
        ticket = bl.sanity_ablate(ticket, "shuffle_layerwise", rewind, seed + 7)
        model = rewind
    elif variant == "invert":
        ticket = bl.sanity_ablate(ticket, "invert", rewind, seed + 7,
                                  distribution=info["distribution"])
        model = rewind
    elif variant == "reinit":
        model = bl.sanity_ablate(ticket, "reinit", rewind, seed + 7)
    else:
        raise ExperimentError(f"unknown sanity variant '{variant}'")
    v = model.maskable_vector()
    v[ticket.mask == 0] = 0.0
    masked = model.copy()
    masked.set_maskable_vector(v)
    final = train(masked, data, tcfg, mask=ticket.mask.astype(np.float64),
                  start_step=tcfg.rewind_step)
    return ticket, final


def _run_pai_cell(cfg, method, data: Dataset, kappa, seed, tcfg: TrainConfig):
    model0 = build_model(cfg.arch, seed, data.input_shape, data.num_classes)
    k = tcfg.rewind_step
    model_k = train(model0, data, tcfg, stop_step=k) if k > 0 else model0.copy()
    xb, yb = data.batch(0, tcfg.batch_size * bl.SALIENCY_BATCH_FACTOR, seed + 3)
    if method == "snip":
        ticket = bl.prune_by_scores(bl.snip_scores(model_k, (xb, yb)), kappa,
                                    layout=model_k.maskable_layout())
    elif method == "grasp":
        ticket = bl.prune_by_scores(bl.grasp_scores(model_k, (xb, yb)), kappa,
                                    layout=model_k.maskable_layout())
    elif method == "synflow":
        ticket = bl.synflow_prune(model_k, kappa)
    elif method == "magnitude":
        ticket = bl.magnitude_prune(model_k, kappa)
    elif method == "random":
        ticket = bl.random_prune(model_k.d, kappa, seed, layout=model_k.maskable_layout())
    else:
        raise ExperimentError(f"unknown method '{method}'")
    ex, ey = data.eval_batch(seed=seed + 1)
    value = obj.hard_value(cfg.search.objective, model_k, ex, ey,
                           ticket.mask.astype(np.float64))
    v = model_k.maskable_vector()
    v[ticket.mask == 0] = 0.0
    masked = model_k.copy()
    masked.set_maskable_vector(v)
    final = train(masked, data, tcfg, mask=ticket.mask.astype(np.float64), start_step=k)
    return ticket, final, value


# -- sweep persistence ---------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _cell_id(method: str, sparsity: float, rep: int, variant: str = "") -> str:
    tag = f"{method}{'+' + variant if variant else ''}"
    return f"{tag}_s{_fmt(sparsity)}_r{rep}"


def _run_cell_job(args):
    cfg, sparsity, rep, variant, out_dir = args
    cell = _cell_id(cfg.method, sparsity, rep, variant)
    cell_json = Path(out_dir) / "cells" / f"{cell}.json"
    ticket_path = Path(out_dir) / "cells" / f"{cell}.ticket.json"
    if cell_json.exists() and ticket_path.exists():
        doc = json.loads(cell_json.read_text())
        if doc.get("ticket_sha256") == _sha256(ticket_path):
            return cell, None  # verified; skip
    try:
        record, ticket = run_cell(cfg, sparsity, rep, variant)
    except Exception as e:  # cell failures recorded, sweep continues
        return cell, f"{type(e).__name__}: {e}"
    mk.save_ticket(ticket_path, ticket, arch=cfg.arch, kappa=1.0 - sparsity,
                   meta={"method": record.method, "seed": record.seed})
    doc = asdict(record)
    doc["ticket_sha256"] = _sha256(ticket_path)
    cell_json.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return cell, None


def run_experiment(cfg: ExperimentConfig) -> tuple[list[MetricsRecord], dict[str, str]]:
    """Execute the grid and write metrics.csv / layers.csv / timings.csv.

    Returns (records, failures). Failed cells are recorded and the rest of
    the grid continues.
    """
    out = Path(cfg.out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    variants = [""]
    if cfg.sanity:
        if cfg.method != "cts":
            raise ExperimentError("sanity mode applies to the cts method")
        variants = ["", "shuffle", "invert"]
        if cfg.train.rewind_step == 0:
            variants.append("reinit")

    jobs = [(cfg, s, r, v, str(out))
            for s in cfg.sparsities for r in range(cfg.repeats) for v in variants]
    failures: dict[str, str] = {}
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for cell, err in pool.map(_run_cell_job, jobs):
                if err:
                    failures[cell] = err
    else:
        for job in jobs:
            cell, err = _run_cell_job(job)
            if err:
                failures[cell] = err

    records = _collect_records(out)
    _write_csvs(out, records)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, sort_keys=True, indent=1) + "\n")
    return records, failures


def _collect_records(out: Path) -> list[MetricsRecord]:
    records = []
    for path in sorted((out / "cells").glob("*.json")):
        if path.name.endswith(".ticket.json"):
            continue
        doc = json.loads(path.read_text())
        doc.pop("ticket_sha256", None)
        records.append(MetricsRecord(**doc))
    records.sort(key=lambda r: (r.method, r.sparsity, r.seed))
    return records


def _write_csvs(out: Path, records: list[MetricsRecord]) -> None:
    lines = [f"# schema={CSV_SCHEMA}",
             "method,sparsity,seed,accuracy,objective_at_draw"]
    for r in records:
        lines.append(f"{r.method},{_fmt(r.sparsity)},{r.seed},"
                     f"{_fmt(r.accuracy)},{_fmt(r.objective_at_draw)}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")

    layer_lines = [f"# schema={CSV_SCHEMA}", "method,sparsity,seed,layer,density"]
    for r in records:
        for layer, dens in r.per_layer_density:
            layer_lines.append(f"{r.method},{_fmt(r.sparsity)},{r.seed},{layer},{_fmt(dens)}")
    (out / "layers.csv").write_text("\n".join(layer_lines) + "\n")

    timing_lines = [f"# schema={CSV_SCHEMA}", "method,sparsity,seed,wall_time"]
    for r in records:
        timing_lines.append(f"{r.method},{_fmt(r.sparsity)},{r.seed},{_fmt(r.wall_time)}")
    (out / "timings.csv").write_text("\n".join(timing_lines) + "\n")


def report(csv_paths: list) -> list[tuple[str, float, float, float, int]]:
    """Aggregate metrics CSVs: per (method, sparsity) mean and sample std of
    accuracy over seeds. Returns [(method, sparsity, mean, std, n)]."""
    groups: dict[tuple[str, float], list[float]] = {}
    for path in csv_paths:
        for line in Path(path).read_text().splitlines():
            if line.startswith("#") or line.startswith("method,"):
                continue
            parts = line.split(",")
            method, sparsity, acc = parts[0], float(parts[1]), float(parts[3])
            groups.setdefault((method, sparsity), []).append(acc)
    rows = []
    for (method, sparsity), accs in sorted(groups.items()):
        arr = np.asarray(accs)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        rows.append((method, sparsity, float(arr.mean()), std, len(arr)))
    return rows


# -- config files ---------------------------------------------------------------

def load_config(path) -> ExperimentConfig:
    """key = value sections: [task], [sweep], [search], [train], [ltr]."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ExperimentError(f"cannot read config file {path}")
    cfg = ExperimentConfig()
    if cp.has_section("task"):
        cfg.dataset = cp.get("task", "dataset", fallback=cfg.dataset)
        cfg.arch = cp.get("task", "arch", fallback=cfg.arch)
    if cp.has_section("sweep"):
        s = cp["sweep"]
        cfg.method = s.get("method", cfg.method)
        if "sparsities" in s:
            cfg.sparsities = tuple(float(v) for v in s["sparsities"].split(","))
        cfg.repeats = s.getint("repeats", cfg.repeats)
        cfg.seed = s.getint("seed", cfg.seed)
        cfg.out_dir = s.get("out", cfg.out_dir)
        cfg.workers = s.getint("workers", cfg.workers)
        cfg.sanity = s.getboolean("sanity", cfg.sanity)
    if cp.has_section("search"):
        s = cp["search"]
        sc = cfg.search
        sc.objective = s.get("objective", sc.objective)
        sc.controller = s.get("controller", sc.controller)
        sc.steps = s.getint("steps", sc.steps)
        sc.eta = s.getfloat("eta", sc.eta)
        sc.lambda_lr = s.getfloat("lambda_lr", sc.lambda_lr)
        sc.tau = s.getfloat("tau", sc.tau)
        sc.alpha_lr = s.getfloat("alpha_lr", sc.alpha_lr)
        sc.batch_size = s.getint("batch_size", sc.batch_size)
        sc.quick_factor = s.getfloat("quick_factor", sc.quick_factor)
    if cp.has_section("train"):
        s = cp["train"]
        tc = cfg.train
        tc.steps = s.getint("steps", tc.steps)
        tc.batch_size = s.getint("batch_size", tc.batch_size)
        tc.lr = s.getfloat("lr", tc.lr)
        tc.momentum = s.getfloat("momentum", tc.momentum)
        tc.weight_decay = s.getfloat("weight_decay", tc.weight_decay)
        tc.rewind_step = s.getint("rewind_step", tc.rewind_step)
        if "lr_drops" in s:
            drops = []
            for item in s["lr_drops"].split(";"):
                if item.strip():
                    step, factor = item.split(":")
                    drops.append((int(step), float(factor)))
            tc.lr_drops = tuple(drops)
    if cp.has_section("ltr"):
        cfg.ltr_prune_fraction = cp.getfloat("ltr", "prune_fraction",
                                             fallback=cfg.ltr_prune_fraction)
    ExperimentConfig.__post_init__(cfg)
    return cfg
