"""Configuration-driven orchestration: pretrain under each scheme, draw
tickets under each pruning scheme, transfer under each evaluation mode, and
aggregate a deterministic report.

Every stage artifact is cached under a content key: the hash of the stage
configuration plus the content hashes of its upstream artifacts. Reruns on a
completed output directory therefore execute zero training steps, and
deleting one artifact recomputes exactly that artifact (plus anything
downstream of it).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import serialize
from .attack import AdvConfig
from .data import GeneratorConfig, ShiftConfig, Task, load_dataset, make_shifted_pair
from .metrics import evaluate_model, gaussian_stats, frechet_distance
from .models import Checkpoint, make_spec, SPEC_REGISTRY
from .pruning import geometric_schedule, imp, lmp, load_ticket, omp, save_ticket
from .training import (
    PretrainScheme,
    SGD,
    TrainConfig,
    assemble_linear_model,
    finetune_whole,
    linear_eval,
    pretrain,
)


class ConfigError(ValueError):
    """Experiment configuration is invalid; nothing was run."""


PRUNE_SCHEMES = ("omp", "imp", "lmp")
TRANSFER_MODES = ("linear", "finetune")


def default_config() -> dict:
    return {
        "model": "mini10",
        "data": {
            "generator": {"classes": 10, "image_size": 16, "n_train": 1024, "n_test": 512},
            "shift": {"magnitude": 0.75},
        },
        "pretrain_schemes": ["natural", "adversarial"],
        "adv": {"epsilon": 8.0 / 255.0, "steps": 4, "step_size": 3.0 / 255.0, "init": "zero", "track_best": True},
        "rs_sigma": 0.1,
        "pretrain": {"epochs": 9, "batch_size": 64, "base_lr": 0.05, "decay_epochs": [5, 7]},
        "prune": {
            "schemes": ["omp"],
            "sparsities": [0.5, 0.7],
            "granularity": "element",
            "scope": "global",
            "imp": {"rate": 0.2, "rounds": 3, "epochs_per_round": 1, "locus": "downstream"},
            "lmp": {"epochs": 2},
        },
        "transfer_modes": ["linear", "finetune"],
        "transfer": {"epochs": 6, "batch_size": 64, "base_lr": 0.02, "decay_epochs": [2, 4]},
        "eval": {"ood": "source_test", "ece_bins": 15, "fid_samples": 512},
        "seeds": [0, 1, 2],
    }


def _merge_train_cfg(overrides: dict, seed: int) -> TrainConfig:
    base = {}
    base.update(overrides or {})
    base["seed"] = seed
    return TrainConfig.from_dict(base)


@dataclasses.dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls(raw=json.loads(json.dumps(d)))
        cfg.validate()
        return cfg

    def validate(self):
        d = self.raw
        if d.get("model") not in SPEC_REGISTRY:
            raise ConfigError(f"unknown model spec id {d.get('model')!r}; known: {sorted(SPEC_REGISTRY)}")
        data = d.get("data") or {}
        if "generator" not in data and "source_manifest" not in data:
            raise ConfigError("data must give either a generator config or manifests")
        if not d.get("pretrain_schemes"):
            raise ConfigError("at least one pretrain scheme is required")
        for scheme in d["pretrain_schemes"]:
            if scheme not in ("natural", "adversarial", "random_smoothing"):
                raise ConfigError(f"unknown pretrain scheme {scheme!r}")
        prune = d.get("prune") or {}
        if not prune.get("schemes"):
            raise ConfigError("at least one prune scheme is required")
        for scheme in prune["schemes"]:
            if scheme not in PRUNE_SCHEMES:
                raise ConfigError(f"unknown prune scheme {scheme!r}; known: {PRUNE_SCHEMES}")
        sparsities = prune.get("sparsities", [])
        if any(not 0.0 <= s < 1.0 for s in sparsities):
            raise ConfigError(f"sparsities must lie in [0, 1), got {sparsities}")
        if not d.get("transfer_modes"):
            raise ConfigError("at least one transfer mode is required")
        for mode in d["transfer_modes"]:
            if mode not in TRANSFER_MODES:
                raise ConfigError(f"unknown transfer mode {mode!r}")
        if not d.get("seeds"):
            raise ConfigError("seeds must be a nonempty list")
        try:
            _merge_train_cfg(d.get("pretrain"), 0)
            _merge_train_cfg(d.get("transfer"), 0)
            if d.get("adv"):
                AdvConfig.from_dict(d["adv"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolved(self) -> dict:
        merged = default_config()
        merged.update(self.raw)
        return merged


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_key(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:24]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:24]


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_suffix(path.suffix + f".{os.getpid()}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_tasks(cfg: dict, seed: int) -> tuple[Task, Task]:
    data = cfg["data"]
    if "generator" in data:
        gen = GeneratorConfig(**data["generator"])
        shift = ShiftConfig(**(data.get("shift") or {"magnitude": 0.0}))
        return make_shifted_pair(gen, shift, np.random.default_rng(seed))
    source = load_dataset(data["source_manifest"])
    target = load_dataset(data["target_manifest"])
    return source, target


def _data_key(cfg: dict, seed: int) -> str:
    return content_key({"stage": "data", "data": cfg["data"], "seed": seed})


class ExperimentRun:
    """One output directory: stage keys, artifact paths, cell planning."""

    def __init__(self, cfg: ExperimentConfig, out_dir, seeds=None):
        self.cfg = cfg
        self.resolved = cfg.resolved()
        if seeds is not None:
            self.resolved["seeds"] = list(seeds)
        self.out = Path(out_dir)
        for sub in ("checkpoints", "tickets", "models", "cells", "logs"):
            (self.out / sub).mkdir(parents=True, exist_ok=True)
        _atomic_write(self.out / "config.resolved.json", json.dumps(self.resolved, indent=2, sort_keys=True).encode())
        self.config_hash = content_key(self.resolved)

    # ---- stage keys and artifact paths ----------------------------------
    def pretrain_key(self, scheme: str, seed: int) -> str:
        r = self.resolved
        return content_key(
            {
                "stage": "pretrain",
                "model": r["model"],
                "scheme": scheme,
                "adv": r.get("adv") if scheme == "adversarial" else None,
                "rs_sigma": r.get("rs_sigma") if scheme == "random_smoothing" else None,
                "train": r.get("pretrain"),
                "data": _data_key(r, seed),
                "seed": seed,
            }
        )

    def ckpt_path(self, key: str) -> Path:
        return self.out / "checkpoints" / f"{key}.ckpt"

    def ticket_key(self, ckpt_hash: str, prune_scheme: str, sparsity, seed: int) -> str:
        r = self.resolved
        return content_key(
            {
                "stage": "ticket",
                "upstream": ckpt_hash,
                "prune_scheme": prune_scheme,
                "sparsity": sparsity,
                "prune": r.get("prune"),
                "adv": r.get("adv"),
                "transfer": r.get("transfer"),
                "data": _data_key(r, seed),
                "seed": seed,
            }
        )

    def ticket_path(self, key: str) -> Path:
        return self.out / "tickets" / f"{key}.mask"

    def model_key(self, ticket_hash: str, mode: str, seed: int) -> str:
        r = self.resolved
        return content_key(
            {
                "stage": "transfer",
                "upstream": ticket_hash,
                "mode": mode,
                "transfer": r.get("transfer"),
                "data": _data_key(r, seed),
                "seed": seed,
            }
        )

    def model_path(self, key: str) -> Path:
        return self.out / "models" / f"{key}.ckpt"

    def eval_key(self, model_hash: str, ticket_hash: str, seed: int) -> str:
        r = self.resolved
        return content_key(
            {
                "stage": "eval",
                "model": model_hash,
                "ticket": ticket_hash,
                "eval": r.get("eval"),
                "adv": r.get("adv"),
                "data": _data_key(r, seed),
                "seed": seed,
            }
        )

    def cell_path(self, key: str) -> Path:
        return self.out / "cells" / f"{key}.json"

    # ---- planning --------------------------------------------------------
    def sparsity_grid(self, prune_scheme: str) -> list:
        prune = self.resolved["prune"]
        if prune_scheme == "imp":
            i = prune.get("imp") or {}
            return [round(s, 6) for s in geometric_schedule(i.get("rate", 0.2), i.get("rounds", 3))]
        return list(prune.get("sparsities", []))

    def plan_cells(self) -> list:
        cells = []
        r = self.resolved
        for seed in r["seeds"]:
            for pre_scheme in r["pretrain_schemes"]:
                for prune_scheme in r["prune"]["schemes"]:
                    for sparsity in self.sparsity_grid(prune_scheme):
                        for mode in r["transfer_modes"]:
                            cells.append(
                                {
                                    "seed": seed,
                                    "pretrain_scheme": pre_scheme,
                                    "prune_scheme": prune_scheme,
                                    "sparsity": sparsity,
                                    "granularity": r["prune"].get("granularity", "element")
                                    if prune_scheme == "omp"
                                    else "element",
                                    "mode": mode,
                                }
                            )
        return cells

    def cell_chain(self, cell: dict):
        """Resolve the (checkpoint, ticket, model, eval) keys for a cell;
        upstream artifacts must already exist for downstream keys."""
        ckpt_key = self.pretrain_key(cell["pretrain_scheme"], cell["seed"])
        ckpt_path = self.ckpt_path(ckpt_key)
        ticket_key = self.ticket_key(file_hash(ckpt_path), cell["prune_scheme"], cell["sparsity"], cell["seed"])
        ticket_path = self.ticket_path(ticket_key)
        model_key = self.model_key(file_hash(ticket_path), cell["mode"], cell["seed"])
        model_path = self.model_path(model_key)
        eval_key = self.eval_key(file_hash(model_path), file_hash(ticket_path), cell["seed"])
        return ckpt_path, ticket_path, model_path, self.cell_path(eval_key)


# ---- stage workers (top-level so process pools can pickle them) -----------


def _eval_adv_cfg(resolved: dict) -> AdvConfig | None:
    eval_cfg = resolved.get("eval") or {}
    adv = eval_cfg.get("adv", resolved.get("adv"))
    return AdvConfig.from_dict(adv) if adv else None


def run_pretrain_item(resolved: dict, out_dir: str, scheme: str, seed: int) -> str:
    run_ctx = ExperimentRun(ExperimentConfig.from_dict(resolved), out_dir)
    key = run_ctx.pretrain_key(scheme, seed)
    path = run_ctx.ckpt_path(key)
    if path.exists():
        return key
    source, _ = load_tasks(resolved, seed)
    spec = make_spec(resolved["model"], classes=source.classes, input_shape=tuple(source.train.images.shape[1:]))
    if scheme == "adversarial":
        ps = PretrainScheme("adversarial", adv=AdvConfig.from_dict(resolved["adv"]))
    elif scheme == "random_smoothing":
        ps = PretrainScheme("random_smoothing", sigma=resolved.get("rs_sigma", 0.1))
    else:
        ps = PretrainScheme("natural")
    cfg = _merge_train_cfg(resolved.get("pretrain"), seed)
    log_path = run_ctx.out / "logs" / f"pretrain_{key}.jsonl"
    with open(log_path, "w") as fh:
        ckpt = pretrain(spec, source, ps, cfg, log_fn=lambda rec: fh.write(canonical_json(rec) + "\n"))
    serialize.save_checkpoint(ckpt, path)
    return key


def run_ticket_item(resolved: dict, out_dir: str, pre_scheme: str, prune_scheme: str, sparsity, seed: int) -> str:
    run_ctx = ExperimentRun(ExperimentConfig.from_dict(resolved), out_dir)
    ckpt_path = run_ctx.ckpt_path(run_ctx.pretrain_key(pre_scheme, seed))
    ckpt_hash = file_hash(ckpt_path)
    key = run_ctx.ticket_key(ckpt_hash, prune_scheme, sparsity, seed)
    path = run_ctx.ticket_path(key)
    if path.exists():
        return key
    ckpt = serialize.load_checkpoint(ckpt_path)
    prune_cfg = resolved["prune"]
    if prune_scheme == "omp":
        ticket = omp(ckpt, sparsity, prune_cfg.get("granularity", "element"), prune_cfg.get("scope", "global"))
        save_ticket(ticket, path)
    elif prune_scheme == "imp":
        icfg = prune_cfg.get("imp") or {}
        schedule = geometric_schedule(icfg.get("rate", 0.2), icfg.get("rounds", 3))
        locus = icfg.get("locus", "downstream")
        source, target = load_tasks(resolved, seed)
        task = target if locus == "downstream" else source
        objective = "adversarial" if pre_scheme == "adversarial" else "natural"
        adv = AdvConfig.from_dict(resolved["adv"]) if objective == "adversarial" else None
        tcfg = _merge_train_cfg(resolved.get("transfer"), seed)
        tickets = imp(
            ckpt, task, objective, schedule, adv, tcfg, locus=locus, epochs_per_round=icfg.get("epochs_per_round", 1)
        )
        # one IMP run yields the whole grid; cache every round's ticket
        for grid_s, round_ticket in zip(run_ctx.sparsity_grid("imp"), tickets):
            round_path = run_ctx.ticket_path(run_ctx.ticket_key(ckpt_hash, "imp", grid_s, seed))
            if not round_path.exists():
                save_ticket(round_ticket, round_path)
    else:  # lmp
        lcfg = prune_cfg.get("lmp") or {}
        _, target = load_tasks(resolved, seed)
        tcfg = _merge_train_cfg(resolved.get("transfer"), seed)
        tcfg = dataclasses.replace(tcfg, epochs=max(lcfg.get("epochs", 2), 1), decay_epochs=())
        ticket = lmp(ckpt, target, float(sparsity), tcfg)
        save_ticket(ticket, path)
    return key


def run_transfer_item(resolved: dict, out_dir: str, cell: dict) -> str:
    """Train the transferred model for one cell and save it as a checkpoint."""
    run_ctx = ExperimentRun(ExperimentConfig.from_dict(resolved), out_dir)
    ckpt_path = run_ctx.ckpt_path(run_ctx.pretrain_key(cell["pretrain_scheme"], cell["seed"]))
    ticket_path = run_ctx.ticket_path(
        run_ctx.ticket_key(file_hash(ckpt_path), cell["prune_scheme"], cell["sparsity"], cell["seed"])
    )
    key = run_ctx.model_key(file_hash(ticket_path), cell["mode"], cell["seed"])
    path = run_ctx.model_path(key)
    if path.exists():
        return key

    ckpt = serialize.load_checkpoint(ckpt_path)
    ticket = load_ticket(ticket_path, ckpt)
    _, target = load_tasks(resolved, cell["seed"])
    tcfg = _merge_train_cfg(resolved.get("transfer"), cell["seed"])
    log_path = run_ctx.out / "logs" / f"transfer_{key}.jsonl"
    with open(log_path, "w") as fh:
        log_fn = lambda rec: fh.write(canonical_json(rec) + "\n")
        if cell["mode"] == "finetune":
            net, _ = finetune_whole(ticket, target, tcfg, eval_adv_cfg=None, ood_images=None, log_fn=log_fn)
        else:
            head, _ = linear_eval(ticket, target, tcfg, log_fn=log_fn)
            net = assemble_linear_model(ticket, head)
    metadata = dict(ckpt.metadata)
    metadata.update({"transfer_mode": cell["mode"], "transfer_seed": cell["seed"], "downstream_task": target.name})
    serialize.save_checkpoint(Checkpoint(net.spec, {k: t.data.copy() for k, t in net.params.items()}, metadata), path)
    return key


def run_eval_item(resolved: dict, out_dir: str, cell: dict) -> str:
    """Evaluate one transferred model; cell errors are recorded, not raised."""
    run_ctx = ExperimentRun(ExperimentConfig.from_dict(resolved), out_dir)
    ckpt_path, ticket_path, model_path, cell_file = run_ctx.cell_chain(cell)
    if cell_file.exists():
        return cell_file.stem

    record = {"key": dict(cell), "status": "ok"}
    try:
        ckpt = serialize.load_checkpoint(ckpt_path)
        ticket = load_ticket(ticket_path, ckpt)
        net = serialize.load_checkpoint(model_path).to_network()
        source, target = load_tasks(resolved, cell["seed"])
        eval_cfg = resolved.get("eval") or {}
        ood = source.test.images if eval_cfg.get("ood") == "source_test" else None
        report = evaluate_model(
            net,
            ticket.masks,
            target.test,
            adv_cfg=_eval_adv_cfg(resolved),
            ood_images=ood,
            n_bins=eval_cfg.get("ece_bins", 15),
        )
        record["metrics"] = report.to_dict()
        record["realized_sparsity"] = ticket.sparsity
        record["ticket_metadata"] = ticket.metadata()
    except Exception as exc:  # cell errors are recorded, the run continues
        record = {"key": dict(cell), "status": "error", "error": f"{type(exc).__name__}: {exc}"}
    _atomic_write(cell_file, (json.dumps(record, sort_keys=True, indent=1) + "\n").encode())
    return cell_file.stem


def run_fid(resolved: dict, out_dir: str, seed: int) -> float:
    """Feature-space distance between the pair, using the seed's naturally
    pretrained checkpoint as the fixed feature extractor."""
    run_ctx = ExperimentRun(ExperimentConfig.from_dict(resolved), out_dir)
    source, target = load_tasks(resolved, seed)
    scheme = "natural" if "natural" in resolved["pretrain_schemes"] else resolved["pretrain_schemes"][0]
    ckpt_path = run_ctx.ckpt_path(run_ctx.pretrain_key(scheme, seed))
    net = serialize.load_checkpoint(ckpt_path).to_network()
    n = (resolved.get("eval") or {}).get("fid_samples", 512)
    stats_a = gaussian_stats(net, source.test, max_samples=n)
    stats_b = gaussian_stats(net, target.test, max_samples=n)
    return frechet_distance(stats_a, stats_b)


@dataclasses.dataclass
class RunResult:
    report: dict
    report_path: Path
    all_ok: bool
    steps_executed: int
    cells_computed: int


def _map_stage(fn, argses, jobs: int):
    if jobs <= 1 or len(argses) <= 1:
        return [fn(*args) for args in argses]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*argses)))


def run(cfg_dict: dict, out_dir, seeds=None, jobs: int = 1, resume: bool = True) -> RunResult:
    """Execute the full pretrain -> prune -> transfer -> evaluate grid.

    Config errors abort before any work; cell errors are recorded in the
    report and the run continues. The written report depends only on the
    resolved config and seeds (no timestamps), so reruns are byte-identical.
    """
    cfg = ExperimentConfig.from_dict(cfg_dict)
    run_ctx = ExperimentRun(cfg, out_dir, seeds=seeds)
    resolved = run_ctx.resolved
    if not resume:
        for sub in ("checkpoints", "tickets", "models", "cells", "logs"):
            for p in (run_ctx.out / sub).glob("*"):
                p.unlink()

    steps_before = SGD.total_steps
    cells = run_ctx.plan_cells()
    computed = 0

    pretrain_items = sorted({(c["pretrain_scheme"], c["seed"]) for c in cells})
    todo = [
        (resolved, str(run_ctx.out), scheme, seed)
        for scheme, seed in pretrain_items
        if not run_ctx.ckpt_path(run_ctx.pretrain_key(scheme, seed)).exists()
    ]
    computed += len(todo)
    _map_stage(run_pretrain_item, todo, jobs)

    ticket_items = sorted({(c["pretrain_scheme"], c["prune_scheme"], c["sparsity"], c["seed"]) for c in cells}, key=str)
    todo = []
    for pre, prune_scheme, sparsity, seed in ticket_items:
        ckpt_path = run_ctx.ckpt_path(run_ctx.pretrain_key(pre, seed))
        tkey = run_ctx.ticket_key(file_hash(ckpt_path), prune_scheme, sparsity, seed)
        if not run_ctx.ticket_path(tkey).exists():
            todo.append((resolved, str(run_ctx.out), pre, prune_scheme, sparsity, seed))
    computed += len(todo)
    # IMP items share work across the grid; run those sequentially per (scheme, seed)
    _map_stage(run_ticket_item, todo, 1 if any(t[3] == "imp" for t in todo) else jobs)

    todo = [(resolved, str(run_ctx.out), cell) for cell in cells if not run_ctx.cell_chain(cell)[2].exists()]
    computed += len(todo)
    _map_stage(run_transfer_item, todo, jobs)

    todo = [(resolved, str(run_ctx.out), cell) for cell in cells if not run_ctx.cell_chain(cell)[3].exists()]
    computed += len(todo)
    _map_stage(run_eval_item, todo, jobs)

    fid_per_seed = {str(seed): run_fid(resolved, str(run_ctx.out), seed) for seed in resolved["seeds"]}

    cell_records = []
    for cell in cells:
        cell_records.append(json.loads(run_ctx.cell_chain(cell)[3].read_text()))
    cell_records.sort(key=lambda r: canonical_json(r["key"]))

    report = {
        "version": 1,
        "config_hash": run_ctx.config_hash,
        "resolved_config": resolved,
        "fid": {"per_seed": fid_per_seed},
        "cells": cell_records,
    }
    report_path = run_ctx.out / "report.json"
    _atomic_write(report_path, (json.dumps(report, sort_keys=True, indent=1) + "\n").encode())

    all_ok = all(r["status"] == "ok" for r in cell_records)
    return RunResult(
        report=report,
        report_path=report_path,
        all_ok=all_ok,
        steps_executed=SGD.total_steps - steps_before,
        cells_computed=computed,
    )


# ---- export ----------------------------------------------------------------

EXPORT_METRICS = ("accuracy", "adv_accuracy", "ece", "nll", "roc_auc")


def _series_label(pretrain_scheme: str, prune_scheme: str) -> str:
    return f"{pretrain_scheme}_{prune_scheme}"


def collect_series(report: dict) -> dict:
    """(mode, metric) -> {series -> {sparsity -> [per-seed values]}}"""
    out: dict = {}
    for rec in report["cells"]:
        if rec["status"] != "ok":
            continue
        key = rec["key"]
        label = _series_label(key["pretrain_scheme"], key["prune_scheme"])
        for metric in EXPORT_METRICS:
            value = rec["metrics"].get(metric)
            if value is None:
                continue
            table = out.setdefault((key["mode"], metric), {})
            table.setdefault(label, {}).setdefault(key["sparsity"], []).append(value)
    return out


def export_report(report: dict, out_dir, render_figures: bool = True) -> list:
    """Write one CSV per (mode, metric) plus winner tables and figures.

    Each CSV row is one sparsity; per-series columns carry the mean over
    seeds with min/max. Winner tables compare adversarial vs natural mean
    accuracy per sparsity, labelled Robust/Natural/Match (exact ties).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = collect_series(report)
    if not tables:
        raise ValueError("report has no successful cells to export")
    written = []

    for (mode, metric), series in sorted(tables.items()):
        labels = sorted(series)
        sparsities = sorted({s for v in series.values() for s in v})
        path = out_dir / f"{mode}_{metric}.csv"
        with open(path, "w") as fh:
            cols = ["sparsity"]
            for label in labels:
                cols += [f"{label}_mean", f"{label}_min", f"{label}_max"]
            fh.write(",".join(cols) + "\n")
            for s in sparsities:
                row = [repr(float(s))]
                for label in labels:
                    vals = series[label].get(s)
                    if vals:
                        row += [repr(float(np.mean(vals))), repr(float(np.min(vals))), repr(float(np.max(vals)))]
                    else:
                        row += ["", "", ""]
                fh.write(",".join(row) + "\n")
        written.append(path)

    for mode in sorted({m for m, _ in tables}):
        acc = tables.get((mode, "accuracy"), {})
        prune_schemes = sorted({label.split("_", 1)[1] for label in acc})
        rows = []
        for prune_scheme in prune_schemes:
            robust = acc.get(_series_label("adversarial", prune_scheme), {})
            natural = acc.get(_series_label("natural", prune_scheme), {})
            for s in sorted(set(robust) & set(natural)):
                r_mean = float(np.mean(robust[s]))
                n_mean = float(np.mean(natural[s]))
                winner = "Match" if r_mean == n_mean else ("Robust" if r_mean > n_mean else "Natural")
                rows.append((prune_scheme, s, r_mean, n_mean, winner))
        if rows:
            path = out_dir / f"{mode}_winner.csv"
            with open(path, "w") as fh:
                fh.write("prune_scheme,sparsity,robust_mean,natural_mean,winner\n")
                for prune_scheme, s, r_mean, n_mean, winner in rows:
                    fh.write(f"{prune_scheme},{repr(float(s))},{repr(r_mean)},{repr(n_mean)},{winner}\n")
            written.append(path)

    if render_figures:
        from .plots import render_sweep_figures

        written += render_sweep_figures(tables, out_dir)
    return written
