"""Endpoint evaluation, the matched-budget baseline, and the ablation protocol."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .config import ABLATION_SCALE, ConfigError, ExperimentConfig
from .planner import PlanFailure, PlannerConfig, derive_seeds, plan_batch
from .tasks import TaskMismatch, make_dataset
from .training import Checkpoint, build_model, direct_predictions, train

# -- ablation specs ---------------------------------------------------------


@dataclass
class AblationSpec:
    set_id: str
    arms: list  # (name, overrides)
    varied: tuple
    scale: dict = field(default_factory=lambda: dict(ABLATION_SCALE))


def build_ablation(set_id) -> AblationSpec:
    if set_id == "A":
        arms = [
            ("full", {}),
            ("no_contrastive", {"alpha_contr": 0.0}),
            ("no_smoothness", {"alpha_smooth": 0.0}),
            ("no_planning", {"planner_steps": 0}),
            ("no_energy", {"alpha_contr": 0.0, "alpha_smooth": 0.0, "planner_steps": 0}),
        ]
        varied = ("alpha_contr", "alpha_smooth", "planner_steps")
    elif set_id == "B":
        arms = [(f"T={t}", {"trajectory_length": t}) for t in (1, 2, 4, 8, 12)]
        varied = ("trajectory_length",)
    elif set_id == "C1":
        arms = [(f"K={k}", {"planner_steps": k}) for k in (5, 10, 25, 50, 100, 200)]
        varied = ("planner_steps",)
    elif set_id == "C2":
        arms = [("gd", {"langevin_noise": 0.0}), ("langevin", {"langevin_noise": 0.005})]
        varied = ("langevin_noise",)
    elif set_id == "C3":
        arms = [(f"lr={lr}", {"planner_lr": lr}) for lr in (0.001, 0.005, 0.01, 0.05)]
        varied = ("planner_lr",)
    elif set_id == "D":
        arms = [(s, {"init_strategy": s}) for s in ("encoder-seeded", "all-encoder", "zero")]
        varied = ("init_strategy",)
    elif set_id == "E":
        arms = [("single_path", {"dual_path": False}), ("dual_path", {"dual_path": True})]
        varied = ("dual_path",)
    elif set_id == "F":
        arms = [(f"anchor={a}", {"anchor_weight": a}) for a in (0.0, 0.01, 0.1, 1.0)]
        varied = ("anchor_weight",)
    else:
        raise ConfigError(f"unknown ablation set {set_id!r}")
    return AblationSpec(set_id, arms, varied)


ABLATION_SETS = ("A", "B", "C1", "C2", "C3", "D", "E", "F")


def arm_config(base: ExperimentConfig, spec: AblationSpec, overrides, seed):
    return base.replace(**spec.scale, **overrides, seed=seed)


# -- evaluation -------------------------------------------------------------


@dataclass
class EndpointResult:
    task: str
    direct_metric: float
    planner_metric: float | None
    direct_values: np.ndarray
    planner_values: np.ndarray | None
    drift_median: float | None = None
    final_energies: np.ndarray | None = None
    traces: list | None = None
    n_failures: int = 0
    extra: dict = field(default_factory=dict)

    def summary(self):
        out = {"task": self.task, "direct_metric": self.direct_metric, "planner_metric": self.planner_metric,
               "drift_median": self.drift_median, "planner_failures": self.n_failures}
        out.update(self.extra)
        return out


def _metric_values(task, preds, instances, scale):
    return np.array([M.instance_metric(task, p, inst, scale) for p, inst in zip(preds, instances)])


def evaluate_endpoint(ckpt: Checkpoint, instances, planner_cfg: PlannerConfig, seed=0, keep_traces=False):
    """Direct decode of ``h_x`` versus decode of the planner's final ``z_T``.

    With ``planner_cfg.steps == 0`` planning is disabled and the planner
    endpoint is the direct answer. Baseline checkpoints report direct only.
    """
    for inst in instances:
        if inst.task != ckpt.task:
            raise TaskMismatch(f"{inst.task} instance for a {ckpt.task} checkpoint")
    task, scale = ckpt.task, ckpt.config.arith_scale
    H, _ = M.encode_batch(ckpt.heads, instances)
    direct = M.decode(ckpt.heads, H)
    dv = _metric_values(task, direct, instances, scale)
    extra = {}
    if task == "graph":
        extra["direct_exact_match"] = 100.0 * float(np.mean([M.exact_match(p, i) for p, i in zip(direct, instances)]))
    if task == "arithmetic":
        extra["direct_mae"] = float(dv.mean())
    res = EndpointResult(task, M.aggregate_metric(task, dv), None, dv, None, extra=extra)
    if ckpt.energy is None:
        return res
    if planner_cfg.steps == 0:
        res.planner_metric, res.planner_values = res.direct_metric, dv.copy()
        res.drift_median = 0.0
        if task == "graph":
            extra["planner_exact_match"] = extra["direct_exact_match"]
        if task == "arithmetic":
            extra["planner_mae"] = extra["direct_mae"]
        return res
    out = plan_batch(ckpt.energy, H, planner_cfg, derive_seeds(seed, len(H)), T=ckpt.config.trajectory_length)
    ok = [i for i, r in enumerate(out) if not isinstance(r, PlanFailure)]
    res.n_failures = len(out) - len(ok)
    Z_last = np.stack([out[i][0][:, -1] if i in ok else H[i] * np.nan for i in range(len(out))])
    preds = M.decode(ckpt.heads, np.nan_to_num(Z_last))
    pv = _metric_values(task, preds, instances, scale)
    # diverged instances count as failures: worst-case metric
    for i in set(range(len(out))) - set(ok):
        pv[i] = 0.0 if task != "arithmetic" else np.inf
    res.planner_values = pv
    res.planner_metric = M.aggregate_metric(task, pv)
    traces = [out[i][1] for i in ok]
    res.drift_median = float(np.median([tr.drift[-1] for tr in traces])) if traces else float("nan")
    res.final_energies = np.array([tr.energies[-1, 3] for tr in traces])
    if task == "graph":
        extra["planner_exact_match"] = 100.0 * float(np.mean([M.exact_match(p, i) for p, i in zip(preds, instances)]))
    if task == "arithmetic":
        extra["planner_mae"] = float(pv.mean())
    if keep_traces:
        res.traces = [out[i][1] if i in ok else None for i in range(len(out))]
    return res


# -- baseline ---------------------------------------------------------------


def full_param_count(cfg: ExperimentConfig):
    heads, energy = build_model(cfg, np.random.default_rng(0))
    return heads.n_params + energy.n_params


def baseline_width(cfg: ExperimentConfig):
    """Head hidden width whose encoder+decoder size best matches the full system."""
    target = full_param_count(cfg)
    best = None
    for width in range(cfg.head_hidden, 8 * cfg.head_hidden + 1):
        heads, _ = build_model(cfg.replace(head_hidden=width), np.random.default_rng(0), with_energy=False)
        gap = abs(heads.n_params - target)
        if best is None or gap < best[1]:
            best = (width, gap)
        if heads.n_params > target:
            break
    return best[0]


def build_baseline(task, cfg: ExperimentConfig, rng=None):
    """Encoder/decoder only, widened to within 5% of the full system's parameter count."""
    cfg = cfg.replace(task=task)
    width = baseline_width(cfg)
    heads, _ = build_model(cfg.replace(head_hidden=width), rng or np.random.default_rng(cfg.seed), with_energy=False)
    target = full_param_count(cfg)
    if abs(heads.n_params - target) > 0.05 * target:
        raise ConfigError(f"baseline has {heads.n_params} params, full system {target}")
    return heads


def train_baseline(task, dataset, cfg: ExperimentConfig, log=None):
    cfg = cfg.replace(task=task, head_hidden=baseline_width(cfg.replace(task=task)))
    return train(task, dataset, cfg, baseline=True, log=log)


# -- ablation runner --------------------------------------------------------

RESULT_COLUMNS = ("task", "set", "arm", "seed", "direct_metric", "planner_metric", "drift_median", "epochs",
                  "wall_seconds")


@dataclass
class ResultsTable:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def keys(self):
        return {(r["task"], r["set"], r["arm"], int(r["seed"])) for r in self.rows}

    def append_csv(self, path, row):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
            if new:
                w.writeheader()
            w.writerow(row)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path) as f:
            for r in csv.DictReader(f):
                r = dict(r)
                r["seed"] = int(r["seed"])
                r["epochs"] = int(r["epochs"])
                for k in ("direct_metric", "planner_metric", "drift_median", "wall_seconds"):
                    r[k] = float(r[k])
                rows.append(r)
        return cls(rows)

    def lookup(self, arm, seed=None):
        return [r for r in self.rows if r["arm"] == arm and (seed is None or r["seed"] == seed)]


_TRAIN_EXCLUDE = ("out_dir", "planner_steps", "snapshot_stride")


def _run_arm(args):
    task, set_id, arm, cfg, cache_dir = args
    start = time.perf_counter()
    ds = make_dataset(task, cfg.seed, cfg.split_sizes, cfg.to_dict())
    ckpt = _cached_train(task, ds, cfg, cache_dir)
    res = evaluate_endpoint(ckpt, ds.test, PlannerConfig.from_experiment(cfg), seed=cfg.seed)
    return {"task": task, "set": set_id, "arm": arm, "seed": cfg.seed, "direct_metric": res.direct_metric,
            "planner_metric": res.planner_metric, "drift_median": res.drift_median, "epochs": cfg.epochs,
            "wall_seconds": time.perf_counter() - start}


_MEMO = {}


def _cached_train(task, ds, cfg, cache_dir=None):
    key = cfg.digest(exclude=_TRAIN_EXCLUDE)
    if key in _MEMO:
        return _MEMO[key]
    from .training import load_checkpoint, save_checkpoint

    path = Path(cache_dir) / f"ckpt-{task}-{key}" if cache_dir else None
    if path is not None and (path / "manifest.json").exists():
        ckpt = load_checkpoint(path)
        ckpt.config = cfg
    else:
        ckpt, _ = train(task, ds, cfg)
        if path is not None:
            save_checkpoint(ckpt, path)
    _MEMO[key] = ckpt
    return ckpt


def run_ablation(spec: AblationSpec, task, seeds, base: ExperimentConfig | None = None, out_csv=None,
                 workers=1, cache_dir=None, log=None):
    """Train and evaluate every arm x seed; rows already in ``out_csv`` are skipped."""
    if not seeds:
        raise ConfigError("at least one seed required")
    base = (base or ExperimentConfig()).replace(task=task)
    table = ResultsTable.from_csv(out_csv) if out_csv and Path(out_csv).exists() else ResultsTable()
    done = table.keys()
    jobs = []
    for arm, overrides in spec.arms:
        for seed in seeds:
            if (task, spec.set_id, arm, seed) in done:
                continue
            jobs.append((task, spec.set_id, arm, arm_config(base, spec, overrides, seed), cache_dir))

    def record(job, result):
        if isinstance(result, Exception):
            table.failures.append({"arm": job[2], "seed": job[3].seed, "error": repr(result)})
            if log:
                log(f"arm {job[2]} seed {job[3].seed} failed: {result!r}")
            return
        table.rows.append(result)
        if out_csv:
            table.append_csv(out_csv, result)
        if log:
            log(f"{spec.set_id}/{result['arm']} seed {result['seed']}: direct {result['direct_metric']:.2f} "
                f"planner {result['planner_metric']:.2f}")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job, pool.submit(_run_arm, job)) for job in jobs]
            for job, fut in futures:
                try:
                    record(job, fut.result())
                except Exception as e:  # noqa: BLE001 - one failed arm must not stop the set
                    record(job, e)
    else:
        for job in jobs:
            try:
                record(job, _run_arm(job))
            except Exception as e:  # noqa: BLE001
                record(job, e)
    return table
