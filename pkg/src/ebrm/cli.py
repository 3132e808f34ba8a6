"""Command-line entry point: ``ebrm <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Errors go to stderr
prefixed ``ebrm: error[usage]:`` or ``ebrm: error[runtime]:``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as D
from . import experiments as X
from .config import ConfigError, load_config
from .model import aggregate_metric, encode_batch
from .planner import PlannerConfig, derive_seeds, plan_batch, read_traces, write_traces
from .tasks import TASKS, load_dataset, make_dataset, save_dataset
from .training import load_checkpoint, save_checkpoint, train

SEED_ENV = "EBRM_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def content_hash(path):
    """Git blob hash of a file, or of every file under a directory."""
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    h = hashlib.sha1()
    for p in files:
        data = p.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{p.relative_to(path) if path.is_dir() else p.name} {blob}\n".encode())
    return h.hexdigest() if path.is_dir() else blob


def resolve_config(args, base=None):
    cfg = load_config(args.config) if args.config else (base or load_config())
    overrides = {}
    if args.task:
        overrides["task"] = args.task
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    if seed is not None:
        overrides["seed"] = seed
    if args.out:
        overrides["out_dir"] = args.out
    return cfg.replace(**overrides)


def write_manifest(out, command, cfg, inputs):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "argv": sys.argv[1:], "seed": cfg.seed, "config_hash": cfg.digest(),
                "config": cfg.to_dict(), "inputs": {str(p): content_hash(p) for p in inputs if p}}
    (out / f"manifest-{command}.json").write_text(json.dumps(manifest, indent=2))


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data, task=cfg.task)
    return make_dataset(cfg.task, cfg.seed, cfg.split_sizes, cfg.to_dict())


def _test_set(args, ckpt):
    if args.data:
        return load_dataset(args.data, task=ckpt.task).test
    c = ckpt.config
    return make_dataset(c.task, c.seed, c.split_sizes, c.to_dict()).test


def _log(msg):
    print(msg, file=sys.stderr)


# -- commands ---------------------------------------------------------------


def cmd_generate(args):
    cfg = resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(cfg.task, cfg.seed, cfg.split_sizes, cfg.to_dict())
    path = out / f"dataset-{cfg.task}-{cfg.seed}.jsonl"
    save_dataset(ds, path)
    write_manifest(out, "generate", cfg, [args.config])
    print(path)


def cmd_train(args):
    cfg = resolve_config(args)
    ds = _dataset(args, cfg)
    ckpt, history = train(cfg.task, ds, cfg, log=None if args.quiet else _log)
    out = Path(cfg.out_dir)
    save_checkpoint(ckpt, out / "checkpoint")
    history.to_csv(out / "history.csv")
    write_manifest(out, "train", cfg, [args.config, args.data])
    print(out / "checkpoint")


def _ckpt_and_cfg(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=ckpt.config)
    if cfg.task != ckpt.task:
        raise UsageError(f"--task {cfg.task} does not match checkpoint task {ckpt.task}")
    return ckpt, cfg


def cmd_eval(args):
    ckpt, cfg = _ckpt_and_cfg(args)
    test = _test_set(args, ckpt)
    res = X.evaluate_endpoint(ckpt, test, PlannerConfig.from_experiment(cfg), seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = res.summary()
    summary["n_test"] = len(test)
    (out / "endpoint.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "eval", cfg, [args.config, args.checkpoint, args.data])
    print(json.dumps(summary))


def _plan_test(ckpt, cfg, test, stride=None):
    H, _ = encode_batch(ckpt.heads, test)
    pcfg = PlannerConfig.from_experiment(cfg, snapshot_stride=stride)
    return plan_batch(ckpt.energy, H, pcfg, derive_seeds(cfg.seed, len(H)), T=ckpt.config.trajectory_length)


def cmd_plan(args):
    ckpt, cfg = _ckpt_and_cfg(args)
    if ckpt.energy is None:
        raise UsageError("baseline checkpoints have no energy model to plan with")
    test = _test_set(args, ckpt)
    if args.limit:
        test = test[: args.limit]
    results = _plan_test(ckpt, cfg, test)
    traces = [r[1] for r in results if not isinstance(r, X.PlanFailure)]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_traces(traces, out / "traces.jsonl")
    write_manifest(out, "plan", cfg, [args.config, args.checkpoint, args.data])
    if len(traces) < len(results):
        _log(f"{len(results) - len(traces)} instance(s) diverged and were skipped")
    print(out / "traces.jsonl")


def cmd_diagnose(args):
    ckpt, cfg = _ckpt_and_cfg(args)
    if ckpt.energy is None:
        raise UsageError("baseline checkpoints have no energy model to diagnose")
    test = _test_set(args, ckpt)
    if args.limit:
        test = test[: args.limit]
    if args.traces:
        traces = read_traces(args.traces)
        if len(traces) != len(test):
            raise UsageError(f"{len(traces)} traces for {len(test)} test instances")
    else:
        results = _plan_test(ckpt, cfg, test, stride=1)
        keep = [i for i, r in enumerate(results) if not isinstance(r, X.PlanFailure)]
        traces = [results[i][1] for i in keep]
        test = [test[i] for i in keep]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scale = ckpt.config.arith_scale

    grid = D.per_step_decode(traces, ckpt.heads, test, scale)
    grid.to_csv(out / "per_step_grid.csv")
    steps = np.arange(traces[0].n_records)
    drift = np.array([D.drift_curve(tr) for tr in traces])
    D.write_series_csv(out / "drift.csv", {"step": steps, "median": np.median(drift, axis=0),
                                           "mean": drift.mean(axis=0)})
    energies = np.array([tr.energies for tr in traces])  # (n, K+1, 4)
    D.write_series_csv(out / "energy_trace.csv", {"step": steps, "total": energies[:, :, 3].mean(axis=0),
                                                  "step_mean": energies[:, :, 0].mean(axis=0),
                                                  "trans_mean": energies[:, :, 1].mean(axis=0),
                                                  "smooth": energies[:, :, 2].mean(axis=0)})
    grads = np.array([D.grad_decomposition_summary(tr) for tr in traces]).mean(axis=0)
    D.write_series_csv(out / "grad_decomposition.csv", {"step": steps, "step_grad": grads[:, 0],
                                                        "trans_grad": grads[:, 1], "smooth_grad": grads[:, 2]})
    summary = {"n": len(traces), "step0_metric": aggregate_metric(ckpt.task, grid.values[:, 0]),
               "final_metric": aggregate_metric(ckpt.task, grid.values[:, -1]),
               "median_final_drift": float(np.median(drift[:, -1]))}
    try:
        summary["energy_quality_r"] = D.correlate_energy_quality(energies[:, -1, 3], grid.values[:, -1],
                                                                 out / "energy_quality.csv")
    except (D.UndefinedCorrelation, ValueError) as e:
        summary["energy_quality_r"] = None
        _log(f"energy/quality correlation skipped: {e}")
    try:
        pca = D.pca_project([tr.final for tr in traces], seed=cfg.seed)
    except D.DegenerateSpectrum as e:
        pca = e.result
    D.write_pca_csv(pca, out / "pca.csv", colors=grid.values[:, -1])
    sl = D.landscape_slice(ckpt.energy, traces[0].h_x, traces[0].final, args.extent, args.resolution,
                           np.random.default_rng(cfg.seed))
    sl.to_json(out / "landscape.json")
    summary["landscape_range"] = sl.energy_range
    (out / "diagnostics.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "diagnose", cfg, [args.config, args.checkpoint, args.data, args.traces])
    print(json.dumps(summary))


def cmd_ablate(args):
    cfg = resolve_config(args)
    spec = X.build_ablation(args.set)
    seeds = args.seeds or [cfg.seed + i for i in range(3)]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = X.run_ablation(spec, cfg.task, seeds, cfg, out / f"ablation-{args.set}-{cfg.task}.csv",
                           workers=args.workers, cache_dir=out / "cache", log=_log)
    write_manifest(out, "ablate", cfg, [args.config])
    if table.failures:
        (out / f"ablation-{args.set}-{cfg.task}-failures.json").write_text(json.dumps(table.failures, indent=2))
        raise RuntimeError(f"{len(table.failures)} arm run(s) failed; see failures JSON")


def cmd_baseline(args):
    cfg = resolve_config(args)
    ds = _dataset(args, cfg)
    ckpt, history = X.train_baseline(cfg.task, ds, cfg, log=None if args.quiet else _log)
    out = Path(cfg.out_dir)
    save_checkpoint(ckpt, out / "baseline")
    history.to_csv(out / "baseline-history.csv")
    res = X.evaluate_endpoint(ckpt, ds.test, PlannerConfig.from_experiment(cfg))
    summary = {**res.summary(), "head_hidden": ckpt.config.head_hidden, "n_params": ckpt.heads.n_params,
               "full_system_params": X.full_param_count(cfg)}
    (out / "baseline.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "baseline", cfg, [args.config, args.data])
    print(json.dumps(summary))


def build_parser():
    p = _Parser(prog="ebrm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, checkpoint=False, data=True):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="TOML config; unspecified keys take defaults")
        s.add_argument("--task", choices=TASKS)
        s.add_argument("--seed", type=int, help=f"overrides config seed (or set {SEED_ENV})")
        s.add_argument("--out", help="output directory (default: config out_dir)")
        if checkpoint:
            s.add_argument("--checkpoint", required=True)
        if data:
            s.add_argument("--data", help="dataset JSONL from `generate` (default: regenerate from seed)")
        s.set_defaults(fn=fn)
        return s

    add("generate", cmd_generate, "write a dataset JSONL", data=False)
    add("train", cmd_train, "train encoder, decoder and energy model").add_argument("--quiet", action="store_true")
    add("eval", cmd_eval, "direct vs planner endpoint metrics", checkpoint=True)
    add("plan", cmd_plan, "run the planner on the test split and write traces",
        checkpoint=True).add_argument("--limit", type=int)
    s = add("diagnose", cmd_diagnose, "per-step decoding, drift, energy and landscape outputs", checkpoint=True)
    s.add_argument("--traces", help="traces JSONL from `plan` (needs snapshots at every step)")
    s.add_argument("--limit", type=int)
    s.add_argument("--extent", type=float, default=1.0)
    s.add_argument("--resolution", type=int, default=21)
    s = add("ablate", cmd_ablate, "run one ablation set", data=False)
    s.add_argument("--set", required=True, choices=X.ABLATION_SETS)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--workers", type=int, default=1)
    add("baseline", cmd_baseline, "train the matched-size encoder/decoder baseline").add_argument(
        "--quiet", action="store_true")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except UsageError as e:
        print(f"ebrm: error[usage]: {e}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as e:
        print(f"ebrm: error[usage]: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"ebrm: error[runtime]: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
