"""Inference-time latent planning: gradient descent / Langevin updates on the
trajectory with clipping and optional anchoring, recording a full trace."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import EnergyTerms, energy_backward, energy_forward
from .nn_core import clip_by_norm


class PlannerDivergence(FloatingPointError):
    def __init__(self, step, message=None):
        super().__init__(message or f"non-finite trajectory after planner step {step}")
        self.step = step


@dataclass
class PlannerConfig:
    steps: int = 50
    lr: float = 0.01
    noise: float = 0.005
    clip_norm: float = 1.0
    anchor_weight: float = 0.0
    init: str = "encoder-seeded"
    init_sigma: float = 0.1
    snapshot_stride: int | None = None  # None: every step when steps <= 200, else 10

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.anchor_weight < 0:
            raise ValueError("anchor_weight must be >= 0")
        if self.init not in ("encoder-seeded", "all-encoder", "zero"):
            raise ValueError(f"unknown init strategy {self.init!r}")

    @property
    def stride(self):
        if self.snapshot_stride is not None:
            return self.snapshot_stride
        return 1 if self.steps <= 200 else 10

    @classmethod
    def from_experiment(cls, cfg, **overrides):
        kw = dict(steps=cfg.planner_steps, lr=cfg.planner_lr, noise=cfg.langevin_noise, clip_norm=cfg.clip_norm,
                  anchor_weight=cfg.anchor_weight, init=cfg.init_strategy, init_sigma=cfg.init_sigma,
                  snapshot_stride=cfg.snapshot_stride)
        kw.update(overrides)
        return cls(**kw)


@dataclass
class PlannerTrace:
    """Per-step record for one instance; index k is the state after k updates."""

    energies: np.ndarray  # (K+1, 4): step mean, trans mean, smoothness, total
    drift: np.ndarray  # (K+1,) ||z_T - h_x||
    grad_norms: np.ndarray  # (K+1, 4): total, step, trans, smooth (energy gradient only)
    snapshot_steps: list
    snapshots: np.ndarray  # (n_snap, d, T)
    final: np.ndarray
    h_x: np.ndarray
    failed_step: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_records(self):
        return len(self.drift)

    @property
    def best_step(self):
        return int(np.argmin(self.energies[:, 3]))

    def energy_terms(self, k):
        return EnergyTerms(*(float(v) for v in self.energies[k]))

    def z_at(self, k):
        try:
            return self.snapshots[self.snapshot_steps.index(k)]
        except ValueError:
            raise KeyError(f"no snapshot stored for step {k}; plan with snapshot_stride=1") from None

    def records(self):
        for k in range(self.n_records):
            rec = {"step": k, "step_mean": self.energies[k, 0], "trans_mean": self.energies[k, 1],
                   "smooth": self.energies[k, 2], "energy": self.energies[k, 3], "drift": self.drift[k],
                   "grad_total": self.grad_norms[k, 0], "grad_step": self.grad_norms[k, 1],
                   "grad_trans": self.grad_norms[k, 2], "grad_smooth": self.grad_norms[k, 3]}
            rec = {key: (float(v) if key != "step" else v) for key, v in rec.items()}
            if k in self.snapshot_steps:
                rec["z"] = self.z_at(k).tolist()
            yield rec


def write_traces(traces, path):
    """Line-delimited JSON: one header line per instance followed by its step records."""
    with open(path, "w") as f:
        for i, tr in enumerate(traces):
            head = {"instance": i, "records": tr.n_records, "h_x": tr.h_x.tolist(), "best_step": tr.best_step,
                    "failed_step": tr.failed_step, "final": tr.final.tolist()}
            f.write(json.dumps(head) + "\n")
            for rec in tr.records():
                f.write(json.dumps(rec) + "\n")


def read_traces(path):
    traces = []
    with open(path) as f:
        lines = [json.loads(line) for line in f]
    i = 0
    while i < len(lines):
        head = lines[i]
        recs = lines[i + 1 : i + 1 + head["records"]]
        i += 1 + head["records"]
        energies = np.array([[r["step_mean"], r["trans_mean"], r["smooth"], r["energy"]] for r in recs])
        grads = np.array([[r["grad_total"], r["grad_step"], r["grad_trans"], r["grad_smooth"]] for r in recs])
        snap = [r for r in recs if "z" in r]
        traces.append(PlannerTrace(
            energies, np.array([r["drift"] for r in recs]), grads, [r["step"] for r in snap],
            np.array([r["z"] for r in snap]), np.array(head["final"]), np.array(head["h_x"]), head["failed_step"],
        ))
    return traces


def init_trajectory(h_x, strategy, sigma, rng, T):
    h_x = np.asarray(h_x, dtype=np.float64)
    d = h_x.shape[0]
    if strategy == "zero":
        return np.zeros((d, T))
    if strategy == "encoder-seeded":
        z = np.zeros((d, T))
        z[:, 0] = h_x
        if T > 1:
            z[:, 1:] = sigma * rng.standard_normal((d, T - 1))
        return z
    if strategy == "all-encoder":
        return h_x[:, None] + sigma * rng.standard_normal((d, T))
    raise ValueError(f"unknown init strategy {strategy!r}")


def planner_objective(E, h_x, z, anchor_weight=0.0):
    """Energy plus anchor penalty ``anchor_weight * sum_t ||z_t - h_x||^2`` and its gradient in ``z``."""
    h_x = np.asarray(h_x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    terms, cache = energy_forward(E, h_x[None], z[None])
    _, g, _ = energy_backward(E, cache, np.ones(1))
    r = z - h_x[:, None]
    return float(terms.total[0]) + anchor_weight * float(np.sum(r * r)), g[0] + _anchor_grad(r, anchor_weight)


def _anchor_grad(residual, weight):
    return 2.0 * weight * residual


def _planner_core(E, H, Z, cfg: PlannerConfig, rngs, record=True):
    """Run ``cfg.steps`` updates on a batch of trajectories in place of ``Z`` (n, d, T)."""
    n, d, T = Z.shape
    K = cfg.steps
    stride = cfg.stride
    Hb = H[:, :, None]
    alive = np.ones(n, dtype=bool)
    failed = [None] * n
    if record:
        energies = np.zeros((n, K + 1, 4))
        drift = np.zeros((n, K + 1))
        gnorm = np.zeros((n, K + 1, 4))
        snap_steps = [k for k in range(K + 1) if k % stride == 0 or k == K]
        snaps = np.zeros((n, len(snap_steps), d, T))
    scale = np.sqrt(2.0 * cfg.lr) * cfg.noise
    for k in range(K + 1):
        if k == K and not record:
            break
        with np.errstate(all="ignore"):
            terms, cache = energy_forward(E, H, Z, check=False)
            _, g, parts = energy_backward(E, cache, np.ones(n))
        bad = alive & ~(np.isfinite(terms.total) & np.all(np.isfinite(g.reshape(n, -1)), axis=1))
        if bad.any():
            # overflow inside the energy counts as divergence at the update that caused it
            for i in np.flatnonzero(bad):
                failed[i] = k
            alive &= ~bad
        if not alive.all():
            terms = type(terms)(*(np.where(alive, t, np.nan) for t in terms.as_tuple()))
            g = np.where(alive[:, None, None], g, 0.0)
            parts = tuple(np.where(alive[:, None, None], p, 0.0) for p in parts)
        if record:
            energies[:, k] = np.stack(terms.as_tuple(), axis=1)
            drift[:, k] = np.linalg.norm(Z[:, :, -1] - H, axis=1)
            gnorm[:, k, 0] = np.linalg.norm(g.reshape(n, -1), axis=1)
            for j, p in enumerate(parts):
                gnorm[:, k, j + 1] = np.linalg.norm(p.reshape(n, -1), axis=1)
            if k in snap_steps:
                snaps[:, snap_steps.index(k)] = Z
        if k == K:
            break
        if cfg.anchor_weight:
            g = g + _anchor_grad(Z - Hb, cfg.anchor_weight)
        for i in np.flatnonzero(alive):
            step = clip_by_norm(g[i], cfg.clip_norm)
            Z[i] -= cfg.lr * step
            if scale:
                Z[i] += scale * rngs[i].standard_normal((d, T))
            if not np.all(np.isfinite(Z[i])):
                alive[i] = False
                failed[i] = k + 1
        if not alive.all():
            # frozen instances are parked at zero so batched evaluation stays finite
            Z[~alive] = 0.0
    if not record:
        return Z, failed, None
    traces = [PlannerTrace(energies[i], drift[i], gnorm[i], snap_steps, snaps[i], Z[i].copy(), H[i].copy(), failed[i])
              for i in range(n)]
    return Z, failed, traces


def plan(E, h_x, cfg: PlannerConfig, rng, T=8, z0=None):
    """Minimize the energy over one trajectory. Returns ``(z_star, trace)``.

    ``rng`` draws the initialization (unless ``z0`` is given) and the Langevin noise.
    Raises ``PlannerDivergence`` if the trajectory becomes non-finite.
    """
    h_x = np.asarray(h_x, dtype=np.float64)
    z = init_trajectory(h_x, cfg.init, cfg.init_sigma, rng, T) if z0 is None else np.array(z0, dtype=np.float64)
    Z, failed, traces = _planner_core(E, h_x[None], z[None].copy(), cfg, [rng])
    if failed[0] is not None:
        raise PlannerDivergence(failed[0])
    return Z[0], traces[0]


@dataclass
class PlanFailure:
    index: int
    step: int


def derive_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def plan_batch(E, H, cfg: PlannerConfig, seeds, T=8, record=True):
    """Plan every row of ``H`` with its own seed, vectorized across instances.

    Returns a list with ``(z_star, trace)`` per instance, or a ``PlanFailure``
    for instances whose trajectory diverged.
    """
    H = np.asarray(H, dtype=np.float64)
    if len(seeds) != len(H):
        raise ValueError("one seed per instance required")
    rngs = [np.random.default_rng(s) for s in seeds]
    Z = np.stack([init_trajectory(h, cfg.init, cfg.init_sigma, r, T) for h, r in zip(H, rngs)])
    Z, failed, traces = _planner_core(E, H, Z, cfg, rngs, record)
    out = []
    for i in range(len(H)):
        if failed[i] is not None:
            out.append(PlanFailure(i, failed[i]))
        else:
            out.append((Z[i], traces[i] if record else None))
    return out


def plan_final(E, H, cfg: PlannerConfig, rngs, T):
    """Unrecorded batched planning used inside training; returns final trajectories."""
    H = np.asarray(H, dtype=np.float64)
    Z = np.stack([init_trajectory(h, cfg.init, cfg.init_sigma, r, T) for h, r in zip(H, rngs)])
    Z, _, _ = _planner_core(E, H, Z, cfg, rngs, record=False)
    return Z
