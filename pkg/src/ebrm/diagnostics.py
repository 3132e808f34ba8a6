"""Analyses over planner traces and checkpoints: per-step decoding, drift,
gradient decomposition, correlations, PCA projection and energy slices.

All functions are pure given their inputs; file writers produce CSV or JSON.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import model as M


class UndefinedCorrelation(ValueError):
    """Raised instead of returning NaN when a series has zero variance."""


class MissingSnapshots(KeyError):
    pass


@dataclass
class StepMetricGrid:
    values: np.ndarray  # (n_instances, K+1)
    steps: list

    @property
    def column_means(self):
        return self.values.mean(axis=0)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["instance"] + [f"step_{k}" for k in self.steps])
            for i, row in enumerate(self.values):
                w.writerow([i] + [repr(float(v)) for v in row])


def per_step_decode(traces, heads, instances, arith_scale=1000.0):
    """Entry (i, k) is the task metric of decoding z_T after k planner updates of instance i."""
    n_steps = traces[0].n_records
    for tr in traces:
        if tr.snapshot_steps != list(range(n_steps)):
            raise MissingSnapshots("per-step decoding needs a snapshot at every step; plan with snapshot_stride=1")
    grid = np.zeros((len(traces), n_steps))
    for i, (tr, inst) in enumerate(zip(traces, instances)):
        preds = M.decode(heads, tr.snapshots[:, :, -1])
        grid[i] = [M.instance_metric(heads.task, p, inst, arith_scale) for p in preds]
    return StepMetricGrid(grid, list(range(n_steps)))


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 3:
        raise ValueError("pearson needs two equal-length series of length >= 3")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("correlation undefined for a constant series")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def spearman(a, b):
    """Rank correlation (average ranks for ties) built on ``pearson``."""
    from scipy.stats import rankdata

    return pearson(rankdata(a), rankdata(b))


# -- PCA --------------------------------------------------------------------


class DegenerateSpectrum(ValueError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


@dataclass
class PcaResult:
    coords: np.ndarray  # (n, k)
    components: np.ndarray  # (k, dim)
    eigenvalues: np.ndarray
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray


def _top_eigenpair(C, rng, scale, iters=20000):
    v = rng.standard_normal(C.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = C @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, v
        v = w / nw
        Cv = C @ v
        lam = float(v @ Cv)
        if np.linalg.norm(Cv - lam * v) <= 1e-10 * scale:
            break
    return lam, v


def pca_project(points, components=2, seed=0):
    """Project points onto the leading principal directions (power iteration + deflation).

    Raises ``DegenerateSpectrum`` (carrying the partial result) when fewer than
    ``components`` directions have nonzero variance.
    """
    X = np.asarray([np.ravel(p) for p in points], dtype=np.float64)
    if X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError("need at least 3 points of dimension >= 2")
    mean = X.mean(axis=0)
    Xc = X - mean
    # work in the smaller of the two Gram spaces
    small = Xc.shape[0] < Xc.shape[1]
    C = (Xc @ Xc.T if small else Xc.T @ Xc) / (X.shape[0] - 1)
    total = float(np.trace(C))
    rng = np.random.default_rng(seed)
    lams, vecs = [], []
    A = C.copy()
    for _ in range(components):
        lam, v = _top_eigenpair(A, rng, max(total, 1e-300))
        lams.append(max(lam, 0.0))
        vecs.append(v)
        A = A - lam * np.outer(v, v)
    comps = []
    for lam, v in zip(lams, vecs):
        if small:
            u = Xc.T @ v
            nu = np.linalg.norm(u)
            u = u / nu if nu > 0 else np.zeros(X.shape[1])
        else:
            u = v
        comps.append(u)
    comps = np.array(comps)
    lams = np.array(lams)
    scale = max(total, 1e-300)
    valid = lams > 1e-12 * scale
    comps[~valid] = 0.0
    lams[~valid] = 0.0
    explained = lams / total if total > 0 else np.zeros_like(lams)
    res = PcaResult(Xc @ comps.T, comps, lams, explained, mean)
    if not valid.all():
        raise DegenerateSpectrum(f"only {int(valid.sum())} nonzero principal direction(s)", res)
    return res


def write_pca_csv(result: PcaResult, path, colors=None, labels=None):
    """Coordinates plus an optional metric column used for colouring."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "pc1", "pc2", "metric"])
        for i, row in enumerate(result.coords):
            lab = labels[i] if labels is not None else i
            c = "" if colors is None else repr(float(colors[i]))
            w.writerow([lab, repr(float(row[0])), repr(float(row[1]) if len(row) > 1 else 0.0), c])


# -- landscape --------------------------------------------------------------


@dataclass
class LandscapeSlice:
    u: np.ndarray
    v: np.ndarray
    offsets: np.ndarray
    energies: np.ndarray  # (resolution, resolution), [i, j] at (offsets[i], offsets[j])

    @property
    def energy_range(self):
        return float(self.energies.max() - self.energies.min())

    def to_json(self, path):
        blob = {"offsets": self.offsets.tolist(), "energies": self.energies.tolist(), "range": self.energy_range,
                "u": self.u.tolist(), "v": self.v.tolist()}
        with open(path, "w") as f:
            json.dump(blob, f)


def landscape_slice(E, h_x, z_center, extent, resolution, rng):
    """Total energy on ``z_center + a*u + b*v`` for random orthonormal u, v in the d x T space."""
    if resolution < 3:
        raise ValueError("resolution must be >= 3")
    z_center = np.asarray(z_center, dtype=np.float64)
    shape = z_center.shape
    u = rng.standard_normal(z_center.size)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(z_center.size)
    v -= (u @ v) * u
    v /= np.linalg.norm(v)
    offsets = np.linspace(-extent, extent, resolution)
    A, B = np.meshgrid(offsets, offsets, indexing="ij")
    Z = z_center[None] + (A.reshape(-1, 1) * u + B.reshape(-1, 1) * v).reshape(-1, *shape)
    H = np.broadcast_to(np.asarray(h_x, dtype=np.float64), (len(Z), len(h_x)))
    terms, _ = M.energy_forward(E, H, Z)
    return LandscapeSlice(u.reshape(shape), v.reshape(shape), offsets, terms.total.reshape(resolution, resolution))


# -- trace summaries --------------------------------------------------------


def drift_curve(trace):
    return np.array(trace.drift, copy=True)


def grad_decomposition_summary(trace):
    """Per-step (step, transition, smoothness) gradient norms, shape (K+1, 3)."""
    return np.array(trace.grad_norms[:, 1:], copy=True)


def correlate_energy_quality(final_energies, final_metrics, path=None):
    """Pearson r between final energies and per-instance quality; optionally writes the scatter CSV."""
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["energy", "metric"])
            for e, m in zip(final_energies, final_metrics):
                w.writerow([repr(float(e)), repr(float(m))])
    return pearson(final_energies, final_metrics)


def write_series_csv(path, columns: dict):
    names = list(columns)
    n = len(next(iter(columns.values())))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(names)
        for i in range(n):
            w.writerow([repr(float(columns[c][i])) if not isinstance(columns[c][i], (int, np.integer)) else int(columns[c][i])
                        for c in names])
