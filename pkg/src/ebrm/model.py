"""Task encoders/decoders and the decomposed trajectory energy.

Trajectories are ``(d, T)`` matrices; batched code uses ``(n, d, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import Mlp, init_mlp, mlp_backward, mlp_forward, sigmoid
from .tasks import N_MAX, OPERATORS, TaskMismatch, sat_fraction


class NumericError(FloatingPointError):
    pass


# -- energy -----------------------------------------------------------------


@dataclass
class EnergyParams:
    step: Mlp  # s_theta: [h_x; z_t] -> score
    trans: Mlp  # s_phi: [z_t; z_{t+1}] -> score
    glob: Mlp  # f_global: (step mean, trans mean, smoothness) -> energy

    def named_arrays(self):
        return {**self.step.named_arrays("energy.step."), **self.trans.named_arrays("energy.trans."),
                **self.glob.named_arrays("energy.global.")}

    def zeros_like(self):
        return EnergyParams(self.step.zeros_like(), self.trans.zeros_like(), self.glob.zeros_like())

    def copy(self):
        return EnergyParams(self.step.copy(), self.trans.copy(), self.glob.copy())

    @property
    def n_params(self):
        return self.step.n_params + self.trans.n_params + self.glob.n_params


def init_energy(rng, d, hidden=128, layers=3, global_hidden=16):
    scorer = [2 * d] + [hidden] * (layers - 1) + [1]
    return EnergyParams(init_mlp(rng, scorer), init_mlp(rng, scorer), init_mlp(rng, [3, global_hidden, 1]))


@dataclass
class EnergyTerms:
    step_mean: object
    trans_mean: object
    smooth: object
    total: object

    def as_tuple(self):
        return (self.step_mean, self.trans_mean, self.smooth, self.total)


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite value in energy term {name!r}")


def energy_forward(params: EnergyParams, H, Z, check=True):
    """Batched energy. ``H``: (n, d), ``Z``: (n, d, T). Returns per-instance terms and a cache.

    With ``check=False`` non-finite values are returned instead of raising.
    """
    H = np.asarray(H, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    n, d, T = Z.shape
    Zt = Z.transpose(0, 2, 1)  # (n, T, d)
    step_in = np.concatenate([np.broadcast_to(H[:, None, :], (n, T, d)), Zt], axis=2).reshape(n * T, 2 * d)
    s_step, tape_step = mlp_forward(params.step, step_in)
    step_mean = s_step.reshape(n, T).mean(axis=1)
    if check:
        _check_finite("step", step_mean)
    if T > 1:
        trans_in = np.concatenate([Zt[:, :-1], Zt[:, 1:]], axis=2).reshape(n * (T - 1), 2 * d)
        s_trans, tape_trans = mlp_forward(params.trans, trans_in)
        trans_mean = s_trans.reshape(n, T - 1).mean(axis=1)
        diff = Zt[:, 1:] - Zt[:, :-1]
        smooth = (diff**2).sum(axis=(1, 2)) / (T - 1)
    else:
        tape_trans, diff = None, None
        trans_mean = np.zeros(n)
        smooth = np.zeros(n)
    if check:
        _check_finite("transition", trans_mean)
        _check_finite("smoothness", smooth)
    feats = np.stack([step_mean, trans_mean, smooth], axis=1)
    total, tape_glob = mlp_forward(params.glob, feats)
    total = total[:, 0]
    if check:
        _check_finite("total", total)
    cache = dict(shape=(n, d, T), tape_step=tape_step, tape_trans=tape_trans, tape_glob=tape_glob, diff=diff)
    return EnergyTerms(step_mean, trans_mean, smooth, total), cache


def energy_backward(params: EnergyParams, cache, upstream, param_grads=False):
    """Backprop ``sum(upstream * total)``.

    Returns ``(energy param grads or None, grad_Z, (grad_step, grad_trans, grad_smooth))``
    with every Z-shaped array in (n, d, T) layout.
    """
    n, d, T = cache["shape"]
    up = np.asarray(upstream, dtype=np.float64).reshape(n, 1)
    g_glob, g_feats = mlp_backward(params.glob, cache["tape_glob"], up, param_grads)
    g1, g2, g3 = g_feats[:, 0], g_feats[:, 1], g_feats[:, 2]

    up_step = np.repeat(g1 / T, T)[:, None]
    g_step_p, g_in = mlp_backward(params.step, cache["tape_step"], up_step, param_grads)
    grad_step = g_in.reshape(n, T, 2 * d)[:, :, d:]

    grad_trans = np.zeros((n, T, d))
    grad_smooth = np.zeros((n, T, d))
    g_trans_p = params.trans.zeros_like() if param_grads else None
    if T > 1:
        up_trans = np.repeat(g2 / (T - 1), T - 1)[:, None]
        g_trans_p, g_in = mlp_backward(params.trans, cache["tape_trans"], up_trans, param_grads)
        g_in = g_in.reshape(n, T - 1, 2 * d)
        grad_trans[:, :-1] += g_in[:, :, :d]
        grad_trans[:, 1:] += g_in[:, :, d:]
        dd = cache["diff"] * (2.0 * g3 / (T - 1))[:, None, None]
        grad_smooth[:, 1:] += dd
        grad_smooth[:, :-1] -= dd

    parts = tuple(np.ascontiguousarray(g.transpose(0, 2, 1)) for g in (grad_step, grad_trans, grad_smooth))
    grad_Z = parts[0] + parts[1] + parts[2]
    grads = EnergyParams(g_step_p, g_trans_p, g_glob) if param_grads else None
    return grads, grad_Z, parts


def energy(params: EnergyParams, h_x, z) -> EnergyTerms:
    terms, _ = energy_forward(params, np.asarray(h_x)[None], np.asarray(z)[None])
    return EnergyTerms(*(float(v[0]) for v in terms.as_tuple()))


def energy_grad_z(params: EnergyParams, h_x, z):
    """Gradient of total energy w.r.t. ``z`` plus its step/transition/smoothness parts."""
    _, cache = energy_forward(params, np.asarray(h_x)[None], np.asarray(z)[None])
    _, g, parts = energy_backward(params, cache, np.ones(1))
    return g[0], tuple(p[0] for p in parts)


# -- task heads -------------------------------------------------------------

ARITH_VOCAB = [str(i) for i in range(100)] + list(OPERATORS) + ["(", ")"]
_ARITH_INDEX = {t: i for i, t in enumerate(ARITH_VOCAB)}


@dataclass
class TaskHeads:
    task: str
    encoder: dict  # name -> Mlp
    decoder: Mlp
    embedding: np.ndarray | None = None
    n_max: int = N_MAX
    n_vars: int = 5

    def named_arrays(self):
        out = {}
        for name, mlp in self.encoder.items():
            out.update(mlp.named_arrays(f"encoder.{name}."))
        if self.embedding is not None:
            out["encoder.embedding"] = self.embedding
        out.update(self.decoder.named_arrays("decoder."))
        return out

    def zeros_like(self):
        emb = None if self.embedding is None else np.zeros_like(self.embedding)
        return TaskHeads(self.task, {k: m.zeros_like() for k, m in self.encoder.items()}, self.decoder.zeros_like(),
                         emb, self.n_max, self.n_vars)

    def copy(self):
        emb = None if self.embedding is None else self.embedding.copy()
        return TaskHeads(self.task, {k: m.copy() for k, m in self.encoder.items()}, self.decoder.copy(),
                         emb, self.n_max, self.n_vars)

    @property
    def n_params(self):
        n = sum(m.n_params for m in self.encoder.values()) + self.decoder.n_params
        return n + (0 if self.embedding is None else self.embedding.size)

    @property
    def out_dim(self):
        return self.decoder.out_dim


def _stack(in_dim, hidden, layers, out_dim):
    return [in_dim] + [hidden] * (layers - 1) + [out_dim]


def init_heads(rng, task, d=64, hidden=128, layers=2, n_max=N_MAX, n_vars=5, embed_dim=32, arith_decoder_layers=3):
    if task == "graph":
        in_dim = 3 * n_max + n_max * n_max
        enc = {"mlp": init_mlp(rng, _stack(in_dim, hidden, layers, d))}
        dec = init_mlp(rng, _stack(d, hidden, layers, n_max))
        return TaskHeads(task, enc, dec, None, n_max, n_vars)
    if task == "arithmetic":
        emb = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(len(ARITH_VOCAB), embed_dim))
        enc = {"mlp": init_mlp(rng, _stack(embed_dim, hidden, layers, d))}
        dec = init_mlp(rng, _stack(d, hidden, arith_decoder_layers, 1))
        return TaskHeads(task, enc, dec, emb, n_max, n_vars)
    if task == "logic":
        enc = {"clause": init_mlp(rng, _stack(n_vars, hidden, layers, hidden)),
               "mlp": init_mlp(rng, _stack(hidden, hidden, layers, d))}
        dec = init_mlp(rng, _stack(d, hidden, layers, n_vars))
        return TaskHeads(task, enc, dec, None, n_max, n_vars)
    raise TaskMismatch(f"unknown task {task!r}")


def graph_features(inst, n_max=N_MAX):
    """Node mask, padded adjacency, one-hot source and one-hot destination."""
    mask = np.zeros(n_max)
    mask[: inst.n] = 1.0
    adj = np.zeros((n_max, n_max))
    adj[: inst.n, : inst.n] = inst.adjacency
    src = np.zeros(n_max)
    src[inst.source] = 1.0
    dst = np.zeros(n_max)
    dst[inst.destination] = 1.0
    return np.concatenate([mask, adj.ravel(), src, dst])


def clause_rows(inst):
    """One row per clause: +1 / -1 for positive / negative literals, 0 elsewhere."""
    rows = np.zeros((len(inst.clauses), inst.n_vars))
    for i, clause in enumerate(inst.clauses):
        for v, p in clause:
            rows[i, v] = 1.0 if p else -1.0
    return rows


def _pool_matrix(lengths):
    P = np.zeros((len(lengths), sum(lengths)))
    start = 0
    for i, n in enumerate(lengths):
        P[i, start : start + n] = 1.0 / n
        start += n
    return P


def _check_task(heads, instances):
    for inst in instances:
        if inst.task != heads.task:
            raise TaskMismatch(f"{inst.task} instance given to {heads.task} heads")


def encode_batch(heads: TaskHeads, instances):
    """Encode a list of instances to ``H`` (n, d); the cache feeds ``encode_backward``."""
    _check_task(heads, instances)
    if heads.task == "graph":
        X = np.stack([graph_features(inst, heads.n_max) for inst in instances])
        H, tape = mlp_forward(heads.encoder["mlp"], X)
        return H, {"tape": tape}
    if heads.task == "arithmetic":
        ids = np.concatenate([[_ARITH_INDEX[t] for t in inst.tokens] for inst in instances]).astype(int)
        P = _pool_matrix([len(inst.tokens) for inst in instances])
        pooled = P @ heads.embedding[ids]
        H, tape = mlp_forward(heads.encoder["mlp"], pooled)
        return H, {"tape": tape, "ids": ids, "P": P}
    rows = np.concatenate([clause_rows(inst) for inst in instances])
    P = _pool_matrix([len(inst.clauses) for inst in instances])
    C, tape_c = mlp_forward(heads.encoder["clause"], rows)
    H, tape = mlp_forward(heads.encoder["mlp"], P @ C)
    return H, {"tape": tape, "tape_clause": tape_c, "P": P}


def encode_backward(heads: TaskHeads, cache, dH):
    """Parameter gradients (as a ``TaskHeads``; decoder part zero) for ``sum(dH * H)``."""
    grads = heads.zeros_like()
    g_mlp, d_in = mlp_backward(heads.encoder["mlp"], cache["tape"], dH)
    grads.encoder["mlp"] = g_mlp
    if heads.task == "arithmetic":
        d_rows = cache["P"].T @ d_in
        np.add.at(grads.embedding, cache["ids"], d_rows)
    elif heads.task == "logic":
        g_clause, _ = mlp_backward(heads.encoder["clause"], cache["tape_clause"], cache["P"].T @ d_in)
        grads.encoder["clause"] = g_clause
    return grads


def encode(heads: TaskHeads, instance):
    H, _ = encode_batch(heads, [instance])
    return H[0]


def decode_logits(heads: TaskHeads, Z_last):
    return mlp_forward(heads.decoder, Z_last)


def decode(heads: TaskHeads, z_last):
    """Graph/logic: per-output sigmoid probabilities. Arithmetic: scalar in training units."""
    out, _ = mlp_forward(heads.decoder, z_last)
    if heads.task == "arithmetic":
        return out[..., 0]
    return sigmoid(out)


# -- metrics ----------------------------------------------------------------


def instance_metric(task, prediction, instance, arith_scale=1000.0):
    """Graph: node accuracy over real nodes. Logic: SAT fraction of the
    thresholded assignment. Arithmetic: absolute error in original units."""
    if task == "graph":
        pred = np.asarray(prediction)[: instance.n] > 0.5
        return float(np.mean(pred == np.asarray(instance.labels, dtype=bool)))
    if task == "logic":
        return sat_fraction(instance, np.asarray(prediction) > 0.5)
    return abs(float(prediction) * arith_scale - instance.target)


def exact_match(prediction, instance):
    pred = np.asarray(prediction)[: instance.n] > 0.5
    return bool(np.all(pred == np.asarray(instance.labels, dtype=bool)))


def aggregate_metric(task, values):
    """Percent accuracy / SAT% for graph and logic; ``100 - MAE`` for arithmetic."""
    values = np.asarray(values, dtype=np.float64)
    if task == "arithmetic":
        return 100.0 - float(values.mean())
    return 100.0 * float(values.mean())
