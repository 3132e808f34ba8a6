"""Split training: supervised encoder/decoder loss plus contrastive energy shaping.

The two parameter groups never share gradients. The encoder/decoder group sees
``alpha_dec * L_dec + alpha_smooth * L_smooth``; the energy group sees
``alpha_contr * L_contr`` only.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .config import ExperimentConfig, from_dict
from .nn_core import AdamState, adam_step, load_arrays, mlp_backward, save_arrays, sigmoid
from .planner import PlannerConfig, plan_final
from .tasks import TaskMismatch


class TrainingError(RuntimeError):
    def __init__(self, epoch, batch, message):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


class ConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha_dec: float = 1.0
    alpha_contr: float = 0.1
    alpha_smooth: float = 0.01
    margin: float = 1.0
    dual_path: bool = False

    def __post_init__(self):
        if min(self.alpha_dec, self.alpha_contr, self.alpha_smooth, self.margin) < 0:
            raise ValueError("loss weights must be >= 0")

    @classmethod
    def from_experiment(cls, cfg):
        return cls(cfg.alpha_dec, cfg.alpha_contr, cfg.alpha_smooth, cfg.margin, cfg.dual_path)


@dataclass
class Checkpoint:
    heads: M.TaskHeads
    energy: M.EnergyParams | None
    config: ExperimentConfig
    kind: str = "ebrm"  # or "baseline"

    @property
    def task(self):
        return self.heads.task

    def named_arrays(self):
        out = dict(self.heads.named_arrays())
        if self.energy is not None:
            out.update(self.energy.named_arrays())
        return out

    def digest(self):
        import hashlib

        h = hashlib.sha256()
        for name, a in self.named_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:12]


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "dec_loss", "contr_loss", "smooth_loss", "val_metric", "wall_seconds")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.COLUMNS)
            w.writeheader()
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path):
        with open(path) as f:
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]
        return cls(rows)


# -- model construction / persistence ---------------------------------------


def build_model(cfg: ExperimentConfig, rng, with_energy=True):
    n_max = max(cfg.graph_nodes_max, 20)
    heads = M.init_heads(rng, cfg.task, cfg.latent_dim, cfg.head_hidden, cfg.head_layers, n_max, cfg.logic_vars,
                         cfg.arith_embed_dim, cfg.arith_decoder_layers)
    energy = None
    if with_energy:
        energy = M.init_energy(rng, cfg.latent_dim, cfg.energy_hidden, cfg.energy_layers, cfg.global_hidden)
    return heads, energy


def save_checkpoint(ckpt: Checkpoint, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"task": ckpt.task, "kind": ckpt.kind, "d": ckpt.config.latent_dim, "T": ckpt.config.trajectory_length,
                "config_hash": ckpt.config.digest(), "params_hash": ckpt.digest(), "config": ckpt.config.to_dict()}
    save_arrays(ckpt.named_arrays(), directory / "params.json", header={"task": ckpt.task, "kind": ckpt.kind})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = from_dict(manifest["config"])
    heads, energy = build_model(cfg, np.random.default_rng(0), with_energy=manifest["kind"] == "ebrm")
    arrays, _ = load_arrays(directory / "params.json")
    ckpt = Checkpoint(heads, energy, cfg, manifest["kind"])
    targets = ckpt.named_arrays()
    if set(targets) != set(arrays):
        raise ValueError(f"{directory}: parameter names do not match the configured architecture")
    for name, dest in targets.items():
        dest[...] = arrays[name]
    return ckpt


# -- losses -----------------------------------------------------------------


def task_loss(task, logits, instances, arith_scale=1000.0):
    """Mean loss over the batch and its gradient w.r.t. the decoder's raw outputs.

    BCE-with-logits for graph (real nodes only) and logic; MSE on the scaled
    target for arithmetic.
    """
    n = len(instances)
    if task == "arithmetic":
        y = np.array([inst.target / arith_scale for inst in instances])
        r = logits[:, 0] - y
        grad = np.zeros_like(logits)
        grad[:, 0] = 2.0 * r / n
        return float(np.mean(r**2)), grad
    y = np.zeros_like(logits)
    mask = np.zeros_like(logits)
    for i, inst in enumerate(instances):
        if task == "graph":
            y[i, : inst.n] = inst.labels
            mask[i, : inst.n] = 1.0 / inst.n
        else:
            y[i, :] = inst.hidden_assignment
            mask[i, :] = 1.0 / logits.shape[1]
    # log(1 + exp(-|x|)) form is stable for large logits
    per = np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    loss = float(np.sum(per * mask) / n)
    grad = (sigmoid(logits) - y) * mask / n
    return loss, grad


def decoder_loss(heads, instance, z_source, z_planned=None, arith_scale=1000.0):
    """Task loss of decoding ``z_source``; with ``z_planned`` the two paths are averaged."""
    logits, _ = M.decode_logits(heads, np.asarray(z_source)[None])
    loss, _ = task_loss(heads.task, logits, [instance], arith_scale)
    if z_planned is None:
        return loss
    logits_p, _ = M.decode_logits(heads, np.asarray(z_planned)[None])
    loss_p, _ = task_loss(heads.task, logits_p, [instance], arith_scale)
    return 0.5 * loss + 0.5 * loss_p


def teacher_trajectory(h_x, rng, T, sigma=0.01):
    """Positive trajectory: every column is ``h_x`` plus small Gaussian jitter."""
    h_x = np.asarray(h_x, dtype=np.float64)
    return h_x[:, None] + sigma * rng.standard_normal((h_x.shape[0], T))


def smoothness(Z):
    """Per-trajectory mean squared step for (n, d, T) input, 0 when T == 1."""
    T = Z.shape[-1]
    if T < 2:
        return np.zeros(Z.shape[0])
    return (np.diff(Z, axis=-1) ** 2).sum(axis=(1, 2)) / (T - 1)


def smoothness_grad(Z, upstream):
    T = Z.shape[-1]
    g = np.zeros_like(Z)
    if T < 2:
        return g
    dd = np.diff(Z, axis=-1) * (2.0 * np.asarray(upstream) / (T - 1))[:, None, None]
    g[..., 1:] += dd
    g[..., :-1] -= dd
    return g


def hard_negative(z_pos, mode="perturb", planner_output=None, rng=None, scale=0.5):
    """Perturbed teacher (``z_pos + scale * eps``) or a detached planner output."""
    if mode == "perturb":
        return z_pos + scale * rng.standard_normal(np.shape(z_pos))
    if mode == "planner":
        if planner_output is None:
            raise ConfigError("planner-mode negative requires a planner output")
        return np.array(planner_output, dtype=np.float64, copy=True)
    raise ConfigError(f"unknown negative mode {mode!r}")


def contrastive_loss(E, h_x, z_pos, z_neg, margin=1.0):
    e_pos = M.energy(E, h_x, z_pos).total
    e_neg = M.energy(E, h_x, z_neg).total
    return max(0.0, e_pos - e_neg + margin)


def contrastive_batch(E, H, Z_pos, Z_neg, margin):
    """Mean hinge over the batch and its gradient w.r.t. the energy parameters."""
    n = len(H)
    pos, cache_pos = M.energy_forward(E, H, Z_pos)
    neg, cache_neg = M.energy_forward(E, H, Z_neg)
    hinge = pos.total - neg.total + margin
    active = (hinge > 0).astype(np.float64)
    loss = float(np.mean(np.maximum(hinge, 0.0)))
    g_pos, _, _ = M.energy_backward(E, cache_pos, active / n, param_grads=True)
    g_neg, _, _ = M.energy_backward(E, cache_neg, -active / n, param_grads=True)
    return loss, _add_named(g_pos.named_arrays(), g_neg.named_arrays()), pos.total, neg.total


def _add_named(a, b, wa=1.0, wb=1.0):
    return {k: wa * a[k] + wb * b[k] for k in a}


# -- training loop ------------------------------------------------------------


def direct_predictions(heads, instances, batch=256):
    out = []
    for i in range(0, len(instances), batch):
        H, _ = M.encode_batch(heads, instances[i : i + batch])
        out.append(M.decode(heads, H))
    return np.concatenate(out)


def direct_metric(heads, instances, arith_scale=1000.0):
    preds = direct_predictions(heads, instances)
    vals = [M.instance_metric(heads.task, p, inst, arith_scale) for p, inst in zip(preds, instances)]
    return M.aggregate_metric(heads.task, vals)


def train(task, dataset, cfg: ExperimentConfig, baseline=False, log=None):
    """Train heads (and the energy model unless ``baseline``). Returns ``(Checkpoint, TrainHistory)``."""
    if dataset.task != task or cfg.task != task:
        raise TaskMismatch(f"dataset task {dataset.task!r} / config task {cfg.task!r} vs requested {task!r}")
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    heads, E = build_model(cfg, np.random.default_rng(init_seq), with_energy=not baseline)
    rng = np.random.default_rng(data_seq)
    w = LossWeights.from_experiment(cfg)
    T = cfg.trajectory_length
    train_planner = PlannerConfig.from_experiment(cfg, steps=cfg.train_planner_steps)
    # the decoder only ever sees L_dec, so it is left out entirely when alpha_dec = 0
    ed_params = {k: v for k, v in heads.named_arrays().items() if w.alpha_dec > 0 or not k.startswith("decoder.")}
    ed_state = AdamState.for_params(ed_params)
    if E is not None:
        en_params = E.named_arrays()
        en_state = AdamState.for_params(en_params)
    update_ed = w.alpha_dec > 0 or (w.alpha_smooth > 0 and not baseline)
    update_en = E is not None and w.alpha_contr > 0
    history = TrainHistory()
    data = dataset.train
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        sums = np.zeros(3)
        n_batches = 0
        for b, lo in enumerate(range(0, len(data), cfg.batch_size)):
            batch = [data[i] for i in perm[lo : lo + cfg.batch_size]]
            n = len(batch)
            H, enc_cache = M.encode_batch(heads, batch)
            logits, dec_tape = M.decode_logits(heads, H)
            l_dec, g_logits = task_loss(task, logits, batch, cfg.arith_scale)
            planner_rng = np.random.default_rng(rng.integers(2**63))
            if w.dual_path and E is not None:
                Zp = plan_final(E, H, train_planner, [planner_rng] * n, T)
                logits_p, tape_p = M.decode_logits(heads, Zp[:, :, -1])
                l_p, g_p = task_loss(task, logits_p, batch, cfg.arith_scale)
                l_dec = 0.5 * l_dec + 0.5 * l_p
                g_logits = 0.5 * g_logits
                g_dec_p, _ = mlp_backward(heads.decoder, tape_p, 0.5 * g_p)
            g_dec, dH = mlp_backward(heads.decoder, dec_tape, g_logits)
            if w.dual_path and E is not None:
                g_dec = _mlp_sum(g_dec, g_dec_p)

            l_smooth = l_contr = 0.0
            dH_total = w.alpha_dec * dH
            if E is not None:
                # z+ = h_x + jitter, differentiable in h_x
                Z_pos = H[:, :, None] + cfg.teacher_sigma * rng.standard_normal((n, cfg.latent_dim, T))
                l_smooth = float(np.mean(smoothness(Z_pos)))
                dH_total = dH_total + w.alpha_smooth * smoothness_grad(Z_pos, np.full(n, 1.0 / n)).sum(axis=2)
                if cfg.planner_negative_every and b % cfg.planner_negative_every == cfg.planner_negative_every - 1:
                    Z_neg = hard_negative(Z_pos, "planner", plan_final(E, H, train_planner, [planner_rng] * n, T))
                else:
                    Z_neg = hard_negative(Z_pos, "perturb", rng=rng, scale=cfg.negative_scale)
                l_contr, g_en, _, _ = contrastive_batch(E, H, Z_pos, Z_neg, w.margin)

            for name, val in (("decoder", l_dec), ("smoothness", l_smooth), ("contrastive", l_contr)):
                if not np.isfinite(val):
                    raise TrainingError(epoch, b, f"non-finite {name} loss")

            if update_ed:
                g_heads = M.encode_backward(heads, enc_cache, dH_total)
                g_heads.decoder = _mlp_scale(g_dec, w.alpha_dec)
                g_named = g_heads.named_arrays()
                adam_step(ed_params, {k: g_named[k] for k in ed_params}, ed_state, cfg.learning_rate,
                          cfg.weight_decay)
            if update_en:
                g_en = {k: w.alpha_contr * v for k, v in g_en.items()}
                adam_step(en_params, g_en, en_state, cfg.learning_rate, cfg.weight_decay)
            sums += (l_dec, l_contr, l_smooth)
            n_batches += 1
        val = direct_metric(heads, dataset.val, cfg.arith_scale) if dataset.val else float("nan")
        means = sums / max(n_batches, 1)
        history.rows.append({"epoch": epoch, "dec_loss": means[0], "contr_loss": means[1], "smooth_loss": means[2],
                             "val_metric": val, "wall_seconds": time.perf_counter() - start})
        if log:
            log(f"epoch {epoch}: dec {means[0]:.4f} contr {means[1]:.4f} smooth {means[2]:.5f} val {val:.2f}")
    return Checkpoint(heads, E, cfg, "baseline" if baseline else "ebrm"), history


def _mlp_sum(a, b):
    out = a.zeros_like()
    out.weights = [x + y for x, y in zip(a.weights, b.weights)]
    out.biases = [x + y for x, y in zip(a.biases, b.biases)]
    return out


def _mlp_scale(a, s):
    out = a.zeros_like()
    out.weights = [s * x for x in a.weights]
    out.biases = [s * x for x in a.biases]
    return out
