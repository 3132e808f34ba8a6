import numpy as np
import pytest

from conftest import FD_TOL, numeric_grad, rel_err
from ebrm import model as M
from ebrm.config import ExperimentConfig
from ebrm.tasks import gen_arith, gen_cnf, make_dataset
from ebrm.training import (
    ConfigError,
    TrainHistory,
    contrastive_batch,
    contrastive_loss,
    decoder_loss,
    hard_negative,
    load_checkpoint,
    save_checkpoint,
    smoothness,
    smoothness_grad,
    task_loss,
    teacher_trajectory,
    train,
)

TINY = dict(train_size=64, val_size=8, test_size=8, epochs=1, batch_size=16, latent_dim=8, energy_hidden=16,
            head_hidden=16, trajectory_length=4)


def test_teacher_sigma_zero():
    h = np.arange(4.0)
    z = teacher_trajectory(h, np.random.default_rng(0), 5, sigma=0.0)
    assert np.all(z == h[:, None])
    assert smoothness(z[None])[0] == 0.0


def test_teacher_smoothness_grad_to_encoder_is_zero():
    # z+ = h broadcast + eps: d/dh of L_smooth = sum over columns of the smoothness gradient
    rng = np.random.default_rng(0)
    Z = teacher_trajectory(rng.normal(size=6), rng, 5, sigma=0.0)[None]
    assert not np.any(smoothness_grad(Z, np.ones(1)).sum(axis=2))
    Z = teacher_trajectory(rng.normal(size=6), rng, 5, sigma=0.01)[None]
    assert np.max(np.abs(smoothness_grad(Z, np.ones(1)).sum(axis=2))) < 1e-15


def test_teacher_smoothness_expectation():
    rng = np.random.default_rng(1)
    d, sigma = 64, 0.01
    vals = [smoothness(teacher_trajectory(np.zeros(d), rng, 8, sigma)[None])[0] for _ in range(10_000)]
    assert np.mean(vals) == pytest.approx(2 * sigma**2 * d, rel=0.1)


def test_smoothness_grad_fd():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(2, 3, 4))
    up = rng.normal(size=2)
    g = smoothness_grad(Z, up)
    assert rel_err(g, numeric_grad(lambda: float(np.dot(up, smoothness(Z))), Z)) <= FD_TOL


def test_perturb_zero_noise():
    class Zero:
        def standard_normal(self, shape):
            return np.zeros(shape)

    z = np.ones((3, 2))
    np.testing.assert_array_equal(hard_negative(z, "perturb", rng=Zero()), z)


def test_perturb_second_moment():
    rng = np.random.default_rng(3)
    d, T = 16, 8
    z = np.zeros((d, T))
    m = np.mean([np.sum((hard_negative(z, "perturb", rng=rng) - z) ** 2) for _ in range(10_000)])
    assert m == pytest.approx(0.25 * d * T, rel=0.05)


def test_planner_negative_requires_output():
    with pytest.raises(ConfigError):
        hard_negative(np.zeros((2, 2)), "planner")


def test_planner_negative_is_detached_copy():
    out = np.ones((2, 3))
    neg = hard_negative(np.zeros((2, 3)), "planner", planner_output=out)
    out[0, 0] = 5.0
    assert neg[0, 0] == 1.0


def test_bce_perfect_logits():
    f = gen_cnf(np.random.default_rng(0))
    logits = np.where(np.array(f.hidden_assignment) == 1, 30.0, -30.0)[None]
    loss, _ = task_loss("logic", logits, [f])
    assert loss <= 1e-9


def test_bce_grad_fd():
    rng = np.random.default_rng(1)
    fs = [gen_cnf(rng) for _ in range(3)]
    logits = rng.normal(size=(3, 5))
    _, g = task_loss("logic", logits, fs)
    assert rel_err(g, numeric_grad(lambda: task_loss("logic", logits, fs)[0], logits)) <= FD_TOL


def test_mse_zero_at_target():
    heads = M.init_heads(np.random.default_rng(0), "arithmetic", d=4, hidden=8)
    inst = gen_arith(np.random.default_rng(2))
    heads.decoder = heads.decoder.zeros_like()
    heads.decoder.biases[-1][:] = inst.target / 1000
    assert decoder_loss(heads, inst, np.zeros(4)) == 0.0


def test_dual_path_equal_branches():
    heads = M.init_heads(np.random.default_rng(0), "logic", d=4, hidden=8)
    f = gen_cnf(np.random.default_rng(1))
    z = np.random.default_rng(2).normal(size=4)
    assert decoder_loss(heads, f, z, z) == decoder_loss(heads, f, z)


def _fixed_energy(value):
    E = M.init_energy(np.random.default_rng(0), 2, hidden=4)
    E.glob = E.glob.zeros_like()
    E.glob.biases[-1][:] = value
    return E


def test_hinge_cases():
    E_lo, E_hi = _fixed_energy(-5.0), _fixed_energy(5.0)
    h, z = np.zeros(2), np.zeros((2, 3))
    # same parameters give equal energies; margin 1 -> loss 1
    assert contrastive_loss(E_lo, h, z, z, 1.0) == 1.0
    e_pos, e_neg = M.energy(E_lo, h, z).total, M.energy(E_hi, h, z).total
    assert max(0.0, e_pos - e_neg + 1.0) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_contrastive_grad_fd(seed):
    rng = np.random.default_rng(seed)
    E = M.init_energy(rng, 3, hidden=5)
    for mlp in (E.step, E.trans, E.glob):
        mlp.biases = [0.1 * rng.normal(size=b.shape) for b in mlp.biases]
    H, Zp, Zn = rng.normal(size=(4, 3)), rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    margin = 10.0  # keeps every hinge active
    loss, grads, e_pos, e_neg = contrastive_batch(E, H, Zp, Zn, margin)
    assert np.all(e_pos - e_neg + margin > 0)

    def f():
        return contrastive_batch(E, H, Zp, Zn, margin)[0]

    params = E.named_arrays()
    for name, g in grads.items():
        assert rel_err(g, numeric_grad(f, params[name])) <= FD_TOL, name


def _tiny(task="logic", **kw):
    cfg = ExperimentConfig(task=task).replace(**TINY, **kw)
    return cfg, make_dataset(task, cfg.seed, cfg.split_sizes, cfg.to_dict())


def _snapshot(ckpt, group):
    arrays = ckpt.heads.named_arrays() if group == "ed" else ckpt.energy.named_arrays()
    return {k: v.copy() for k, v in arrays.items()}


def _initial(cfg):
    from ebrm.training import build_model

    init_seq, _ = np.random.SeedSequence(cfg.seed).spawn(2)
    return build_model(cfg, np.random.default_rng(init_seq))


@pytest.mark.parametrize("task", ["logic", "graph"])
def test_routing_alpha_contr_zero_freezes_energy(task):
    cfg, ds = _tiny(task, alpha_contr=0.0)
    _, E0 = _initial(cfg)
    ckpt, _ = train(task, ds, cfg)
    for k, v in E0.named_arrays().items():
        assert v.tobytes() == ckpt.energy.named_arrays()[k].tobytes(), k


@pytest.mark.parametrize("task", ["logic", "arithmetic"])
def test_routing_dec_and_smooth_zero_freezes_heads(task):
    cfg, ds = _tiny(task, alpha_dec=0.0, alpha_smooth=0.0)
    heads0, E0 = _initial(cfg)
    ckpt, _ = train(task, ds, cfg)
    for k, v in heads0.named_arrays().items():
        assert v.tobytes() == ckpt.heads.named_arrays()[k].tobytes(), k
    assert any(v.tobytes() != ckpt.energy.named_arrays()[k].tobytes() for k, v in E0.named_arrays().items())


def test_training_deterministic_and_checkpoint_roundtrip(tmp_path):
    cfg, ds = _tiny()
    a, hist = train("logic", ds, cfg)
    b, _ = train("logic", ds, cfg)
    assert a.digest() == b.digest()
    save_checkpoint(a, tmp_path / "c")
    back = load_checkpoint(tmp_path / "c")
    assert back.digest() == a.digest() and back.config == a.config
    hist.to_csv(tmp_path / "h.csv")
    assert TrainHistory.from_csv(tmp_path / "h.csv").rows == hist.rows


def test_dual_path_trains():
    cfg, ds = _tiny(dual_path=True)
    _, hist = train("logic", ds, cfg)
    assert np.isfinite(hist.rows[-1]["dec_loss"])


def test_logic_direct_sat_at_ablation_scale(logic_run):
    _, _, hist = logic_run
    assert hist.rows[-1]["val_metric"] >= 85.0


@pytest.mark.parametrize("which", ["logic_run", "graph_run"])
def test_contrastive_success(which, request):
    ckpt, ds, _ = request.getfixturevalue(which)
    cfg = ckpt.config
    rng = np.random.default_rng(99)
    H, _ = M.encode_batch(ckpt.heads, ds.test)
    Zp = np.stack([teacher_trajectory(h, rng, cfg.trajectory_length, cfg.teacher_sigma) for h in H])
    Zn = hard_negative(Zp, "perturb", rng=rng, scale=cfg.negative_scale)
    pos, _ = M.energy_forward(ckpt.energy, H, Zp)
    neg, _ = M.energy_forward(ckpt.energy, H, Zn)
    assert np.mean(pos.total < neg.total) >= cfg.contrastive_success_threshold
