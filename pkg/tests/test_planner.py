import numpy as np
import pytest

from ebrm import model as M
from ebrm.planner import (
    PlanFailure,
    PlannerConfig,
    PlannerDivergence,
    derive_seeds,
    init_trajectory,
    plan,
    plan_batch,
    read_traces,
    write_traces,
)


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    return M.init_energy(rng, 6, hidden=16), rng.normal(size=(4, 6))


def test_zero_init():
    assert not np.any(init_trajectory(np.ones(3), "zero", 0.1, np.random.default_rng(0), 4))


def test_encoder_seeded_sigma_zero():
    h = np.arange(3.0)
    z = init_trajectory(h, "encoder-seeded", 0.0, np.random.default_rng(0), 4)
    np.testing.assert_array_equal(z[:, 0], h)
    assert not np.any(z[:, 1:])


def test_encoder_seeded_noise_mean():
    rng = np.random.default_rng(1)
    zs = np.array([init_trajectory(np.zeros(4), "encoder-seeded", 0.1, rng, 5)[:, 1:] for _ in range(1000)])
    assert np.all(np.abs(zs.mean(axis=0)) < 3 * 0.1 / np.sqrt(1000) * 1.5)
    # per-entry bound holds for the bulk; tail entries get the 1.5 slack for 16 simultaneous checks
    assert np.mean(np.abs(zs.mean(axis=0)) < 3 * 0.1 / np.sqrt(1000)) >= 0.9


def test_k0_identity(toy):
    E, H = toy
    cfg = PlannerConfig(steps=0)
    z, tr = plan(E, H[0], cfg, np.random.default_rng(3), T=5)
    z0 = init_trajectory(H[0], cfg.init, cfg.init_sigma, np.random.default_rng(3), 5)
    np.testing.assert_array_equal(z, z0)
    assert tr.n_records == 1


def test_gd_determinism(toy):
    E, H = toy
    cfg = PlannerConfig(steps=30, noise=0.0)
    a, _ = plan(E, H[0], cfg, np.random.default_rng(9), T=5)
    b, _ = plan(E, H[0], cfg, np.random.default_rng(9), T=5)
    assert a.tobytes() == b.tobytes()


def test_step_norm_bounded_by_clip(toy):
    E, H = toy
    cfg = PlannerConfig(steps=20, noise=0.0, lr=0.05, clip_norm=0.5)
    _, tr = plan(E, H[0], cfg, np.random.default_rng(0), T=4)
    moves = np.linalg.norm(np.diff(tr.snapshots, axis=0).reshape(20, -1), axis=1)
    assert np.all(moves <= 0.05 * 0.5 + 1e-12)


def test_frozen_planner(toy):
    E, H = toy
    _, tr = plan(E, H[0], PlannerConfig(steps=10, lr=0.0, noise=0.0), np.random.default_rng(0), T=4)
    assert np.all(tr.drift == tr.drift[0])
    assert np.all(tr.snapshots == tr.snapshots[0])


def test_trace_fields(toy):
    E, H = toy
    z, tr = plan(E, H[1], PlannerConfig(steps=7), np.random.default_rng(0), T=3)
    assert tr.energies.shape == (8, 4) and tr.snapshots.shape == (8, 6, 3)
    np.testing.assert_array_equal(tr.z_at(7), z)
    assert tr.drift[3] == pytest.approx(np.linalg.norm(tr.z_at(3)[:, -1] - H[1]))
    for k in range(8):
        assert tr.energy_terms(k).total == pytest.approx(M.energy(E, H[1], tr.z_at(k)).total, rel=1e-12)
    total, parts = tr.grad_norms[:, 0], tr.grad_norms[:, 1:]
    assert np.all(total <= parts.sum(axis=1) + 1e-12)
    assert 0 <= tr.best_step <= 7


def test_snapshot_stride_large_k(toy):
    E, H = toy
    _, tr = plan(E, H[0], PlannerConfig(steps=205, noise=0.0), np.random.default_rng(0), T=2)
    assert tr.snapshot_steps[:3] == [0, 10, 20] and tr.snapshot_steps[-1] == 205
    with pytest.raises(KeyError, match="snapshot_stride"):
        tr.z_at(5)


def test_batch_of_one_equals_plan(toy):
    E, H = toy
    cfg = PlannerConfig(steps=15)
    seed = derive_seeds(4, 1)[0]
    (zb, _), = plan_batch(E, H[:1], cfg, [seed], T=4)
    zs, _ = plan(E, H[0], cfg, np.random.default_rng(seed), T=4)
    np.testing.assert_array_equal(zb, zs)


def test_batch_order_independent(toy):
    E, H = toy
    cfg = PlannerConfig(steps=15)
    seeds = derive_seeds(1, 4)
    fwd = plan_batch(E, H, cfg, seeds, T=4)
    perm = [2, 0, 3, 1]
    rev = plan_batch(E, H[perm], cfg, [seeds[i] for i in perm], T=4)
    for j, i in enumerate(perm):
        np.testing.assert_array_equal(fwd[i][0], rev[j][0])


def test_divergence(toy):
    E, H = toy
    with pytest.raises(PlannerDivergence) as err:
        plan(E, H[0], PlannerConfig(steps=5, noise=1e308, lr=1.0), np.random.default_rng(0), T=3)
    assert err.value.step == 1


def test_batch_divergence_is_per_instance(toy):
    E, H = toy
    H = H.copy()
    out = plan_batch(E, H, PlannerConfig(steps=3, noise=1e308, lr=1.0), derive_seeds(0, 4), T=3)
    assert all(isinstance(r, PlanFailure) for r in out)
    ok = plan_batch(E, H, PlannerConfig(steps=3), derive_seeds(0, 4), T=3)
    assert not any(isinstance(r, PlanFailure) for r in ok)


def test_trace_roundtrip(toy, tmp_path):
    E, H = toy
    traces = [r[1] for r in plan_batch(E, H[:2], PlannerConfig(steps=4), derive_seeds(0, 2), T=3)]
    write_traces(traces, tmp_path / "t.jsonl")
    back = read_traces(tmp_path / "t.jsonl")
    for a, b in zip(traces, back):
        np.testing.assert_array_equal(a.energies, b.energies)
        np.testing.assert_array_equal(a.snapshots, b.snapshots)
        np.testing.assert_array_equal(a.final, b.final)


def test_anchor_pulls_toward_encoder(logic_run):
    ckpt, ds, _ = logic_run
    H, _ = M.encode_batch(ckpt.heads, ds.test[:5])
    for h in H:
        free = plan(ckpt.energy, h, PlannerConfig(steps=200, noise=0.0), np.random.default_rng(0))[1].drift[-1]
        tight = plan(ckpt.energy, h, PlannerConfig(steps=200, noise=0.0, anchor_weight=100.0),
                     np.random.default_rng(0))[1].drift[-1]
        assert tight < free


def test_trained_batch_no_divergence(logic_run):
    ckpt, ds, _ = logic_run
    H, _ = M.encode_batch(ckpt.heads, ds.test[:100])
    out = plan_batch(ckpt.energy, H, PlannerConfig(), derive_seeds(0, len(H)))
    assert not any(isinstance(r, PlanFailure) for r in out)
