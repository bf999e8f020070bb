import numpy as np
import pytest

from crystal_ldm.autoencoder import Autoencoder
from crystal_ldm.canon import Fragment
from crystal_ldm.config import RunConfig
from crystal_ldm.diffusion import (ConditioningSpec, Denoiser, NoiseSchedule, RunningStats,
                                   conditioning_features, destandardize, forward_noise,
                                   oracle_v_fn, prepare_structure, sample_atom_count,
                                   sample_conditioning, sample_latents, sample_structures,
                                   self_cond_sample, standardize, train_diffusion, v_target,
                                   x0_from_v)
from crystal_ldm.io import toy_dataset

SCHED = NoiseSchedule(100000, 2.0)


def test_log_snr_midpoint_and_clamp():
    assert SCHED.log_snr(50000) == pytest.approx(2.0)
    assert SCHED.log_snr(0) == 30.0
    assert SCHED.log_snr(100000) == -30.0
    with pytest.raises(ValueError):
        SCHED.log_snr(-1)


def test_signal_fraction_root():
    expected = 2 / np.pi * np.arctan(np.exp(1.0))
    assert SCHED.signal_fraction() == pytest.approx(expected, abs=1e-9)
    assert abs(SCHED.signal_fraction() - 0.7756) < 5e-4


def test_alpha_bar_values():
    assert SCHED.alpha_bar(50000) == pytest.approx(0.880797, abs=1e-6)
    assert SCHED.alpha_bar(0) == pytest.approx(1.0, abs=1e-12)
    assert SCHED.alpha_bar(100000) == pytest.approx(0.0, abs=1e-12)
    grid = SCHED.alpha_bar(np.linspace(0, 100000, 1000))
    inner = grid[(grid > 1e-12) & (grid < 1 - 1e-12)]
    assert np.all(np.diff(inner) < 0)


def test_forward_noise_endpoints_and_variance():
    rng = np.random.default_rng(0)
    z0, eps = rng.normal(size=(100000,)), rng.normal(size=(100000,))
    # alpha_bar is clipped to [1e-12, 1 - 1e-12], leaving a residual weight of 1e-6 at the endpoints
    assert np.allclose(forward_noise(z0, 0, eps, SCHED), z0, atol=1e-5)
    assert np.allclose(forward_noise(z0, 100000, eps, SCHED), eps, atol=1e-5)
    for t in (1000, 50000, 90000):
        assert abs(forward_noise(z0, t, eps, SCHED).var() - 1.0) < 0.02
    with pytest.raises(ValueError):
        forward_noise(z0, 1, eps[:10], SCHED)


def test_v_limits_and_inversion():
    rng = np.random.default_rng(1)
    z0, eps = rng.normal(size=(50, 4)), rng.normal(size=(50, 4))
    assert np.allclose(v_target(z0, eps, 0, SCHED), eps, atol=1e-5)
    assert np.allclose(v_target(z0, eps, 100000, SCHED), -z0, atol=1e-5)
    for t in rng.uniform(0, 100000, 20):
        zt = forward_noise(z0, t, eps, SCHED)
        assert np.allclose(x0_from_v(zt, v_target(z0, eps, t, SCHED), t, SCHED), z0, atol=1e-12)


def test_self_conditioning_sample():
    rng = np.random.default_rng(2)
    zt = rng.normal(size=1000)
    assert np.array_equal(self_cond_sample(zt, 500, 500, rng.normal(size=1000), SCHED), zt)
    assert RunConfig().self_cond_max_offset == 200
    z0, e1, e2 = (rng.normal(size=100000) for _ in range(3))
    t = 40000.0
    t2 = t + 150
    zp = self_cond_sample(forward_noise(z0, t, e1, SCHED), t, t2, e2, SCHED)
    assert abs(zp.var() - 1.0) < 0.02
    with pytest.raises(ValueError):
        self_cond_sample(zt, 500, 400, zt, SCHED)


def test_running_stats():
    rng = np.random.default_rng(3)
    st = RunningStats(2)
    for _ in range(100):
        st.update(rng.normal(3.0, 2.0, size=(1000, 2)))
    assert np.allclose(st.mean, 3.0, rtol=0.02) and np.allclose(st.var, 4.0, rtol=0.02)
    z = rng.normal(size=(10, 2))
    assert np.allclose(destandardize(standardize(z, st), st), z, atol=1e-9)
    zeros = RunningStats(3)
    assert np.allclose(standardize(np.zeros((100, 3)), zeros, update=True), 0.0)
    with pytest.raises(ValueError):
        standardize(z, RunningStats(2))


def test_conditioning_rates_and_degenerate_inpaint():
    cfg = RunConfig()
    rng = np.random.default_rng(4)
    frags = [Fragment(np.array([0, 1]), "metal"), Fragment(np.array([2]), "organic")]
    n = 100000
    hits = np.zeros(3)
    for _ in range(n):
        s = sample_conditioning(rng, frags, 3, cfg)
        hits += [s.inpaint, s.composition, s.bonds]
    assert np.allclose(hits / n, 0.25, atol=0.01)
    single = [Fragment(np.arange(3), "metal")]
    for _ in range(200):
        s = sample_conditioning(rng, single, 3, cfg)
        assert not s.inpaint and not s.fixed_mask.any()


def test_de_novo_draw_has_order_and_empty_masks():
    cfg = RunConfig()
    p = prepare_structure(toy_dataset(0, 1, (2, 10))[0])
    spec = ConditioningSpec(p.structure.n_atoms)
    assert spec.use_order and spec.mode == "de-novo"
    nodes, edges = conditioning_features(p, p.structure.frac, spec, cfg)
    k = 2 * cfg.n_order_freq
    assert np.abs(nodes[:, :k]).sum() > 0
    assert np.all(nodes[:, k:] == 0) and np.all(edges == 0)


def test_oracle_sampler_recovers_latent():
    rng = np.random.default_rng(5)
    z0l, z0g = rng.normal(size=(6, 4)), rng.normal(size=(1, 4))
    for steps in (1, 10, 400):
        zl, zg = sample_latents(oracle_v_fn(z0l, z0g, SCHED), (6, 4), (1, 4), steps, SCHED, rng)
        assert np.allclose(zl, z0l, atol=1e-8) and np.allclose(zg, z0g, atol=1e-8)


def test_atom_count_sampling():
    rng = np.random.default_rng(6)
    assert all(sample_atom_count(rng, {4: 1.0}) == 4 for _ in range(100))
    draws = np.array([sample_atom_count(rng, {4: 0.5, 8: 0.5}) for _ in range(100000)])
    assert set(draws.tolist()) <= {4, 8}
    assert abs((draws == 4).mean() - 0.5) < 0.02
    with pytest.raises(ValueError):
        sample_atom_count(rng, {})


SMALL = RunConfig(hidden=8, mp_steps=1, k_neighbors=4, rvq_codes=8, diff_batch=4, ae_batch=4,
                  diff_steps=4, log_interval=1)


def test_training_determinism_and_resume():
    data = toy_dataset(2, 4, (2, 8))
    ae = Autoencoder(SMALL, np.random.default_rng(0))
    ae.codebook.init_from(np.random.default_rng(1).normal(size=(16, 4)), np.random.default_rng(2))
    logs = []
    _, a = train_diffusion(data, ae, SMALL, lambda s, t: logs.append(t))
    _, b = train_diffusion(data, ae, SMALL)
    assert a.equals(b)
    assert len(logs) == 4
    _, c = train_diffusion(data, ae, SMALL.replace(diff_steps=2), resume=a)
    assert c.step == 6


def test_self_conditioning_rate_over_long_run():
    cfg = SMALL.replace(diff_steps=400, diff_batch=16, mp_steps=0, hidden=4, log_interval=400)
    data = toy_dataset(3, 8, (2, 6))
    ae = Autoencoder(cfg, np.random.default_rng(0))
    ae.codebook.init_from(np.random.default_rng(1).normal(size=(16, 4)), np.random.default_rng(2))
    _, ck = train_diffusion(data, ae, cfg)
    assert abs(ck.extra["history.self_cond"].mean() - 0.5) < 0.02


def test_denoiser_shapes_and_conditioned_sampling():
    data = toy_dataset(4, 3, (4, 8))
    ae = Autoencoder(SMALL, np.random.default_rng(0))
    ae.codebook.init_from(np.random.default_rng(1).normal(size=(16, 4)), np.random.default_rng(2))
    model, _ = train_diffusion(data, ae, SMALL.replace(diff_steps=1))
    den = model.denoiser
    vl, vg = den(np.zeros((7, 4)), np.zeros((2, 4)), [3, 4], [10.0, 20.0])
    assert vl.shape == (7, 4) and vg.shape == (2, 4)
    p = prepare_structure(data[0])
    n = p.structure.n_atoms
    spec = ConditioningSpec(n, composition=True, cluster=True)
    out = sample_structures(model, ae, [n, n], 3, np.random.default_rng(3), p, spec)
    assert all(np.array_equal(s.atom_types, p.structure.atom_types) for s in out)
