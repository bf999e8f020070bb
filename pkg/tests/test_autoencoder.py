import numpy as np
import pytest

from crystal_ldm.autoencoder import (ANGLE_MAX, ANGLE_MIN, Autoencoder, DecoderOutput, RvqCodebook,
                                     ae_loss, ae_objective, bottleneck, structure_targets,
                                     train_autoencoder)
from crystal_ldm.config import RunConfig
from crystal_ldm.crystal import CrystalStructure, random_translate
from crystal_ldm.io import toy_dataset
from crystal_ldm.tensor import Tensor

from oracles import random_structure

SMALL = RunConfig(hidden=8, mp_steps=1, k_neighbors=4, rvq_codes=8, ae_batch=4)


@pytest.fixture(scope="module")
def model():
    return Autoencoder(SMALL, np.random.default_rng(0))


def test_latent_shapes(model):
    s = random_structure(np.random.default_rng(1), 3, 3)
    lat = model.encode(s)
    assert lat.z_local.shape == (3, 4) and lat.z_global.shape == (2, 4)


def test_translation_invariant_latents(model):
    rng = np.random.default_rng(2)
    for _ in range(10):
        s = random_structure(rng)
        a = model.encode(s)
        b = model.encode(random_translate(s, rng.random(3)))
        assert np.allclose(a.z_local, b.z_local, atol=1e-10)


def test_permuted_input_permutes_latents(model):
    rng = np.random.default_rng(3)
    s = random_structure(rng, 5, 5)
    perm = rng.permutation(5)
    a = model.encode(s)
    b = model.encode(s.with_(atom_types=s.atom_types[perm], frac=s.frac[perm]))
    assert np.allclose(a.z_local[perm], b.z_local, atol=1e-9)
    assert np.allclose(a.z_global, b.z_global, atol=1e-9)


def _codebook(codes):
    cb = RvqCodebook(np.asarray(codes, dtype=np.float64))
    cb.initialized = True
    return cb


def test_quantising_code_vectors_is_exact():
    codes = np.random.default_rng(4).normal(size=(1, 5, 4))
    z = codes[0][[1, 3, 3]]
    bn = bottleneck(Tensor(z), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), [3], _codebook(codes))
    assert np.allclose(bn.z_local.data, z)
    assert bn.commitment.data[0] == pytest.approx(0.0, abs=1e-20)


def test_kl_closed_forms():
    cb = _codebook(np.zeros((1, 1, 4)))
    bn = bottleneck(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), [1], cb)
    assert bn.kl.data[0] == 0.0
    bn = bottleneck(Tensor(np.zeros((1, 4))), Tensor([[1.0, 0, 0, 0]]), Tensor(np.zeros((1, 4))), [1], cb)
    assert bn.kl.data[0] == pytest.approx(0.5)


def test_bottleneck_mode_guard():
    cb = _codebook(np.zeros((1, 1, 2)))
    z = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        bottleneck(z, z, z, [1], cb, mode="sample")


def test_residual_levels_reduce_error():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(200, 4))
    cb = RvqCodebook.empty(2, 16, 4)
    cb.init_from(z, rng)
    _, _, res = cb.quantize(z)
    q1 = z - res[1]
    q2, _, _ = cb.quantize(z)
    assert np.mean((z - q2) ** 2) < np.mean((z - q1) ** 2)


def test_commitment_trend_decreases_on_stationary_data():
    rng = np.random.default_rng(6)
    centers = rng.normal(size=(4, 3)) * 3
    cb = RvqCodebook.empty(1, 4, 3, decay=0.9)
    cb.init_from(rng.normal(size=(4, 3)), rng)
    losses = []
    for _ in range(200):
        z = centers[rng.integers(0, 4, 64)] + 0.01 * rng.normal(size=(64, 3))
        q, idx, res = cb.quantize(z)
        losses.append(np.mean(np.sum((z - q) ** 2, 1)))
        cb.ema_update(res, idx)
    assert np.mean(losses[-20:]) <= np.mean(losses[:20])


def test_decoder_output_contract(model):
    rng = np.random.default_rng(7)
    out = model.decode(Tensor(rng.normal(size=(5, 4)) * 10), Tensor(rng.normal(size=(1, 4)) * 10), [5])
    assert out.logits.shape == (5, SMALL.vocab_size) and out.frac.shape == (5, 3)
    assert out.lattice.shape == (1, 6)
    assert np.allclose(out.probs.sum(1), 1.0, atol=1e-6)
    assert np.all((out.angles.data >= ANGLE_MIN) & (out.angles.data <= ANGLE_MAX))
    assert all(s.n_atoms == 5 for s in out.to_structures())


def _perfect_output(s: CrystalStructure, frac_shift=0.0):
    t = structure_targets([s])
    logits = np.full((s.n_atoms, 96), -1e4)
    logits[np.arange(s.n_atoms), s.atom_types - 1] = 1e4
    frac = t["frac"].copy()
    frac[0, 0] += frac_shift
    return t, DecoderOutput(Tensor(logits), Tensor(frac), Tensor(t["log_lengths"]), Tensor(t["angles"]),
                            t["counts"])


def test_loss_zero_for_perfect_reconstruction():
    s = CrystalStructure([6, 8], [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]], [5, 6, 7, 1.5, 1.6, 1.7])
    t, out = _perfect_output(s)
    total, terms = ae_loss(t, out, Tensor([0.0]), Tensor([0.0]))
    assert total.item() == pytest.approx(0.0, abs=1e-12)


def test_frac_term_weight():
    s = CrystalStructure([6], [[0.2, 0.2, 0.2]], [5, 6, 7, 1.5, 1.6, 1.7])
    t, out = _perfect_output(s, 0.1)
    total, terms = ae_loss(t, out, Tensor([0.0]), Tensor([0.0]))
    assert total.item() == pytest.approx(3.0)


def test_objective_terms_present(model):
    structs = toy_dataset(0, 2, (2, 8))
    m = Autoencoder(SMALL, np.random.default_rng(0))
    m.codebook.init_from(np.random.default_rng(0).normal(size=(8, 4)), np.random.default_rng(1))
    _, terms, _ = ae_objective(m, structs, "train", np.random.default_rng(2))
    assert set(terms) == {"total", "types", "frac", "lattice", "commit", "kl", "accuracy"}


def test_training_is_deterministic_and_resumable():
    data = toy_dataset(1, 6, (2, 8))
    cfg = SMALL.replace(ae_steps=4, log_interval=2)
    logs = []
    _, a = train_autoencoder(data, cfg, lambda s, t: logs.append((s, t["total"])))
    _, b = train_autoencoder(data, cfg)
    assert a.equals(b)
    assert [s for s, _ in logs] == [2, 4]
    _, c = train_autoencoder(data, cfg.replace(ae_steps=3), resume=a)
    assert c.step == 7
