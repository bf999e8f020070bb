import numpy as np
import pytest

from crystal_ldm.autoencoder import Autoencoder
from crystal_ldm.config import ConfigError, RunConfig, parse_config
from crystal_ldm.crystal import CrystalStructure
from crystal_ldm.io import (Checkpoint, CheckpointFingerprintError, CheckpointTruncatedError,
                            CheckpointVersionError, CifParseError, load_checkpoint, parse_cif,
                            read_manifest, save_checkpoint, split_entries, toy_dataset, write_cif,
                            write_manifest)
from crystal_ldm.io.checkpoint import decode_arrays, encode_arrays

ONE_ATOM = """data_c
_cell_length_a 4
_cell_length_b 4
_cell_length_c 4
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C1 C 0 0 0
"""


def test_parse_minimal_cif():
    s = parse_cif(ONE_ATOM)
    assert s.n_atoms == 1 and s.atom_types.tolist() == [6]
    assert np.allclose(s.lattice, [4, 4, 4, np.pi / 2, np.pi / 2, np.pi / 2])


def test_row_arity_error_names_line():
    bad = ONE_ATOM.replace("C1 C 0 0 0", "C1 C 0 0 0 7")
    with pytest.raises(CifParseError) as e:
        parse_cif(bad)
    assert e.value.line == 14


def test_missing_cell_tag():
    with pytest.raises(CifParseError, match="_cell_length_b"):
        parse_cif(ONE_ATOM.replace("_cell_length_b 4\n", ""))


def test_non_p1_rejected():
    with pytest.raises(CifParseError, match="P1"):
        parse_cif("_symmetry_space_group_name_H-M 'F m -3 m'\n" + ONE_ATOM)


def test_unknown_element():
    with pytest.raises(CifParseError):
        parse_cif(ONE_ATOM.replace("C1 C 0 0 0", "Xx1 Xx 0 0 0"))


def test_write_is_deterministic_and_round_trips():
    for s in toy_dataset(5, 100):
        text = write_cif(s)
        assert text == write_cif(s)
        once = parse_cif(text)
        assert parse_cif(write_cif(once)).same_as(once)
        assert once.same_as(s, tol=1e-8)


def test_write_rejects_empty():
    s = CrystalStructure([6], [[0, 0, 0]], [4, 4, 4, 1.5, 1.5, 1.5])
    object.__setattr__(s, "atom_types", np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        write_cif(s)


def test_toy_dataset_contract():
    a, b = toy_dataset(3, 100), toy_dataset(3, 100)
    assert len(a) == 100
    assert all(x.same_as(y) for x, y in zip(a, b))
    comps = {tuple(sorted(np.unique(s.atom_types).tolist())) for s in a}
    assert len(comps) >= 3
    for s in a:
        s.validate()


def test_toy_dataset_size_range():
    assert all(2 <= s.n_atoms <= 16 for s in toy_dataset(0, 50, (2, 16)))
    with pytest.raises(ValueError):
        toy_dataset(0, 5, (0, 3))


def test_manifest_split_sizes(tmp_path):
    m = split_entries([f"f{k}.cif" for k in range(100)], 7)
    tags = [t for _, t in m.entries]
    assert (tags.count("train"), tags.count("val"), tags.count("test")) == (80, 10, 10)
    write_manifest(tmp_path / "m.tsv", m)
    back = read_manifest(tmp_path / "m.tsv")
    assert back.entries == m.entries and back.seed == 7


def _model_checkpoint(cfg=None):
    cfg = cfg or RunConfig(hidden=8, mp_steps=1)
    model = Autoencoder(cfg, np.random.default_rng(0))
    return model.checkpoint(3)


def test_checkpoint_round_trip(tmp_path):
    ck = _model_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    assert load_checkpoint(tmp_path / "a.ckpt").equals(ck)


def test_checkpoint_truncation(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _model_checkpoint())
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(raw[:-1])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(tmp_path / "a.ckpt")


def test_checkpoint_fingerprint_mismatch(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _model_checkpoint())
    other = RunConfig(hidden=8, mp_steps=1, latent_dim=5)
    with pytest.raises(CheckpointFingerprintError):
        load_checkpoint(tmp_path / "a.ckpt", other.fingerprint())


def test_checkpoint_version_guard():
    buf = bytearray(encode_arrays({"x": np.ones(2)}))
    buf[8] = 99
    with pytest.raises(CheckpointVersionError):
        decode_arrays(bytes(buf))


def test_checkpoint_dtypes_preserved():
    arrays = {"f": np.linspace(0, 1, 5), "i": np.arange(4, dtype=np.int64).reshape(2, 2),
              "u": np.frombuffer(b"abc", dtype=np.uint8)}
    back = decode_arrays(encode_arrays(arrays))
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])


def test_config_rejects_unknown_and_mistyped():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("bogus = 1")
    with pytest.raises(ConfigError):
        parse_config("hidden = lots")
    with pytest.raises(ConfigError):
        parse_config("augment = maybe")


def test_config_defaults_and_text_round_trip():
    cfg = RunConfig()
    assert cfg.loss_weights == (1, 300, 1, 1, 1e-4)
    assert (cfg.latent_dim, cfg.logsnr_shift, cfg.timesteps, cfg.sample_steps) == (4, 2.0, 100000, 4000)
    assert cfg.self_cond_max_offset == 200
    assert parse_config(cfg.to_text()) == cfg
