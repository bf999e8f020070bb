"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Values are parsed according to the
field type of :class:`RunConfig`; booleans accept true/false/1/0/yes/no.
Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0

    # toy data
    n_structures: int = 100
    min_atoms: int = 2
    max_atoms: int = 24
    train_frac: float = 0.8
    val_frac: float = 0.1

    # featurisation
    k_neighbors: int = 12
    r_cut: float = 6.0
    n_bessel: int = 8
    n_sinusoidal: int = 4
    n_rbf: int = 8
    vocab_size: int = 96

    # GNS backbone
    hidden: int = 64
    mp_steps: int = 3
    mlp_depth: int = 2
    activation: str = "silu"
    attention_envelope: bool = True

    # autoencoder
    latent_dim: int = 4
    rvq_levels: int = 2
    rvq_codes: int = 256
    rvq_decay: float = 0.99
    w_types: float = 1.0
    w_frac: float = 300.0
    w_lattice: float = 1.0
    w_commit: float = 1.0
    w_kl: float = 1e-4
    augment: bool = True
    ae_lr: float = 1e-3
    ae_steps: int = 2000
    ae_batch: int = 16

    # latent diffusion
    timesteps: int = 100000
    logsnr_shift: float = 2.0
    sample_steps: int = 4000
    self_cond_prob: float = 0.5
    self_cond_frac: float = 0.002
    p_inpaint: float = 0.25
    p_composition: float = 0.25
    p_bonds: float = 0.25
    p_cluster: float = 0.5
    n_time_freq: int = 8
    n_order_freq: int = 4
    diff_lr: float = 1e-3
    diff_steps: int = 2000
    diff_batch: int = 16

    # shared training
    grad_clip: float = 10.0
    log_interval: int = 10

    # chemistry heuristics
    bond_factor: float = 1.2
    overlap_factor: float = 0.5

    # keys that change array shapes; a checkpoint is only loadable under the same values
    SHAPE_KEYS = ("k_neighbors", "n_bessel", "n_sinusoidal", "n_rbf", "vocab_size", "hidden",
                  "mp_steps", "mlp_depth", "activation", "latent_dim", "rvq_levels",
                  "rvq_codes", "n_time_freq", "n_order_freq")

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        for name in ("k_neighbors", "n_bessel", "n_sinusoidal", "n_rbf", "vocab_size", "hidden",
                     "latent_dim", "rvq_levels", "rvq_codes", "timesteps", "sample_steps",
                     "ae_batch", "diff_batch", "log_interval", "mlp_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.r_cut <= 0:
            raise ConfigError("r_cut must be positive")
        for name in ("self_cond_prob", "p_inpaint", "p_composition", "p_bonds", "p_cluster",
                     "rvq_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if not 2 <= self.min_atoms <= self.max_atoms <= 64:
            raise ConfigError("atom range must satisfy 2 <= min_atoms <= max_atoms <= 64")

    @property
    def self_cond_max_offset(self) -> int:
        return max(1, int(self.timesteps * self.self_cond_frac))

    @property
    def loss_weights(self) -> tuple[float, float, float, float, float]:
        return (self.w_types, self.w_frac, self.w_lattice, self.w_commit, self.w_kl)

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={getattr(self, k)!r}" for k in self.SHAPE_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_overrides(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    base = base or RunConfig()
    return dataclasses.replace(base, **values)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for k, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {k}: expected 'key = value'")
        key, val = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {k}: duplicate key {key!r}")
        pairs[key] = val
    return parse_overrides(pairs, base)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
