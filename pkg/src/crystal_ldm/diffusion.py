"""Latent diffusion: schedule, v-parameterisation, conditioning, denoiser, training, sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .autoencoder import Autoencoder
from .canon import BondGraph, Fragment, apply_order, canonical_order, infer_bonds, labeled_fragments
from .config import RunConfig
from .crystal import CrystalStructure, random_translate, wrap_fractional
from .featurize import build_dense_graph, dense_edges, one_hot, order_encode, sinusoidal_encode
from .gns import GnsParams, gns_forward
from .io.checkpoint import Checkpoint
from .tensor import AdamState, Tensor, no_grad, segment_sum, square
from .training import (TrainingError, apply_update, batch_indices, config_from_array,
                       config_to_array, optimizer_arrays, optimizer_from_arrays)

log = logging.getLogger(__name__)

LOG_SNR_CLAMP = 30.0
ALPHA_EPS = 1e-12


# -- schedule ---------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 100000
    s: float = 2.0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")

    def log_snr(self, t):
        """``-log tan^2(t pi / 2T) + s``, clamped to +-30."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"t must lie in [0, {self.T}]")
        with np.errstate(divide="ignore"):
            val = -2.0 * np.log(np.tan(t * np.pi / (2.0 * self.T))) + self.s
        return np.clip(val, -LOG_SNR_CLAMP, LOG_SNR_CLAMP)

    def alpha_bar(self, t):
        return np.clip(expit(self.log_snr(t)), ALPHA_EPS, 1.0 - ALPHA_EPS)

    def signal_fraction(self) -> float:
        """Fraction of [0, T] with positive log-SNR, by root finding."""
        return brentq(lambda x: float(self.log_snr(x * self.T)), 1e-9, 1.0 - 1e-9, xtol=1e-14)


def _bcast(a, like: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (like.ndim - a.ndim))


def forward_noise(z0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    a = _bcast(schedule.alpha_bar(t), z0)
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps


def v_target(z0, eps, t, schedule: NoiseSchedule) -> np.ndarray:
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {z0.shape}")
    a = _bcast(schedule.alpha_bar(t), z0)
    return np.sqrt(a) * eps - np.sqrt(1.0 - a) * z0


def x0_from_v(zt, v, t, schedule: NoiseSchedule) -> np.ndarray:
    a = _bcast(schedule.alpha_bar(t), np.asarray(zt))
    return np.sqrt(a) * zt - np.sqrt(1.0 - a) * v


def eps_from_v(zt, v, t, schedule: NoiseSchedule) -> np.ndarray:
    a = _bcast(schedule.alpha_bar(t), np.asarray(zt))
    return np.sqrt(1.0 - a) * zt + np.sqrt(a) * v


def self_cond_sample(zt, t, t2, eps2, schedule: NoiseSchedule) -> np.ndarray:
    """Noisier latent at ``t2 >= t`` drawn from q(Z_t2 | Z_t)."""
    t, t2 = np.asarray(t, dtype=np.float64), np.asarray(t2, dtype=np.float64)
    if np.any(t2 < t):
        raise ValueError("self-conditioning time must not precede t")
    zt = np.asarray(zt, dtype=np.float64)
    ratio = _bcast(schedule.alpha_bar(t2) / schedule.alpha_bar(t), zt)
    ratio = np.minimum(ratio, 1.0)
    return np.sqrt(ratio) * zt + np.sqrt(1.0 - ratio) * np.asarray(eps2, dtype=np.float64)


def time_embed(t, T: int, n_freq: int) -> np.ndarray:
    """``sin/cos(2^m * t/T)`` for m = 0..n_freq-1, interleaved."""
    x = np.asarray(t, dtype=np.float64).reshape(-1) / T
    ang = x[:, None] * (2.0 ** np.arange(n_freq))
    out = np.empty((len(x), 2 * n_freq))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


# -- running statistics -----------------------------------------------------
@dataclass
class RunningStats:
    dim: int
    count: float = 0.0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    def update(self, x) -> None:
        """Merge a batch of rows (Chan et al. parallel variance update)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        nb = len(x)
        if nb == 0:
            return
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        n = self.count + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta ** 2 * (self.count * nb / n)
        self.count = n

    @property
    def var(self) -> np.ndarray:
        return self.m2 / self.count if self.count > 0 else np.ones(self.dim)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.count": np.array([self.count]), f"{prefix}.mean": self.mean.copy(),
                f"{prefix}.m2": self.m2.copy()}

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray], prefix: str) -> "RunningStats":
        mean = a[f"{prefix}.mean"].copy()
        return cls(len(mean), float(a[f"{prefix}.count"][0]), mean, a[f"{prefix}.m2"].copy())


def standardize(z, stats: RunningStats, update: bool = False) -> np.ndarray:
    if update:
        stats.update(z)
    if stats.count <= 0:
        raise ValueError("running statistics have no observations yet")
    return (np.asarray(z, dtype=np.float64) - stats.mean) / np.sqrt(stats.var + 1e-8)


def destandardize(z, stats: RunningStats) -> np.ndarray:
    if stats.count <= 0:
        raise ValueError("running statistics have no observations yet")
    return np.asarray(z, dtype=np.float64) * np.sqrt(stats.var + 1e-8) + stats.mean


# -- conditioning -----------------------------------------------------------
@dataclass
class ConditioningSpec:
    n_atoms: int
    inpaint: bool = False
    composition: bool = False
    bonds: bool = False
    cluster: bool = False
    free_fragment: int = -1
    fixed_mask: np.ndarray = None

    def __post_init__(self):
        if self.fixed_mask is None:
            self.fixed_mask = np.zeros(self.n_atoms, dtype=bool)
        self.fixed_mask = np.asarray(self.fixed_mask, dtype=bool)
        if self.fixed_mask.shape != (self.n_atoms,):
            raise ValueError(f"mask length {self.fixed_mask.shape} does not match N={self.n_atoms}")
        if self.inpaint and self.free_fragment < 0:
            raise ValueError("inpainting needs exactly one free fragment")

    @property
    def use_order(self) -> bool:
        return not (self.inpaint or self.composition or self.bonds or self.cluster)

    @property
    def mode(self) -> str:
        names = [k for k in ("inpaint", "composition", "bonds", "cluster") if getattr(self, k)]
        return "+".join(names) if names else "de-novo"


def sample_conditioning(rng: np.random.Generator, frags: Sequence[Fragment], n_atoms: int,
                        cfg: RunConfig) -> ConditioningSpec:
    """Independent draws of the conditioning tasks for one training example.

    With a single fragment, inpainting has nothing to fix and degenerates to a
    de novo draw.
    """
    u = rng.random(4)
    inpaint = u[0] < cfg.p_inpaint
    composition = u[1] < cfg.p_composition
    bonds = u[2] < cfg.p_bonds
    cluster = composition or bonds or u[3] < cfg.p_cluster
    free = -1
    mask = np.zeros(n_atoms, dtype=bool)
    if inpaint:
        if len(frags) > 1:
            free = int(rng.integers(len(frags)))
            for k, f in enumerate(frags):
                if k != free:
                    mask[f.atoms] = True
        else:
            inpaint = False
    return ConditioningSpec(n_atoms, inpaint, composition, bonds, cluster, free, mask)


@dataclass
class Prepared:
    """A training structure in canonical atom order with its bond graph and fragments."""

    structure: CrystalStructure
    bonds: BondGraph
    frags: list
    frag_id: np.ndarray
    metal: np.ndarray


def prepare_structure(s: CrystalStructure, bond_factor: float = 1.2) -> Prepared:
    bg = infer_bonds(s, bond_factor)
    order = canonical_order(bg)
    sc = apply_order(s, order)
    bgc = bg.relabel(order)
    frags = labeled_fragments(sc, bgc)
    frag_id = np.zeros(sc.n_atoms, dtype=np.int64)
    metal = np.zeros(sc.n_atoms, dtype=bool)
    for k, f in enumerate(frags):
        frag_id[f.atoms] = k
        metal[f.atoms] = f.role == "metal"
    return Prepared(sc, bgc, frags, frag_id, metal)


def node_cond_width(cfg: RunConfig) -> int:
    v, ns = cfg.vocab_size, cfg.n_sinusoidal
    return 2 * cfg.n_order_freq + (1 + v + 6 * ns) + (1 + v) + 3


EDGE_COND_WIDTH = 4


def conditioning_features(p: Prepared, frac: np.ndarray, spec: ConditioningSpec,
                          cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-node and per-dense-edge conditioning features of one structure.

    ``frac`` is the (possibly translated) position array used for inpainting.
    Edge rows follow :func:`dense_edges` order.
    """
    n = p.structure.n_atoms
    v = cfg.vocab_size
    oh = one_hot(p.structure.atom_types, v)
    order = order_encode(n, cfg.n_order_freq) if spec.use_order else np.zeros((n, 2 * cfg.n_order_freq))
    fixed = spec.fixed_mask[:, None].astype(np.float64) if spec.inpaint else np.zeros((n, 1))
    inp = np.concatenate([fixed, oh * fixed, sinusoidal_encode(frac, cfg.n_sinusoidal).reshape(n, -1) * fixed], 1)
    cflag = float(spec.composition)
    comp = np.concatenate([np.full((n, 1), cflag), oh * cflag], 1)
    kflag = float(spec.cluster)
    clus = np.stack([np.full(n, kflag), p.metal * kflag, (~p.metal) * kflag], 1)
    nodes = np.concatenate([order, inp, comp, clus], 1)

    snd, rcv = dense_edges([n])
    adj = np.zeros((n, n))
    if p.bonds.edges.size:
        adj[p.bonds.edges[:, 0], p.bonds.edges[:, 1]] = 1.0
        adj[p.bonds.edges[:, 1], p.bonds.edges[:, 0]] = 1.0
    bflag = float(spec.bonds)
    same = (p.frag_id[snd] == p.frag_id[rcv]).astype(np.float64)
    edges = np.stack([adj[snd, rcv] * bflag, np.full(len(snd), bflag), same * kflag,
                      np.full(len(snd), kflag)], 1)
    return nodes, edges


# -- denoiser ---------------------------------------------------------------
class Denoiser:
    """GNS over the fully connected latent graph predicting v for every row."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        d, nt = cfg.latent_dim, cfg.n_time_freq
        self.node_in = d + (d + 1) + 4 * nt + node_cond_width(cfg)
        self.edge_in = 2 * d + EDGE_COND_WIDTH
        self.gnode_in = d + (d + 1) + 4 * nt
        self.net = GnsParams(self.node_in, self.edge_in, self.gnode_in, 2 * d, d, d, rng,
                             hidden=cfg.hidden, mp_steps=cfg.mp_steps, depth=cfg.mlp_depth,
                             activation=cfg.activation, name="den")

    def parameters(self) -> dict[str, Tensor]:
        return self.net.named_parameters()

    def __call__(self, zt_local, zt_global, counts, t, sc_local=None, sc_global=None, t2=None,
                 node_cond=None, edge_cond=None) -> tuple[Tensor, Tensor]:
        """Predict v for local rows and global rows.

        ``t``/``t2`` hold one time per structure; ``sc_*`` are the
        self-conditioning latents (``None`` entries fall back to the zero
        placeholder with a cleared validity flag, selected per structure by
        ``t2`` being NaN).
        """
        cfg = self.cfg
        counts = np.asarray(counts, dtype=np.int64)
        b, n_tot = len(counts), int(counts.sum())
        d = cfg.latent_dim
        node_graph = np.repeat(np.arange(b), counts)
        t = np.asarray(t, dtype=np.float64).reshape(b)
        t2 = np.full(b, np.nan) if t2 is None else np.asarray(t2, dtype=np.float64).reshape(b)
        valid = ~np.isnan(t2)
        te = time_embed(t, cfg.timesteps, cfg.n_time_freq)
        te2 = time_embed(np.where(valid, t2, 0.0), cfg.timesteps, cfg.n_time_freq) * valid[:, None]
        scl = np.zeros((n_tot, d)) if sc_local is None else np.asarray(sc_local) * valid[node_graph][:, None]
        scg = np.zeros((b, d)) if sc_global is None else np.asarray(sc_global) * valid[:, None]
        if node_cond is None:
            node_cond = np.zeros((n_tot, node_cond_width(cfg)))
        loc_extra = np.concatenate([scl, valid[node_graph][:, None].astype(np.float64),
                                    te[node_graph], te2[node_graph], node_cond], 1)
        glob_extra = np.concatenate([scg, valid[:, None].astype(np.float64), te, te2], 1)
        n_edges = int((counts * (counts - 1)).sum())
        if edge_cond is None:
            edge_cond = np.zeros((n_edges, EDGE_COND_WIDTH))
        zl = zt_local if isinstance(zt_local, Tensor) else Tensor(zt_local)
        zg = zt_global if isinstance(zt_global, Tensor) else Tensor(zt_global)
        graph = build_dense_graph(zl, zg, counts, node_extra=loc_extra, edge_extra=Tensor(edge_cond),
                                  global_extra=Tensor(glob_extra))
        return gns_forward(graph, self.net)


def diffusion_loss(v_local: Tensor, v_global: Tensor, tgt_local, tgt_global, counts) -> Tensor:
    """Mean squared error over the (N+1) x D rows of each structure, averaged over the batch."""
    counts = np.asarray(counts, dtype=np.int64)
    d = v_local.shape[1]
    node_graph = np.repeat(np.arange(len(counts)), counts)
    per_l = segment_sum(square(v_local - tgt_local).sum(axis=1), node_graph, len(counts))
    per_g = square(v_global - tgt_global).sum(axis=1)
    return ((per_l + per_g) * (1.0 / ((counts + 1) * d).astype(np.float64))).mean()


@dataclass
class DiffusionModel:
    denoiser: Denoiser
    stats_local: RunningStats
    stats_global: RunningStats
    atom_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def cfg(self) -> RunConfig:
        return self.denoiser.cfg

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.cfg.timesteps, self.cfg.logsnr_shift)

    def checkpoint(self, step: int, opt: AdamState | None, ae_fingerprint: str,
                   extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
        ex = {"config": config_to_array(self.cfg), "atom_counts": self.atom_counts.astype(np.int64),
              "ae_fingerprint": np.frombuffer(ae_fingerprint.encode(), dtype=np.uint8).copy()}
        ex.update(extra or {})
        stats = {**self.stats_local.arrays("local"), **self.stats_global.arrays("global")}
        return Checkpoint(params={k: p.data.copy() for k, p in self.denoiser.parameters().items()},
                          step=step, optimizer=optimizer_arrays(opt) if opt else {}, stats=stats,
                          fingerprint=self.cfg.fingerprint(), extra=ex)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "DiffusionModel":
        cfg = config_from_array(ck.extra["config"])
        den = Denoiser(cfg, np.random.default_rng(0))
        params = den.parameters()
        if set(params) != set(ck.params):
            raise ValueError("checkpoint parameters do not match the denoiser")
        for k, p in params.items():
            if p.data.shape != ck.params[k].shape:
                raise ValueError(f"parameter {k} has shape {ck.params[k].shape}, expected {p.data.shape}")
            p.data[...] = ck.params[k]
        return cls(den, RunningStats.from_arrays(ck.stats, "local"),
                   RunningStats.from_arrays(ck.stats, "global"), ck.extra["atom_counts"].copy())


# -- training ---------------------------------------------------------------
def encode_latents(ae: Autoencoder, structures: Sequence[CrystalStructure]) -> tuple[np.ndarray, np.ndarray]:
    """Raw diffusion targets: unquantised Z_L rows and the global mean."""
    with no_grad():
        zl, mu, _, _ = ae.encode_batch(structures)
    return zl.data.copy(), mu.data.copy()


def train_diffusion(structures: Sequence[CrystalStructure], ae: Autoencoder, cfg: RunConfig,
                    callback: Callable[[int, dict], None] | None = None,
                    ae_fingerprint: str = "", resume: Checkpoint | None = None
                    ) -> tuple[DiffusionModel, Checkpoint]:
    """v-prediction training against a frozen autoencoder; see :func:`train_autoencoder` for resume."""
    if not structures:
        raise TrainingError("no training structures")
    schedule = NoiseSchedule(cfg.timesteps, cfg.logsnr_shift)
    prepared = [prepare_structure(s, cfg.bond_factor) for s in structures]
    start = 0
    if resume is not None:
        model = DiffusionModel.from_checkpoint(resume)
        opt = optimizer_from_arrays(resume.optimizer)
        start = resume.step
    else:
        den = Denoiser(cfg, np.random.default_rng([cfg.seed, 3]))
        model = DiffusionModel(den, RunningStats(cfg.latent_dim), RunningStats(cfg.latent_dim),
                               np.array([s.n_atoms for s in structures], dtype=np.int64))
        opt = AdamState()
    den = model.denoiser
    rng = np.random.default_rng([cfg.seed, 2, start])
    params = den.parameters()
    hist = {"loss": [], "self_cond": []}
    batches = batch_indices(rng, len(prepared), cfg.diff_batch, cfg.diff_steps)
    for step, idx in enumerate(batches, start=start):
        batch = [prepared[i] for i in idx]
        structs = [p.structure for p in batch]
        if cfg.augment:
            structs = [random_translate(s, rng.random(3)) for s in structs]
        counts = np.array([s.n_atoms for s in structs], dtype=np.int64)
        b = len(counts)
        node_graph = np.repeat(np.arange(b), counts)
        zl_raw, mu_raw = encode_latents(ae, structs)
        zl = standardize(zl_raw, model.stats_local, update=True)
        zg = standardize(mu_raw, model.stats_global, update=True)
        t = rng.uniform(0.0, cfg.timesteps, size=b)
        eps_l = rng.standard_normal(zl.shape)
        eps_g = rng.standard_normal(zg.shape)
        zt_l = forward_noise(zl, t[node_graph], eps_l, schedule)
        zt_g = forward_noise(zg, t, eps_g, schedule)
        tgt_l = v_target(zl, eps_l, t[node_graph], schedule)
        tgt_g = v_target(zg, eps_g, t, schedule)
        use_sc = rng.random(b) < cfg.self_cond_prob
        dt = rng.integers(1, cfg.self_cond_max_offset + 1, size=b)
        t2 = np.minimum(t + dt, cfg.timesteps)
        sc_l = self_cond_sample(zt_l, t[node_graph], t2[node_graph], rng.standard_normal(zl.shape), schedule)
        sc_g = self_cond_sample(zt_g, t, t2, rng.standard_normal(zg.shape), schedule)
        t2 = np.where(use_sc, t2, np.nan)
        node_c, edge_c = [], []
        for p, s in zip(batch, structs):
            spec = sample_conditioning(rng, p.frags, s.n_atoms, cfg)
            nc, ec = conditioning_features(p, s.frac, spec, cfg)
            node_c.append(nc)
            edge_c.append(ec)
        v_l, v_g = den(zt_l, zt_g, counts, t, sc_l, sc_g, t2, np.concatenate(node_c), np.concatenate(edge_c))
        loss = diffusion_loss(v_l, v_g, tgt_l, tgt_g, counts)
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingError(f"non-finite diffusion loss at step {step} (t={t.tolist()})")
        apply_update(params, loss, opt, cfg.diff_lr, cfg.grad_clip)
        hist["loss"].append(val)
        hist["self_cond"].append(float(use_sc.mean()))
        if callback is not None and (step + 1) % cfg.log_interval == 0:
            callback(step + 1, {"loss": val, "self_cond": float(use_sc.mean())})
    ex = {f"history.{k}": np.array(v) for k, v in hist.items()}
    return model, model.checkpoint(start + cfg.diff_steps, opt, ae_fingerprint, ex)


# -- sampling ---------------------------------------------------------------
def sample_atom_count(rng: np.random.Generator, histogram: dict[int, float]) -> int:
    if not histogram:
        raise ValueError("empty atom-count histogram")
    keys = sorted(histogram)
    w = np.array([histogram[k] for k in keys], dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("histogram weights must be non-negative with a positive total")
    return int(keys[rng.choice(len(keys), p=w / w.sum())])


def count_histogram(counts) -> dict[int, float]:
    vals, freq = np.unique(np.asarray(counts, dtype=np.int64), return_counts=True)
    return {int(v): float(f) / len(counts) for v, f in zip(vals, freq)}


def time_grid(n_steps: int, T: int) -> np.ndarray:
    """Descending uniform grid ``T, ..., 0`` with ``n_steps`` intervals."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return T * np.arange(n_steps, -1, -1, dtype=np.float64) / n_steps


VFn = Callable[[np.ndarray, np.ndarray, float, "tuple[np.ndarray, np.ndarray, float] | None"],
               "tuple[np.ndarray, np.ndarray]"]


def sample_latents(v_fn, shape_local: tuple[int, int], shape_global: tuple[int, int], n_steps: int,
                   schedule: NoiseSchedule, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sampling with v-prediction.

    ``v_fn(z_local, z_global, t, prev)`` returns predicted v rows; ``prev`` is
    ``None`` on the first call and afterwards the previous (noisier) latent
    pair with its time, which serves as the self-conditioning input. The final
    step returns the clean-latent prediction directly.
    """
    grid = time_grid(n_steps, schedule.T)
    zl = rng.standard_normal(shape_local)
    zg = rng.standard_normal(shape_global)
    prev = None
    for k in range(n_steps):
        t, tn = grid[k], grid[k + 1]
        vl, vg = v_fn(zl, zg, t, prev)
        x0_l, x0_g = x0_from_v(zl, vl, t, schedule), x0_from_v(zg, vg, t, schedule)
        if k == n_steps - 1:
            return x0_l, x0_g
        a, an = float(schedule.alpha_bar(t)), float(schedule.alpha_bar(tn))
        ratio = a / an
        c0 = np.sqrt(an) * (1.0 - ratio) / (1.0 - a)
        ct = np.sqrt(ratio) * (1.0 - an) / (1.0 - a)
        sigma = np.sqrt(max((1.0 - an) / (1.0 - a) * (1.0 - ratio), 0.0))
        prev = (zl, zg, t)
        zl = c0 * x0_l + ct * zl + sigma * rng.standard_normal(shape_local)
        zg = c0 * x0_g + ct * zg + sigma * rng.standard_normal(shape_global)
    raise AssertionError("unreachable")


def oracle_v_fn(z0_local: np.ndarray, z0_global: np.ndarray, schedule: NoiseSchedule):
    """Test double returning the exact v that points at a known clean latent."""

    def fn(zl, zg, t, prev):
        a = float(schedule.alpha_bar(t))
        return ((np.sqrt(a) * zl - z0_local) / np.sqrt(1.0 - a),
                (np.sqrt(a) * zg - z0_global) / np.sqrt(1.0 - a))

    return fn


def model_v_fn(model: DiffusionModel, counts, node_cond=None, edge_cond=None):
    den = model.denoiser
    b = len(counts)

    def fn(zl, zg, t, prev):
        with no_grad():
            if prev is None:
                vl, vg = den(zl, zg, counts, np.full(b, t), node_cond=node_cond, edge_cond=edge_cond)
            else:
                pl, pg, tp = prev
                vl, vg = den(zl, zg, counts, np.full(b, t), pl, pg, np.full(b, tp), node_cond, edge_cond)
        return vl.data, vg.data

    return fn


def sample_structures(model: DiffusionModel, ae: Autoencoder, counts: Sequence[int], n_steps: int,
                      rng: np.random.Generator, template: Prepared | None = None,
                      spec: ConditioningSpec | None = None) -> list[CrystalStructure]:
    """Sample one structure per entry of ``counts``.

    With a ``template`` and ``spec`` every structure shares the template's
    conditioning; fixed atoms (inpainting) and types (composition) are written
    back into the decoded output.
    """
    cfg = model.cfg
    counts = np.asarray(counts, dtype=np.int64)
    trained = set(int(c) for c in model.atom_counts)
    for c in counts:
        if trained and not min(trained) <= c <= max(trained):
            log.warning("sampling N=%d outside the trained range %d..%d", c, min(trained), max(trained))
    node_c = edge_c = None
    if template is not None and spec is not None:
        if np.any(counts != template.structure.n_atoms):
            raise ValueError("conditioned sampling needs N equal to the template size")
        nc, ec = conditioning_features(template, template.structure.frac, spec, cfg)
        node_c = np.tile(nc, (len(counts), 1))
        edge_c = np.tile(ec, (len(counts), 1))
    else:
        parts = [conditioning_features(_blank(int(n)), np.zeros((int(n), 3)), ConditioningSpec(int(n)), cfg)
                 for n in counts]
        node_c = np.concatenate([p[0] for p in parts])
        edge_c = np.concatenate([p[1] for p in parts])
    d = cfg.latent_dim
    zl, zg = sample_latents(model_v_fn(model, counts, node_c, edge_c), (int(counts.sum()), d),
                            (len(counts), d), n_steps, model.schedule, rng)
    zl = destandardize(zl, model.stats_local)
    zg = destandardize(zg, model.stats_global)
    out = ae.decode_latents(zl, zg, counts)
    if template is not None and spec is not None:
        ts = template.structure
        fixed_out = []
        for s in out:
            types, frac = s.atom_types.copy(), s.frac.copy()
            if spec.composition:
                types = ts.atom_types.copy()
            if spec.inpaint:
                types[spec.fixed_mask] = ts.atom_types[spec.fixed_mask]
                frac[spec.fixed_mask] = ts.frac[spec.fixed_mask]
            fixed_out.append(s.with_(atom_types=types, frac=wrap_fractional(frac)))
        out = fixed_out
    return out


def _blank(n: int) -> Prepared:
    """Placeholder preparation for unconditional sampling (features are all masked)."""
    s = CrystalStructure(np.ones(n, dtype=np.int64), np.zeros((n, 3)), np.array([10.0, 10, 10, np.pi / 2,
                                                                                np.pi / 2, np.pi / 2]))
    return Prepared(s, BondGraph(s.atom_types, np.zeros((0, 2), dtype=np.int64)), [],
                    np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
