"""Graph autoencoder: sparse periodic encoder, RVQ + Gaussian bottleneck, dense decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .crystal import ANGLE_MAX, ANGLE_MIN, CrystalStructure, random_translate, wrap_fractional
from .featurize import (EncoderFeatureConfig, batch_graphs, build_dense_graph, build_encoder_graph,
                        retranslate_encoder_graph)
from .gns import GnsParams, cutoff_envelope, gns_forward
from .io.checkpoint import Checkpoint
from .tensor import AdamState, Tensor, exp, log_softmax, no_grad, segment_sum, sigmoid, softmax, square
from .training import (TrainingError, apply_update, batch_indices, config_from_array,
                       config_to_array, optimizer_arrays, optimizer_from_arrays)

log = logging.getLogger(__name__)

_LAPLACE_EPS = 1e-5


# -- latents ----------------------------------------------------------------
@dataclass
class LatentRepresentation:
    z_local: np.ndarray  # N x D
    z_global: np.ndarray  # 2 x D: rows (mu, log-variance)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.z_local)) and np.all(np.isfinite(self.z_global))):
            raise ValueError("latents must be finite")

    @property
    def mu(self) -> np.ndarray:
        return self.z_global[0]

    @property
    def logvar(self) -> np.ndarray:
        return self.z_global[1]


@dataclass
class RvqCodebook:
    """Residual vector quantiser with exponential-moving-average code updates."""

    codes: np.ndarray  # levels x K x D
    decay: float = 0.99
    counts: np.ndarray | None = None
    sums: np.ndarray | None = None
    initialized: bool = False

    def __post_init__(self):
        if self.codes.ndim != 3 or self.codes.shape[1] < 1:
            raise ValueError("codebook needs shape (levels, codes, dim) with at least one code")
        if self.counts is None:
            self.counts = np.ones(self.codes.shape[:2])
        if self.sums is None:
            self.sums = self.codes.copy()

    @classmethod
    def empty(cls, levels: int, n_codes: int, dim: int, decay: float = 0.99) -> "RvqCodebook":
        return cls(np.zeros((levels, n_codes, dim)), decay)

    @property
    def levels(self) -> int:
        return self.codes.shape[0]

    def init_from(self, z: np.ndarray, rng: np.random.Generator) -> None:
        """Seed each level with (jittered) residual rows from a first batch."""
        r = np.array(z, dtype=np.float64)
        k = self.codes.shape[1]
        for lvl in range(self.levels):
            pick = rng.choice(len(r), size=k, replace=len(r) < k)
            scale = 1e-3 * (r.std() + 1e-8)
            self.codes[lvl] = r[pick] + rng.normal(0.0, scale, size=(k, r.shape[1]))
            idx = self._nearest(r, lvl)
            r = r - self.codes[lvl][idx]
        self.counts = np.ones(self.codes.shape[:2])
        self.sums = self.codes.copy()
        self.initialized = True

    def _nearest(self, r: np.ndarray, lvl: int) -> np.ndarray:
        c = self.codes[lvl]
        d2 = (r * r).sum(1)[:, None] - 2.0 * r @ c.T + (c * c).sum(1)[None, :]
        return np.argmin(d2, axis=1)

    def quantize(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """Return (quantised z, code indices N x levels, per-level input residuals)."""
        if not self.initialized:
            raise ValueError("codebook used before initialisation")
        r = np.array(z, dtype=np.float64)
        q = np.zeros_like(r)
        idx = np.zeros((len(r), self.levels), dtype=np.int64)
        residuals = []
        for lvl in range(self.levels):
            residuals.append(r)
            i = self._nearest(r, lvl)
            idx[:, lvl] = i
            q = q + self.codes[lvl][i]
            r = r - self.codes[lvl][i]
        return q, idx, residuals

    def ema_update(self, residuals: Sequence[np.ndarray], idx: np.ndarray) -> None:
        g = self.decay
        k = self.codes.shape[1]
        for lvl, r in enumerate(residuals):
            n_k = np.bincount(idx[:, lvl], minlength=k).astype(np.float64)
            s_k = np.zeros_like(self.sums[lvl])
            np.add.at(s_k, idx[:, lvl], r)
            self.counts[lvl] = g * self.counts[lvl] + (1.0 - g) * n_k
            self.sums[lvl] = g * self.sums[lvl] + (1.0 - g) * s_k
            total = self.counts[lvl].sum()
            smoothed = (self.counts[lvl] + _LAPLACE_EPS) / (total + k * _LAPLACE_EPS) * total
            self.codes[lvl] = self.sums[lvl] / smoothed[:, None]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"rvq.codes": self.codes.copy(), "rvq.counts": self.counts.copy(),
                "rvq.sums": self.sums.copy(), "rvq.meta": np.array([self.decay, float(self.initialized)])}

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "RvqCodebook":
        decay, init = a["rvq.meta"]
        return cls(a["rvq.codes"].copy(), float(decay), a["rvq.counts"].copy(), a["rvq.sums"].copy(),
                   bool(init))


@dataclass
class BottleneckOutput:
    z_local: Tensor
    z_global: Tensor
    commitment: Tensor  # per structure
    kl: Tensor  # per structure
    codes: np.ndarray
    residuals: list = field(default_factory=list)
    quant_pin: tuple[np.ndarray, np.ndarray] | None = None  # (Q - Z_L, Q) at the call


def _per_structure_mean(rows: Tensor, node_graph: np.ndarray, counts: np.ndarray) -> Tensor:
    """Sum per-atom scalars within each structure and divide by its atom count."""
    return segment_sum(rows, node_graph, len(counts)) * (1.0 / counts.astype(np.float64))


def bottleneck(z_local: Tensor, mu: Tensor, logvar: Tensor, counts, codebook: RvqCodebook,
               mode: str = "eval", rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None,
               quant_pin: tuple[np.ndarray, np.ndarray] | None = None) -> BottleneckOutput:
    """Quantise local latents (straight-through) and sample or take the mean of the global one.

    ``quant_pin`` = (Q - Z_L, Q) from an earlier call may be supplied to freeze
    both the straight-through offset and the commitment target, which makes the
    composite smooth for finite-difference checks.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    counts = np.asarray(counts, dtype=np.int64)
    node_graph = np.repeat(np.arange(len(counts)), counts)
    codes = np.zeros((z_local.shape[0], codebook.levels), dtype=np.int64)
    residuals = []
    if quant_pin is None:
        q, codes, residuals = codebook.quantize(z_local.data)
        quant_pin = (q - z_local.data, q)
    offset, q = quant_pin
    zq = z_local + Tensor(offset)
    commit_rows = square(z_local - Tensor(q)).sum(axis=1)
    commitment = _per_structure_mean(commit_rows, node_graph, counts)
    if mode == "train":
        if eps is None:
            if rng is None:
                raise ValueError("train-mode bottleneck needs rng or eps")
            eps = rng.standard_normal(mu.shape)
        zg = mu + exp(logvar * 0.5) * Tensor(eps)
    else:
        zg = mu
    kl_rows = (square(mu) + exp(logvar) - 1.0 - logvar).sum(axis=1) * 0.5
    kl = kl_rows * (1.0 / counts.astype(np.float64))
    return BottleneckOutput(zq, zg, commitment, kl, codes, residuals, quant_pin)


# -- decoder output ---------------------------------------------------------
@dataclass
class DecoderOutput:
    logits: Tensor  # sum(N) x vocab
    frac: Tensor  # sum(N) x 3, in (0, 1)
    log_lengths: Tensor  # B x 3, log of lengths / N^(1/3)
    angles: Tensor  # B x 3, radians
    counts: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits).data

    @property
    def lattice(self) -> np.ndarray:
        scale = np.cbrt(self.counts.astype(np.float64))[:, None]
        return np.concatenate([np.exp(self.log_lengths.data) * scale, self.angles.data], axis=1)

    def to_structures(self) -> list[CrystalStructure]:
        types = np.argmax(self.logits.data, axis=1) + 1
        frac = wrap_fractional(self.frac.data)
        lat = self.lattice
        lat[:, 3:] = np.clip(lat[:, 3:], ANGLE_MIN, ANGLE_MAX)
        out, start = [], 0
        for b, n in enumerate(self.counts):
            out.append(CrystalStructure(types[start:start + n], frac[start:start + n], lat[b]))
            start += n
        return out


# -- model ------------------------------------------------------------------
class Autoencoder:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.feat = EncoderFeatureConfig.from_config(cfg)
        d, h, f = cfg.latent_dim, cfg.hidden, self.feat
        common = dict(hidden=h, mp_steps=cfg.mp_steps, depth=cfg.mlp_depth, activation=cfg.activation)
        self.encoder = GnsParams(f.node_width, f.edge_width, f.global_node_width, f.global_edge_width,
                                 d, 2 * d, rng, name="enc", **common)
        self.decoder = GnsParams(d, 2 * d, d, 2 * d, cfg.vocab_size + 3, 6, rng, name="dec", **common)
        self.codebook = RvqCodebook.empty(cfg.rvq_levels, cfg.rvq_codes, d, cfg.rvq_decay)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.named_parameters(), **self.decoder.named_parameters()}

    # encoder
    def encoder_graph(self, s: CrystalStructure):
        return build_encoder_graph(s, self.feat)

    def encode_batch(self, structures: Sequence[CrystalStructure],
                     graphs=None) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
        """Encoder pass over a batch; ``graphs`` may supply prebuilt encoder graphs."""
        if graphs is None:
            graphs = [self.encoder_graph(s) for s in structures]
        graph = batch_graphs(graphs)
        gate = cutoff_envelope(graph.local_edge_lengths, self.cfg.r_cut) if self.cfg.attention_envelope else None
        zl, zg = gns_forward(graph, self.encoder, gate)
        d = self.cfg.latent_dim
        counts = np.array([s.n_atoms for s in structures], dtype=np.int64)
        return zl, zg[:, :d], zg[:, d:], counts

    def encode(self, s: CrystalStructure) -> LatentRepresentation:
        with no_grad():
            zl, mu, lv, _ = self.encode_batch([s])
        return LatentRepresentation(zl.data.copy(), np.stack([mu.data[0], lv.data[0]]))

    # decoder
    def decode(self, z_local, z_global, counts) -> DecoderOutput:
        counts = np.asarray(counts, dtype=np.int64)
        graph = build_dense_graph(z_local, z_global, counts)
        out_l, out_g = gns_forward(graph, self.decoder)
        v = self.cfg.vocab_size
        logits = out_l[:, :v]
        frac = sigmoid(out_l[:, v:])
        log_len = out_g[:, :3]
        angles = sigmoid(out_g[:, 3:]) * (ANGLE_MAX - ANGLE_MIN) + ANGLE_MIN
        return DecoderOutput(logits, frac, log_len, angles, counts)

    def reconstruct(self, structures: Sequence[CrystalStructure]) -> DecoderOutput:
        """Eval-mode round trip (quantised Z_L, mean Z_G) without gradients."""
        with no_grad():
            zl, mu, lv, counts = self.encode_batch(structures)
            bn = bottleneck(zl, mu, lv, counts, self.codebook, "eval")
            return self.decode(bn.z_local, bn.z_global, counts)

    def decode_latents(self, z_local: np.ndarray, mu: np.ndarray, counts) -> list[CrystalStructure]:
        """Quantise raw latents, decode, and build structures."""
        with no_grad():
            q, _, _ = self.codebook.quantize(z_local)
            return self.decode(Tensor(q), Tensor(np.atleast_2d(mu)), counts).to_structures()

    # persistence
    def checkpoint(self, step: int = 0, opt: AdamState | None = None,
                   extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
        ex = {"config": config_to_array(self.cfg)}
        ex.update(extra or {})
        return Checkpoint(params={k: p.data.copy() for k, p in self.parameters().items()},
                          step=step, optimizer=optimizer_arrays(opt) if opt else {},
                          stats=self.codebook.arrays(), fingerprint=self.cfg.fingerprint(), extra=ex)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "Autoencoder":
        cfg = config_from_array(ck.extra["config"])
        model = cls(cfg, np.random.default_rng(0))
        params = model.parameters()
        missing = set(params) ^ set(ck.params)
        if missing:
            raise ValueError(f"checkpoint parameters do not match model: {sorted(missing)[:3]}")
        for k, p in params.items():
            if p.data.shape != ck.params[k].shape:
                raise ValueError(f"parameter {k} has shape {ck.params[k].shape}, expected {p.data.shape}")
            p.data[...] = ck.params[k]
        model.codebook = RvqCodebook.from_arrays(ck.stats)
        return model


# -- objective --------------------------------------------------------------
def structure_targets(structures: Sequence[CrystalStructure]) -> dict[str, np.ndarray]:
    counts = np.array([s.n_atoms for s in structures], dtype=np.int64)
    lat = np.stack([s.lattice for s in structures])
    return dict(
        types=np.concatenate([s.atom_types for s in structures]),
        frac=np.concatenate([s.frac for s in structures]),
        log_lengths=np.log(lat[:, :3] / np.cbrt(counts.astype(np.float64))[:, None]),
        angles=lat[:, 3:],
        counts=counts,
    )


def ae_loss(targets: dict[str, np.ndarray], out: DecoderOutput, commitment: Tensor, kl: Tensor,
            weights=(1.0, 300.0, 1.0, 1.0, 1e-4)) -> tuple[Tensor, dict[str, float]]:
    """Weighted five-term objective, averaged over the structures of a batch.

    Each per-structure term is normalised by its own atom count before the
    batch average.
    """
    counts = targets["counts"]
    node_graph = np.repeat(np.arange(len(counts)), counts)
    lp = log_softmax(out.logits)
    rows = np.arange(len(targets["types"]))
    ce = -lp[(rows, targets["types"] - 1)]
    l_a = _per_structure_mean(ce, node_graph, counts).mean()
    l_f = _per_structure_mean(square(out.frac - targets["frac"]).sum(axis=1), node_graph, counts).mean()
    l_l = (square(out.log_lengths - targets["log_lengths"]).mean(axis=1)
           + square(out.angles - targets["angles"]).mean(axis=1)).mean()
    l_c = commitment.mean()
    l_k = kl.mean()
    w = weights
    total = l_a * w[0] + l_f * w[1] + l_l * w[2] + l_c * w[3] + l_k * w[4]
    terms = dict(total=total.item(), types=l_a.item(), frac=l_f.item(), lattice=l_l.item(),
                 commit=l_c.item(), kl=l_k.item())
    return total, terms


def ae_objective(model: Autoencoder, structures: Sequence[CrystalStructure], mode: str = "train",
                 rng: np.random.Generator | None = None, eps=None, quant_pin=None, graphs=None):
    """Full encode -> bottleneck -> decode -> loss pass. Returns (loss, terms, bottleneck)."""
    zl, mu, lv, counts = model.encode_batch(structures, graphs)
    bn = bottleneck(zl, mu, lv, counts, model.codebook, mode, rng, eps, quant_pin)
    out = model.decode(bn.z_local, bn.z_global, counts)
    loss, terms = ae_loss(structure_targets(structures), out, bn.commitment, bn.kl, model.cfg.loss_weights)
    terms["accuracy"] = float(np.mean(np.argmax(out.logits.data, 1) + 1
                                      == np.concatenate([s.atom_types for s in structures])))
    return loss, terms, bn


def evaluate_reconstruction(model: Autoencoder, structures: Sequence[CrystalStructure]) -> dict[str, float]:
    """Eval-mode losses and atom-type accuracy on unaugmented structures."""
    with no_grad():
        _, terms, _ = ae_objective(model, structures, mode="eval")
    return terms


# -- training ---------------------------------------------------------------
def train_autoencoder(structures: Sequence[CrystalStructure], cfg: RunConfig,
                      callback: Callable[[int, dict], None] | None = None,
                      resume: Checkpoint | None = None) -> tuple[Autoencoder, Checkpoint]:
    """Deterministic Adam training with per-draw random translations.

    ``cfg.ae_steps`` further steps are taken; with ``resume`` the model,
    codebook and optimiser continue from the checkpoint and step numbers
    carry on from its counter. ``callback(step, terms)`` fires after every
    ``log_interval``-th step.
    """
    if not structures:
        raise TrainingError("no training structures")
    start = 0
    if resume is not None:
        model = Autoencoder.from_checkpoint(resume)
        opt = optimizer_from_arrays(resume.optimizer)
        start = resume.step
    else:
        model = Autoencoder(cfg, np.random.default_rng([cfg.seed, 1]))
        opt = AdamState()
    rng = np.random.default_rng([cfg.seed, 0, start])
    params = model.parameters()
    base_graphs = [model.encoder_graph(s) for s in structures]
    hist = {k: [] for k in ("total", "types", "frac", "lattice", "commit", "kl", "accuracy")}
    batches = batch_indices(rng, len(structures), cfg.ae_batch, cfg.ae_steps)
    for step, idx in enumerate(batches, start=start):
        batch = [structures[i] for i in idx]
        graphs = [base_graphs[i] for i in idx]
        if cfg.augment:
            batch = [random_translate(s, rng.random(3)) for s in batch]
            graphs = [retranslate_encoder_graph(g, s.frac, model.feat) for g, s in zip(graphs, batch)]
        if not model.codebook.initialized:
            with no_grad():
                zl, _, _, _ = model.encode_batch(batch, graphs)
            model.codebook.init_from(zl.data, rng)
        loss, terms, bn = ae_objective(model, batch, "train", rng, graphs=graphs)
        if not np.isfinite(terms["total"]):
            raise TrainingError(f"non-finite autoencoder loss at step {step}: {terms}")
        apply_update(params, loss, opt, cfg.ae_lr, cfg.grad_clip)
        model.codebook.ema_update(bn.residuals, bn.codes)
        for k in hist:
            hist[k].append(terms[k])
        if callback is not None and (step + 1) % cfg.log_interval == 0:
            callback(step + 1, terms)
    ex = {f"history.{k}": np.array(v) for k, v in hist.items()}
    ex["atom_counts"] = np.array([s.n_atoms for s in structures], dtype=np.int64)
    return model, model.checkpoint(start + cfg.ae_steps, opt, ex)
