"""Graph construction and feature encoders for the encoder, decoder and denoiser."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .crystal import CrystalStructure, image_offsets
from .tensor import Tensor, concat, gather

LENGTH_RBF_RANGE = (2.0, 14.0)
_DIR_EPS = 1e-6


@dataclass(frozen=True)
class EncoderFeatureConfig:
    k_neighbors: int = 12
    r_cut: float = 6.0
    n_bessel: int = 8
    n_sinusoidal: int = 4
    n_rbf: int = 8
    vocab_size: int = 96

    def __post_init__(self):
        for name in ("k_neighbors", "n_bessel", "n_sinusoidal", "n_rbf", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.r_cut <= 0:
            raise ValueError("r_cut must be positive")

    @classmethod
    def from_config(cls, cfg) -> "EncoderFeatureConfig":
        return cls(cfg.k_neighbors, cfg.r_cut, cfg.n_bessel, cfg.n_sinusoidal, cfg.n_rbf,
                   cfg.vocab_size)

    @property
    def node_width(self) -> int:
        return self.vocab_size + 6 * self.n_rbf

    @property
    def edge_width(self) -> int:
        return self.n_bessel + 3 + 6 * self.n_rbf

    @property
    def global_node_width(self) -> int:
        return 6 * self.n_rbf

    @property
    def global_edge_width(self) -> int:
        return 6 * self.n_sinusoidal


@dataclass
class HierGraph:
    """Local/global node and edge sets of one graph or a disjoint batch of graphs.

    Local edges index local nodes. Global edges index the joint node set, in
    which global nodes come first (``0..G-1``) followed by local nodes.
    """

    local_nodes: object
    local_edges: object
    local_senders: np.ndarray
    local_receivers: np.ndarray
    global_nodes: object
    global_edges: object
    global_senders: np.ndarray
    global_receivers: np.ndarray
    local_edge_lengths: np.ndarray | None = None
    node_graph: np.ndarray | None = None

    @property
    def n_local(self) -> int:
        return len(self.local_nodes)

    @property
    def n_global(self) -> int:
        return len(self.global_nodes)

    def validate(self) -> None:
        n, g = self.n_local, self.n_global
        for name, idx, bound in (("local_senders", self.local_senders, n),
                                 ("local_receivers", self.local_receivers, n),
                                 ("global_senders", self.global_senders, n + g),
                                 ("global_receivers", self.global_receivers, n + g)):
            idx = np.asarray(idx)
            if idx.size and (idx.min() < 0 or idx.max() >= bound):
                raise IndexError(f"{name} has indices outside [0, {bound})")
        if len(self.local_senders) != len(self.local_edges) or len(self.local_receivers) != len(self.local_edges):
            raise ValueError("local edge index arrays do not match local edge features")
        if len(self.global_senders) != len(self.global_edges) or len(self.global_receivers) != len(self.global_edges):
            raise ValueError("global edge index arrays do not match global edge features")


# -- scalar encoders --------------------------------------------------------
def one_hot(types, vocab_size: int) -> np.ndarray:
    types = np.asarray(types, dtype=np.int64)
    if types.size and (types.min() < 1 or types.max() > vocab_size):
        raise ValueError(f"element number outside vocabulary 1..{vocab_size}")
    out = np.zeros((len(types), vocab_size))
    out[np.arange(len(types)), types - 1] = 1.0
    return out


def sinusoidal_encode(f, n: int) -> np.ndarray:
    """``(sin(2pi 2^m f), cos(2pi 2^m f))`` pairs for m = 0..n-1, interleaved."""
    f = np.asarray(f, dtype=np.float64)
    ang = 2.0 * np.pi * f[..., None] * (2.0 ** np.arange(n))
    out = np.empty(f.shape + (2 * n,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def bessel_encode(d, r_cut: float, n: int) -> np.ndarray:
    """``sqrt(2/r_cut) sin(m pi d / r_cut) / d`` for m = 1..n."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("Bessel encoding needs positive distances")
    m = np.arange(1, n + 1)
    return np.sqrt(2.0 / r_cut) * np.sin(m * np.pi * d[..., None] / r_cut) / d[..., None]


def rbf_encode(x, centers, width: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size < 1:
        raise ValueError("need at least one RBF center")
    return np.exp(-((x[..., None] - centers) ** 2) / (2.0 * width ** 2))


def lattice_rbf(lattice, n_rbf: int) -> np.ndarray:
    """Gaussian features of the three lengths and three angles, flattened to 6*n_rbf."""
    lattice = np.asarray(lattice, dtype=np.float64)
    lc = np.linspace(*LENGTH_RBF_RANGE, n_rbf)
    ac = np.linspace(np.pi / 3, 2 * np.pi / 3, n_rbf)
    lw = (lc[1] - lc[0]) if n_rbf > 1 else 2.0
    aw = (ac[1] - ac[0]) if n_rbf > 1 else 0.3
    return np.concatenate([rbf_encode(lattice[:3], lc, lw).ravel(),
                           rbf_encode(lattice[3:], ac, aw).ravel()])


def order_encode(n: int, n_freq: int) -> np.ndarray:
    """Sinusoidal embedding of the node order index 1..n."""
    idx = np.arange(1, n + 1, dtype=np.float64)
    freqs = 1.0 / (64.0 ** (np.arange(n_freq) / max(n_freq, 1)))
    ang = idx[:, None] * freqs
    out = np.empty((n, 2 * n_freq))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


# -- periodic neighbours ----------------------------------------------------
class NeighborEdges(NamedTuple):
    senders: np.ndarray
    receivers: np.ndarray
    displacements: np.ndarray
    offsets: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return np.linalg.norm(self.displacements, axis=1)


def _plane_spacings(m: np.ndarray) -> np.ndarray:
    vol = abs(np.linalg.det(m))
    return np.array([vol / np.linalg.norm(np.cross(m[(k + 1) % 3], m[(k + 2) % 3])) for k in range(3)])


def knn_edges_pbc(s: CrystalStructure, k: int, r_cut: float | None = None) -> NeighborEdges:
    """Directed edges from every atom to its ``k`` nearest periodic images.

    Self-images are allowed. Ties are broken by distance (rounded to 1e-10 A),
    then image offset lexicographically, then receiver index. ``r_cut`` does
    not limit the edge set; it only shapes downstream features.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    m = s.matrix
    frac = s.frac
    n = s.n_atoms
    h_min = _plane_spacings(m).min()
    reach = 1
    while True:
        offs = image_offsets(reach)
        d = frac[None, :, None, :] + offs[None, None, :, :] - frac[:, None, None, :]
        cart = d @ m
        dist = np.sqrt(np.einsum("ijkl,ijkl->ijk", cart, cart))
        zero = int(np.flatnonzero(np.all(offs == 0, axis=1))[0])
        dist[np.arange(n), np.arange(n), zero] = np.inf
        flat = dist.reshape(n, -1)
        if flat.shape[1] - 1 >= k:
            kth = np.partition(flat, k - 1, axis=1)[:, k - 1]
            if kth.max() <= reach * h_min:
                break
        reach += 1
    n_off = len(offs)
    jj = np.repeat(np.arange(n), n_off)
    oo = np.tile(np.arange(n_off), n)
    senders, receivers, disps, offsets = [], [], [], []
    for i in range(n):
        key_d = np.round(flat[i], 10)
        order = np.lexsort((jj, offs[oo, 2], offs[oo, 1], offs[oo, 0], key_d))[:k]
        senders.append(np.full(k, i))
        receivers.append(jj[order])
        disps.append(cart[i].reshape(-1, 3)[order])
        offsets.append(offs[oo[order]])
    return NeighborEdges(np.concatenate(senders), np.concatenate(receivers),
                         np.concatenate(disps), np.concatenate(offsets).astype(np.int64))


# -- graph builders ---------------------------------------------------------
def build_encoder_graph(s: CrystalStructure, cfg: EncoderFeatureConfig) -> HierGraph:
    """Sparse periodic graph of one structure.

    Local nodes and edges carry only translation-invariant information (element,
    lattice, minimum-image displacements). Absolute positions enter through the
    local->global edges as sinusoidal embeddings of each atom's fractional
    coordinates; since local nodes never receive global-step updates in the
    encoder, per-atom latents stay exactly translation invariant.
    """
    n = s.n_atoms
    lat = lattice_rbf(s.lattice, cfg.n_rbf)
    nodes = np.concatenate([one_hot(s.atom_types, cfg.vocab_size), np.tile(lat, (n, 1))], axis=1)
    nb = knn_edges_pbc(s, cfg.k_neighbors, cfg.r_cut)
    d = nb.lengths
    safe = np.where(d < _DIR_EPS, 1.0, d)
    direction = np.where((d < _DIR_EPS)[:, None], 0.0, nb.displacements / safe[:, None])
    radial = bessel_encode(np.clip(d, _DIR_EPS, cfg.r_cut), cfg.r_cut, cfg.n_bessel)
    edges = np.concatenate([radial, direction, np.tile(lat, (len(d), 1))], axis=1)
    gedges = sinusoidal_encode(s.frac, cfg.n_sinusoidal).reshape(n, -1)
    return HierGraph(
        local_nodes=nodes,
        local_edges=edges,
        local_senders=nb.senders,
        local_receivers=nb.receivers,
        global_nodes=lat[None, :],
        global_edges=gedges,
        global_senders=np.arange(n) + 1,
        global_receivers=np.zeros(n, dtype=np.int64),
        local_edge_lengths=d,
        node_graph=np.zeros(n, dtype=np.int64),
    )


def retranslate_encoder_graph(g: HierGraph, frac: np.ndarray, cfg: EncoderFeatureConfig) -> HierGraph:
    """Encoder graph of a rigidly translated copy: only the position embeddings change."""
    frac = np.asarray(frac, dtype=np.float64)
    if frac.shape != (g.n_local, 3):
        raise ValueError(f"expected {g.n_local} x 3 fractional coordinates, got {frac.shape}")
    return replace(g, global_edges=sinusoidal_encode(frac, cfg.n_sinusoidal).reshape(len(frac), -1))


def batch_graphs(graphs: Sequence[HierGraph]) -> HierGraph:
    """Disjoint union of numpy-featured graphs (joint indices are remapped)."""
    n_loc = np.array([g.n_local for g in graphs])
    n_glob = np.array([g.n_global for g in graphs])
    loc_off = np.concatenate([[0], np.cumsum(n_loc)[:-1]])
    glob_off = np.concatenate([[0], np.cumsum(n_glob)[:-1]])
    G = int(n_glob.sum())

    def remap_joint(idx, g, lo, go):
        idx = np.asarray(idx)
        return np.where(idx < g.n_global, idx + go, idx - g.n_global + G + lo)

    return HierGraph(
        local_nodes=np.concatenate([g.local_nodes for g in graphs]),
        local_edges=np.concatenate([g.local_edges for g in graphs]),
        local_senders=np.concatenate([g.local_senders + o for g, o in zip(graphs, loc_off)]),
        local_receivers=np.concatenate([g.local_receivers + o for g, o in zip(graphs, loc_off)]),
        global_nodes=np.concatenate([g.global_nodes for g in graphs]),
        global_edges=np.concatenate([g.global_edges for g in graphs]),
        global_senders=np.concatenate([remap_joint(g.global_senders, g, lo, go)
                                       for g, lo, go in zip(graphs, loc_off, glob_off)]),
        global_receivers=np.concatenate([remap_joint(g.global_receivers, g, lo, go)
                                         for g, lo, go in zip(graphs, loc_off, glob_off)]),
        local_edge_lengths=(np.concatenate([g.local_edge_lengths for g in graphs])
                            if all(g.local_edge_lengths is not None for g in graphs) else None),
        node_graph=np.repeat(np.arange(len(graphs)), n_loc),
    )


def dense_edges(counts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Sender/receiver indices of all ordered pairs i != j within each graph."""
    snd, rcv = [], []
    off = 0
    for n in counts:
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mask = ii != jj
        snd.append(ii[mask] + off)
        rcv.append(jj[mask] + off)
        off += n
    if not snd:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(snd).astype(np.int64), np.concatenate(rcv).astype(np.int64)


def build_dense_graph(z_local, z_global, counts: Sequence[int], node_extra=None,
                      edge_extra=None, global_extra=None) -> HierGraph:
    """Fully connected graph over latent rows, batched over ``counts``.

    ``z_local`` stacks the local rows of every graph, ``z_global`` has one row
    per graph. Local edges are initialised from concatenated endpoint rows; one
    global->local edge per atom carries the (global, local) row pair. Optional
    extras are concatenated onto nodes/edges in the order of :func:`dense_edges`.
    """
    counts = [int(c) for c in counts]
    if any(c < 1 for c in counts):
        raise ValueError("dense graph needs at least one local node per graph")
    zl = z_local if isinstance(z_local, Tensor) else Tensor(z_local)
    zg = z_global if isinstance(z_global, Tensor) else Tensor(z_global)
    if zl.shape[0] != sum(counts) or zg.shape[0] != len(counts):
        raise ValueError(f"latent rows {zl.shape[0]}+{zg.shape[0]} do not match counts {counts}")
    snd, rcv = dense_edges(counts)
    node_graph = np.repeat(np.arange(len(counts)), counts)
    nodes = zl if node_extra is None else concat([zl, Tensor(node_extra) if not isinstance(node_extra, Tensor) else node_extra])
    edges = concat([gather(zl, snd), gather(zl, rcv)])
    if edge_extra is not None:
        edges = concat([edges, edge_extra])
    gnodes = zg if global_extra is None else concat([zg, global_extra])
    gedges = concat([gather(zg, node_graph), zl])
    G = len(counts)
    return HierGraph(
        local_nodes=nodes,
        local_edges=edges,
        local_senders=snd,
        local_receivers=rcv,
        global_nodes=gnodes,
        global_edges=gedges,
        global_senders=node_graph.astype(np.int64),
        global_receivers=np.arange(sum(counts), dtype=np.int64) + G,
        node_graph=node_graph,
    )
