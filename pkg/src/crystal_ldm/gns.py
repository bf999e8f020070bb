"""Hierarchical graph network simulator shared by encoder, decoder and denoiser."""

from __future__ import annotations

import numpy as np

from .featurize import HierGraph
from .tensor import Mlp, Tensor, ShapeError, as_tensor, concat, gather, segment_sum, sigmoid


def _mlp(widths_in: int, hidden: int, width_out: int, depth: int, rng, activation, name) -> Mlp:
    return Mlp([widths_in] + [hidden] * (depth - 1) + [width_out], rng, activation, name)


class GnsParams:
    """All networks of one GNS stack.

    Message-passing networks are stored per iteration ``t`` under names like
    ``edge_l.t`` / ``node_g.t`` / ``psi1_l.t``. Residual widths are ``hidden``
    everywhere.
    """

    def __init__(self, node_in: int, edge_in: int, gnode_in: int, gedge_in: int,
                 local_out: int, global_out: int, rng: np.random.Generator,
                 hidden: int = 64, mp_steps: int = 3, depth: int = 2,
                 activation: str = "silu", name: str = "gns"):
        if mp_steps < 0:
            raise ValueError("mp_steps must be >= 0")
        self.hidden = hidden
        self.mp_steps = mp_steps
        self.name = name
        h = hidden

        def mk(i, o, tag):
            return _mlp(i, h, o, depth, rng, activation, f"{name}.{tag}")

        self.nets: dict[str, Mlp] = {
            "embed_node_l": mk(node_in, h, "embed_node_l"),
            "embed_edge_l": mk(edge_in, h, "embed_edge_l"),
            "embed_node_g": mk(gnode_in, h, "embed_node_g"),
            "embed_edge_g": mk(gedge_in, h, "embed_edge_g"),
        }
        for t in range(mp_steps):
            for side in ("l", "g"):
                self.nets[f"edge_{side}.{t}"] = mk(3 * h, h, f"edge_{side}.{t}")
                self.nets[f"node_{side}.{t}"] = mk(3 * h, h, f"node_{side}.{t}")
                self.nets[f"psi1_{side}.{t}"] = Mlp([h, 1], rng, activation, f"{name}.psi1_{side}.{t}")
                self.nets[f"psi2_{side}.{t}"] = Mlp([h, 1], rng, activation, f"{name}.psi2_{side}.{t}")
        self.nets["read_l"] = mk(h, local_out, "read_l")
        self.nets["read_g"] = mk(h, global_out, "read_g")

    @property
    def in_widths(self) -> tuple[int, int, int, int]:
        n = self.nets
        return (n["embed_node_l"].widths[0], n["embed_edge_l"].widths[0],
                n["embed_node_g"].widths[0], n["embed_edge_g"].widths[0])

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for net in self.nets.values():
            out.update(net.named_parameters())
        return out

    def zero_message_outputs(self) -> None:
        """Zero the last layer of every edge/node update network (residuals vanish)."""
        for key, net in self.nets.items():
            if key.startswith(("edge_", "node_")):
                net.zero_output()


def compute_deltas(v, e, senders, receivers, edge_net: Mlp, node_net: Mlp, psi1: Mlp, psi2: Mlp,
                   gate_scale=None) -> tuple[Tensor, Tensor]:
    """Edge residuals and node residuals for one message-passing step.

    ``m1`` sums gated residuals of edges where the node is the receiver and
    ``m2`` those where it is the sender. ``gate_scale`` (per edge) multiplies
    both gates.
    """
    v, e = as_tensor(v), as_tensor(e)
    n = v.shape[0]
    senders = np.asarray(senders, dtype=np.int64)
    receivers = np.asarray(receivers, dtype=np.int64)
    if len(senders) != e.shape[0] or len(receivers) != e.shape[0]:
        raise ShapeError(f"{len(senders)} senders / {len(receivers)} receivers for {e.shape[0]} edges")
    for idx in (senders, receivers):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"dangling edge index outside [0, {n})")
    # concat(e, v_s, v_r) @ W == e @ W_e + (v @ W_s)[s] + (v @ W_r)[r]; the node
    # projections are computed once per node instead of once per edge
    w0, b0 = edge_net.weights[0], edge_net.biases[0]
    he, hv = e.shape[1], v.shape[1]
    if w0.shape[0] != he + 2 * hv:
        raise ShapeError(f"edge network expects width {w0.shape[0]}, got {he}+2*{hv}")
    pre = (e @ w0[:he] + gather(v @ w0[he:he + hv], senders)
           + gather(v @ w0[he + hv:], receivers) + b0)
    de = edge_net.from_preactivation(pre)
    g1 = sigmoid(psi1(e))
    g2 = sigmoid(psi2(e))
    if gate_scale is not None:
        scale = np.asarray(gate_scale, dtype=np.float64).reshape(-1, 1)
        g1 = g1 * scale
        g2 = g2 * scale
    m1 = segment_sum(g1 * de, receivers, n)
    m2 = segment_sum(g2 * de, senders, n)
    dv = node_net(concat([v, m1, m2]))
    return dv, de


def cutoff_envelope(d, r_cut: float) -> np.ndarray:
    """``(1 - (d/r_cut)^2)^2`` inside the cutoff, zero outside."""
    x = np.asarray(d, dtype=np.float64) / r_cut
    return np.where(x < 1.0, (1.0 - x * x) ** 2, 0.0)


def gns_forward(graph: HierGraph, params: GnsParams, local_gate_scale=None) -> tuple[Tensor, Tensor]:
    """Embed, run ``mp_steps`` local+global iterations, read out.

    Joint-step deltas are added back only onto local nodes that receive at
    least one global edge.
    """
    nets = params.nets
    widths = params.in_widths
    parts = (graph.local_nodes, graph.local_edges, graph.global_nodes, graph.global_edges)
    labels = ("local node", "local edge", "global node", "global edge")
    for x, w, lab in zip(parts, widths, labels):
        if as_tensor(x).shape[-1] != w:
            raise ShapeError(f"{lab} features have width {as_tensor(x).shape[-1]}, network expects {w}")
    v = nets["embed_node_l"](graph.local_nodes)
    e = nets["embed_edge_l"](graph.local_edges)
    vg = nets["embed_node_g"](graph.global_nodes)
    eg = nets["embed_edge_g"](graph.global_edges)
    n_g = vg.shape[0]
    gr = np.asarray(graph.global_receivers, dtype=np.int64)
    local_rx = np.zeros(v.shape[0], dtype=bool)
    local_rx[gr[gr >= n_g] - n_g] = True
    rx_rows = np.flatnonzero(local_rx)
    for t in range(params.mp_steps):
        dv, de = compute_deltas(v, e, graph.local_senders, graph.local_receivers,
                                nets[f"edge_l.{t}"], nets[f"node_l.{t}"],
                                nets[f"psi1_l.{t}"], nets[f"psi2_l.{t}"], local_gate_scale)
        v = v + dv
        e = e + de
        joint = concat([vg, v], axis=0)
        dj, deg = compute_deltas(joint, eg, graph.global_senders, gr,
                                 nets[f"edge_g.{t}"], nets[f"node_g.{t}"],
                                 nets[f"psi1_g.{t}"], nets[f"psi2_g.{t}"])
        vg = vg + dj[:n_g]
        eg = eg + deg
        if rx_rows.size:
            mask = local_rx.astype(np.float64)[:, None]
            v = v + dj[n_g:] * mask
    return nets["read_l"](v), nets["read_g"](vg)
