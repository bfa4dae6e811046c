"""Encode-process-decode network with a gated max-aggregation processor.

Batches are disjoint unions of graphs: node rows of all samples are stacked
into one (N, d) state and every message, candidate pair and pointer slot is
an index into that stack. ``node_batch`` maps each node row to its sample.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import Sample, edge_slots
from .numeric import (DTYPE, ConfigError, InvariantError, LinearLayer, Mlp, Tensor,
                      segment_max, segment_sum, sigmoid)

# node_dim, edge_dim, pointer kind
SCHEMAS = {
    "bellman_ford": (2, 1, "node"),
    "floyd_warshall": (1, 1, "edge"),
    "scc": (1, 2, "node"),
    "insertion_sort": (2, 1, "node"),
}


@dataclass
class ModelConfig:
    algorithm: str
    latent_dim: int = 128
    msg_hidden: int | None = None
    msg_layers: int = 2

    def __post_init__(self):
        if self.algorithm not in SCHEMAS:
            raise ConfigError(f"no schema for algorithm {self.algorithm!r}")
        if self.latent_dim < 1 or self.msg_layers < 0:
            raise ConfigError("latent_dim must be >= 1 and msg_layers >= 0")

    @property
    def hidden(self) -> int:
        return self.msg_hidden or self.latent_dim

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# raw per-sample arrays and batching

@dataclass
class SampleArrays:
    """Index arrays and raw features of one sample, ready for batching."""

    n: int
    node_raw: np.ndarray          # (n, node_dim)
    recv: np.ndarray              # (M,) message receiver
    send: np.ndarray              # (M,) message sender
    edge_raw: np.ndarray          # (M, edge_dim)
    slots: np.ndarray             # (S, 2) pointer owner: node (u, u) or edge (i, j)
    cand_slot: np.ndarray         # (K,) slot index of each candidate pair
    cand_node: np.ndarray         # (K,) candidate node
    target_pair: np.ndarray       # (S,) index into the K candidate pairs
    target_node: np.ndarray       # (S,)
    tau: int = 1


def sample_arrays(s: Sample) -> SampleArrays:
    """Apply the per-algorithm input schema and the message/candidate masks."""
    if s.algorithm not in SCHEMAS:
        raise ConfigError(f"no schema for algorithm {s.algorithm!r}")
    n = s.n
    node_raw = np.asarray(s.node_raw, dtype=np.float64).reshape(n, -1)
    if node_raw.shape[1] != SCHEMAS[s.algorithm][0]:
        raise ConfigError(f"{s.algorithm}: node features have width {node_raw.shape[1]}")
    if s.algorithm in ("bellman_ford", "floyd_warshall"):
        weight = {}
        for u, v, w in s.graph.edges:
            weight[(v, u)] = w
            weight[(u, v)] = w
        for i in range(n):
            weight[(i, i)] = 0.0
        pairs = sorted(weight)
        recv = np.array([p[0] for p in pairs], dtype=np.int64)
        send = np.array([p[1] for p in pairs], dtype=np.int64)
        edge_raw = np.array([[weight[p]] for p in pairs], dtype=np.float64)
    else:
        recv = np.repeat(np.arange(n), n)
        send = np.tile(np.arange(n), n)
        if s.algorithm == "scc":
            adj = np.zeros((n, n))
            for u, v, _ in s.graph.edges:
                adj[u, v] = 1.0
            edge_raw = np.stack([adj[recv, send], adj[send, recv]], axis=1)
        else:
            edge_raw = np.ones((n * n, 1))

    if SCHEMAS[s.algorithm][2] == "edge":
        owners = edge_slots(s.graph)
        targets = {(i, j): k for i, j, k in s.target}
        slots = np.array(owners, dtype=np.int64).reshape(-1, 2)
        target_node = np.array([targets[o] for o in owners], dtype=np.int64)
        cand_slot = np.repeat(np.arange(len(owners)), n)
        cand_node = np.tile(np.arange(n), len(owners))
        target_pair = np.arange(len(owners)) * n + target_node
    else:
        slots = np.stack([np.arange(n), np.arange(n)], axis=1)
        target_node = np.asarray(s.target, dtype=np.int64)
        # candidates are the message sources (neighbours plus self for BF, all nodes otherwise),
        # kept in message order so the decoder can read edge features by position
        cand_slot, cand_node = recv, send
        lookup = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(cand_slot, cand_node))}
        try:
            target_pair = np.array([lookup[(u, int(t))] for u, t in enumerate(target_node)],
                                   dtype=np.int64)
        except KeyError as exc:
            raise InvariantError(f"{s.algorithm}: target {exc.args[0]} outside candidate set") from None
    return SampleArrays(n, node_raw, recv, send, edge_raw, slots, cand_slot, cand_node,
                        target_pair, target_node, s.tau)


@dataclass
class Batch:
    algorithm: str
    num_graphs: int
    sizes: Tensor          # (B,)
    node_batch: Tensor     # (N,)
    node_raw: Tensor       # (N, node_dim)
    recv: Tensor           # (M,)
    send: Tensor
    edge_raw: Tensor       # (M, edge_dim)
    slots: Tensor          # (S, 2)
    slot_batch: Tensor     # (S,)
    cand_slot: Tensor      # (K,)
    cand_node: Tensor      # (K,)
    target_pair: Tensor    # (S,)
    target_node: Tensor    # (S,)
    tau: Tensor            # (B,)

    @property
    def num_nodes(self) -> int:
        return int(self.node_batch.shape[0])

    @property
    def num_slots(self) -> int:
        return int(self.slots.shape[0])


def collate(algorithm: str, items: Sequence[SampleArrays]) -> Batch:
    """Stack samples into a disjoint-union batch with offset indices."""
    if not items:
        raise ConfigError("cannot collate an empty batch")
    node_off = np.cumsum([0] + [a.n for a in items])[:-1]
    slot_off = np.cumsum([0] + [len(a.slots) for a in items])[:-1]
    pair_off = np.cumsum([0] + [len(a.cand_slot) for a in items])[:-1]

    def cat(name, offsets=None):
        parts = [getattr(a, name) + (0 if offsets is None else o) for a, o in
                 zip(items, offsets if offsets is not None else [0] * len(items))]
        return torch.from_numpy(np.concatenate(parts))

    sizes = np.array([a.n for a in items])
    return Batch(
        algorithm=algorithm,
        num_graphs=len(items),
        sizes=torch.from_numpy(sizes),
        node_batch=torch.from_numpy(np.repeat(np.arange(len(items)), sizes)),
        node_raw=cat("node_raw").to(DTYPE),
        recv=cat("recv", node_off),
        send=cat("send", node_off),
        edge_raw=cat("edge_raw").to(DTYPE),
        slots=cat("slots", node_off),
        slot_batch=torch.from_numpy(np.repeat(np.arange(len(items)), [len(a.slots) for a in items])),
        cand_slot=cat("cand_slot", slot_off),
        cand_node=cat("cand_node", node_off),
        target_pair=cat("target_pair", pair_off),
        target_node=cat("target_node", node_off),
        tau=torch.tensor([a.tau for a in items]),
    )


def make_batch(samples: Sequence[Sample]) -> Batch:
    return collate(samples[0].algorithm, [sample_arrays(s) for s in samples])


# ---------------------------------------------------------------------------
# network

@dataclass
class EncodedInstance:
    """Linearly encoded inputs; constant while the processor iterates."""

    batch: Batch
    U: Tensor                       # (N, d)
    E: Tensor                       # (M, d)
    msg_const: Tensor | None = field(default=None, repr=False)

    def detach(self) -> "EncodedInstance":
        const = None if self.msg_const is None else self.msg_const.detach()
        return EncodedInstance(self.batch, self.U.detach(), self.E.detach(), const)


class Processor(nn.Module):
    """Gated max-aggregation processor.

    z_i = u_i || h_i, m_i = max_j P_m(z_i, z_j, e_ij),
    h_i' = g_i * P_r(z_i, m_i) + (1 - g_i) * h_i with g_i = sigmoid(P_g(z_i, m_i)).
    """

    def __init__(self, d: int, hidden: int, msg_layers: int = 2):
        super().__init__()
        self.d = d
        dims = [5 * d] + [hidden] * msg_layers + [d]
        self.message = Mlp(dims)
        self.readout = LinearLayer(3 * d, d)
        self.gate = LinearLayer(3 * d, d)

    def _first(self):
        layer = self.message.layers[0]
        d = self.d
        w = layer.weight
        # column blocks: [u_i, h_i, u_j, h_j, e_ij]
        return w[:, :d], w[:, d:2 * d], w[:, 2 * d:3 * d], w[:, 3 * d:4 * d], w[:, 4 * d:], layer.bias

    def prepare(self, inst: EncodedInstance) -> EncodedInstance:
        """Precompute the H-independent part of the first message layer."""
        wu_r, _, wu_s, _, we, b = self._first()
        b_ = inst.batch
        const = (inst.U @ wu_r.T)[b_.recv] + (inst.U @ wu_s.T)[b_.send] + inst.E @ we.T + b
        return EncodedInstance(inst.batch, inst.U, inst.E, const)

    def messages(self, H: Tensor, inst: EncodedInstance) -> Tensor:
        if inst.msg_const is None:
            inst = self.prepare(inst)
        _, wh_r, _, wh_s, _, _ = self._first()
        b = inst.batch
        x = inst.msg_const + (H @ wh_r.T)[b.recv] + (H @ wh_s.T)[b.send]
        for layer in self.message.layers[1:]:
            x = layer(torch.relu(x))
        return x

    def forward(self, H: Tensor, inst: EncodedInstance) -> Tensor:
        b = inst.batch
        msgs = self.messages(H, inst)
        m, _ = segment_max(msgs, b.recv, b.num_nodes)
        zm = torch.cat([inst.U, H, m], dim=1)
        candidate = self.readout(zm)
        g = sigmoid(self.gate(zm))
        return g * candidate + (1 - g) * H


def processor_step_reference(proc: Processor, H: Tensor, inst: EncodedInstance) -> Tensor:
    """Literal evaluation of the processor with explicit concatenations.

    Slow; used only to cross-check the factorised :meth:`Processor.forward`.
    """
    b = inst.batch
    z = torch.cat([inst.U, H], dim=1)
    msg_in = torch.cat([z[b.recv], z[b.send], inst.E], dim=1)
    msgs = proc.message(msg_in)
    m, _ = segment_max(msgs, b.recv, b.num_nodes)
    zm = torch.cat([z, m], dim=1)
    g = sigmoid(proc.gate(zm))
    return g * proc.readout(zm) + (1 - g) * H


class NodePointerDecoder(nn.Module):
    """Scores candidate v of node u as phi(h_u) . (psi(h_v) + chi(e_uv)).

    Node-pointer candidates are listed in message order, so the encoded edge
    features ``E`` line up with the candidates row for row.
    """

    def __init__(self, d: int):
        super().__init__()
        self.phi = LinearLayer(d, d)
        self.psi = LinearLayer(d, d)
        self.chi = LinearLayer(d, d)

    def forward(self, H: Tensor, batch: Batch, E: Tensor) -> Tensor:
        owner = self.phi(H)[batch.slots[:, 0]]
        return (owner[batch.cand_slot] * (self.psi(H)[batch.cand_node] + self.chi(E))).sum(-1)


class EdgePointerDecoder(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.phi = LinearLayer(2 * d, d)
        self.psi = LinearLayer(d, d)

    def forward(self, H: Tensor, batch: Batch) -> Tensor:
        owner = self.phi(torch.cat([H[batch.slots[:, 0]], H[batch.slots[:, 1]]], dim=1))
        return (owner[batch.cand_slot] * self.psi(H)[batch.cand_node]).sum(-1)


class NARModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        node_dim, edge_dim, kind = SCHEMAS[cfg.algorithm]
        d = cfg.latent_dim
        self.node_encoder = LinearLayer(node_dim, d)
        self.edge_encoder = LinearLayer(edge_dim, d)
        self.processor = Processor(d, cfg.hidden, cfg.msg_layers)
        self.decoder = NodePointerDecoder(d) if kind == "node" else EdgePointerDecoder(d)

    @property
    def d(self) -> int:
        return self.cfg.latent_dim

    def encode(self, batch: Batch) -> EncodedInstance:
        if batch.algorithm != self.cfg.algorithm:
            raise ConfigError(f"model built for {self.cfg.algorithm}, got {batch.algorithm} batch")
        return EncodedInstance(batch, self.node_encoder(batch.node_raw), self.edge_encoder(batch.edge_raw))

    def initial_state(self, batch: Batch) -> Tensor:
        return torch.zeros(batch.num_nodes, self.d, dtype=DTYPE)

    def processor_step(self, H: Tensor, inst: EncodedInstance) -> Tensor:
        return self.processor(H, inst)

    def decode(self, H: Tensor, batch: Batch) -> Tensor:
        if isinstance(self.decoder, NodePointerDecoder):
            return self.decoder(H, batch, self.edge_encoder(batch.edge_raw))
        return self.decoder(H, batch)

    def unroll(self, batch: Batch, steps: Tensor | None = None) -> Tensor:
        """Recurrent rollout from H=0; sample b runs ``steps[b]`` (default n) steps."""
        steps = batch.sizes if steps is None else steps
        inst = self.processor.prepare(self.encode(batch))
        H = self.initial_state(batch)
        node_steps = steps[batch.node_batch].unsqueeze(1)
        for t in range(int(steps.max())):
            H_new = self.processor(H, inst)
            H = torch.where(node_steps > t, H_new, H)
        return H


# ---------------------------------------------------------------------------
# loss and accuracy

def _segment_logsumexp(logits: Tensor, segments: Tensor, num_segments: int) -> Tensor:
    with torch.no_grad():
        top = torch.full((num_segments,), float("-inf"), dtype=logits.dtype)
        top = top.scatter_reduce(0, segments, logits, reduce="amax", include_self=True)
    return top + torch.log(segment_sum(torch.exp(logits - top[segments]), segments, num_segments))


def pointer_log_probs(logits: Tensor, batch: Batch) -> Tensor:
    """Log-softmax of candidate logits within each pointer slot."""
    lse = _segment_logsumexp(logits, batch.cand_slot, batch.num_slots)
    return logits - lse[batch.cand_slot]


def pointer_loss(logits: Tensor, batch: Batch) -> Tensor:
    """Mean cross-entropy over every pointer slot in the batch."""
    if bool(((batch.target_pair < 0) | (batch.target_pair >= logits.shape[0])).any()):
        raise InvariantError("pointer target outside candidate set")
    if not bool((batch.cand_slot[batch.target_pair] == torch.arange(batch.num_slots)).all()):
        raise InvariantError("pointer target outside candidate set")
    lse = _segment_logsumexp(logits, batch.cand_slot, batch.num_slots)
    return (lse - logits[batch.target_pair]).mean()


def pointer_predictions(logits: Tensor, batch: Batch) -> Tensor:
    """Arg-max candidate node per slot; ties resolve to the lowest node index."""
    with torch.no_grad():
        top = torch.full((batch.num_slots,), float("-inf"), dtype=logits.dtype)
        top = top.scatter_reduce(0, batch.cand_slot, logits, reduce="amax", include_self=True)
        big = torch.iinfo(torch.long).max
        node = torch.where(logits == top[batch.cand_slot], batch.cand_node, big)
        best = torch.full((batch.num_slots,), big, dtype=torch.long)
        return best.scatter_reduce(0, batch.cand_slot, node, reduce="amin", include_self=True)


def pointer_accuracy(logits: Tensor, batch: Batch) -> float:
    return float((pointer_predictions(logits, batch) == batch.target_node).double().mean())


def chance_accuracy(batch: Batch) -> float:
    """Expected accuracy of a uniform guess over each slot's candidate set."""
    counts = torch.bincount(batch.cand_slot, minlength=batch.num_slots).double()
    return float((1.0 / counts).mean())
