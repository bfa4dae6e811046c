"""Random problem instances, exact algorithm oracles and JSONL datasets."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numeric import ConfigError

ALGORITHMS = ("bellman_ford", "floyd_warshall", "scc", "insertion_sort")
SPLITS = ("train", "val", "test")
P_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
DATASET_VERSION = 1

# Weights live on a 2^-32 grid so every path sum over <= 2^20 edges is exact
# in double precision; oracles then agree bit-for-bit and ties are real ties.
WEIGHT_GRID = 2.0 ** 32


@dataclass
class Graph:
    n: int
    directed: bool
    edges: list[tuple[int, int, float]] = field(default_factory=list)

    def adjacency(self) -> dict[int, dict[int, float]]:
        """Out-neighbour map; undirected edges appear in both directions."""
        adj: dict[int, dict[int, float]] = {u: {} for u in range(self.n)}
        for u, v, w in self.edges:
            adj[u][v] = w
            if not self.directed:
                adj[v][u] = w
        return adj


@dataclass
class Sample:
    algorithm: str
    graph: Graph
    node_raw: list[list[float]]
    target: list
    tau: int

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def edge_raw(self) -> list[list[float]]:
        return [[w] for _, _, w in self.graph.edges]

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "n": self.graph.n,
            "directed": self.graph.directed,
            "edges": [[u, v, w] for u, v, w in self.graph.edges],
            "node_raw": self.node_raw,
            "target": self.target,
            "tau": self.tau,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "Sample":
        g = Graph(rec["n"], rec["directed"], [(int(u), int(v), float(w)) for u, v, w in rec["edges"]])
        target = rec["target"]
        if target and isinstance(target[0], list):
            target = [tuple(int(x) for x in t) for t in target]
        return cls(rec["algorithm"], g, rec["node_raw"], list(target), int(rec["tau"]))


@dataclass
class DatasetSpec:
    algorithm: str
    counts: tuple[int, int, int] = (100_000, 100, 100)
    train_sizes: tuple[int, int] = (8, 16)
    val_size: int = 16
    test_size: int = 64
    p_grid: tuple[float, ...] = P_GRID
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        self.counts = tuple(int(c) for c in self.counts)
        self.train_sizes = tuple(int(s) for s in self.train_sizes)
        self.p_grid = tuple(float(p) for p in self.p_grid)
        if len(self.counts) != 3 or min(self.counts) <= 0:
            raise ConfigError(f"counts must be three positive integers, got {self.counts}")
        lo, hi = self.train_sizes
        if min(lo, self.val_size, self.test_size) < 2 or hi < lo:
            raise ConfigError("sizes must be >= 2 with a non-empty train range")


# ---------------------------------------------------------------------------
# generators

def uniform_weight(rng: np.random.Generator) -> float:
    return math.floor(rng.random() * WEIGHT_GRID) / WEIGHT_GRID


def gen_erdos_renyi(n: int, p: float, directed: bool, rng: np.random.Generator) -> Graph:
    """Each pair (ordered if directed) is kept independently with probability p."""
    if n < 1 or not 0.0 <= p <= 1.0:
        raise ValueError(f"bad Erdos-Renyi parameters n={n}, p={p}")
    edges = []
    for u in range(n):
        for v in range(n) if directed else range(u + 1, n):
            if u == v:
                continue
            if rng.random() < p:
                edges.append((u, v, uniform_weight(rng)))
    return Graph(n, directed, edges)


# ---------------------------------------------------------------------------
# oracles

def oracle_bellman_ford(g: Graph, source: int) -> tuple[list[int], list[float], int]:
    """Synchronous Bellman-Ford rounds from ``source``.

    Returns (pointers, distances, tau). Unreachable nodes point to themselves
    and keep an infinite distance; equal-cost predecessors resolve to the
    lowest index.
    """
    adj = g.adjacency()
    dist = [math.inf] * g.n
    dist[source] = 0.0
    tau = 0
    while True:
        new = list(dist)
        for u in range(g.n):
            for v, w in adj[u].items():
                cand = dist[v] + w
                if cand < new[u]:
                    new[u] = cand
        if new == dist:
            break
        dist = new
        tau += 1
    ptr = list(range(g.n))
    for u in range(g.n):
        if u == source or math.isinf(dist[u]):
            continue
        ptr[u] = min(v for v, w in adj[u].items() if dist[v] + w == dist[u])
    return ptr, dist, max(tau, 1)


def oracle_floyd_warshall(g: Graph) -> tuple[list[tuple[int, int, int]], list[list[float]]]:
    """Classical triple loop with a predecessor matrix.

    Returns the predecessor of j on the shortest i->j path for every ordered
    pair (i, j) joined by an edge, as (i, j, k) triples, and the distance matrix.
    """
    n = g.n
    dist = [[math.inf] * n for _ in range(n)]
    pi = [[-1] * n for _ in range(n)]
    for i in range(n):
        dist[i][i] = 0.0
        pi[i][i] = i
    for i, nbrs in g.adjacency().items():
        for j, w in nbrs.items():
            dist[i][j] = w
            pi[i][j] = i
    for k in range(n):
        dk = dist[k]
        for i in range(n):
            dik = dist[i][k]
            if math.isinf(dik):
                continue
            di = dist[i]
            for j in range(n):
                cand = dik + dk[j]
                if cand < di[j]:
                    di[j] = cand
                    pi[i][j] = pi[k][j]
    slots = []
    for i, j in edge_slots(g):
        slots.append((i, j, pi[i][j]))
    return slots, dist


def edge_slots(g: Graph) -> list[tuple[int, int]]:
    """Ordered (i, j) pairs carrying an edge pointer, sorted."""
    pairs = set()
    for u, v, _ in g.edges:
        pairs.add((u, v))
        if not g.directed:
            pairs.add((v, u))
    return sorted(pairs)


def strongly_connected_components(g: Graph) -> list[int]:
    """Component id per node (Kosaraju); ids are the smallest member index."""
    adj = {u: sorted(nb) for u, nb in g.adjacency().items()}
    radj: dict[int, list[int]] = {u: [] for u in range(g.n)}
    for u, nbrs in adj.items():
        for v in nbrs:
            radj[v].append(u)

    order: list[int] = []
    seen = [False] * g.n
    for root in range(g.n):
        if seen[root]:
            continue
        seen[root] = True
        stack = [(root, iter(adj[root]))]
        while stack:
            u, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                order.append(u)
            elif not seen[nxt]:
                seen[nxt] = True
                stack.append((nxt, iter(adj[nxt])))

    comp = [-1] * g.n
    for root in reversed(order):
        if comp[root] >= 0:
            continue
        members = [root]
        comp[root] = root
        frontier = [root]
        while frontier:
            u = frontier.pop()
            for v in radj[u]:
                if comp[v] < 0:
                    comp[v] = root
                    members.append(v)
                    frontier.append(v)
        low = min(members)
        for m in members:
            comp[m] = low
    return comp


def oracle_scc(g: Graph) -> list[int]:
    """Lowest-index in-neighbour inside the node's own component, else self."""
    comp = strongly_connected_components(g)
    ptr = list(range(g.n))
    for u, v, _ in sorted(g.edges):
        # edge u -> v makes u an in-neighbour of v
        if u != v and comp[u] == comp[v] and (ptr[v] == v or u < ptr[v]):
            ptr[v] = u
    return ptr


def oracle_insertion_sort(keys: list[float]) -> list[int]:
    """Pointer to the previous element in stable ascending order."""
    if not keys:
        raise ValueError("cannot sort an empty key list")
    order = sorted(range(len(keys)), key=lambda i: (keys[i], i))
    ptr = [0] * len(keys)
    ptr[order[0]] = order[0]
    for prev, cur in zip(order, order[1:]):
        ptr[cur] = prev
    return ptr


def decode_sort_pointers(ptr: list[int]) -> list[int]:
    """Recover the sorted order of indices from predecessor pointers."""
    n = len(ptr)
    heads = [i for i in range(n) if ptr[i] == i]
    if len(heads) != 1:
        raise ValueError(f"expected exactly one self-pointer, found {len(heads)}")
    succ = {}
    for i in range(n):
        if ptr[i] != i:
            if ptr[i] in succ:
                raise ValueError(f"node {ptr[i]} has two successors")
            succ[ptr[i]] = i
    order = [heads[0]]
    while order[-1] in succ and len(order) <= n:
        order.append(succ[order[-1]])
    if len(order) != n:
        raise ValueError("pointers do not form a single chain")
    return order


# ---------------------------------------------------------------------------
# samples

def make_sample(algorithm: str, n: int, rng: np.random.Generator, p_grid=P_GRID) -> Sample:
    pos = [i / n for i in range(n)]
    if algorithm == "insertion_sort":
        keys = [float(rng.random()) for _ in range(n)]
        return Sample(algorithm, Graph(n, False, []), [[k, x] for k, x in zip(keys, pos)],
                      oracle_insertion_sort(keys), n)
    p = float(p_grid[rng.integers(len(p_grid))])
    if algorithm == "bellman_ford":
        g = gen_erdos_renyi(n, p, False, rng)
        source = int(rng.integers(n))
        ptr, _, tau = oracle_bellman_ford(g, source)
        node_raw = [[x, 1.0 if i == source else 0.0] for i, x in enumerate(pos)]
        return Sample(algorithm, g, node_raw, ptr, tau)
    if algorithm == "floyd_warshall":
        g = gen_erdos_renyi(n, p, False, rng)
        slots, _ = oracle_floyd_warshall(g)
        return Sample(algorithm, g, [[x] for x in pos], slots, n)
    if algorithm == "scc":
        g = gen_erdos_renyi(n, p, True, rng)
        g = Graph(n, True, [(u, v, 1.0) for u, v, _ in g.edges])
        return Sample(algorithm, g, [[x] for x in pos], oracle_scc(g), 2 * n)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def sample_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLITS.index(split), index])


def generate_split(spec: DatasetSpec, split: str) -> Iterator[Sample]:
    count = spec.counts[SPLITS.index(split)]
    for i in range(count):
        rng = sample_rng(spec.seed, split, i)
        if split == "train":
            n = int(rng.integers(spec.train_sizes[0], spec.train_sizes[1] + 1))
        else:
            n = spec.val_size if split == "val" else spec.test_size
        yield make_sample(spec.algorithm, n, rng, spec.p_grid)


def make_dataset(spec: DatasetSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write train/val/test JSONL files plus a ``meta.json`` sidecar."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for split in SPLITS:
            path = out / f"{split}.jsonl"
            with path.open("w") as fh:
                for s in generate_split(spec, split):
                    fh.write(json.dumps(s.to_json()) + "\n")
            paths[split] = path
        meta = {"version": DATASET_VERSION, "spec": asdict(spec)}
        (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc
    return paths


def load_samples(path: str | Path) -> list[Sample]:
    path = Path(path)
    try:
        with path.open() as fh:
            return [Sample.from_json(json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"reading dataset {path}: {exc}") from exc


def validate_sample(s: Sample) -> None:
    """Raise ValueError if the pointer targets break the sample invariants."""
    n = s.n
    if s.tau < 1:
        raise ValueError("tau must be >= 1")
    if s.algorithm == "floyd_warshall":
        expected = edge_slots(s.graph)
        if [(i, j) for i, j, _ in s.target] != expected:
            raise ValueError("edge pointer slots do not match graph edges")
        if any(not 0 <= k < n for _, _, k in s.target):
            raise ValueError("edge pointer target out of range")
        return
    if len(s.target) != n or any(not 0 <= t < n for t in s.target):
        raise ValueError("node pointer target out of range")
    if s.algorithm == "bellman_ford":
        adj = s.graph.adjacency()
        for u, t in enumerate(s.target):
            if t != u and t not in adj[u]:
                raise ValueError(f"bellman_ford pointer {u}->{t} is not an edge")
