"""Independent verification suites shared by the ``selftest`` command and tests.

Each check returns ``CheckResult`` records naming the suite and operation so a
failure points at the broken piece.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import numeric
from .data import (Graph, Sample, decode_sort_pointers, gen_erdos_renyi, make_sample,
                   oracle_bellman_ford, oracle_floyd_warshall, oracle_insertion_sort,
                   strongly_connected_components)
from .deq import BackwardConfig, SolverConfig, implicit_backward, solve_fixed_point
from .model import ModelConfig, NARModel, make_batch, pointer_log_probs, pointer_loss
from .numeric import finite_difference_grad, rel_err


@dataclass
class CheckResult:
    suite: str
    op: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.suite}/{self.op} {self.detail}".rstrip()


# ---------------------------------------------------------------------------
# brute-force oracles

def brute_force_distances(g: Graph, source: int) -> list[float]:
    """Minimum over all simple paths from ``source``, summed in path order."""
    adj = g.adjacency()
    best = [math.inf] * g.n
    best[source] = 0.0
    stack = [(source, 0.0, frozenset([source]))]
    while stack:
        u, d, seen = stack.pop()
        for v, w in adj[u].items():
            if v in seen:
                continue
            nd = d + w
            if nd < best[v]:
                best[v] = nd
            stack.append((v, nd, seen | {v}))
    return best


def brute_force_components(g: Graph) -> list[frozenset]:
    """Component of each node as the set reachable both ways (transitive closure)."""
    n = g.n
    reach = np.eye(n, dtype=bool)
    for u, v, _ in g.edges:
        reach[u, v] = True
    for k in range(n):
        reach |= reach[:, [k]] & reach[[k], :]
    mutual = reach & reach.T
    return [frozenset(np.flatnonzero(mutual[i]).tolist()) for i in range(n)]


def _rand_graph(rng, n_max=8, directed=False) -> Graph:
    n = int(rng.integers(1, n_max + 1))
    p = float(rng.choice([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]))
    return gen_erdos_renyi(n, p, directed, rng)


def check_oracles(count: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    fails = {"bellman_ford": 0, "floyd_warshall": 0, "scc": 0, "insertion_sort": 0}
    for _ in range(count):
        g = _rand_graph(rng)
        src = int(rng.integers(g.n))
        _, dist, _ = oracle_bellman_ford(g, src)
        if dist != brute_force_distances(g, src):
            fails["bellman_ford"] += 1
        _, fw = oracle_floyd_warshall(g)
        if any(fw[s] != oracle_bellman_ford(g, s)[1] for s in range(g.n)):
            fails["floyd_warshall"] += 1
        dg = _rand_graph(rng, directed=True)
        comp = strongly_connected_components(dg)
        got = [frozenset(i for i in range(dg.n) if comp[i] == comp[u]) for u in range(dg.n)]
        if got != brute_force_components(dg):
            fails["scc"] += 1
        keys = rng.random(int(rng.integers(1, 17))).tolist()
        order = decode_sort_pointers(oracle_insertion_sort(keys))
        if [keys[i] for i in order] != sorted(keys):
            fails["insertion_sort"] += 1
    return [CheckResult("oracles", name, k == 0, f"{k}/{count} mismatches") for name, k in fails.items()]


# ---------------------------------------------------------------------------
# gradients

# Blocks whose gradient is below this fraction of the full gradient norm are
# numerically zero (e.g. a bias that shifts every logit of a slot equally);
# relative error is measured against this floor instead of their own norm.
ZERO_BLOCK = 1e-7


def grad_norm(grads) -> float:
    return math.sqrt(sum(float(g.norm()) ** 2 for g in grads))


def _fd_check(name: str, loss_fn, params, tol: float, h: float = 1e-6,
              floor: float | None = None) -> CheckResult:
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    if floor is None:
        floor = ZERO_BLOCK * grad_norm(p.grad for p in params)
    worst = 0.0
    for p in params:
        fd = finite_difference_grad(lambda: loss_fn().detach(), p, h)
        # central differences cannot resolve below eps * |L| / h per coordinate
        resolution = math.sqrt(p.numel()) * 2.2e-16 * max(abs(float(loss.detach())), 1.0) / h
        worst = max(worst, rel_err(p.grad, fd, max(floor, resolution / tol)))
    return CheckResult("gradients", name, worst <= tol, f"max rel err {worst:.2e} (tol {tol:g})")


def check_op_gradients(seed: int = 0) -> list[CheckResult]:
    gen = torch.Generator().manual_seed(seed)

    def rnd(*shape):
        return torch.randn(*shape, dtype=numeric.DTYPE, generator=gen)

    out = []
    torch.manual_seed(seed)
    layer = numeric.LinearLayer(3, 2)
    x = rnd(4, 3)
    c = rnd(4, 2)
    out.append(_fd_check("linear_forward",
                         lambda: (numeric.linear_forward(layer, x) * c).sum(),
                         [layer.weight, layer.bias], 1e-6))
    xr = rnd(5, 3)
    # keep clear of the kink at zero
    xr = torch.where(xr.abs() < 0.1, xr + 0.5 * torch.sign(xr + 1e-9), xr).requires_grad_(True)
    cr = rnd(5, 3)
    out.append(_fd_check("relu", lambda: (numeric.relu(xr) * cr).sum(), [xr], 1e-6))
    xs = rnd(5, 3).requires_grad_(True)
    out.append(_fd_check("sigmoid", lambda: (numeric.sigmoid(xs) * cr).sum(), [xs], 1e-6))
    rows = rnd(3, 4, 2).requires_grad_(True)
    mask = torch.rand(3, 4, generator=gen) < 0.7
    mask[:, 0] = True
    cm = rnd(3, 2)
    out.append(_fd_check("masked_max", lambda: (numeric.masked_max(rows, mask, dim=1)[0] * cm).sum(),
                         [rows], 1e-6))
    srows = rnd(7, 3).requires_grad_(True)
    seg = torch.tensor([0, 0, 1, 2, 2, 2, 1])
    cs = rnd(3, 3)
    out.append(_fd_check("segment_max", lambda: (numeric.segment_max(srows, seg, 3)[0] * cs).sum(),
                         [srows], 1e-6))
    mlp = numeric.Mlp([3, 5, 2])
    out.append(_fd_check("mlp", lambda: (torch.tanh(mlp(x)) * c).sum(), list(mlp.parameters()), 1e-6))
    return out


def small_instance(algorithm: str, n: int, seed: int) -> Sample:
    rng = np.random.default_rng(seed)
    return make_sample(algorithm, n, rng, (0.6,))


def check_model_gradients(seed: int = 0, d: int = 8, tol: float = 1e-4) -> list[CheckResult]:
    """End-to-end pointer loss after one processor step vs central differences."""
    out = []
    for algorithm in ("bellman_ford", "floyd_warshall", "scc", "insertion_sort"):
        torch.manual_seed(seed)
        model = NARModel(ModelConfig(algorithm, latent_dim=d))
        batch = make_batch([small_instance(algorithm, 4, seed)])
        gen = torch.Generator().manual_seed(seed)
        H0 = 0.5 * torch.randn(batch.num_nodes, d, dtype=numeric.DTYPE, generator=gen)

        def loss_fn():
            inst = model.encode(batch)
            H = model.processor_step(H0, inst)
            return pointer_loss(model.decode(H, batch), batch)

        model.zero_grad()
        loss_fn().backward()
        floor = ZERO_BLOCK * grad_norm(p.grad for p in model.parameters())
        for name, p in model.named_parameters():
            out.append(_fd_check(f"{algorithm}:{name}", loss_fn, [p], tol, floor=floor))
    return out


# ---------------------------------------------------------------------------
# solvers

def random_contraction(rng: np.random.Generator, dim: int = 8, radius: float = 0.9):
    A = rng.standard_normal((dim, dim))
    A *= rng.uniform(0.2, radius) / max(abs(np.linalg.eigvals(A)))
    b = rng.standard_normal(dim)
    return torch.tensor(A), torch.tensor(b)


def check_solvers(count: int = 20, seed: int = 0, tol: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"picard": 0.0, "anderson": 0.0}
    slower = 0
    for _ in range(count):
        A, b = random_contraction(rng)
        exact = torch.linalg.solve(torch.eye(8, dtype=A.dtype) - A, b)
        iters = {}
        for method in worst:
            cfg = SolverConfig(method=method, max_iters=2000, epsilon=1e-9)
            res = solve_fixed_point(lambda z: z @ A.T + b, torch.zeros(1, 8, dtype=A.dtype), cfg)
            worst[method] = max(worst[method], float((res.H_star[0] - exact).abs().max()))
            iters[method] = int(res.iterations[0])
        slower += iters["anderson"] > iters["picard"]
    out = [CheckResult("solver", m, e <= tol, f"max error {e:.2e} (tol {tol:g})") for m, e in worst.items()]
    out.append(CheckResult("solver", "anderson_vs_picard_iters", slower == 0,
                           f"anderson slower on {slower}/{count} maps"))
    return out


def scaled_processor_model(algorithm: str, d: int, seed: int, scale: float = 0.1) -> NARModel:
    torch.manual_seed(seed)
    model = NARModel(ModelConfig(algorithm, latent_dim=d))
    with torch.no_grad():
        for p in model.processor.parameters():
            p.mul_(scale)
    return model


def implicit_vs_unrolled(model: NARModel, sample: Sample, unroll: int = 100):
    """Per-parameter relative error between implicit and unrolled gradients."""
    batch = make_batch([sample])
    params = dict(model.named_parameters())

    model.zero_grad()
    inst = model.processor.prepare(model.encode(batch))
    H = model.initial_state(batch)
    for _ in range(unroll):
        H = model.processor(H, inst)
    pointer_loss(model.decode(H, batch), batch).backward()
    unrolled = {k: p.grad.clone() for k, p in params.items()}

    model.zero_grad()
    inst = model.processor.prepare(model.encode(batch))
    fixed = inst.detach()
    res = solve_fixed_point(lambda h: model.processor(h, fixed), model.initial_state(batch),
                            SolverConfig(method="anderson", max_iters=500, epsilon=1e-13))
    z = res.H_star.detach().requires_grad_(True)
    pointer_loss(model.decode(z, batch), batch).backward()
    implicit_backward(z.grad, res.H_star, lambda h: model.processor(h, inst), list(params.values()),
                      BackwardConfig(max_iters=500, tol=1e-13), accumulate=True)
    floor = ZERO_BLOCK * grad_norm(unrolled.values())
    return {k: rel_err(p.grad, unrolled[k], floor) for k, p in params.items()}


def check_implicit(count: int = 10, seed: int = 0, tol: float = 1e-2) -> list[CheckResult]:
    worst, where = 0.0, ""
    algorithms = ("bellman_ford", "floyd_warshall", "scc", "insertion_sort")
    for i in range(count):
        algorithm = algorithms[i % len(algorithms)]
        model = scaled_processor_model(algorithm, 8, seed + i)
        errs = implicit_vs_unrolled(model, small_instance(algorithm, 4, seed + i))
        name, e = max(errs.items(), key=lambda kv: kv[1])
        if e >= worst:
            worst, where = e, f"{algorithm}:{name}"
    return [CheckResult("implicit", "implicit_backward", worst <= tol,
                        f"max rel err {worst:.2e} at {where} (tol {tol:g})")]


# ---------------------------------------------------------------------------
# permutation equivariance

def permute_sample(s: Sample, perm: list[int]) -> Sample:
    """Relabel node i as perm[i]; features and targets travel with their node."""
    n = s.n
    node_raw = [None] * n
    for i in range(n):
        node_raw[perm[i]] = list(s.node_raw[i])
    edges = [(perm[u], perm[v], w) for u, v, w in s.graph.edges]
    if s.algorithm == "floyd_warshall":
        target = sorted((perm[i], perm[j], perm[k]) for i, j, k in s.target)
    else:
        target = [0] * n
        for u in range(n):
            target[perm[u]] = perm[s.target[u]]
    return Sample(s.algorithm, Graph(n, s.graph.directed, edges), node_raw, target, s.tau)


def pointer_distribution(model: NARModel, H: torch.Tensor, batch) -> dict:
    """Map (owner key, candidate node) -> log-probability."""
    logp = pointer_log_probs(model.decode(H, batch), batch)
    out = {}
    for k in range(logp.shape[0]):
        slot = int(batch.cand_slot[k])
        owner = tuple(int(x) for x in batch.slots[slot])
        out[(owner, int(batch.cand_node[k]))] = float(logp[k])
    return out


def equivariance_error(model: NARModel, sample: Sample, perm: list[int], gen: torch.Generator) -> float:
    b1 = make_batch([sample])
    b2 = make_batch([permute_sample(sample, perm)])
    H = torch.randn(sample.n, model.d, dtype=numeric.DTYPE, generator=gen)
    P = torch.tensor(perm)
    Hp = torch.empty_like(H)
    Hp[P] = H
    with torch.no_grad():
        out1 = model.processor_step(H, model.encode(b1))
        out2 = model.processor_step(Hp, model.encode(b2))
        err = float((out2[P] - out1).abs().max())
        d1 = pointer_distribution(model, out1, b1)
        d2 = pointer_distribution(model, out2, b2)
    mapped = {((perm[a], perm[b]), perm[c]): v for ((a, b), c), v in d1.items()}
    if mapped.keys() != d2.keys():
        return math.inf
    return max([err] + [abs(mapped[k] - d2[k]) for k in d2])


def check_equivariance(count: int = 100, seed: int = 0, tol: float = 1e-10, d: int = 16) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    algorithms = ("bellman_ford", "floyd_warshall", "scc", "insertion_sort")
    models = {}
    for a in algorithms:
        torch.manual_seed(seed)
        models[a] = NARModel(ModelConfig(a, latent_dim=d))
    worst = 0.0
    for i in range(count):
        a = algorithms[i % 4]
        n = int(rng.integers(2, 9))
        s = make_sample(a, n, rng)
        perm = rng.permutation(n).tolist()
        worst = max(worst, equivariance_error(models[a], s, perm, gen))
    return [CheckResult("equivariance", "processor_step+decode", worst <= tol,
                        f"max deviation {worst:.2e} (tol {tol:g})")]


def run_all(quick: bool = False) -> list[CheckResult]:
    results = []
    results += check_op_gradients()
    results += check_model_gradients()
    results += check_solvers()
    results += check_implicit(count=3 if quick else 10)
    results += check_oracles(count=200 if quick else 1000)
    results += check_equivariance(count=20 if quick else 100)
    return results
