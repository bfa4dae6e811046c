"""Fixed-point solving, implicit differentiation and Jacobian regularisation.

Every routine works on a state tensor whose leading axis is split into
independent problems by an optional ``segments`` id vector. Norms, stopping
decisions and Anderson mixing weights are computed per segment, so solving a
batch gives the same iterates as solving each sample on its own.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .numeric import DTYPE, ConfigError, Tensor, segment_sum

StateMap = Callable[[Tensor], Tensor]

DEFAULT_EPSILON = {"absolute": 1e-3, "relative": 0.1}


@dataclass
class SolverConfig:
    method: str = "anderson"
    max_iters: int = 32
    stop_mode: str = "absolute"
    epsilon: float | None = None
    memory: int = 5
    ridge: float = 1e-4
    damping: float = 1.0

    def __post_init__(self):
        if self.method not in ("picard", "anderson"):
            raise ConfigError(f"unknown solver method {self.method!r}")
        if self.stop_mode not in DEFAULT_EPSILON:
            raise ConfigError(f"unknown stop mode {self.stop_mode!r}")
        if self.epsilon is None:
            self.epsilon = DEFAULT_EPSILON[self.stop_mode]
        if self.epsilon <= 0 or self.max_iters < 1 or self.memory < 1:
            raise ConfigError("epsilon must be > 0, max_iters >= 1 and memory >= 1")
        if not 0 < self.damping <= 1:
            raise ConfigError("damping must lie in (0, 1]")


@dataclass
class BackwardConfig:
    max_iters: int = 32
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0:
            raise ConfigError("adjoint max_iters and tol must be positive")


@dataclass
class JacRegConfig:
    weight: float = 1.0
    probes: int = 1
    enabled: bool = True

    def __post_init__(self):
        if self.weight < 0 or self.probes < 1:
            raise ConfigError("jacobian weight must be >= 0 and probes >= 1")


@dataclass
class SolveResult:
    H_star: Tensor
    iterations: Tensor   # (B,) f-evaluations until the stop rule fired
    residual: Tensor     # (B,) Frobenius norm of f(H) - H at H_star
    converged: Tensor    # (B,) bool

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())


def _segments(x: Tensor, segments: Tensor | None, num_segments: int | None):
    if segments is None:
        return torch.zeros(x.shape[0], dtype=torch.long), 1
    if num_segments is None:
        num_segments = int(segments.max()) + 1
    return segments, num_segments


def segment_norm(x: Tensor, segments: Tensor, num_segments: int) -> Tensor:
    sq = (x * x).reshape(x.shape[0], -1).sum(1)
    return segment_sum(sq, segments, num_segments).sqrt()


def _gram(G: Tensor, segments: Tensor, num_segments: int) -> Tensor:
    """(B, m, m) Gram matrices of the residual history G of shape (m, N, ...)."""
    m = G.shape[0]
    flat = G.reshape(m, G.shape[1], -1)
    prods = torch.einsum("anf,bnf->nab", flat, flat)
    return segment_sum(prods, segments, num_segments)


def _anderson_weights(gram: Tensor, ridge: float) -> Tensor:
    """argmin_a a^T (G^T G) a subject to sum(a) = 1, ridge scaled by the mean diagonal."""
    m = gram.shape[-1]
    scale = torch.diagonal(gram, dim1=-2, dim2=-1).mean(-1).clamp_min(1e-300)
    eye = torch.eye(m, dtype=gram.dtype)
    A = gram + ridge * scale[:, None, None] * eye
    ones = torch.ones(gram.shape[0], m, 1, dtype=gram.dtype)
    y = torch.linalg.solve(A, ones).squeeze(-1)
    return y / y.sum(-1, keepdim=True)


def solve_fixed_point(f: StateMap, H0: Tensor, cfg: SolverConfig,
                      segments: Tensor | None = None, num_segments: int | None = None) -> SolveResult:
    """Iterate ``f`` from ``H0`` until each segment meets the stop rule.

    Runs without recording a gradient tape. A segment stops at the first
    iterate H with ||f(H) - H|| <= eps (absolute) or
    ||f(H) - H|| / (||f(H)|| + 1e-12) <= eps (relative); its state is frozen
    from then on. Returns the last checked iterate of each segment.
    """
    segments, B = _segments(H0, segments, num_segments)
    row_shape = (-1,) + (1,) * (H0.dim() - 1)
    iterations = torch.full((B,), cfg.max_iters, dtype=torch.long)
    residual = torch.zeros(B, dtype=DTYPE)
    converged = torch.zeros(B, dtype=torch.bool)
    active = torch.ones(B, dtype=torch.bool)
    xs: list[Tensor] = []
    fs: list[Tensor] = []
    with torch.no_grad():
        x = H0.detach().clone()
        for k in range(cfg.max_iters):
            fx = f(x)
            if not bool(torch.isfinite(fx).all()):
                raise FloatingPointError(
                    f"fixed-point solver produced non-finite state at iteration {k + 1}; "
                    f"last residuals {residual.tolist()}")
            r = fx - x
            res = segment_norm(r, segments, B)
            if cfg.stop_mode == "absolute":
                metric = res
            else:
                metric = res / (segment_norm(fx, segments, B) + 1e-12)
            residual = torch.where(active, res, residual)
            done = active & (metric <= cfg.epsilon)
            iterations[done] = k + 1
            converged |= done
            active &= ~done
            if not bool(active.any()) or k == cfg.max_iters - 1:
                break

            if cfg.method == "picard":
                x_next = fx if cfg.damping == 1.0 else cfg.damping * fx + (1 - cfg.damping) * x
            else:
                xs.append(x)
                fs.append(fx)
                if len(xs) > cfg.memory:
                    xs.pop(0)
                    fs.pop(0)
                X = torch.stack(xs)
                F = torch.stack(fs)
                alpha = _anderson_weights(_gram(F - X, segments, B), cfg.ridge)  # (B, m)
                w = alpha.T[:, segments].reshape((len(xs), -1) + (1,) * (H0.dim() - 1))
                mixed_f = (w * F).sum(0)
                if cfg.damping == 1.0:
                    x_next = mixed_f
                else:
                    x_next = cfg.damping * mixed_f + (1 - cfg.damping) * (w * X).sum(0)
            keep = active[segments].reshape(row_shape)
            x = torch.where(keep, x_next, x)
    return SolveResult(x, iterations, residual, converged)


def implicit_backward(grad_out: Tensor, H_star: Tensor, f: StateMap, params: Sequence[torch.Tensor],
                      cfg: BackwardConfig | None = None, segments: Tensor | None = None,
                      num_segments: int | None = None, accumulate: bool = False):
    """Gradients of a loss through the equilibrium H* = f(H*).

    Solves a = grad_out + J^T a by fixed-point iteration, with J the Jacobian
    of ``f`` at ``H_star`` (one recorded application of ``f``), then returns
    the vector-Jacobian product of ``f`` with cotangent ``a`` for ``params``.
    Only ``H_star`` is needed; forward iterates are never revisited.
    With ``accumulate`` the gradients are also added into ``p.grad``.
    Returns (grads, adjoint iterations per segment).
    """
    cfg = cfg or BackwardConfig()
    segments, B = _segments(H_star, segments, num_segments)
    row_shape = (-1,) + (1,) * (H_star.dim() - 1)
    z = H_star.detach().requires_grad_(True)
    with torch.enable_grad():
        fz = f(z)
    g = grad_out.detach()
    a = g.clone()
    active = torch.ones(B, dtype=torch.bool)
    iters = torch.full((B,), cfg.max_iters, dtype=torch.long)
    for k in range(cfg.max_iters):
        (jta,) = torch.autograd.grad(fz, z, a, retain_graph=True, allow_unused=True)
        a_next = g if jta is None else g + jta
        step = segment_norm(a_next - a, segments, B)
        a = torch.where(active[segments].reshape(row_shape), a_next, a)
        done = active & (step <= cfg.tol)
        iters[done] = k + 1
        active &= ~done
        if not bool(active.any()):
            break
    if bool(active.any()):
        warnings.warn(f"adjoint solve did not reach tol {cfg.tol} in {cfg.max_iters} iterations",
                      RuntimeWarning, stacklevel=2)
    params = list(params)
    grads = torch.autograd.grad(fz, params, a, allow_unused=True)
    grads = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]
    if accumulate:
        for p, gr in zip(params, grads):
            p.grad = gr.clone() if p.grad is None else p.grad + gr
    return grads, iters


def jacobian_estimate(f: StateMap, H_star: Tensor, probes: int = 1,
                      generator: torch.Generator | None = None, segments: Tensor | None = None,
                      num_segments: int | None = None) -> Tensor:
    """Hutchinson estimate of ||J_f(H*)||_F^2 / dim, averaged over segments.

    Uses ||J^T v||^2 with standard normal probes v; the result is
    differentiable with respect to the parameters inside ``f``.
    """
    segments, B = _segments(H_star, segments, num_segments)
    z = H_star.detach().requires_grad_(True)
    with torch.enable_grad():
        fz = f(z)
        row_dim = z[0].numel()
        dims = torch.bincount(segments, minlength=B).to(DTYPE) * row_dim
        total = torch.zeros(B, dtype=DTYPE)
        for _ in range(probes):
            v = torch.randn(z.shape, dtype=z.dtype, generator=generator)
            (jtv,) = torch.autograd.grad(fz, z, v, create_graph=True, allow_unused=True)
            if jtv is None:
                continue
            sq = (jtv * jtv).reshape(z.shape[0], -1).sum(1)
            total = total + segment_sum(sq, segments, B)
        return (total / (probes * dims)).mean()


def jacobian_reg(f: StateMap, H_star: Tensor, cfg: JacRegConfig,
                 generator: torch.Generator | None = None, segments: Tensor | None = None,
                 num_segments: int | None = None) -> Tensor:
    """Weighted Jacobian penalty to add to the training loss."""
    if not cfg.enabled or cfg.weight == 0:
        return torch.zeros((), dtype=DTYPE)
    return cfg.weight * jacobian_estimate(f, H_star, cfg.probes, generator, segments, num_segments)


def deq_forward(model, batch, cfg: SolverConfig, inst=None):
    """Decode pointers from the processor equilibrium reached from H = 0.

    ``model`` provides ``encode``, ``processor`` (with ``prepare``),
    ``initial_state`` and ``decode``. Each solver iteration calls the
    processor exactly once with the encoded inputs held fixed.
    Returns (logits, SolveResult).
    """
    inst = model.encode(batch) if inst is None else inst
    with torch.no_grad():
        ctx = model.processor.prepare(inst.detach())
    result = solve_fixed_point(lambda H: model.processor(H, ctx), model.initial_state(batch), cfg,
                               batch.node_batch, batch.num_graphs)
    return model.decode(result.H_star, batch), result
