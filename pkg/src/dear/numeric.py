"""Tensor primitives, layers, Adam and checkpoint I/O.

All arithmetic runs in float64 on torch CPU tensors; torch's autograd
provides the reverse-mode tape, which is rebuilt on every forward call.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

DTYPE = torch.float64
CHECKPOINT_FORMAT = "dear-params"
CHECKPOINT_VERSION = 1

Tensor = torch.Tensor
Parameter = nn.Parameter


class ConfigError(ValueError):
    """Inconsistent shapes or settings detected before any computation."""


class InvariantError(RuntimeError):
    """A structural invariant was violated at run time."""


def tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    t = torch.as_tensor(values, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


class LinearLayer(nn.Module):
    """y = x @ W^T + b with W of shape (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ConfigError(f"linear layer needs positive dims, got {in_dim}->{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        bound = 1.0 / in_dim ** 0.5
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim, dtype=DTYPE).uniform_(-bound, bound))
        if bias:
            self.bias = nn.Parameter(torch.empty(out_dim, dtype=DTYPE).uniform_(-bound, bound))
        else:
            self.register_parameter("bias", None)

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise ConfigError(f"linear layer expects last dim {layer.in_dim}, got {tuple(x.shape)}")
    return torch.nn.functional.linear(x, layer.weight, layer.bias)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


class Mlp(nn.Module):
    """Stack of linear layers with a rectifier between consecutive layers."""

    def __init__(self, dims: Sequence[int]):
        super().__init__()
        if len(dims) < 2:
            raise ConfigError("an MLP needs at least input and output dims")
        self.layers = nn.ModuleList(LinearLayer(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = relu(x)
            x = layer(x)
        return x


def masked_max(rows: Tensor, mask: Tensor, dim: int = -2) -> tuple[Tensor, Tensor]:
    """Maximum over the unmasked entries along ``dim``.

    ``rows`` has the reduced axis at ``dim`` followed by the feature axis;
    ``mask`` is boolean with the shape of ``rows`` minus the feature axis.
    Returns the per-group maxima and the winning indices. Ties resolve to the
    lowest index, and the gradient flows only to the winners (via ``gather``).
    """
    if mask.shape != rows.shape[:-1]:
        raise ConfigError(f"mask shape {tuple(mask.shape)} does not match rows {tuple(rows.shape)}")
    dim = dim % rows.dim()
    if dim == rows.dim() - 1:
        raise ConfigError("masked_max reduces over a group axis, not the feature axis")
    if not bool(mask.any(dim=dim).all()):
        raise InvariantError("masked_max: empty aggregation group")
    with torch.no_grad():
        filled = rows.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        # argmax returns the first maximal index, which gives the tie rule.
        idx = filled.argmax(dim=dim, keepdim=True)
    out = rows.gather(dim, idx).squeeze(dim)
    return out, idx.squeeze(dim)


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d p into ``p.grad`` for every reachable leaf.

    Repeated calls without zeroing accumulate, matching torch semantics.
    """
    if loss.numel() != 1:
        raise ConfigError("backward expects a scalar loss")
    loss.backward()


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        else:
            p.grad.zero_()


class Adam:
    """Thin wrapper over ``torch.optim.Adam`` exposing the moment state."""

    def __init__(self, params: Iterable[Parameter], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self._opt = torch.optim.Adam(self.params, lr=lr, betas=betas, eps=eps)

    @property
    def step_count(self) -> int:
        steps = [int(s["step"]) for s in self._opt.state.values() if "step" in s]
        return max(steps, default=0)

    def moments(self, p: Parameter) -> tuple[Tensor, Tensor]:
        s = self._opt.state[p]
        return s["exp_avg"], s["exp_avg_sq"]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        self._opt.step()

    def zero_grad(self) -> None:
        zero_grad(self.params)


def adam_step(state: Adam, params=None) -> None:
    state.step()


def finite_difference_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> Tensor:
    """Central differences of a scalar ``fn()`` with respect to ``param``.

    Perturbs ``param`` in place and restores it afterwards.
    """
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: Tensor, b: Tensor, floor: float = 1e-12) -> float:
    return float((a - b).norm() / max(float(b.norm()), float(a.norm()), floor))


def save_params(module: nn.Module, path: str | Path, header: dict | None = None) -> None:
    """Write parameters as JSON: name -> {shape, values (row-major)}."""
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "params": {
            name: {"shape": list(t.shape), "values": t.detach().reshape(-1).tolist()}
            for name, t in module.state_dict().items()
        },
    }
    Path(path).write_text(json.dumps(record))


def load_params(path: str | Path) -> tuple[dict, dict[str, Tensor]]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a parameter checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {record.get('version')}")
    params = {name: tensor(v["values"], v["shape"]) for name, v in record["params"].items()}
    return record.get("header", {}), params


def segment_max(rows: Tensor, segments: Tensor, num_segments: int) -> tuple[Tensor, Tensor]:
    """Per-segment elementwise maximum of ``rows`` (M, F) grouped by ``segments`` (M,).

    The sparse twin of :func:`masked_max`: a row takes part in the group named
    by its segment id. Returns (num_segments, F) maxima and the winning row
    index per output coordinate; ties go to the lowest row index and the
    gradient is routed to the winners only.
    """
    if rows.dim() != 2 or segments.shape != rows.shape[:1]:
        raise ConfigError(f"segment_max expects (M, F) rows and (M,) ids, got {tuple(rows.shape)}")
    feat = rows.shape[1]
    counts = torch.bincount(segments, minlength=num_segments)
    if counts.numel() > num_segments or bool((counts == 0).any()):
        raise InvariantError("segment_max: empty aggregation group")
    with torch.no_grad():
        index = segments.unsqueeze(1).expand(-1, feat)
        best = torch.full((num_segments, feat), float("-inf"), dtype=rows.dtype)
        best = best.scatter_reduce(0, index, rows, reduce="amax", include_self=True)
        pos = torch.arange(rows.shape[0]).unsqueeze(1).expand(-1, feat)
        pos = torch.where(rows == best[segments], pos, rows.shape[0])
        winner = torch.full((num_segments, feat), rows.shape[0], dtype=torch.long)
        winner = winner.scatter_reduce(0, index, pos, reduce="amin", include_self=True)
    return rows.gather(0, winner), winner


def segment_sum(values: Tensor, segments: Tensor, num_segments: int) -> Tensor:
    out = torch.zeros((num_segments,) + tuple(values.shape[1:]), dtype=values.dtype)
    return out.index_add(0, segments, values)
