"""Hint-free training, model selection, evaluation and timing."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Sample
from .deq import (BackwardConfig, JacRegConfig, SolverConfig, deq_forward, implicit_backward,
                  jacobian_reg, solve_fixed_point)
from .model import (Batch, ModelConfig, NARModel, SampleArrays, chance_accuracy, collate,
                    pointer_loss, pointer_predictions, sample_arrays)
from .numeric import Adam, ConfigError, load_params, save_params

log = logging.getLogger(__name__)

MODES = ("dear", "nar_baseline")


@dataclass
class TrainConfig:
    algorithm: str
    mode: str = "dear"
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-4
    latent_dim: int = 128
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    backward: BackwardConfig = field(default_factory=BackwardConfig)
    jacobian: JacRegConfig = field(default_factory=JacRegConfig)
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.epochs, self.batch_size, self.latent_dim, self.eval_batch_size) < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch sizes, latent_dim and lr must be positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.algorithm, latent_dim=self.latent_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    mean_train_iters: float
    seconds: float


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    chance: float
    iterations: list[int]          # solver iterations per sample (unroll length for the baseline)
    converged: list[bool]
    seconds_per_sample: float
    predictions: list[list[int]]   # per sample, local node indices per pointer slot
    diameters: list[int] = field(default_factory=list)  # message-graph hop diameter per sample

    @property
    def mean_iters(self) -> float:
        return statistics.fmean(self.iterations)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "chance_accuracy": self.chance,
            "mean_iters": self.mean_iters,
            "max_iters": max(self.iterations),
            "converged_fraction": statistics.fmean(self.converged),
            "mean_diameter": statistics.fmean(self.diameters) if self.diameters else None,
            # samples solved in fewer processor calls than hops across the graph
            "fewer_iters_than_diameter": (statistics.fmean(i < d for i, d in zip(self.iterations, self.diameters))
                                          if self.diameters else None),
            "seconds_per_sample": self.seconds_per_sample,
        }


@dataclass
class Metrics:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    test: EvalResult | None = None

    def summary(self) -> dict:
        out = {"best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
               "epochs": len(self.history)}
        if self.test is not None:
            out["test"] = self.test.summary()
        return out


# ---------------------------------------------------------------------------
# forward passes

def model_forward(model: NARModel, batch: Batch, mode: str, solver: SolverConfig):
    """Logits plus per-sample iteration counts for either execution mode."""
    if mode == "dear":
        logits, res = deq_forward(model, batch, solver)
        return logits, res.iterations, res.converged
    H = model.unroll(batch)
    steps = batch.sizes.clone()
    return model.decode(H, batch), steps, torch.ones_like(steps, dtype=torch.bool)


def _dear_step(model: NARModel, batch: Batch, cfg: TrainConfig, gen: torch.Generator):
    params = list(model.parameters())
    inst = model.processor.prepare(model.encode(batch))
    fixed = inst.detach()
    res = solve_fixed_point(lambda H: model.processor(H, fixed), model.initial_state(batch),
                            cfg.solver, batch.node_batch, batch.num_graphs)
    z = res.H_star.detach().requires_grad_(True)
    loss = pointer_loss(model.decode(z, batch), batch)
    loss.backward()
    grad_out = z.grad.detach().clone()

    def f(H):
        return model.processor(H, inst)

    reg = jacobian_reg(f, res.H_star, cfg.jacobian, gen, batch.node_batch, batch.num_graphs)
    if reg.requires_grad:
        reg.backward(retain_graph=True)
    implicit_backward(grad_out, res.H_star, f, params, cfg.backward, batch.node_batch,
                      batch.num_graphs, accumulate=True)
    return float(loss.detach()), float(reg.detach()), res.iterations


def _nar_step(model: NARModel, batch: Batch):
    loss = pointer_loss(model.decode(model.unroll(batch), batch), batch)
    loss.backward()
    return float(loss.detach()), 0.0, batch.sizes


def batches(items: Sequence, size: int, order: Sequence[int] | None = None):
    order = range(len(items)) if order is None else order
    order = list(order)
    for start in range(0, len(order), size):
        yield [items[i] for i in order[start:start + size]]


def build_model(cfg: TrainConfig) -> NARModel:
    torch.manual_seed(cfg.seed)
    return NARModel(cfg.model_config())


def train(cfg: TrainConfig, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          on_epoch=None) -> tuple[dict, Metrics]:
    """Adam on the mean pointer loss; keeps the lowest-validation-loss weights.

    Returns (best state dict, Metrics). Deterministic for a fixed config.
    """
    if not train_samples or not val_samples:
        raise ConfigError("training needs non-empty train and validation sets")
    train_arrays = [sample_arrays(s) for s in train_samples]
    val_arrays = [sample_arrays(s) for s in val_samples]
    model = build_model(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)

    history: list[EpochRecord] = []
    best_state, best_loss, best_epoch = None, math.inf, -1
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        losses, weights, iters = [], [], []
        order = rng.permutation(len(train_arrays))
        for bi, items in enumerate(batches(train_arrays, cfg.batch_size, order)):
            batch = collate(cfg.algorithm, items)
            opt.zero_grad()
            if cfg.mode == "dear":
                loss, _, it = _dear_step(model, batch, cfg, gen)
            else:
                loss, _, it = _nar_step(model, batch)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step()
            losses.append(loss)
            weights.append(len(items))
            iters.extend(it.tolist())
        val = evaluate_arrays(model, cfg.algorithm, val_arrays, cfg.solver, cfg.mode, cfg.eval_batch_size)
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), val.loss, val.accuracy,
                          statistics.fmean(iters), time.perf_counter() - start)
        history.append(rec)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f iters %.1f (%.0fs)",
                 rec.epoch, rec.train_loss, rec.val_loss, rec.val_accuracy, rec.mean_train_iters, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if rec.val_loss < best_loss:
            best_loss, best_epoch = rec.val_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
    return best_state, Metrics(history, best_epoch, best_loss)


# ---------------------------------------------------------------------------
# evaluation

def message_diameter(arr: SampleArrays) -> int:
    """Longest finite hop distance along message edges (sender to receiver)."""
    adj = np.zeros((arr.n, arr.n), dtype=np.int64)
    adj[arr.send, arr.recv] = 1
    reach = np.eye(arr.n, dtype=np.int64)
    hops = 0
    while True:
        grown = ((reach + reach @ adj) > 0).astype(np.int64)
        if np.array_equal(grown, reach):
            return hops
        reach, hops = grown, hops + 1


def evaluate_arrays(model: NARModel, algorithm: str, arrays: Sequence[SampleArrays],
                    solver: SolverConfig, mode: str = "dear", batch_size: int = 16) -> EvalResult:
    model.eval()
    correct = total = 0
    loss_sum = 0.0
    chance_sum = 0.0
    iterations: list[int] = []
    converged: list[bool] = []
    predictions: list[list[int]] = []
    elapsed = 0.0
    with torch.no_grad():
        for items in batches(arrays, batch_size):
            batch = collate(algorithm, items)
            start = time.perf_counter()
            logits, it, conv = model_forward(model, batch, mode, solver)
            elapsed += time.perf_counter() - start
            pred = pointer_predictions(logits, batch)
            slots = batch.num_slots
            correct += int((pred == batch.target_node).sum())
            total += slots
            loss_sum += float(pointer_loss(logits, batch)) * slots
            chance_sum += chance_accuracy(batch) * slots
            iterations.extend(int(x) for x in it)
            converged.extend(bool(x) for x in conv)
            offsets = torch.cumsum(batch.sizes, 0) - batch.sizes
            local = pred - offsets[batch.slot_batch]
            for b in range(batch.num_graphs):
                predictions.append(local[batch.slot_batch == b].tolist())
    return EvalResult(correct / total, loss_sum / total, chance_sum / total, iterations, converged,
                      elapsed / len(arrays), predictions, [message_diameter(a) for a in arrays])


def evaluate(model: NARModel, samples: Sequence[Sample], solver: SolverConfig,
             mode: str = "dear", batch_size: int = 16) -> EvalResult:
    """Pointer accuracy, loss, solver iterations and seconds per sample.

    Never mutates the model parameters.
    """
    return evaluate_arrays(model, samples[0].algorithm, [sample_arrays(s) for s in samples],
                           solver, mode, batch_size)


def score_predictions(samples: Sequence[Sample], predictions: Sequence[Sequence[int]]) -> float:
    """Pointer accuracy of dumped per-sample predictions against oracle targets."""
    if len(samples) != len(predictions):
        raise ConfigError(f"{len(predictions)} prediction rows for {len(samples)} samples")
    correct = total = 0
    for i, (s, pred) in enumerate(zip(samples, predictions)):
        target = sample_arrays(s).target_node
        if len(pred) != len(target):
            raise ConfigError(f"sample {i}: {len(pred)} predictions for {len(target)} pointer slots")
        correct += int((np.asarray(pred) == target).sum())
        total += len(target)
    return correct / total


def benchmark_inference(model: NARModel, samples: Sequence[Sample], solver: SolverConfig,
                        mode: str = "dear", repetitions: int = 3,
                        include_encoding: bool = False) -> dict:
    """Per-sample forward wall time, one sample at a time.

    Each repetition times every sample once; the report gives the mean and
    standard deviation of the per-repetition mean seconds/sample. A warm-up
    pass over the first sample is excluded. By default the timed region is
    processor + solver + decoder; ``include_encoding`` adds batching and the
    input encoders.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    algorithm = samples[0].algorithm
    arrays = [sample_arrays(s) for s in samples]
    model.eval()
    with torch.no_grad():
        pre = [collate(algorithm, [a]) for a in arrays]
        insts = [model.encode(b) for b in pre]

        def run(i):
            if include_encoding:
                b = collate(algorithm, [arrays[i]])
                inst = model.encode(b)
            else:
                b, inst = pre[i], insts[i]
            if mode == "dear":
                logits, res = deq_forward(model, b, solver, inst=inst)
                return int(res.iterations[0])
            ctx = model.processor.prepare(inst)
            H = model.initial_state(b)
            for _ in range(int(b.sizes[0])):
                H = model.processor(H, ctx)
            model.decode(H, b)
            return int(b.sizes[0])

        run(0)
        rep_means = []
        iters = []
        for _ in range(repetitions):
            times = []
            for i in range(len(arrays)):
                start = time.perf_counter()
                it = run(i)
                times.append(time.perf_counter() - start)
                iters.append(it)
            rep_means.append(statistics.fmean(times))
    return {
        "mode": mode,
        "repetitions": repetitions,
        "samples": len(arrays),
        "mean_seconds_per_sample": statistics.fmean(rep_means),
        "std_seconds_per_sample": statistics.stdev(rep_means) if repetitions > 1 else 0.0,
        "std_defined": repetitions > 1,
        "mean_iters": statistics.fmean(iters),
    }


def ablation_relative_tolerance(model: NARModel, samples: Sequence[Sample],
                                absolute: SolverConfig | None = None,
                                relative: SolverConfig | None = None, batch_size: int = 16) -> dict:
    """Evaluate one set of weights under two stopping rules and pair the results."""
    absolute = absolute or SolverConfig(stop_mode="absolute", epsilon=1e-3)
    relative = relative or SolverConfig(stop_mode="relative", epsilon=0.1)
    a = evaluate(model, samples, absolute, "dear", batch_size)
    r = evaluate(model, samples, relative, "dear", batch_size)
    return {
        "absolute": {**a.summary(), "solver": asdict(absolute)},
        "relative": {**r.summary(), "solver": asdict(relative)},
        "accuracy_delta": r.accuracy - a.accuracy,
        "mean_iters_delta": r.mean_iters - a.mean_iters,
        "per_sample": [{"absolute_iters": ai, "relative_iters": ri}
                       for ai, ri in zip(a.iterations, r.iterations)],
        "relative_never_slower": all(ri <= ai for ai, ri in zip(a.iterations, r.iterations)),
    }


# ---------------------------------------------------------------------------
# persistence

def save_checkpoint(model: NARModel, path: str | Path, train_cfg: TrainConfig | None = None) -> None:
    header = {"model": model.cfg.to_dict()}
    if train_cfg is not None:
        header["train"] = train_cfg.to_dict()
    save_params(model, path, header)


def load_checkpoint(path: str | Path) -> tuple[NARModel, dict]:
    header, params = load_params(path)
    model = NARModel(ModelConfig(**header["model"]))
    model.load_state_dict(params)
    return model, header


def write_history_csv(history: Sequence[EpochRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(history[0]).keys()) if history else [])
        writer.writeheader()
        for rec in history:
            writer.writerow(asdict(rec))


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=str) + "\n")
