import hashlib
import math

import numpy as np
import pytest
import torch

from dear import train as tr
from dear.checks import small_instance
from dear.data import DatasetSpec, generate_split, make_sample
from dear.deq import SolverConfig
from dear.model import make_batch, chance_accuracy, sample_arrays
from dear.numeric import Adam, ConfigError
from dear.train import (TrainConfig, ablation_relative_tolerance, benchmark_inference, build_model,
                        evaluate, load_checkpoint, save_checkpoint, score_predictions, train)


def samples(algorithm, count, sizes=(4, 6), seed=0):
    rng = np.random.default_rng(seed)
    return [make_sample(algorithm, int(rng.integers(sizes[0], sizes[1] + 1)), rng) for _ in range(count)]


def tiny(algorithm="insertion_sort", **kw):
    base = dict(epochs=1, batch_size=8, latent_dim=8, seed=0)
    base.update(kw)
    return TrainConfig(algorithm, **base)


def state_hash(model):
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.numpy().tobytes())
    return h.hexdigest()


def test_one_epoch_bookkeeping(monkeypatch):
    steps, evals = [], []
    real_step, real_eval = Adam.step, tr.evaluate_arrays
    monkeypatch.setattr(Adam, "step", lambda self: (steps.append(1), real_step(self))[1])
    monkeypatch.setattr(tr, "evaluate_arrays", lambda *a, **k: (evals.append(1), real_eval(*a, **k))[1])
    _, metrics = train(tiny(), samples("insertion_sort", 32), samples("insertion_sort", 4, seed=1))
    assert len(steps) == 4
    assert len(evals) == 1
    assert len(metrics.history) == 1 and metrics.best_epoch == 1


def test_partial_last_batch_is_kept(monkeypatch):
    steps = []
    real_step = Adam.step
    monkeypatch.setattr(Adam, "step", lambda self: (steps.append(1), real_step(self))[1])
    train(tiny(), samples("insertion_sort", 19), samples("insertion_sort", 2, seed=1))
    assert len(steps) == 3


@pytest.mark.parametrize("mode", ["dear", "nar_baseline"])
def test_overfits_fixed_batch(mode):
    data = samples("insertion_sort", 32, sizes=(4, 5))
    cfg = tiny(mode=mode, epochs=50, batch_size=32, latent_dim=16, lr=3e-3)
    _, metrics = train(cfg, data, data)
    losses = [r.train_loss for r in metrics.history]
    assert losses[-1] < 0.7 * losses[0]
    assert min(r.val_loss for r in metrics.history) < metrics.history[0].val_loss


def test_training_is_deterministic():
    data, val = samples("bellman_ford", 24), samples("bellman_ford", 4, seed=1)
    cfg = tiny("bellman_ford", epochs=2)
    s1, m1 = train(cfg, data, val)
    s2, m2 = train(cfg, data, val)
    assert [r.train_loss for r in m1.history] == [r.train_loss for r in m2.history]
    assert [r.val_loss for r in m1.history] == [r.val_loss for r in m2.history]
    assert all(torch.equal(s1[k], s2[k]) for k in s1)


def test_selects_lowest_validation_loss():
    data, val = samples("scc", 24), samples("scc", 6, seed=1)
    cfg = tiny("scc", epochs=4, lr=1e-2)
    state, metrics = train(cfg, data, val)
    val_losses = [r.val_loss for r in metrics.history]
    assert metrics.best_epoch == 1 + int(np.argmin(val_losses))
    model = build_model(cfg)
    model.load_state_dict(state)
    assert evaluate(model, val, cfg.solver, batch_size=cfg.eval_batch_size).loss == metrics.best_val_loss


def test_validation_tie_keeps_earliest_epoch(monkeypatch):
    real_eval = tr.evaluate_arrays

    def flat(*a, **k):
        res = real_eval(*a, **k)
        res.loss = 1.0
        return res

    monkeypatch.setattr(tr, "evaluate_arrays", flat)
    _, metrics = train(tiny(epochs=3), samples("insertion_sort", 8), samples("insertion_sort", 2, seed=1))
    assert metrics.best_epoch == 1


def test_nonfinite_loss_aborts_with_context(monkeypatch):
    real = tr.pointer_loss
    monkeypatch.setattr(tr, "pointer_loss", lambda logits, batch: real(logits, batch) * math.nan)
    with pytest.raises(FloatingPointError, match="epoch 1, batch 0"):
        train(tiny(mode="nar_baseline"), samples("insertion_sort", 8), samples("insertion_sort", 2))


def test_evaluation_leaves_parameters_untouched():
    model = build_model(tiny("floyd_warshall"))
    before = state_hash(model)
    evaluate(model, samples("floyd_warshall", 5), SolverConfig())
    evaluate(model, samples("floyd_warshall", 5), SolverConfig(), mode="nar_baseline")
    assert state_hash(model) == before


@pytest.mark.parametrize("algorithm", ["bellman_ford", "floyd_warshall", "scc", "insertion_sort"])
def test_dumped_predictions_rescore_to_reported_accuracy(algorithm):
    model = build_model(tiny(algorithm))
    data = samples(algorithm, 7)
    res = evaluate(model, data, SolverConfig(), batch_size=3)
    assert score_predictions(data, res.predictions) == res.accuracy


@pytest.mark.parametrize("algorithm", ["bellman_ford", "floyd_warshall", "scc", "insertion_sort"])
def test_oracle_predictions_score_one(algorithm):
    data = samples(algorithm, 6)
    oracle = [sample_arrays(s).target_node.tolist() for s in data]
    assert score_predictions(data, oracle) == 1.0


def test_prediction_row_count_mismatch():
    data = samples("scc", 2)
    with pytest.raises(ConfigError):
        score_predictions(data, [[0]])


def test_chance_level_from_candidate_sets():
    s = make_sample("bellman_ford", 64, np.random.default_rng(3))
    arr = sample_arrays(s)
    sizes = np.bincount(arr.cand_slot, minlength=64)
    expected = float(np.mean(1.0 / sizes))
    model = build_model(tiny("bellman_ford"))
    assert evaluate(model, [s], SolverConfig()).chance == pytest.approx(expected, abs=1e-15)
    assert chance_accuracy(make_batch([s])) == pytest.approx(expected, abs=1e-15)


def test_benchmark_single_repetition_flags_std():
    model = build_model(tiny("insertion_sort"))
    out = benchmark_inference(model, samples("insertion_sort", 3), SolverConfig(), repetitions=1)
    assert out["std_seconds_per_sample"] == 0.0 and out["std_defined"] is False
    out = benchmark_inference(model, samples("insertion_sort", 3), SolverConfig(), repetitions=2)
    assert out["std_defined"] is True
    assert {"mean_seconds_per_sample", "std_seconds_per_sample", "mean_iters"} <= set(out)


def test_baseline_time_grows_with_size():
    model = build_model(tiny("insertion_sort"))
    small = benchmark_inference(model, samples("insertion_sort", 3, (6, 6)), SolverConfig(), "nar_baseline")
    large = benchmark_inference(model, samples("insertion_sort", 3, (48, 48)), SolverConfig(), "nar_baseline")
    assert small["mean_iters"] == 6 and large["mean_iters"] == 48
    assert large["mean_seconds_per_sample"] > small["mean_seconds_per_sample"]


def test_ablation_with_identical_configs_is_identical():
    model = build_model(tiny("bellman_ford"))
    data = samples("bellman_ford", 5)
    out = ablation_relative_tolerance(model, data, SolverConfig(), SolverConfig())
    assert out["accuracy_delta"] == 0.0 and out["mean_iters_delta"] == 0.0
    a, r = dict(out["absolute"]), dict(out["relative"])
    a.pop("seconds_per_sample")
    r.pop("seconds_per_sample")
    assert a == r


def test_ablation_reports_paired_columns():
    model = build_model(tiny("bellman_ford"))
    out = ablation_relative_tolerance(model, samples("bellman_ford", 4))
    assert out["absolute"]["solver"]["epsilon"] == 1e-3
    assert out["relative"]["solver"]["stop_mode"] == "relative"
    assert len(out["per_sample"]) == 4
    assert set(out["per_sample"][0]) == {"absolute_iters", "relative_iters"}


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny("floyd_warshall")
    model = build_model(cfg)
    save_checkpoint(model, tmp_path / "ck.json", cfg)
    loaded, header = load_checkpoint(tmp_path / "ck.json")
    assert header["train"]["algorithm"] == "floyd_warshall"
    assert state_hash(loaded) == state_hash(model)
    data = samples("floyd_warshall", 3)
    assert evaluate(loaded, data, SolverConfig()).predictions == evaluate(model, data, SolverConfig()).predictions


def test_generated_splits_train_end_to_end():
    spec = DatasetSpec("bellman_ford", counts=(16, 4, 2), train_sizes=(4, 6), val_size=6, test_size=10)
    cfg = tiny("bellman_ford")
    state, metrics = train(cfg, list(generate_split(spec, "train")), list(generate_split(spec, "val")))
    model = build_model(cfg)
    model.load_state_dict(state)
    res = evaluate(model, list(generate_split(spec, "test")), cfg.solver)
    assert 0.0 <= res.accuracy <= 1.0 and res.seconds_per_sample > 0
    assert len(res.iterations) == 2


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig("scc", mode="hints")
    with pytest.raises(ConfigError):
        TrainConfig("scc", lr=0.0)
    with pytest.raises(ConfigError):
        train(tiny(), [], samples("insertion_sort", 1))


def test_small_instance_helper_is_reproducible():
    assert small_instance("scc", 5, 2).to_json() == small_instance("scc", 5, 2).to_json()


def test_message_diameter_examples():
    from dear.data import Graph, Sample
    path = Graph(4, False, [(0, 1, 0.5), (1, 2, 0.5), (2, 3, 0.5)])
    s = Sample("bellman_ford", path, [[i / 4, float(i == 0)] for i in range(4)], [0, 0, 1, 2], 3)
    assert tr.message_diameter(sample_arrays(s)) == 3
    assert tr.message_diameter(sample_arrays(small_instance("insertion_sort", 5, 0))) == 1
    lone = Sample("bellman_ford", Graph(2, False, []), [[0.0, 1.0], [0.5, 0.0]], [0, 1], 1)
    assert tr.message_diameter(sample_arrays(lone)) == 0


def test_evaluation_reports_diameter_diagnostics():
    model = build_model(tiny("bellman_ford"))
    data = samples("bellman_ford", 4)
    summary = evaluate(model, data, SolverConfig()).summary()
    assert summary["mean_diameter"] == np.mean([tr.message_diameter(sample_arrays(s)) for s in data])
    assert 0.0 <= summary["fewer_iters_than_diameter"] <= 1.0
