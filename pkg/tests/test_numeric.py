import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dear import numeric
from dear.checks import check_op_gradients
from dear.numeric import (Adam, ConfigError, InvariantError, LinearLayer, linear_forward,
                          masked_max, relu, segment_max, sigmoid, tensor)


def make_layer(weight, bias):
    w = tensor(weight)
    layer = LinearLayer(w.shape[1], w.shape[0])
    with torch.no_grad():
        layer.weight.copy_(w)
        layer.bias.copy_(tensor(bias))
    return layer


def test_linear_identity():
    layer = make_layer(np.eye(2), [0.0, 0.0])
    assert linear_forward(layer, tensor([3.0, -1.0])).tolist() == [3.0, -1.0]


def test_linear_hand_arithmetic():
    layer = make_layer([[1.0, 1.0]], [0.5])
    assert linear_forward(layer, tensor([2.0, 3.0])).tolist() == [5.5]


def test_linear_zero_map_returns_bias():
    layer = make_layer(np.zeros((3, 4)), [1.0, -2.0, 0.25])
    x = torch.randn(5, 4, dtype=numeric.DTYPE)
    out = linear_forward(layer, x)
    assert torch.equal(out, tensor([1.0, -2.0, 0.25]).expand(5, 3))


def test_linear_dimension_mismatch():
    with pytest.raises(ConfigError):
        linear_forward(LinearLayer(3, 2), torch.zeros(4, dtype=numeric.DTYPE))


def test_relu_and_sigmoid_values():
    assert relu(tensor([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert float(sigmoid(tensor(0.0))) == 0.5
    assert float(sigmoid(tensor(math.log(3.0)))) == pytest.approx(0.75, abs=1e-15)


def test_masked_max_examples():
    rows = tensor([[1.0, 5.0], [3.0, 2.0]]).unsqueeze(0)
    out, idx = masked_max(rows, torch.ones(1, 2, dtype=torch.bool), dim=1)
    assert out.tolist() == [[3.0, 5.0]]
    assert idx.tolist() == [[1, 0]]

    single = tensor([[7.0, -1.0], [9.0, 9.0]]).unsqueeze(0)
    out, _ = masked_max(single, torch.tensor([[True, False]]), dim=1)
    assert out.tolist() == [[7.0, -1.0]]


def test_masked_max_tie_routes_to_lowest_index():
    rows = tensor([[1.0, 1.0], [1.0, 2.0]]).unsqueeze(0).requires_grad_(True)
    out, idx = masked_max(rows, torch.ones(1, 2, dtype=torch.bool), dim=1)
    assert idx.tolist() == [[0, 1]]
    out.sum().backward()
    assert rows.grad[0].tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_masked_max_off_tie_matches_finite_differences():
    # move the tied coordinate slightly so both sides are differentiable
    base = tensor([[1.0 + 1e-3, 1.0], [1.0, 2.0]]).unsqueeze(0)
    rows = base.clone().requires_grad_(True)
    weights = tensor([[0.3, -0.7]])
    (masked_max(rows, torch.ones(1, 2, dtype=torch.bool), dim=1)[0] * weights).sum().backward()
    fd = numeric.finite_difference_grad(
        lambda: (masked_max(rows, torch.ones(1, 2, dtype=torch.bool), dim=1)[0] * weights).sum(), rows)
    assert torch.allclose(rows.grad, fd, atol=1e-9)


def test_masked_max_empty_group_is_fatal():
    with pytest.raises(InvariantError):
        masked_max(torch.zeros(1, 2, 3, dtype=numeric.DTYPE), torch.tensor([[False, False]]), dim=1)


def test_segment_max_matches_masked_max():
    rows = torch.randn(6, 3, dtype=numeric.DTYPE)
    seg = torch.tensor([1, 0, 1, 2, 0, 2])
    out, _ = segment_max(rows, seg, 3)
    for s in range(3):
        assert torch.equal(out[s], rows[seg == s].max(0).values)


def test_segment_max_empty_segment_is_fatal():
    with pytest.raises(InvariantError):
        segment_max(torch.zeros(2, 1, dtype=numeric.DTYPE), torch.tensor([0, 2]), 3)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_segment_max_gradient_is_one_hot_routing(groups, feat, seed):
    gen = torch.Generator().manual_seed(seed)
    seg = torch.cat([torch.arange(groups), torch.randint(0, groups, (7,), generator=gen)])
    # small integers produce plenty of ties
    rows = torch.randint(-2, 3, (seg.numel(), feat), generator=gen).to(numeric.DTYPE).requires_grad_(True)
    upstream = torch.randn(groups, feat, dtype=numeric.DTYPE, generator=gen)
    out, winner = segment_max(rows, seg, groups)
    out.backward(upstream)
    nonzero = (rows.grad != 0).sum(0)
    assert bool((nonzero <= groups).all())
    assert torch.allclose(rows.grad.abs().sum(0), upstream.abs().sum(0))
    for g in range(groups):
        for f in range(feat):
            members = torch.nonzero(seg == g).flatten()
            best = rows[members, f].max()
            first = members[rows[members, f] == best].min()
            assert int(winner[g, f]) == int(first)


def test_backward_linear_example():
    layer = make_layer([[0.0, 0.0]], [0.0])
    loss = linear_forward(layer, tensor([1.0, 2.0])).sum()
    numeric.backward(loss)
    assert layer.weight.grad.tolist() == [[1.0, 2.0]]


def test_backward_unused_parameter_gets_zero():
    used, unused = LinearLayer(2, 1), LinearLayer(2, 1)
    numeric.zero_grad(unused.parameters())
    numeric.backward(used(torch.ones(2, dtype=numeric.DTYPE)).sum())
    assert all(float(p.grad.abs().sum()) == 0.0 for p in unused.parameters())


def test_backward_accumulates_without_reset():
    layer = make_layer([[1.0]], [0.0])
    x = tensor([2.0])
    numeric.backward(layer(x).sum())
    numeric.backward(layer(x).sum())
    assert layer.weight.grad.tolist() == [[4.0]]


def test_op_gradients_match_finite_differences():
    results = check_op_gradients()
    assert results and all(r.ok for r in results), [r.line() for r in results if not r.ok]


def test_adam_zero_grad_is_identity():
    layer = LinearLayer(3, 2)
    before = [p.detach().clone() for p in layer.parameters()]
    opt = Adam(layer.parameters(), lr=0.1)
    opt.zero_grad()
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, layer.parameters()))


def test_adam_first_step_moves_by_lr_sign():
    p = torch.nn.Parameter(tensor([1.0, -2.0, 0.5]))
    opt = Adam([p], lr=1e-3)
    p.grad = tensor([0.3, -5.0, 2.0])
    opt.step()
    # bias-corrected first step: lr * g / (|g| + eps')
    assert torch.allclose(p.detach() - tensor([1.0, -2.0, 0.5]), tensor([-1e-3, 1e-3, -1e-3]), atol=1e-9)
    assert p.grad.tolist() == [0.3, -5.0, 2.0]
    m, v = opt.moments(p)
    assert m.shape == v.shape == p.shape
    assert opt.step_count == 1


def test_adam_two_steps_bounded():
    p = torch.nn.Parameter(torch.zeros(4, dtype=numeric.DTYPE))
    opt = Adam([p], lr=1e-2)
    for _ in range(2):
        p.grad = tensor([1.0, -3.0, 1e-4, 7.0])
        opt.step()
    assert bool((p.detach().abs() <= 2 * 1e-2 + 1e-12).all())
    assert opt.step_count == 2


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(3)
    mlp = numeric.Mlp([3, 4, 2])
    path = tmp_path / "p.json"
    numeric.save_params(mlp, path, {"note": "x"})
    header, params = numeric.load_params(path)
    assert header == {"note": "x"}
    for name, t in mlp.state_dict().items():
        assert torch.equal(params[name], t)


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "other", "version": 1}')
    with pytest.raises(ConfigError):
        numeric.load_params(path)
