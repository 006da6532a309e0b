import math

import numpy as np
import pytest
import torch

from facade_recon import backbone as bb
from facade_recon.errors import ConfigError

from _util import input_fd_error


def fd_check(fn, *inputs, eps=1e-6, tol=1e-4):
    err = input_fd_error(fn, *inputs, eps=eps)
    assert err < tol, err


def test_conv_lengths():
    assert bb.conv1d_out_len(200, 3, dilation=8, padding=8) == 200
    assert bb.conv_transpose1d_out_len(50, 4, 2, 1) == 100
    assert bb.conv_transpose1d_out_len(100, 4, 2, 1) == 200


def test_conv1d_hand_cases():
    x = torch.tensor([[1.0, 2.0, 3.0]])
    assert bb.conv1d(x, torch.tensor([[[1.0, 1.0]]])).tolist() == [[3.0, 5.0]]
    ident = torch.tensor([[[0.0, 1.0, 0.0]]])
    torch.testing.assert_close(bb.conv1d(x, ident, padding=1), x)


def test_conv_shape_mismatch_names_dims():
    with pytest.raises(ConfigError, match="2"):
        bb.conv1d(torch.zeros(2, 10), torch.zeros(4, 3, 3))


def test_conv_transpose_identity_and_stack():
    x = torch.randn(1, 7)
    torch.testing.assert_close(bb.conv_transpose1d(x, torch.ones(1, 1, 1)), x)
    z = torch.randn(3, 50)
    w = torch.randn(3, 3, 4)
    h = bb.conv_transpose1d(z, w, stride=2, padding=1)
    assert h.shape == (3, 100)
    assert bb.conv_transpose1d(h, w, stride=2, padding=1).shape == (3, 200)


def test_conv_adjointness(f64):
    g = torch.Generator().manual_seed(0)
    for stride, pad in ((1, 0), (2, 1), (2, 0)):
        w = torch.randn(4, 3, 4, generator=g)
        x = torch.randn(3, 40, generator=g)
        y = torch.randn(4, bb.conv1d_out_len(40, 4, stride, 1, pad), generator=g)
        lhs = (bb.conv1d(x, w, stride=stride, padding=pad) * y).sum()
        xt = bb.conv_transpose1d(y, w, stride=stride, padding=pad)
        assert xt.shape == x.shape
        rhs = (x * xt).sum()
        assert abs(float(lhs - rhs)) / abs(float(lhs)) < 1e-10


def test_norms():
    x = torch.full((2, 16, 10), 3.0)
    assert float(bb.group_norm(x, 8).abs().max()) == 0.0
    assert float(bb.layer_norm(torch.full((4, 6), 2.0)).abs().max()) == 0.0
    with pytest.raises(ConfigError):
        bb.group_norm(torch.zeros(1, 10, 4), 8)


def test_group_norm_statistics(f64):
    x = torch.randn(1, 16, 500, generator=torch.Generator().manual_seed(2)) * 3 + 1
    y = bb.group_norm(x, 8).view(8, -1)
    assert float(y.mean(1).abs().max()) < 1e-6
    assert float((y.var(1, unbiased=False) - 1).abs().max()) < 1e-4  # eps=1e-5 shrinks var slightly


def test_activations():
    assert float(bb.gelu(torch.tensor(0.0))) == 0.0
    assert float(bb.elu(torch.tensor(1.0))) == 1.0
    assert abs(float(bb.elu(torch.tensor(-50.0))) + 1) < 1e-12
    assert math.isclose(float(bb.gelu(torch.tensor(1.0))), 0.5 * (1 + math.erf(1 / math.sqrt(2))), rel_tol=1e-6)


def test_huber_values():
    e = torch.tensor([0.0, 0.5, 1.0, 3.0, -2.0])
    assert bb.huber(e, 1.0).tolist() == [0.0, 0.125, 0.5, 2.5, 1.5]


@pytest.mark.parametrize("name", ["conv1d", "conv_t", "group_norm", "layer_norm", "gelu", "elu", "huber"])
def test_primitive_gradients(f64, name):
    g = torch.Generator().manual_seed(3)
    x = torch.randn(2, 4, 9, generator=g)
    w = torch.randn(3, 4, 3, generator=g)
    wt = torch.randn(4, 2, 4, generator=g)
    r = torch.randn(2, 4, 9, generator=g)
    fns = {
        "conv1d": (lambda a, b: (bb.conv1d(a, b, stride=2, dilation=2, padding=2) ** 2).sum(), x, w),
        "conv_t": (lambda a, b: (bb.conv_transpose1d(a, b, stride=2, padding=1) ** 2).sum(), x, wt),
        "group_norm": (lambda a: (bb.group_norm(a, 2) * r).sum(), x),
        "layer_norm": (lambda a: (bb.layer_norm(a) * r).sum(), x),
        "gelu": (lambda a: (bb.gelu(a) * r).sum(), x),
        "elu": (lambda a: (bb.elu(a) * r).sum(), x),
        "huber": (lambda a: bb.huber(a * 2, 1.0).sum(), x),
    }
    fn, *args = fns[name]
    fd_check(fn, *args)


def test_attention_gradient(f64):
    torch.manual_seed(0)
    layer = bb.GraphAttention(5, 6, 2)
    ei = bb.with_self_loops(torch.tensor([[0, 1, 1, 2], [1, 0, 2, 1]]), 3)
    x = torch.randn(3, 5)
    r = torch.randn(3, 6)
    fd_check(lambda a: (layer(a, ei) * r).sum(), x)


def test_huber_conv_finite_difference(f64):
    x = torch.randn(2, 3)
    y = torch.randn(2, 2)
    w = torch.randn(2, 2, 2)
    fd_check(lambda a: bb.huber(bb.conv1d(x, a) - y).sum(), w)


def test_backward_contracts():
    w = torch.randn(4, requires_grad=True)
    x = torch.randn(4)
    bb.backward((w * x).sum())
    torch.testing.assert_close(w.grad, x)
    bb.backward((w * x).sum())
    torch.testing.assert_close(w.grad, 2 * x)
    with pytest.raises(ValueError):
        bb.backward(w * x)


def test_attention_probabilities():
    torch.manual_seed(1)
    layer = bb.GraphAttention(4, 8, 4)
    ei = bb.with_self_loops(torch.tensor([[0, 1, 1, 2, 0, 3], [1, 0, 2, 1, 3, 0]]), 4)
    alpha = layer.attention(torch.randn(4, 4), ei).detach()  # E×H
    sums = torch.zeros(4, 4).index_add(0, ei[1], alpha)
    assert float((sums - 1).abs().max()) < 1e-6
    assert float(alpha.min()) >= 0


def test_attention_uniform_on_equal_features():
    layer = bb.GraphAttention(3, 4, 2)
    ei = bb.with_self_loops(torch.tensor([[0, 1, 2, 0], [1, 0, 0, 2]]), 3)
    alpha = layer.attention(torch.ones(3, 3), ei)
    deg = torch.bincount(ei[1], minlength=3).to(alpha.dtype)
    torch.testing.assert_close(alpha, (1 / deg[ei[1]]).unsqueeze(-1).expand_as(alpha))


def test_attention_single_node_self_loop():
    layer = bb.GraphAttention(3, 4, 2)
    x = torch.randn(1, 3)
    out = bb.multi_head_attention(x, torch.zeros(2, 0, dtype=torch.long), 2, layer)
    torch.testing.assert_close(out, layer.proj(x) + layer.bias)


def test_attention_three_node_path_by_hand(f64):
    # scalar features, one head, W = 1, a_src = 1, a_dst = 2
    layer = bb.GraphAttention(1, 1, 1)
    with torch.no_grad():
        layer.proj.weight.fill_(1.0)
        layer.att_src.fill_(1.0)
        layer.att_dst.fill_(2.0)
    x = torch.tensor([[1.0], [-2.0], [0.5]])
    ei = bb.with_self_loops(torch.tensor([[0, 1, 1, 2], [1, 0, 2, 1]]), 3)
    alpha = layer.attention(x, ei).detach()[:, 0]
    lrelu = lambda v: v if v > 0 else 0.2 * v
    for node in range(3):
        srcs = [int(s) for s, d in zip(ei[0], ei[1]) if int(d) == node]
        scores = [lrelu(float(x[s]) + 2 * float(x[node])) for s in srcs]
        expect = np.exp(scores) / np.exp(scores).sum()
        got = [float(alpha[k]) for k in range(ei.shape[1]) if int(ei[1, k]) == node]
        np.testing.assert_allclose(got, expect, rtol=1e-12)


def test_attention_empty_neighborhood_rejected():
    with pytest.raises(ConfigError, match="empty"):
        bb.multi_head_attention(torch.randn(3, 4), torch.tensor([[0], [1]]), 2, self_loops=False)


def test_duplicate_edges_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        bb.check_edges(torch.tensor([[0, 0, 1], [1, 1, 0]]), 2)


def test_adamw_zero_grad_leaves_params():
    p = torch.nn.Parameter(torch.randn(5))
    before = p.detach().clone()
    p.grad = torch.zeros(5)
    opt = bb.AdamW([p], lr=1e-3)
    opt.step()
    torch.testing.assert_close(p.detach(), before)


def test_adamw_one_step(f64):
    p = torch.nn.Parameter(torch.tensor([0.7]))
    p.grad = torch.tensor([1.0])
    opt = bb.AdamW([p], lr=1e-4, clip_norm=None)
    bb.adamw_step(opt)
    # m̂ = 1, v̂ = 1 -> update = -lr / (1 + eps)
    assert abs(float(p.detach()) - (0.7 - 1e-4 / (1 + 1e-8))) < 1e-15


def test_clip_halves_gradients():
    a = torch.nn.Parameter(torch.zeros(2))
    a.grad = torch.tensor([2.0 * 0.6, 2.0 * 0.8])  # norm 2
    norm = bb.clip_grad_norm([a], 1.0)
    assert norm == pytest.approx(2.0)
    torch.testing.assert_close(a.grad, torch.tensor([0.6, 0.8]))


def test_checkpoint_round_trip(tmp_path):
    state = {"w": torch.randn(3, 4), "b": torch.randn(4), "s": torch.tensor(2.5)}
    path = bb.save_checkpoint(tmp_path / "m.frck", state, {"k": 1})
    assert path.read_bytes()[:4] == b"FRCK"
    loaded, cfg = bb.load_checkpoint(path)
    assert cfg == {"k": 1}
    for k in state:
        assert torch.equal(loaded[k], state[k].float())


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.frck").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ConfigError):
        bb.load_checkpoint(tmp_path / "x.frck")


def test_forward_determinism_f64(f64):
    def run():
        bb.seed_everything(5)
        layer = bb.GraphAttention(6, 8, 2)
        ei = bb.with_self_loops(torch.tensor([[0, 1], [1, 0]]), 3)
        return layer(torch.randn(3, 6), ei)

    assert torch.equal(run(), run())
