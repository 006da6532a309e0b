"""Tensor primitives, graph attention, AdamW and the FRCK checkpoint container.

Dense arithmetic and reverse-mode gradients come from torch; this module pins
the geometry checks, the precision policy and the pieces the reconstruction
network needs that torch does not provide in the required form (neighborhood
restricted attention, clipped AdamW, the binary checkpoint layout).
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

NORM_EPS = 1e-5

_PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


def set_precision(mode: str) -> torch.dtype:
    """Switch the default floating dtype ("float32" for training, "float64" for oracles)."""
    if mode not in _PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {mode!r}")
    dtype = _PRECISIONS[mode]
    torch.set_default_dtype(dtype)
    return dtype


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).nonzero()[0].tolist()
        raise FloatingPointError(f"non-finite value in {what} at index {bad}")
    return t


# ---------------------------------------------------------------------------
# convolution geometry


def conv1d_out_len(length: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv_transpose1d_out_len(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length - 1) * stride - 2 * padding + kernel


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() == 3:
        return x, False
    raise ConfigError(f"expected C×T or B×C×T input, got shape {tuple(x.shape)}")


def conv1d(x, weight, bias=None, stride: int = 1, dilation: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (C_in×T or B×C_in×T) with ``weight`` (C_out×C_in×k)."""
    if stride < 1 or dilation < 1 or weight.shape[-1] < 1:
        raise ConfigError(f"invalid geometry: stride={stride} dilation={dilation} k={weight.shape[-1]}")
    xb, squeeze = _as_batched(x)
    if xb.shape[1] != weight.shape[1]:
        raise ConfigError(f"conv1d: input has {xb.shape[1]} channels, weight expects {weight.shape[1]}")
    k = weight.shape[-1]
    span = dilation * (k - 1) + 1
    if xb.shape[-1] + 2 * padding < span:
        raise ConfigError(
            f"conv1d: padded length {xb.shape[-1] + 2 * padding} shorter than kernel span {span}"
        )
    y = F.conv1d(xb, weight, bias, stride=stride, dilation=dilation, padding=padding)
    return y[0] if squeeze else y


def conv_transpose1d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Adjoint of :func:`conv1d`; ``weight`` is C_in×C_out×k (torch layout)."""
    if stride < 1:
        raise ConfigError(f"invalid stride {stride}")
    xb, squeeze = _as_batched(x)
    if xb.shape[1] != weight.shape[0]:
        raise ConfigError(f"conv_transpose1d: input has {xb.shape[1]} channels, weight expects {weight.shape[0]}")
    if conv_transpose1d_out_len(xb.shape[-1], weight.shape[-1], stride, padding) < 1:
        raise ConfigError("conv_transpose1d: non-positive output length")
    y = F.conv_transpose1d(xb, weight, bias, stride=stride, padding=padding)
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# normalization and activations


def group_norm(x, groups: int, weight=None, bias=None, eps: float = NORM_EPS):
    """Normalize B×C×T (or C×T) per group of channels over (channels, time)."""
    xb, squeeze = _as_batched(x)
    c = xb.shape[1]
    if groups < 1 or c % groups:
        raise ConfigError(f"group_norm: {c} channels not divisible into {groups} groups")
    y = F.group_norm(xb, groups, weight, bias, eps)
    return y[0] if squeeze else y


def layer_norm(x, weight=None, bias=None, eps: float = NORM_EPS):
    """Normalize over the last axis (one token per row)."""
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gelu(x):
    return F.gelu(x)  # exact erf form


def elu(x):
    return F.elu(x, alpha=1.0)


def huber(e, beta: float = 1.0):
    """Elementwise Huber penalty: 0.5·e² inside ``beta``, beta·(|e| − beta/2) outside."""
    a = e.abs()
    return torch.where(a <= beta, 0.5 * e * e, beta * (a - 0.5 * beta))


def backward(loss: torch.Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``.grad``."""
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


# ---------------------------------------------------------------------------
# graph attention


def check_edges(edge_index: torch.Tensor, num_nodes: int) -> None:
    """Reject out-of-range endpoints and nodes with nothing to attend over."""
    if edge_index.numel() and (int(edge_index.max()) >= num_nodes or int(edge_index.min()) < 0):
        raise ConfigError(f"edge endpoint outside 0..{num_nodes - 1}")
    covered = torch.zeros(num_nodes, dtype=torch.bool)
    covered[edge_index[1]] = True
    if not bool(covered.all()):
        lonely = (~covered).nonzero().flatten().tolist()
        raise ConfigError(f"nodes {lonely} have empty attention neighborhoods")
    pairs = edge_index[0] * num_nodes + edge_index[1]
    if pairs.numel() and torch.unique(pairs).numel() != pairs.numel():
        raise ConfigError("duplicate (source, target) pairs in edge list")


def with_self_loops(edge_index: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Append (i, i) pairs; ``edge_index`` is 2×E with rows (source, target)."""
    loops = torch.arange(num_nodes, dtype=torch.long)
    return torch.cat([edge_index, torch.stack([loops, loops])], dim=1)


def neighborhood_softmax(scores: torch.Tensor, target: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Softmax of per-edge ``scores`` (..., E) over edges sharing a target node."""
    idx = target.expand_as(scores)
    # the max is only a shift; keep it out of the gradient graph
    top = scores.new_full((*scores.shape[:-1], num_nodes), -math.inf)
    top = top.scatter_reduce(-1, idx, scores.detach(), reduce="amax", include_self=True)
    ex = torch.exp(scores - top[..., target])
    denom = torch.zeros_like(top).index_add(-1, target, ex)
    return ex / denom[..., target]


class GraphAttention(nn.Module):
    """Multi-head attention restricted to graph neighborhoods (GAT scoring).

    Node ``i`` attends over ``{j : (j, i) in edges}``; pass edges that already
    contain self-loops when each node must keep its own state. Tokens are
    (..., N, in_dim); the output is (..., N, heads * head_dim) with heads
    concatenated. Scores are ``leaky_relu(a_src·W x_j + a_dst·W x_i)``.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, negative_slope: float = 0.2):
        super().__init__()
        if out_dim % heads:
            raise ConfigError(f"attention width {out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.negative_slope = negative_slope
        self.proj = nn.Linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        bound = 1.0 / math.sqrt(self.head_dim)
        nn.init.uniform_(self.att_src, -bound, bound)
        nn.init.uniform_(self.att_dst, -bound, bound)
        nn.init.kaiming_uniform_(self.proj.weight, a=math.sqrt(5))

    def _project(self, x):
        # attention vectors folded into the projection: one matmul gives features and scores
        hd = self.heads * self.head_dim
        w = self.proj.weight
        wh = w.view(self.heads, self.head_dim, -1)
        w_src = torch.einsum("hd,hdi->hi", self.att_src, wh)
        w_dst = torch.einsum("hd,hdi->hi", self.att_dst, wh)
        out = x @ torch.cat([w, w_src, w_dst]).T
        h, s_src, s_dst = out.split([hd, self.heads, self.heads], -1)
        return h, s_src.transpose(-1, -2), s_dst.transpose(-1, -2)

    def _alpha(self, s_src, s_dst, edge_index, n):
        src, dst = edge_index[0], edge_index[1]
        scores = F.leaky_relu(s_src[..., src] + s_dst[..., dst], self.negative_slope)
        return neighborhood_softmax(scores, dst, n)  # ..., H, E

    def attention(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        """Per-edge attention weights shaped (..., E, H)."""
        _, s_src, s_dst = self._project(x)
        return self._alpha(s_src, s_dst, edge_index, x.shape[-2]).transpose(-1, -2)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        n = x.shape[-2]
        h, s_src, s_dst = self._project(x)
        alpha = self._alpha(s_src, s_dst, edge_index, n)
        # weights scattered into a dense N×N map per head; aggregation is one batched matmul
        flat = edge_index[1] * n + edge_index[0]
        dense = alpha.new_zeros((*alpha.shape[:-1], n * n)).index_copy(-1, flat, alpha).unflatten(-1, (n, n))
        hh = h.unflatten(-1, (self.heads, self.head_dim)).transpose(-2, -3)  # ..., H, N, Dh
        return (dense @ hh).transpose(-2, -3).flatten(-2) + self.bias


def multi_head_attention(tokens, edge_index, heads: int, layer: GraphAttention | None = None,
                         self_loops: bool = True):
    """Attend over graph neighborhoods of ``tokens`` (N×D); a fresh layer is built if none given."""
    n, d = tokens.shape[-2:]
    if layer is None:
        layer = GraphAttention(d, d, heads)
    ei = with_self_loops(edge_index, n) if self_loops else edge_index
    check_edges(ei, n)
    return layer(tokens, ei)


# ---------------------------------------------------------------------------
# optimization


@torch.no_grad()
def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


class AdamW(torch.optim.Optimizer):
    """AdamW with decoupled weight decay and optional global-norm clipping.

    Clipping runs inside :meth:`step` over all parameters of all groups, before
    the moment update.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0,
                 clip_norm: float | None = 1.0):
        if lr < 0 or eps < 0 or weight_decay < 0:
            raise ConfigError("lr, eps and weight_decay must be non-negative")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)
        self.clip_norm = clip_norm
        self.last_grad_norm = 0.0

    @torch.no_grad()
    def step(self, closure=None):
        loss = closure() if closure is not None else None
        all_params = [p for g in self.param_groups for p in g["params"]]
        if self.clip_norm is not None:
            self.last_grad_norm = clip_grad_norm(all_params, self.clip_norm)
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, eps, wd = group["lr"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
                if wd:
                    p.mul_(1 - lr * wd)
                denom = (v / (1 - beta2**t)).sqrt_().add_(eps)
                p.addcdiv_(m, denom, value=-lr / (1 - beta1**t))
        return loss


def adamw_step(optimizer: AdamW) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"FRCK"
CKPT_VERSION = 1


def save_checkpoint(path, state: dict[str, torch.Tensor], config: dict | None = None) -> Path:
    """Write ``state`` as FRCK binary plus ``<path>.json`` holding ``config``.

    Layout: magic, u16 version, u32 entry count, then per entry
    (u16 name length, utf-8 name, u8 rank, u32 extents..., u64 payload offset),
    then little-endian float32 payloads. Offsets count from the payload start.
    """
    path = Path(path)
    names = list(state)
    arrays = [state[k].detach().cpu().numpy().astype("<f4", copy=False) for k in names]
    head = bytearray(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(names)))
    offset = 0
    for name, arr in zip(names, arrays):
        raw = name.encode()
        head += struct.pack("<H", len(raw)) + raw
        head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        head += struct.pack("<Q", offset)
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(head)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())
    if config is not None:
        sidecar(path).write_text(json.dumps(config, indent=2, sort_keys=True))
    return path


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict | None]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ConfigError(f"{path}: not an FRCK checkpoint")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    entries = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (off,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        entries.append((name, shape, off))
    state = {}
    for name, shape, off in entries:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos + off).reshape(shape)
        state[name] = torch.from_numpy(arr.copy()).to(torch.get_default_dtype())
    side = sidecar(path)
    config = json.loads(side.read_text()) if side.exists() else None
    return state, config
