"""Residual tanh networks, input Jacobians and a hand-rolled Adam.

Reverse-mode derivatives come from torch autograd; the layer algebra,
initialisation, optimizer and snapshot format live here.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, NumericFault

DTYPE = torch.float64
SNAPSHOT_VERSION = 1


class ResNetApproximator(nn.Module):
    """(t, x) -> Linear -> B x [h + tanh(W2 tanh(W1 h + b1) + b2)] -> Linear.

    An optional scalar ``bound`` turns the network into a bounded actor via
    ``forward_bounded``.
    """

    def __init__(self, d: int, width: int, blocks: int, out_dim: int, bound: Optional[float] = None):
        super().__init__()
        if d < 1 or width < 1 or blocks < 0 or out_dim < 1:
            raise InvalidArgument(f"bad network shape d={d} w={width} B={blocks} m={out_dim}")
        self.d, self.width, self.blocks, self.out_dim = d, width, blocks, out_dim
        self.in_w = nn.Parameter(torch.zeros(width, 1 + d, dtype=DTYPE))
        self.in_b = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.blk_w1 = nn.ParameterList([nn.Parameter(torch.zeros(width, width, dtype=DTYPE)) for _ in range(blocks)])
        self.blk_b1 = nn.ParameterList([nn.Parameter(torch.zeros(width, dtype=DTYPE)) for _ in range(blocks)])
        self.blk_w2 = nn.ParameterList([nn.Parameter(torch.zeros(width, width, dtype=DTYPE)) for _ in range(blocks)])
        self.blk_b2 = nn.ParameterList([nn.Parameter(torch.zeros(width, dtype=DTYPE)) for _ in range(blocks)])
        self.out_w = nn.Parameter(torch.zeros(out_dim, width, dtype=DTYPE))
        self.out_b = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE))
        self.bound = None if bound is None else nn.Parameter(torch.tensor(float(bound), dtype=DTYPE))

    @property
    def has_bound(self) -> bool:
        return self.bound is not None

    def forward(self, t, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 1:
            x = x.reshape(-1, self.d)
        t = torch.as_tensor(t, dtype=DTYPE)
        t = t.reshape(-1, 1).expand(x.shape[0], 1)
        h = torch.addmm(self.in_b, torch.cat([t, x], dim=1), self.in_w.T)
        for w1, b1, w2, b2 in self._block_params():
            h = h + torch.tanh(torch.addmm(b2, torch.tanh(torch.addmm(b1, h, w1.T)), w2.T))
        return torch.addmm(self.out_b, h, self.out_w.T)

    def _block_params(self):
        # ParameterList indexing is slow in a hot loop; read the registered tensors directly
        p1, q1 = self.blk_w1._parameters, self.blk_b1._parameters
        p2, q2 = self.blk_w2._parameters, self.blk_b2._parameters
        return [(p1[k], q1[k], p2[k], q2[k]) for k in map(str, range(self.blocks))]

    def config(self) -> dict:
        return {"d": self.d, "width": self.width, "blocks": self.blocks, "out_dim": self.out_dim, "bound": self.has_bound}


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def init_network(
    d: int,
    width: int,
    blocks: int,
    out_dim: int,
    seed: int,
    bound: Optional[float] = None,
    zero: bool = False,
) -> ResNetApproximator:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    net = ResNetApproximator(d, width, blocks, out_dim, bound)
    if zero:
        return net
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if p.dim() == 2:
                a = 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.from_numpy(rng.uniform(-a, a, size=tuple(p.shape))))
    return net


def forward(net: ResNetApproximator, t, x: torch.Tensor) -> torch.Tensor:
    return net(t, x)


def forward_bounded(net: ResNetApproximator, t, x: torch.Tensor) -> torch.Tensor:
    if not net.has_bound:
        raise InvalidArgument("network carries no output bound")
    return net.bound * torch.tanh(net(t, x))


def grad_input(net: ResNetApproximator, t, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Jacobian d forward / d x, shape [M, m, d]. Rows are independent samples."""
    x_in = x if (create_graph and x.requires_grad) else x.detach().requires_grad_(True)
    with torch.enable_grad():
        y = net(t, x_in)
        rows = []
        for k in range(y.shape[1]):
            (g,) = torch.autograd.grad(
                y[:, k].sum(), x_in, create_graph=create_graph, retain_graph=create_graph or k + 1 < y.shape[1]
            )
            rows.append(g)
    return torch.stack(rows, dim=1)


def gradients(objective: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradient of a scalar objective; parameters it ignores get zeros."""
    params = list(params)
    value = objective()
    if not torch.isfinite(value).all():
        raise NumericFault("objective is not finite", value=float(value))
    grads = torch.autograd.grad(value, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


def adam_update(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr: float) -> None:
    """In-place Adam step with bias correction."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidArgument("parameter, gradient and state counts differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidArgument(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class Adam:
    """Binds a parameter list to an AdamState."""

    def __init__(self, params: Sequence[torch.Tensor], **kw):
        self.params = list(params)
        self.state = AdamState.for_params(self.params, **kw)

    def step(self, loss: torch.Tensor, lr: float) -> None:
        if not torch.isfinite(loss):
            raise NumericFault("loss is not finite", value=loss.item())
        grads = torch.autograd.grad(loss, self.params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(self.params, grads)]
        adam_update(self.params, grads, self.state, lr)


@dataclass
class ParameterSnapshot:
    """Flat float64 copy of a network's parameters plus its shape manifest."""

    names: list[str]
    shapes: list[tuple[int, ...]]
    values: np.ndarray
    config: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, net: ResNetApproximator) -> "ParameterSnapshot":
        names, shapes, flats = [], [], []
        for name, p in net.named_parameters():
            names.append(name)
            shapes.append(tuple(p.shape))
            flats.append(p.detach().cpu().numpy().astype(np.float64).ravel())
        values = np.concatenate(flats) if flats else np.zeros(0)
        return cls(names, shapes, values.copy(), net.config())

    def build(self) -> ResNetApproximator:
        c = self.config
        net = ResNetApproximator(c["d"], c["width"], c["blocks"], c["out_dim"], 0.0 if c["bound"] else None)
        self.load_into(net)
        return net

    def load_into(self, net: ResNetApproximator) -> None:
        params = dict(net.named_parameters())
        if sorted(params) != sorted(self.names):
            raise InvalidArgument("snapshot does not match network layout")
        offset = 0
        with torch.no_grad():
            for name, shape in zip(self.names, self.shapes):
                size = int(np.prod(shape)) if shape else 1
                chunk = self.values[offset : offset + size].reshape(shape)
                params[name].copy_(torch.from_numpy(chunk.copy()))
                offset += size

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def save(self, path) -> None:
        c = self.config
        np.savez(
            path,
            version=np.int64(SNAPSHOT_VERSION),
            names=np.array(self.names),
            shapes=np.array([",".join(map(str, s)) for s in self.shapes]),
            values=self.values,
            arch=np.array([c["d"], c["width"], c["blocks"], c["out_dim"], int(c["bound"])], dtype=np.int64),
        )

    @classmethod
    def load(cls, path) -> "ParameterSnapshot":
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != SNAPSHOT_VERSION:
                raise InvalidArgument(f"unsupported snapshot version {int(z['version'])}")
            shapes = [tuple(int(v) for v in s.split(",") if v) for s in z["shapes"].tolist()]
            d, w, b, m, bd = (int(v) for v in z["arch"])
            return cls(
                z["names"].tolist(),
                shapes,
                z["values"].copy(),
                {"d": d, "width": w, "blocks": b, "out_dim": m, "bound": bool(bd)},
            )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterSnapshot":
        return cls.load(io.BytesIO(data))
