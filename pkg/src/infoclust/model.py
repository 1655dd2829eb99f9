"""Convolutional clustering network with several softmax heads.

Also holds the gradient/update helpers used by the training loop and the
binary checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class Architecture:
    in_shape: tuple[int, int, int]
    conv_channels: tuple[int, ...] = (32, 64)
    hidden: int = 128
    heads: tuple[int, ...] = (10,)
    n_classes: int = 10
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        for name in ("in_shape", "conv_channels", "heads"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.in_shape) != 3 or min(self.in_shape) < 1:
            raise ValueError(f"in_shape must be (C, H, W), got {self.in_shape}")
        if not self.conv_channels:
            raise ValueError("architecture needs at least one convolutional layer")
        if min(self.conv_channels) < 1 or self.hidden < 0 or self.kernel < 1 or self.stride < 1:
            raise ValueError("inconsistent layer sizes")
        if not self.heads or min(self.heads) < 2:
            raise ValueError("every head needs >= 2 clusters")
        if self.n_classes not in self.heads:
            raise ValueError("no primary head with n_classes clusters")

    @property
    def primary_heads(self) -> list[int]:
        return [i for i, k in enumerate(self.heads) if k == self.n_classes]

    def conv_output_shape(self) -> tuple[int, int, int]:
        _, h, w = self.in_shape
        pad = self.kernel // 2
        for _ in self.conv_channels:
            h = (h + 2 * pad - self.kernel) // self.stride + 1
            w = (w + 2 * pad - self.kernel) // self.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"input {self.in_shape} too small for {len(self.conv_channels)} conv layers")
        return self.conv_channels[-1], h, w

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


INPUT_OFFSET = 0.5


class ClusterNet(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        c_in = arch.in_shape[0]
        self.convs = nn.ModuleList()
        for c_out in arch.conv_channels:
            self.convs.append(nn.Conv2d(c_in, c_out, arch.kernel, arch.stride, padding=arch.kernel // 2))
            c_in = c_out
        flat = math.prod(arch.conv_output_shape())
        self.fc = nn.Linear(flat, arch.hidden) if arch.hidden else None
        width = arch.hidden or flat
        self.heads = nn.ModuleList(nn.Linear(width, k) for k in arch.heads)

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        # inputs live in [0, 1]; centring them keeps the first ReLUs from all firing together
        x = x - INPUT_OFFSET
        for conv in self.convs:
            x = F.relu(conv(x))
        conv_out = x.flatten(1)
        fc_out = F.relu(self.fc(conv_out)) if self.fc is not None else conv_out
        return {"conv": conv_out, "fc": fc_out}

    def head_logits(self, x: torch.Tensor, heads=None) -> list[torch.Tensor]:
        """Pre-softmax outputs of the requested heads (all heads by default)."""
        z = self.features(x)["fc"]
        idx = range(len(self.heads)) if heads is None else heads
        return [self.heads[h](z) for h in idx]

    def forward(self, x: torch.Tensor, head: int = 0) -> torch.Tensor:
        self._check_head(head)
        return F.softmax(self.head_logits(x, [head])[0], dim=1)

    def _check_head(self, head: int) -> None:
        if not 0 <= head < len(self.heads):
            raise IndexError(f"unknown head {head}; model has {len(self.heads)}")


def init(arch: Architecture, seed: int = 0, dtype=torch.float32) -> ClusterNet:
    """Build a model with fan-in scaled uniform weights, deterministic in ``seed``."""
    model = ClusterNet(arch).to(dtype)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = math.prod(p.shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            p.copy_(torch.rand(p.shape, generator=g, dtype=dtype) * 2 * bound - bound)
    return model


def forward(model: ClusterNet, batch, head: int = 0, taps: bool = False):
    """Cluster posteriors of one head, optionally with the feature taps."""
    x = torch.as_tensor(batch, dtype=next(model.parameters()).dtype)
    expected = model.arch.in_shape
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"expected input of shape (B, {expected}), got {tuple(x.shape)}")
    model._check_head(head)
    feats = model.features(x)
    probs = F.softmax(model.heads[head](feats["fc"]), dim=1)
    if taps:
        return probs, {**feats, "y": probs}
    return probs


def grad(model: nn.Module, loss_closure) -> dict[str, torch.Tensor]:
    """Gradients of ``loss_closure(model)`` with respect to every parameter."""
    params = dict(model.named_parameters())
    loss = loss_closure(model)
    loss = torch.as_tensor(loss)
    if not torch.isfinite(loss).all():
        raise FloatingPointError(f"non-finite loss: {float(loss.detach())}")
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in params.items()}
    gs = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (n, p), g in zip(params.items(), gs):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {n}")
        out[n] = g
    return out


def make_optimizer(model: nn.Module, lr: float = 1e-4) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def step(model: nn.Module, grads: dict[str, torch.Tensor], optimizer: torch.optim.Optimizer):
    """Apply one Adam update from an explicit gradient structure."""
    params = dict(model.named_parameters())
    if set(grads) != set(params):
        raise ValueError("gradient structure does not match model parameters")
    for n, p in params.items():
        if grads[n].shape != p.shape:
            raise ValueError(f"shape mismatch for {n}: {tuple(grads[n].shape)} vs {tuple(p.shape)}")
        p.grad = grads[n].detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return model, optimizer


# --- checkpoint container ------------------------------------------------------
#
# magic "ICKP" | u32 version | u32 meta length | meta JSON (utf-8)
# u32 tensor count | per tensor: u16 name length, name, u8 ndim, u32 dims, f32 payload
# Integers are little-endian, payload is little-endian float32.

MAGIC = b"ICKP"
VERSION = 1


def save_checkpoint(path, model: ClusterNet, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write architecture, metadata and named float32 tensors to ``path``."""
    header = {"architecture": model.arch.to_dict(), "meta": meta or {}}
    tensors = {n: p.detach() for n, p in model.state_dict().items()}
    for n, t in (extra or {}).items():
        tensors[f"extra/{n}"] = torch.as_tensor(t)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.cpu().numpy().astype("<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = math.prod(shape) * 4
        if off + size > len(data):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=off).reshape(shape).copy()
        off += size
    return header, tensors


def load_checkpoint(path) -> tuple[ClusterNet, dict, dict[str, torch.Tensor]]:
    """Rebuild the model stored at ``path``; returns (model, meta, extra tensors)."""
    header, tensors = read_checkpoint(path)
    model = ClusterNet(Architecture(**header["architecture"]))
    state = {n: torch.from_numpy(t) for n, t in tensors.items() if not n.startswith("extra/")}
    model.load_state_dict(state)
    extra = {n[len("extra/"):]: torch.from_numpy(t) for n, t in tensors.items() if n.startswith("extra/")}
    return model, header["meta"], extra
