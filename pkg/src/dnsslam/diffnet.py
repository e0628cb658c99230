"""Differentiation substrate: small MLPs, Adam, the frozen image encoder and checkpoints.

Reverse-mode differentiation itself is torch autograd; this module pins the
conventions the rest of the package relies on (double precision, seeded
initialisation, accumulate-on-backward, skip-on-NaN optimizer steps).
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "DEBUG",
    "check_finite",
    "Mlp",
    "backward",
    "Adam",
    "ConvEncoder",
    "sample_feature",
    "save_checkpoint",
    "load_checkpoint",
    "tensor_digest",
]

log = logging.getLogger(__name__)

DEBUG = False


def check_finite(t: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    if DEBUG and not bool(torch.isfinite(t).all()):
        raise FloatingPointError(f"non-finite values in {name}")
    return t


class Mlp(nn.Module):
    """Fully connected ReLU network; the output layer is linear.

    ``out_scale`` shrinks the output layer's initial weights, which keeps
    fresh heads close to a zero output.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: int = 32,
        n_hidden: int = 2,
        seed: int = 0,
        out_scale: float = 1.0,
        dtype=torch.float64,
    ):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        dims = [in_dim] + [hidden] * n_hidden + [out_dim]
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, hidden
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            bound = math.sqrt(6.0 / a)  # Kaiming-uniform for ReLU
            if i == len(dims) - 2:
                bound *= out_scale / math.sqrt(2.0)
            w = (torch.rand(b, a, generator=gen, dtype=dtype) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(torch.zeros(b, dtype=dtype)))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Activations of the last hidden layer."""
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        for w, b in zip(list(self.weights)[:-1], list(self.biases)[:-1]):
            x = torch.relu(F.linear(x, w, b))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.linear(self.features(x), self.weights[-1], self.biases[-1])
        return check_finite(out, "mlp output")


def backward(loss: torch.Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(param) into ``.grad``; repeated calls add up."""
    if loss.dim() != 0:
        raise ValueError("backward needs a scalar loss")
    loss.backward(retain_graph=retain_graph)


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction, betas (0.9, 0.99), eps 1e-8.

    ``groups`` is a list of ``{"params": [...], "lr": float}``. A step whose
    gradients contain NaN/Inf is skipped and reported through the return value.
    """

    def __init__(self, groups, betas=(0.9, 0.99), eps=1e-8):
        if isinstance(groups, dict):
            groups = [groups]
        self.groups = [dict(g, params=list(g["params"])) for g in groups]
        self.betas = betas
        self.eps = eps
        self.state = OptimState()
        self.skipped = 0

    def params(self):
        for g in self.groups:
            yield from g["params"]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None

    @torch.no_grad()
    def step(self) -> bool:
        grads = [p.grad for p in self.params() if p.grad is not None]
        if any(not bool(torch.isfinite(g).all()) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient, optimizer step skipped")
            return False
        st = self.state
        st.step += 1
        b1, b2 = self.betas
        c1 = 1 - b1**st.step
        c2 = 1 - b2**st.step
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                m = st.m.get(key)
                if m is None:
                    m = st.m[key] = torch.zeros_like(p)
                    st.v[key] = torch.zeros_like(p)
                v = st.v[key]
                m.mul_(b1).add_(p.grad, alpha=1 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                p.sub_(g["lr"] * (m / c1) / (torch.sqrt(v / c2) + self.eps))
        return True

    def set_lr_scale(self, scale: float) -> None:
        for g in self.groups:
            g["lr"] *= scale


class ConvEncoder(nn.Module):
    """Fixed two-layer convolutional feature extractor (stride 2, then stride 1)."""

    stride = 2

    def __init__(self, channels: int = 16, seed: int = 0, dtype=torch.float64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        w1 = torch.randn(channels, 3, 3, 3, generator=gen, dtype=dtype) * math.sqrt(2.0 / 27)
        w2 = torch.randn(channels, channels, 3, 3, generator=gen, dtype=dtype) * math.sqrt(2.0 / (9 * channels))
        self.register_buffer("w1", w1)
        self.register_buffer("w2", w2)
        self.channels = channels
        self.frozen = True

    @torch.no_grad()
    def forward(self, image) -> torch.Tensor:
        """``image`` (H, W, 3) in [0, 1] -> feature map (H/2, W/2, F)."""
        img = torch.as_tensor(image, dtype=self.w1.dtype)
        x = img.permute(2, 0, 1)[None]
        x = torch.relu(F.conv2d(x, self.w1, stride=2, padding=1))
        x = F.conv2d(x, self.w2, stride=1, padding=1)
        return x[0].permute(1, 2, 0).contiguous()

    def digest(self) -> str:
        return tensor_digest({"w1": self.w1, "w2": self.w2})


def sample_feature(fmap: torch.Tensor, uv: torch.Tensor, stride: int = 2, image_size=None):
    """Bilinearly sample a feature map (h, w, F) at source-image pixel coords (N, 2).

    Feature texel ``j`` sits at source pixel ``stride * j``. Returns the
    features and a boolean mask of in-view queries (outside the source image
    are flagged out-of-view; their features are edge-clamped samples).
    """
    h, w, _ = fmap.shape
    W, H = image_size if image_size is not None else (w * stride, h * stride)
    valid = (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
    fu = (uv[:, 0] / stride).clamp(0, w - 1)
    fv = (uv[:, 1] / stride).clamp(0, h - 1)
    u0 = fu.detach().floor().long().clamp(max=w - 2) if w > 1 else fu.detach().floor().long()
    v0 = fv.detach().floor().long().clamp(max=h - 2) if h > 1 else fv.detach().floor().long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)
    a = (fu - u0.to(fu.dtype))[:, None]
    b = (fv - v0.to(fv.dtype))[:, None]
    out = (
        fmap[v0, u0] * (1 - a) * (1 - b)
        + fmap[v0, u1] * a * (1 - b)
        + fmap[v1, u0] * (1 - a) * b
        + fmap[v1, u1] * a * b
    )
    return out, valid


# Checkpoint container layout (all integers little-endian):
#   8 bytes  magic b"DNSCKPT1"
#   u32      length of JSON metadata, then that many UTF-8 bytes
#   u32      tensor count
#   per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
#               prod(dims) x f64 values in C order
_MAGIC = b"DNSCKPT1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [_MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        t = tensors[name].detach().to(torch.float64).contiguous().cpu()
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(t.numpy().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict, dict]:
    import numpy as np

    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic at byte 0)")
    off = 8
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off : off + n].decode())
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
        tensors[name] = torch.from_numpy(arr)
    return tensors, meta


def tensor_digest(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().to(torch.float64).contiguous().cpu().numpy().tobytes())
    return h.hexdigest()
