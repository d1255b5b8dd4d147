"""Minimal numpy-backed reverse-mode autodiff plus the layer set, losses,
reparameterized sampling, and Adam needed by the fusion architectures.

Tensors default to float32; passing float64 arrays switches the whole graph
to 64-bit, which the gradient checks rely on.  All randomness is injected
through numpy Generators so training trajectories are reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from softsense._binio import (Reader, append_crc, check_magic_version,
                              verify_trailing_crc)

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting expanded it."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array with a recorded computation tape for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # -- tape ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this (scalar) tensor into every parameter."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    # -- elementwise ops ---------------------------------------------------

    def __add__(self, other):
        return _binop(self, other, np.add,
                      lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binop(self, other, np.subtract,
                      lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        return _binop(self, other, np.multiply,
                      lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def exp(self):
        out_data = np.exp(self.data)
        return _make(out_data, (self,),
                     lambda g: self._accumulate(g * out_data))

    def relu(self):
        mask = self.data > 0
        return _make(np.where(mask, self.data, 0), (self,),
                     lambda g: self._accumulate(g * mask))

    def sum(self):
        return _make(self.data.sum(keepdims=False), (self,),
                     lambda g: self._accumulate(np.broadcast_to(g, self.data.shape)))

    def mean(self):
        n = self.data.size
        return _make(self.data.mean(), (self,),
                     lambda g: self._accumulate(np.broadcast_to(g / n, self.data.shape)))

    def reshape(self, *shape):
        old = self.data.shape
        return _make(self.data.reshape(*shape), (self,),
                     lambda g: self._accumulate(g.reshape(old)))

    def matmul(self, other: "Tensor"):
        a, b = self, _wrap(other)

        def back(g):
            if a.requires_grad or a._parents:
                a._accumulate(g @ b.data.T)
            if b.requires_grad or b._parents:
                b._accumulate(a.data.T @ g)

        return _make(a.data @ b.data, (a, b), back)

    def narrow(self, axis: int, start: int, length: int):
        """Slice `length` entries along `axis` starting at `start`."""
        idx = [slice(None)] * self.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        shape = self.data.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[idx] = g
            self._accumulate(full)

        return _make(self.data[idx], (self,), back)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value))


def _make(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _binop(a, other, fwd, grads) -> Tensor:
    a = _wrap(a)
    b = _wrap(other)
    data = fwd(a.data, b.data)

    def back(g):
        ga, gb = grads(g, a.data, b.data)
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), back)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    widths = [t.data.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def back(g):
        start = 0
        for t, w in zip(tensors, widths):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + w)
            if t.requires_grad or t._parents:
                t._accumulate(g[tuple(idx)])
            start += w

    return _make(data, tuple(tensors), back)


# -- convolutions ----------------------------------------------------------


def conv_output_size(n: int, kernel: int, stride: int) -> int:
    """Valid (unpadded) convolution output extent."""
    return (n - kernel) // stride + 1


def conv_transpose_output_size(n: int, kernel: int, stride: int) -> int:
    return (n - 1) * stride + kernel


def _patches(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """Strided view of (B, C, H, W) as (B, C, H', W', k, k) windows."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Valid 2-D convolution; x (B,C,H,W), weight (O,C,k,k), bias (O,)."""
    xb, wd = x.data, weight.data
    batch, cin, h, w = xb.shape
    cout, _, k, _ = wd.shape
    ho = conv_output_size(h, k, stride)
    wo = conv_output_size(w, k, stride)
    pat = _patches(xb, k, stride)                       # (B,C,H',W',k,k)
    pmat = np.ascontiguousarray(pat.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * ho * wo, cin * k * k)
    wmat = wd.reshape(cout, cin * k * k).T              # (Ckk, O)
    out = (pmat @ wmat).reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(
            batch * ho * wo, cout)
        if weight.requires_grad or weight._parents:
            gw = (pmat.T @ gmat).T.reshape(cout, cin, k, k)
            weight._accumulate(gw)
        if bias.requires_grad or bias._parents:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            gp = (gmat @ wmat.T).reshape(batch, ho, wo, cin, k, k)
            gp = gp.transpose(0, 3, 1, 2, 4, 5)         # (B,C,H',W',k,k)
            gx = np.zeros_like(xb)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + stride * ho:stride,
                       j:j + stride * wo:stride] += gp[:, :, :, :, i, j]
            x._accumulate(gx)

    return _make(out, (x, weight, bias), back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Transposed 2-D convolution; x (B,C,H,W), weight (C,O,k,k), bias (O,)."""
    xb, wd = x.data, weight.data
    batch, cin, h, w = xb.shape
    _, cout, k, _ = wd.shape
    ho = conv_transpose_output_size(h, k, stride)
    wo = conv_transpose_output_size(w, k, stride)
    xmat = np.ascontiguousarray(xb.transpose(0, 2, 3, 1)).reshape(batch * h * w, cin)
    wmat = wd.reshape(cin, cout * k * k)
    contrib = (xmat @ wmat).reshape(batch, h, w, cout, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((batch, cout, ho, wo), dtype=xb.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * h:stride,
                j:j + stride * w:stride] += contrib[:, :, :, :, i, j]
    out += bias.data[None, :, None, None]

    def back(g):
        gpat = _patches(g, k, stride)                   # (B,O,H,W,k,k)
        gmat = np.ascontiguousarray(gpat.transpose(0, 2, 3, 1, 4, 5)).reshape(
            batch * h * w, cout * k * k)
        if weight.requires_grad or weight._parents:
            weight._accumulate((xmat.T @ gmat).reshape(cin, cout, k, k))
        if bias.requires_grad or bias._parents:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad or x._parents:
            gx = (gmat @ wmat.T).reshape(batch, h, w, cin).transpose(0, 3, 1, 2)
            x._accumulate(np.ascontiguousarray(gx))

    return _make(out, (x, weight, bias), back)


# -- layers ----------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    def parameters(self) -> list[Tensor]:
        raise NotImplementedError

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        raise NotImplementedError


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]

    def named_parameters(self, prefix):
        return [(prefix + ".w", self.weight), (prefix + ".b", self.bias)]

    def spec(self):
        return {"kind": "fully_connected", "in": self.n_in, "out": self.n_out}


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 4, stride: int = 2, dtype=np.float32):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        fan = kernel * kernel
        self.weight = Tensor(
            glorot_uniform(rng, (c_out, c_in, kernel, kernel),
                           c_in * fan, c_out * fan, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)

    def parameters(self):
        return [self.weight, self.bias]

    def named_parameters(self, prefix):
        return [(prefix + ".w", self.weight), (prefix + ".b", self.bias)]

    def spec(self):
        return {"kind": "conv2d", "in": self.c_in, "out": self.c_out,
                "kernel": self.kernel, "stride": self.stride}


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 4, stride: int = 2, dtype=np.float32):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        fan = kernel * kernel
        self.weight = Tensor(
            glorot_uniform(rng, (c_in, c_out, kernel, kernel),
                           c_in * fan, c_out * fan, dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride)

    def parameters(self):
        return [self.weight, self.bias]

    def named_parameters(self, prefix):
        return [(prefix + ".w", self.weight), (prefix + ".b", self.bias)]

    def spec(self):
        return {"kind": "transposed_conv2d", "in": self.c_in, "out": self.c_out,
                "kernel": self.kernel, "stride": self.stride}


# -- losses and sampling -----------------------------------------------------


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared elementwise differences."""
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return (d * d).mean()


def sum_squared_error(pred: Tensor, target) -> Tensor:
    """Squared error summed over features, averaged over the batch axis.

    This is the Gaussian log-likelihood form of the reconstruction term;
    with the unweighted KL regularizer it keeps the latent informative
    regardless of how many output channels a head has.
    """
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    rows = pred.shape[0] if len(pred.shape) > 1 else 1
    return (d * d).sum() * (1.0 / rows)


def kl_to_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims.

    For a batched (B, L) input the per-sample KLs are averaged over B.
    """
    mu = _wrap(mu)
    logvar = _wrap(logvar)
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have the same shape")
    rows = mu.shape[0] if len(mu.shape) > 1 else 1
    total = (mu * mu + logvar.exp() - logvar - 1.0).sum()
    return total * (0.5 / rows)


def reparameterize(mu: Tensor, logvar: Tensor, eps) -> Tensor:
    """Differentiable Gaussian sample mu + exp(logvar/2) * eps."""
    mu = _wrap(mu)
    logvar = _wrap(logvar)
    eps = np.asarray(eps, dtype=mu.dtype)
    if eps.shape != mu.shape:
        raise ValueError(f"eps shape {eps.shape} != mu shape {mu.shape}")
    return mu + (logvar * 0.5).exp() * Tensor(eps)


# -- optimizer ---------------------------------------------------------------


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the full-scale recipe."""

    learning_rate: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Adam(Module):
    """Deterministic Adam; state is per-parameter first/second moments."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, lr=cfg.learning_rate, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.adam_eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)


# -- SSM1 parameter files ----------------------------------------------------

SSM1_MAGIC = b"SSM1"
SSM1_VERSION = 1


def save_model_file(path, descriptor: str, stats_mean: np.ndarray,
                    stats_std: np.ndarray, named_tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write an SSM1 parameter file.

    Layout (little-endian): magic "SSM1", version u32, descriptor length
    u32 + UTF-8 bytes, normalization stats (mean then std, 43 f32 each),
    tensor count u32, then per tensor: name length u32 + UTF-8 name,
    rank u32, dims u32[rank], f32 data; trailing CRC32 of all prior bytes.
    """
    mean = np.asarray(stats_mean, dtype="<f4")
    std = np.asarray(stats_std, dtype="<f4")
    if mean.shape != (43,) or std.shape != (43,):
        raise ValueError("normalization stats must have 43 channels")
    desc = descriptor.encode("utf-8")
    parts = [SSM1_MAGIC, struct.pack("<I", SSM1_VERSION),
             struct.pack("<I", len(desc)), desc,
             mean.tobytes(), std.tobytes(),
             struct.pack("<I", len(named_tensors))]
    for name, arr in named_tensors:
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(append_crc(b"".join(parts)))


def load_model_file(path) -> tuple[str, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    payload = verify_trailing_crc(blob)
    r = Reader(payload)
    check_magic_version(r, SSM1_MAGIC, SSM1_VERSION)
    desc = r.take(r.u32()).decode("utf-8")
    mean = np.frombuffer(r.take(43 * 4), dtype="<f4").copy()
    std = np.frombuffer(r.take(43 * 4), dtype="<f4").copy()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
        tensors[name] = data
    return desc, mean, std, tensors


def arch_descriptor(kind: str, layer_specs: list[dict], extra: dict) -> str:
    """Compact JSON descriptor embedded in SSM1 files."""
    return json.dumps({"model": kind, "layers": layer_specs, **extra},
                      sort_keys=True, separators=(",", ":"))
