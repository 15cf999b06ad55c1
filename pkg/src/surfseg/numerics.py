"""Dense layer operations with hand-written backward passes.

Tensors are plain numpy arrays (row-major). Every layer function accepts a
single sample ``[C, H, W]`` / ``[D]`` or a batch with a leading axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ContractError

KINDS = ("conv", "pool", "fc", "relu", "loss")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; the same seed yields the same draw sequence."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


@dataclass(eq=False)
class LayerParams:
    kind: str
    weights: np.ndarray
    bias: np.ndarray
    hyper: dict[str, Any] = field(default_factory=dict)
    grad_weights: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)
    vel_weights: np.ndarray = field(init=False)
    vel_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self.vel_weights = np.zeros_like(self.weights)
        self.vel_bias = np.zeros_like(self.bias)

    @property
    def trainable(self) -> bool:
        return self.weights.size > 0

    def zero_grad(self) -> None:
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0


def _empty(dtype) -> np.ndarray:
    return np.zeros((0,), dtype=dtype)


def conv_layer(in_ch: int, out_ch: int, kernel: tuple[int, int],
               rng: np.random.Generator, dtype=np.float64) -> LayerParams:
    kh, kw = kernel
    fan_in, fan_out = in_ch * kh * kw, out_ch * kh * kw
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(out_ch, in_ch, kh, kw)).astype(dtype)
    return LayerParams("conv", w, np.zeros(out_ch, dtype=dtype),
                       {"kh": kh, "kw": kw, "stride": 1, "out": out_ch})


def fc_layer(n_in: int, n_out: int, rng: np.random.Generator,
             dtype=np.float64) -> LayerParams:
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)
    return LayerParams("fc", w, np.zeros(n_out, dtype=dtype), {"out": n_out})


def pool_layer(dtype=np.float64) -> LayerParams:
    return LayerParams("pool", _empty(dtype), _empty(dtype), {"size": 2, "stride": 2})


def relu_layer(dtype=np.float64) -> LayerParams:
    return LayerParams("relu", _empty(dtype), _empty(dtype))


# -- convolution --------------------------------------------------------------

def _same_pad(kh: int, kw: int) -> tuple[int, int, int, int]:
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return top, kh - 1 - top, left, kw - 1 - left


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ContractError(f"expected {ndim}-d sample or {ndim + 1}-d batch, got shape {x.shape}")


def _im2col(xb: np.ndarray, kh: int, kw: int, pad: tuple[int, int, int, int]) -> np.ndarray:
    """[B,C,H,W] -> [C*kh*kw, B*H*W] patch matrix of the zero-padded input."""
    B, C, H, W = xb.shape
    t, b, l, r = pad
    xp = np.zeros((C, B, H + t + b, W + l + r), dtype=xb.dtype)
    xp[:, :, t:t + H, l:l + W] = xb.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, H, W), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + H, j:j + W]
    return cols.reshape(C * kh * kw, B * H * W)


def conv2d_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Stride-1 cross-correlation with zero "same" padding: [C,H,W] -> [K,H,W]."""
    xb, single = _as_batch(x, 3)
    w = params.weights
    if xb.shape[1] != w.shape[1]:
        raise ContractError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[1]}")
    B, _, H, W = xb.shape
    K, _, kh, kw = w.shape
    cols = _im2col(xb, kh, kw, _same_pad(kh, kw))
    out = w.reshape(K, -1) @ cols + params.bias[:, None]
    out = np.ascontiguousarray(out.reshape(K, B, H, W).transpose(1, 0, 2, 3))
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, params: LayerParams, grad_out: np.ndarray,
                    need_input_grad: bool = True) -> np.ndarray | None:
    """Accumulate parameter gradients and return d(loss)/d(input).

    With ``need_input_grad=False`` (first layer) only the parameter
    gradients are computed and None is returned.
    """
    xb, single = _as_batch(x, 3)
    gb, _ = _as_batch(grad_out, 3)
    w = params.weights
    if xb.shape[1] != w.shape[1]:
        raise ContractError(f"input has {xb.shape[1]} channels, kernel expects {w.shape[1]}")
    B, C, H, W = xb.shape
    K, _, kh, kw = w.shape
    if gb.shape != (B, K, H, W):
        raise ContractError(f"grad_out shape {gb.shape} does not match forward output")
    t, b, l, r = _same_pad(kh, kw)
    cols = _im2col(xb, kh, kw, (t, b, l, r))
    gmat = gb.transpose(1, 0, 2, 3).reshape(K, B * H * W)
    params.grad_weights += (gmat @ cols.T).reshape(w.shape)
    params.grad_bias += gmat.sum(axis=1)
    if not need_input_grad:
        return None
    # adjoint of "same" correlation: correlate the grad with the flipped,
    # channel-transposed kernel under the complementary padding
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
    gcols = _im2col(gb, kh, kw, (b, t, r, l))
    gx = (wflip @ gcols).reshape(C, B, H, W).transpose(1, 0, 2, 3)
    return gx[0] if single else np.ascontiguousarray(gx)


# -- max pooling --------------------------------------------------------------

@dataclass
class PoolIndex:
    """Window-local argmax (0..3, row-major within the 2x2 window)."""
    local: np.ndarray
    in_shape: tuple[int, ...]


def maxpool_forward(x: np.ndarray, size: int = 2, stride: int = 2) -> tuple[np.ndarray, PoolIndex]:
    """2x2/stride-2 max pooling; odd trailing edges get a shrunken window."""
    if size != 2 or stride != 2:
        raise ContractError("only size=2, stride=2 pooling is supported")
    H, W = x.shape[-2:]
    if H < 1 or W < 1:
        raise ContractError(f"cannot pool empty map {x.shape}")
    H2, W2 = -(-H // 2), -(-W // 2)
    lead = x.shape[:-2]
    xp = np.full(lead + (2 * H2, 2 * W2), -np.inf, dtype=x.dtype)
    xp[..., :H, :W] = x
    blocks = xp.reshape(lead + (H2, 2, W2, 2))
    blocks = np.moveaxis(blocks, -3, -2).reshape(lead + (H2, W2, 4))
    # argmax returns the first maximum, i.e. the smallest linear index
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    return out, PoolIndex(local, x.shape)


def maxpool_backward(grad_out: np.ndarray, index: PoolIndex) -> np.ndarray:
    lead = index.in_shape[:-2]
    H, W = index.in_shape[-2:]
    H2, W2 = index.local.shape[-2:]
    onehot = np.zeros(lead + (H2, W2, 4), dtype=grad_out.dtype)
    np.put_along_axis(onehot, index.local[..., None], grad_out[..., None], axis=-1)
    full = onehot.reshape(lead + (H2, W2, 2, 2))
    full = np.moveaxis(full, -2, -3).reshape(lead + (2 * H2, 2 * W2))
    return np.ascontiguousarray(full[..., :H, :W])


# -- fully connected / relu ---------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    if x.shape[-1] != params.weights.shape[1]:
        raise ContractError(f"fc expects {params.weights.shape[1]} inputs, got {x.shape[-1]}")
    return x @ params.weights.T + params.bias


def fc_backward(x: np.ndarray, params: LayerParams, grad_out: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(x, 1)
    gb, _ = _as_batch(grad_out, 1)
    params.grad_weights += gb.T @ xb
    params.grad_bias += gb.sum(axis=0)
    gx = gb @ params.weights
    return gx[0] if single else gx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


# -- loss / optimizer ---------------------------------------------------------

def euclidean_loss(pred: np.ndarray, target: np.ndarray, lam: int | None = None):
    """Sum of squared surface-position errors over all surfaces and columns.

    ``pred`` and ``target`` are surface-major vectors of length lam * m1:
    surface i (0-based) occupies slots i*m1 .. i*m1 + m1 - 1. A leading batch
    axis gives one loss per sample. Returns ``(E, dE/dpred)``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(f"pred shape {pred.shape} != target shape {target.shape}")
    m2 = pred.shape[-1]
    lam = 1 if lam is None else lam
    if lam < 1 or m2 % lam:
        raise ContractError(f"length {m2} is not a multiple of lambda={lam}")
    diff = (pred - target).reshape(pred.shape[:-1] + (lam, m2 // lam))
    E = np.sum(diff * diff, axis=(-2, -1))
    grad = 2.0 * (pred - target)
    return (float(E) if E.ndim == 0 else E), grad


def sgd_step(layers, lr: float, momentum: float, batch_size: int) -> None:
    """Momentum SGD on the mean gradient; zeroes gradients afterwards."""
    if batch_size < 1:
        raise ContractError("batch_size must be positive")
    for p in layers:
        if not p.trainable:
            continue
        p.vel_weights *= momentum
        p.vel_weights -= lr * (p.grad_weights / batch_size)
        p.weights += p.vel_weights
        p.vel_bias *= momentum
        p.vel_bias -= lr * (p.grad_bias / batch_size)
        p.bias += p.vel_bias
        p.zero_grad()


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: int
    skipped: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def gradient_check(net, x: np.ndarray, target: np.ndarray, h: float = 1e-3,
                   tol: float = 1e-4, max_per_tensor: int | None = None,
                   rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``net`` must provide ``params()``, ``loss(x, target)`` and
    ``accumulate_gradients(x, target)``. If it also provides
    ``activation_pattern(x)``, perturbations that flip a relu mask or a
    pooling argmax (a kink in the loss) are skipped.
    """
    for p in net.params():
        p.zero_grad()
    net.accumulate_gradients(x, target)
    pattern = getattr(net, "activation_pattern", None)
    errors: dict[str, float] = {}
    checked = skipped = 0
    for li, p in enumerate(net.params()):
        if not p.trainable:
            continue
        for tname, arr, grad in (("w", p.weights, p.grad_weights), ("b", p.bias, p.grad_bias)):
            flat, gflat = arr.reshape(-1), grad.reshape(-1).copy()
            idx = np.arange(flat.size)
            if max_per_tensor is not None and flat.size > max_per_tensor:
                idx = (rng or make_rng(0)).choice(flat.size, max_per_tensor, replace=False)
            worst = 0.0
            for k in idx:
                orig = flat[k]
                flat[k] = orig + h
                e_plus = net.loss(x, target)
                pat_plus = pattern(x) if pattern else None
                flat[k] = orig - h
                e_minus = net.loss(x, target)
                pat_minus = pattern(x) if pattern else None
                flat[k] = orig
                if pattern and pat_plus != pat_minus:
                    skipped += 1
                    continue
                num = (e_plus - e_minus) / (2 * h)
                a = gflat[k]
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, rel)
                checked += 1
            errors[f"layer{li}.{p.kind}.{tname}"] = worst
    for p in net.params():
        p.zero_grad()
    return GradCheckReport(errors, checked, skipped, tol)
