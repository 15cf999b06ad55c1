"""Surface-regression CNN: three conv/pool stages, two fully-connected layers.

The output vector is surface-major: slot ``i * m1 + k`` holds the z position
of surface ``i`` at middle column ``k`` of the patch, divided by ``Z - 1``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import ContractError, ShapeMismatchError
from .numerics import (
    LayerParams,
    conv2d_backward,
    conv2d_forward,
    conv_layer,
    euclidean_loss,
    fc_backward,
    fc_forward,
    fc_layer,
    maxpool_backward,
    maxpool_forward,
    pool_layer,
    relu_backward,
    relu_forward,
    relu_layer,
    sgd_step,
)

log = logging.getLogger(__name__)

MAGIC = b"LCM1"
VERSION = 1
KIND_CODES = {"conv": 0, "pool": 1, "fc": 2, "relu": 3}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
LAYOUT = ("conv", "relu", "pool") * 3 + ("fc", "relu", "fc")


def _ceil_half(n: int, times: int = 3) -> int:
    for _ in range(times):
        n = -(-n // 2)
    return n


@dataclass(frozen=True)
class ModelConfig:
    N: int = 32
    Z: int = 64
    lam: int = 2
    conv_channels: tuple[int, int, int] = (16, 32, 32)
    kernel: tuple[int, int] = (5, 5)
    fc_hidden: int = 512

    def __post_init__(self):
        if self.N <= 0 or self.N % 4:
            raise ContractError(f"N must be a positive multiple of 4, got {self.N}")
        if self.Z <= 1:
            raise ContractError(f"Z must be at least 2, got {self.Z}")
        if self.lam < 1:
            raise ContractError(f"lambda must be >= 1, got {self.lam}")
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ContractError(f"need three positive conv widths, got {self.conv_channels}")
        if min(self.kernel) < 1 or self.fc_hidden < 1:
            raise ContractError("kernel and fc_hidden must be positive")

    @property
    def m1(self) -> int:
        return self.N // 2

    @property
    def m2(self) -> int:
        return self.lam * self.m1

    @property
    def pooled_shape(self) -> tuple[int, int]:
        return _ceil_half(self.Z), _ceil_half(self.N)

    @property
    def flat_features(self) -> int:
        h, w = self.pooled_shape
        return self.conv_channels[2] * h * w


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 32
    epochs: int = 30
    lr_decay: float = 0.5
    decay_every: int = 10
    dtype: str = "float32"


class SurfaceRegressionNet:
    def __init__(self, config: ModelConfig, layers: list[LayerParams]):
        kinds = tuple(p.kind for p in layers)
        if kinds != LAYOUT:
            raise ContractError(f"unexpected layer sequence {kinds}")
        self.config = config
        self.layers = layers
        self._cache: list = []

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def params(self) -> list[LayerParams]:
        return self.layers

    def forward(self, patch: np.ndarray, keep: bool = False) -> np.ndarray:
        """[1,Z,N] -> [m2] or [B,1,Z,N] -> [B,m2], normalized z units."""
        cfg = self.config
        x = np.asarray(patch, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != (1, cfg.Z, cfg.N):
            raise ContractError(f"patch shape {x.shape[1:]} != (1, {cfg.Z}, {cfg.N})")
        cache = []
        for p in self.layers:
            if p.kind == "conv":
                cache.append(x)
                x = conv2d_forward(x, p)
            elif p.kind == "relu":
                cache.append(x)
                x = relu_forward(x)
            elif p.kind == "pool":
                x, idx = maxpool_forward(x)
                cache.append(idx)
            else:
                if x.ndim > 2:
                    x = x.reshape(x.shape[0], -1)
                cache.append(x)
                x = fc_forward(x, p)
        if keep:
            self._cache = cache
        return x[0] if single else x

    def backward(self, grad_out: np.ndarray) -> None:
        """Backpropagate d(loss)/d(output) through the last kept forward pass."""
        g = grad_out if grad_out.ndim == 2 else grad_out[None]
        for p, c in zip(reversed(self.layers), reversed(self._cache)):
            if p.kind == "fc":
                g = fc_backward(c, p, g)
            elif p.kind == "relu":
                g = relu_backward(c, g)
            elif p.kind == "pool":
                if g.ndim == 2:
                    g = g.reshape((g.shape[0],) + self._pooled_shape())
                g = maxpool_backward(g, c)
            else:
                g = conv2d_backward(c, p, g, need_input_grad=p is not self.layers[0])
        self._cache = []

    def _pooled_shape(self) -> tuple[int, int, int]:
        h, w = self.config.pooled_shape
        return (self.config.conv_channels[2], h, w)

    # gradient_check protocol; targets here are already normalized
    def loss(self, x: np.ndarray, target: np.ndarray) -> float:
        E, _ = euclidean_loss(self.forward(x), target, self.config.lam)
        return float(np.sum(E))

    def accumulate_gradients(self, x: np.ndarray, target: np.ndarray) -> float:
        pred = self.forward(x, keep=True)
        E, grad = euclidean_loss(pred, target, self.config.lam)
        self.backward(grad)
        return float(np.sum(E))

    def activation_pattern(self, x: np.ndarray) -> bytes:
        parts = []
        h = np.asarray(x, dtype=self.dtype)
        h = h[None] if h.ndim == 3 else h
        for p in self.layers:
            if p.kind == "conv":
                h = conv2d_forward(h, p)
            elif p.kind == "relu":
                parts.append(np.packbits(h > 0).tobytes())
                h = relu_forward(h)
            elif p.kind == "pool":
                h, idx = maxpool_forward(h)
                parts.append(idx.local.astype(np.uint8).tobytes())
            else:
                h = fc_forward(h.reshape(h.shape[0], -1), p)
        return b"".join(parts)


def build_net(config: ModelConfig, rng: np.random.Generator, dtype="float64") -> SurfaceRegressionNet:
    dtype = np.dtype(dtype)
    c1, c2, c3 = config.conv_channels
    layers = []
    for cin, cout in ((1, c1), (c1, c2), (c2, c3)):
        layers += [conv_layer(cin, cout, config.kernel, rng, dtype), relu_layer(dtype), pool_layer(dtype)]
    layers += [
        fc_layer(config.flat_features, config.fc_hidden, rng, dtype),
        relu_layer(dtype),
        fc_layer(config.fc_hidden, config.m2, rng, dtype),
    ]
    return SurfaceRegressionNet(config, layers)


def forward(net: SurfaceRegressionNet, patch: np.ndarray) -> np.ndarray:
    return net.forward(patch)


def predict_voxels(net: SurfaceRegressionNet, patches: np.ndarray) -> np.ndarray:
    """Network output rescaled to voxel units, computed in float64."""
    return net.forward(patches).astype(np.float64) * (net.config.Z - 1)


def _step(net, patches, targets, cfg, lr):
    scale = net.config.Z - 1
    pred = net.forward(patches, keep=True)
    _, grad = euclidean_loss(pred, (targets / scale).astype(net.dtype), net.config.lam)
    net.backward(grad)
    sgd_step(net.layers, cfg.lr if lr is None else lr, cfg.momentum, len(patches))
    pred_vox = pred.astype(np.float64) * scale
    E, _ = euclidean_loss(pred_vox, targets, net.config.lam)
    return E, pred_vox


def train_step(net: SurfaceRegressionNet, patches: np.ndarray, targets: np.ndarray,
               cfg: TrainConfig, lr: float | None = None) -> float:
    """One forward/backward/SGD cycle on a batch.

    ``targets`` are in voxels; returns the mean per-sample squared-error loss
    in voxel^2, measured on the predictions made before the update.
    """
    patches = np.asarray(patches)
    targets = np.asarray(targets, dtype=np.float64)
    if patches.ndim == 3:
        patches, targets = patches[None], targets[None]
    E, _ = _step(net, patches, targets, cfg, lr)
    return float(np.mean(E))


def predict_batched(net: SurfaceRegressionNet, patches: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [predict_voxels(net, patches[i:i + batch]) for i in range(0, len(patches), batch)]
    return np.concatenate(out) if out else np.zeros((0, net.config.m2))


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    umspe: float


def train(net: SurfaceRegressionNet, patches: np.ndarray, targets: np.ndarray,
          cfg: TrainConfig, rng: np.random.Generator, callback=None) -> list[EpochLog]:
    """Mini-batch training with seeded shuffling and a step-decayed learning rate.

    The per-epoch loss and UMSPE are running values over the predictions made
    during the epoch (before each update).
    """
    n = len(patches)
    if n == 0:
        raise ContractError("empty training set")
    targets = np.asarray(targets, dtype=np.float64)
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr
        if cfg.decay_every > 0:
            lr *= cfg.lr_decay ** (epoch // cfg.decay_every)
        order = rng.permutation(n)
        loss_sum = abs_sum = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            E, pred = _step(net, patches[idx], targets[idx], cfg, lr)
            loss_sum += float(np.sum(E))
            abs_sum += float(np.sum(np.abs(pred - targets[idx])))
        entry = EpochLog(epoch, lr, loss_sum / n, abs_sum / targets.size)
        history.append(entry)
        log.info("epoch %d lr %.3g loss %.4f umspe %.4f", epoch, lr, entry.loss, entry.umspe)
        if callback is not None:
            callback(entry)
    return history


# -- persistence --------------------------------------------------------------

def encode_model(net: SurfaceRegressionNet) -> bytes:
    cfg = net.config
    parts = [MAGIC, _binio.u32(VERSION, cfg.N, cfg.Z, cfg.lam, len(net.layers))]
    for p in net.layers:
        dims = p.weights.shape if p.trainable else ()
        parts.append(bytes([KIND_CODES[p.kind]]))
        parts.append(_binio.u32(len(dims), *dims))
        if p.trainable:
            parts.append(_binio.f32(p.weights))
            parts.append(_binio.f32(p.bias))
    return b"".join(parts)


def decode_model(buf: bytes, name: str = "<model>") -> SurfaceRegressionNet:
    r = _binio.Reader(buf, name)
    r.magic(MAGIC)
    r.version(VERSION)
    N, Z, lam, count = r.u32(), r.u32(), r.u32(), r.u32()
    layers = []
    for _ in range(count):
        code = r.u8()
        if code not in CODE_KINDS:
            raise ShapeMismatchError(f"{name}: unknown layer kind code {code}")
        kind = CODE_KINDS[code]
        ndims = r.u32()
        dims = tuple(r.u32() for _ in range(ndims))
        if kind in ("conv", "fc"):
            expected = 4 if kind == "conv" else 2
            if ndims != expected:
                raise ShapeMismatchError(f"{name}: {kind} layer with {ndims} dims")
            size = int(np.prod(dims))
            w = r.f32(size).reshape(dims)
            b = r.f32(dims[0])
            hyper = {"kh": dims[2], "kw": dims[3], "stride": 1, "out": dims[0]} if kind == "conv" else {"out": dims[0]}
            layers.append(LayerParams(kind, w, b, hyper))
        else:
            if ndims != 0:
                raise ShapeMismatchError(f"{name}: {kind} layer carries dims {dims}")
            layers.append(pool_layer(np.float32) if kind == "pool" else relu_layer(np.float32))
    if not r.at_end():
        raise ShapeMismatchError(f"{name}: {len(buf) - r.pos} trailing bytes")
    if tuple(p.kind for p in layers) != LAYOUT:
        raise ShapeMismatchError(f"{name}: unexpected layer sequence")
    convs = [p for p in layers if p.kind == "conv"]
    fcs = [p for p in layers if p.kind == "fc"]
    try:
        cfg = ModelConfig(N=N, Z=Z, lam=lam,
                          conv_channels=tuple(p.weights.shape[0] for p in convs),
                          kernel=tuple(convs[0].weights.shape[2:]),
                          fc_hidden=fcs[0].weights.shape[0])
    except ContractError as exc:
        raise ShapeMismatchError(f"{name}: {exc}") from exc
    chain_ok = (
        convs[0].weights.shape[1] == 1
        and all(convs[i + 1].weights.shape[1] == convs[i].weights.shape[0] for i in range(2))
        and all(c.weights.shape[2:] == convs[0].weights.shape[2:] for c in convs)
        and fcs[0].weights.shape[1] == cfg.flat_features
        and fcs[1].weights.shape == (cfg.m2, cfg.fc_hidden)
    )
    if not chain_ok:
        raise ShapeMismatchError(f"{name}: layer shapes do not chain for N={N}, Z={Z}, lambda={lam}")
    return SurfaceRegressionNet(cfg, layers)


def save_model(net: SurfaceRegressionNet, path: str | os.PathLike) -> None:
    _binio.atomic_write(path, encode_model(net))


def load_model(path: str | os.PathLike) -> SurfaceRegressionNet:
    return decode_model(_binio.read_bytes(path), str(path))
