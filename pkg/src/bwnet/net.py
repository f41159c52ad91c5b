"""Desk-scale forward/backward engine over manifest-described models.

Executes Conv / FullyConnected / BatchNorm / ReLU / MaxPool / Softmax layers
in three modes: ``float`` (real weights), ``binary`` (codes accumulated as
+/-1 followed by a per-output-channel scale multiply; every executed weight
layer must be binarized) and ``mixed`` (per-layer dispatch on the binarized
flag, used while a model is only partially converted). All math runs in
float64; tensors serialize as float32/int8.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .manifest import (
    LayerSpec,
    ManifestError,
    ModelManifest,
    parse_architecture,
    write_manifest,
)

FLOAT = "float"
BINARY = "binary"
MIXED = "mixed"
MODES = (FLOAT, BINARY, MIXED)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ModeError(Exception):
    """Execution-mode violation (e.g. binary mode on an unbinarized layer)."""


class DivergenceError(Exception):
    def __init__(self, iteration: int, loss: float):
        self.iteration = iteration
        self.loss = loss
        super().__init__(f"training diverged at iteration {iteration}: loss={loss}")


@dataclass
class TrainConfig:
    lr: float = 0.05
    lr_decay: float = 0.1
    lr_decay_steps: tuple[int, ...] = (400, 550)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_iters: int = 650
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be nonnegative")
        if self.batch_size < 1 or self.max_iters < 1:
            raise ValueError("batch_size and max_iters must be positive")


# ---------------------------------------------------------------------------
# im2col


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w} (pad={pad})")
    return oh, ow


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold (n, c, h, w) into patch columns of shape (c*kh*kw, n*oh*ow).

    Column m indexes (sample, out_row, out_col) in row-major order; row s
    indexes (channel, kernel_row, kernel_col).
    """
    n, c, h, w = x.shape
    oh, ow = conv_output_size(h, w, kh, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)
    return np.ascontiguousarray(cols)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to an image."""
    n, c, h, w = x_shape
    oh, ow = conv_output_size(h, w, kh, kw, stride, pad)
    patches = cols.reshape(c, kh, kw, n, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += patches[:, :, i, j]
    if pad:
        img = img[:, :, pad : pad + h, pad : pad + w]
    return img


# ---------------------------------------------------------------------------
# layers


class ConvLayer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        kh, kw = spec.kernel
        self.weight = np.zeros((spec.out_channels, spec.in_channels, kh, kw))
        self.codes: np.ndarray | None = None  # int8, same shape as weight
        self.scales: np.ndarray | None = None  # (out_channels,)
        self.gw: np.ndarray | None = None
        self._cache = None

    @property
    def binarized(self) -> bool:
        return self.codes is not None and self.scales is not None

    def _weight_matrix(self, binary: bool) -> np.ndarray:
        if binary:
            if not self.binarized:
                raise ModeError(f"conv layer {self.spec.name!r} is not binarized")
            return self.codes.reshape(self.codes.shape[0], -1).astype(np.float64)
        return self.weight.reshape(self.weight.shape[0], -1)

    def forward(self, x: np.ndarray, binary: bool) -> np.ndarray:
        kh, kw = self.spec.kernel
        n = x.shape[0]
        oh, ow = conv_output_size(x.shape[2], x.shape[3], kh, kw, self.spec.stride, self.spec.pad)
        cols = im2col(x, kh, kw, self.spec.stride, self.spec.pad)
        wmat = self._weight_matrix(binary)
        out = wmat @ cols
        if binary:
            out *= self.scales[:, None]
        self._cache = (cols, x.shape, binary)
        return out.reshape(-1, n, oh, ow).transpose(1, 0, 2, 3)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        cols, x_shape, binary = self._cache
        kh, kw = self.spec.kernel
        dmat = dout.transpose(1, 0, 2, 3).reshape(dout.shape[1], -1)
        if binary:
            # gradient w.r.t. the effective (scaled code) weights
            wmat = self._weight_matrix(True) * self.scales[:, None]
        else:
            wmat = self._weight_matrix(False)
        self.gw = (dmat @ cols.T).reshape(self.weight.shape)
        dcols = wmat.T @ dmat
        return col2im(dcols, x_shape, kh, kw, self.spec.stride, self.spec.pad)


class FCLayer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self.weight = np.zeros((spec.out_features, spec.in_features))
        self.codes: np.ndarray | None = None
        self.scales: np.ndarray | None = None
        self.gw: np.ndarray | None = None
        self._cache = None

    @property
    def binarized(self) -> bool:
        return self.codes is not None and self.scales is not None

    def forward(self, x: np.ndarray, binary: bool) -> np.ndarray:
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.spec.in_features:
            raise ValueError(
                f"fc layer {self.spec.name!r}: got {x2.shape[1]} features, "
                f"expected {self.spec.in_features}"
            )
        if binary:
            if not self.binarized:
                raise ModeError(f"fc layer {self.spec.name!r} is not binarized")
            out = (x2 @ self.codes.astype(np.float64).T) * self.scales
        else:
            out = x2 @ self.weight.T
        self._cache = (x2, x.shape, binary)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x2, x_shape, binary = self._cache
        self.gw = dout.T @ x2
        if binary:
            w = self.codes.astype(np.float64) * self.scales[:, None]
        else:
            w = self.weight
        return (dout @ w).reshape(x_shape)


class BatchNormLayer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        c = spec.channels
        self.gamma = np.ones(c)
        self.beta = np.zeros(c)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.ggamma: np.ndarray | None = None
        self.gbeta: np.ndarray | None = None
        self._cache = None

    @staticmethod
    def _axes(x: np.ndarray) -> tuple[int, ...]:
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _reshape(self, v: np.ndarray, ndim: int) -> np.ndarray:
        return v.reshape(1, -1, 1, 1) if ndim == 4 else v

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean
            self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
        else:
            mean = self.running_mean
            var = self.running_var
            m = x.size // x.shape[1]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - self._reshape(mean, x.ndim)) * self._reshape(inv_std, x.ndim)
        self._cache = (xhat, inv_std, m, train)
        return self._reshape(self.gamma, x.ndim) * xhat + self._reshape(self.beta, x.ndim)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, m, train = self._cache
        axes = self._axes(dout)
        self.gbeta = dout.sum(axis=axes)
        self.ggamma = (dout * xhat).sum(axis=axes)
        g = self._reshape(self.gamma, dout.ndim)
        if not train:
            return dout * g * self._reshape(inv_std, dout.ndim)
        dxhat = dout * g
        term = dxhat - dxhat.mean(axis=axes, keepdims=True) \
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        return term * self._reshape(inv_std, dout.ndim)


class ReLULayer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask


class MaxPoolLayer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        k = self.spec.pool
        n, c, h, w = x.shape
        if h % k or w % k:
            raise ValueError(f"pool {k} does not divide feature map {h}x{w}")
        oh, ow = h // k, w // k
        tiles = x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
        flat = tiles.reshape(n, c, oh, ow, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        idx, x_shape = self._cache
        k = self.spec.pool
        n, c, h, w = x_shape
        oh, ow = h // k, w // k
        dflat = np.zeros((n, c, oh, ow, k * k), dtype=dout.dtype)
        np.put_along_axis(dflat, idx[..., None], dout[..., None], axis=-1)
        dtiles = dflat.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        return dtiles.reshape(x_shape)


class SoftmaxLayer:
    def __init__(self, spec: LayerSpec):
        self.spec = spec

    def forward(self, x: np.ndarray) -> np.ndarray:
        return softmax(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


_LAYER_TYPES = {
    "Conv": ConvLayer,
    "FullyConnected": FCLayer,
    "BatchNorm": BatchNormLayer,
    "ReLU": ReLULayer,
    "MaxPool": MaxPoolLayer,
    "Softmax": SoftmaxLayer,
}


# ---------------------------------------------------------------------------
# network


class Network:
    """In-memory model: ordered layers plus the input shape."""

    def __init__(self, layers: list, input_shape: tuple[int, int, int], name: str = "model"):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.name = name

    # -- construction -------------------------------------------------------

    @classmethod
    def from_specs(cls, specs: list[LayerSpec], input_shape, name: str = "model") -> "Network":
        return cls([_LAYER_TYPES[s.kind](s) for s in specs], input_shape, name)

    @classmethod
    def random_init(cls, arch: str, input_shape, seed: int = 0, name: str = "model") -> "Network":
        specs = parse_architecture(arch, tuple(input_shape))
        net = cls([_LAYER_TYPES[s.kind](s) for s in specs], input_shape, name)
        rng = np.random.default_rng(seed)
        for layer in net.layers:
            if isinstance(layer, (ConvLayer, FCLayer)):
                fan_in = layer.weight[0].size
                layer.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), layer.weight.shape)
        return net

    @classmethod
    def from_manifest(cls, manifest: ModelManifest) -> "Network":
        manifest.validate()
        net = cls(
            [_LAYER_TYPES[s.kind](s) for s in manifest.layers],
            manifest.input_shape,
            manifest.name,
        )
        for layer in net.layers:
            spec = layer.spec
            if isinstance(layer, (ConvLayer, FCLayer)):
                w = manifest.load_ref(spec.weight_ref).astype(np.float64)
                if w.shape != layer.weight.shape:
                    raise ManifestError(
                        f"layer {spec.name!r}: weight tensor shape {w.shape} does not "
                        f"match spec {layer.weight.shape}"
                    )
                layer.weight = w
                if spec.binarized:
                    codes = manifest.load_ref(spec.binary_ref)
                    scales = manifest.load_ref(spec.scale_ref).astype(np.float64)
                    if codes.shape != layer.weight.shape or scales.shape != (w.shape[0],):
                        raise ManifestError(f"layer {spec.name!r}: binary tensor shape mismatch")
                    layer.codes = codes
                    layer.scales = scales
            elif isinstance(layer, BatchNormLayer):
                stats = manifest.load_ref(spec.stats_ref).astype(np.float64)
                if stats.shape != (4, spec.channels):
                    raise ManifestError(
                        f"layer {spec.name!r}: stats tensor must be (4, {spec.channels})"
                    )
                layer.gamma, layer.beta, layer.running_mean, layer.running_var = stats
        return net

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    # -- persistence ---------------------------------------------------------

    def to_manifest(self, out_dir: str | Path, tensor_dir: str = "tensors") -> ModelManifest:
        """Write all tensors plus the manifest file into ``out_dir``."""
        out_dir = Path(out_dir)
        (out_dir / tensor_dir).mkdir(parents=True, exist_ok=True)
        specs: list[LayerSpec] = []
        for i, layer in enumerate(self.layers):
            spec = copy.deepcopy(layer.spec)
            base = spec.name or f"layer{i}"
            if isinstance(layer, (ConvLayer, FCLayer)):
                spec.weight_ref = f"{base}.w.bwt"
                tensorio.write_tensor(
                    layer.weight.astype(np.float32), out_dir / tensor_dir / spec.weight_ref
                )
                if layer.binarized:
                    spec.binary_ref = f"{base}.b.bwt"
                    spec.scale_ref = f"{base}.a.bwt"
                    spec.binarized = True
                    tensorio.write_tensor(layer.codes, out_dir / tensor_dir / spec.binary_ref)
                    tensorio.write_tensor(
                        layer.scales.astype(np.float32), out_dir / tensor_dir / spec.scale_ref
                    )
                else:
                    spec.binary_ref = None
                    spec.scale_ref = None
                    spec.binarized = False
            elif isinstance(layer, BatchNormLayer):
                spec.stats_ref = f"{base}.bwt"
                stats = np.stack(
                    [layer.gamma, layer.beta, layer.running_mean, layer.running_var]
                ).astype(np.float32)
                tensorio.write_tensor(stats, out_dir / tensor_dir / spec.stats_ref)
            specs.append(spec)
        manifest = ModelManifest(
            name=self.name,
            input_shape=self.input_shape,
            tensor_dir=tensor_dir,
            layers=specs,
            base_dir=str(out_dir),
        )
        write_manifest(manifest, out_dir / f"{self.name}.manifest")
        return manifest

    # -- execution -----------------------------------------------------------

    def weight_layers(self) -> list[tuple[int, ConvLayer | FCLayer]]:
        return [
            (i, l) for i, l in enumerate(self.layers) if isinstance(l, (ConvLayer, FCLayer))
        ]

    def fully_binarized(self) -> bool:
        return all(l.binarized for _, l in self.weight_layers())

    def _layer_binary(self, layer, mode: str) -> bool:
        if mode == FLOAT:
            return False
        if mode == BINARY:
            if not layer.binarized:
                raise ModeError(f"binary mode: layer {layer.spec.name!r} is not binarized")
            return True
        return layer.binarized

    def forward(
        self,
        x: np.ndarray,
        mode: str = FLOAT,
        train: bool = False,
        upto: int | None = None,
        skip_softmax: bool = False,
    ):
        """Run layers [0, upto); returns (per-layer outputs, logits).

        Logits are the input of the trailing Softmax layer when present,
        otherwise the last output (the raw input for an empty model).
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        end = len(self.layers) if upto is None else upto
        features: list[np.ndarray] = []
        logits: np.ndarray | None = None
        for layer in self.layers[:end]:
            if isinstance(layer, SoftmaxLayer):
                logits = x
                x = x if skip_softmax else layer.forward(x)
            elif isinstance(layer, (ConvLayer, FCLayer)):
                x = layer.forward(x, binary=self._layer_binary(layer, mode))
            elif isinstance(layer, BatchNormLayer):
                x = layer.forward(x, train=train)
            else:
                x = layer.forward(x)
            features.append(x)
        if logits is None:
            logits = x
        return features, logits

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Propagate gradients through everything but the Softmax head."""
        grad = dlogits
        for layer in reversed(self.layers):
            if isinstance(layer, SoftmaxLayer):
                continue
            grad = layer.backward(grad)
        return grad


def forward(manifest: ModelManifest, batch: np.ndarray, mode: str = FLOAT):
    """Manifest-level forward pass: returns (per-layer featuremaps, logits)."""
    return Network.from_manifest(manifest).forward(batch, mode=mode)


# ---------------------------------------------------------------------------
# evaluation and training


def evaluate(network: Network | ModelManifest, dataset, mode: str = FLOAT,
             batch_size: int = 256) -> dict:
    """Top-1 accuracy and mean cross-entropy over a labeled dataset."""
    if isinstance(network, ModelManifest):
        network = Network.from_manifest(network)
    images, labels = dataset.images, dataset.labels
    if len(images) == 0:
        raise ValueError("empty dataset")
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        _, logits = network.forward(xb, mode=mode)
        loss, _ = cross_entropy(logits, yb)
        loss_sum += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return {"top1": correct / len(images), "loss": loss_sum / len(images)}


def _lr_at(cfg: TrainConfig, it: int) -> float:
    lr = cfg.lr
    for step in cfg.lr_decay_steps:
        if it >= step:
            lr *= cfg.lr_decay
    return lr


def train_baseline(network: Network, dataset, cfg: TrainConfig) -> list[float]:
    """Momentum SGD on the float model; returns the per-iteration loss history."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    images, labels = dataset.images, dataset.labels
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")

    velocities = {}
    history: list[float] = []
    for it in range(cfg.max_iters):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        xb, yb = images[idx], labels[idx]
        _, logits = network.forward(xb, mode=FLOAT, train=True, skip_softmax=True)
        loss, dlogits = cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise DivergenceError(it, loss)
        history.append(loss)
        network.backward(dlogits)

        lr = _lr_at(cfg, it)
        for i, layer in enumerate(network.layers):
            if isinstance(layer, (ConvLayer, FCLayer)):
                key = f"{i}.w"
                if key not in velocities:
                    velocities[key] = np.zeros_like(layer.weight)
                g = layer.gw + cfg.weight_decay * layer.weight
                velocities[key] = cfg.momentum * velocities[key] - lr * g
                layer.weight += velocities[key]
            elif isinstance(layer, BatchNormLayer):
                for pname, gname in (("gamma", "ggamma"), ("beta", "gbeta")):
                    key = f"{i}.{pname}"
                    if key not in velocities:
                        velocities[key] = np.zeros_like(getattr(layer, pname))
                    velocities[key] = cfg.momentum * velocities[key] - lr * getattr(layer, gname)
                    setattr(layer, pname, getattr(layer, pname) + velocities[key])
    return history


def finetune(
    network: Network,
    dataset,
    cfg: TrainConfig,
    fixed_codes: bool = False,
) -> list[float]:
    """Fine-tune a fully binarized model on its binary forward pass.

    Default mode keeps a real-valued shadow copy of each code tensor,
    passes gradients straight through the sign (scaled by the channel
    scale), re-signs the codes and re-fits each channel scale to its shadow
    column after every step. With ``fixed_codes`` the codes are frozen and
    the scales are trained directly by gradient instead. BatchNorm gamma and
    beta train in both modes; running statistics stay frozen.
    """
    cfg.validate()
    if not network.fully_binarized():
        raise ModeError("finetune requires a fully binarized network")
    rng = np.random.default_rng(cfg.seed)
    images, labels = dataset.images, dataset.labels
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")

    shadows: dict[int, np.ndarray] = {}
    for i, layer in network.weight_layers():
        scale_shape = (-1,) + (1,) * (layer.codes.ndim - 1)
        shadows[i] = layer.codes.astype(np.float64) * layer.scales.reshape(scale_shape)

    velocities: dict[str, np.ndarray] = {}
    history: list[float] = []
    for it in range(cfg.max_iters):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        xb, yb = images[idx], labels[idx]
        _, logits = network.forward(xb, mode=BINARY, train=False, skip_softmax=True)
        loss, dlogits = cross_entropy(logits, yb)
        if not np.isfinite(loss):
            raise DivergenceError(it, loss)
        history.append(loss)
        network.backward(dlogits)

        lr = _lr_at(cfg, it)
        for i, layer in network.weight_layers():
            scale_shape = (-1,) + (1,) * (layer.codes.ndim - 1)
            scales_col = layer.scales.reshape(scale_shape)
            if fixed_codes:
                axes = tuple(range(1, layer.codes.ndim))
                dscale = (layer.gw * layer.codes).sum(axis=axes)
                key = f"{i}.a"
                if key not in velocities:
                    velocities[key] = np.zeros_like(layer.scales)
                velocities[key] = cfg.momentum * velocities[key] - lr * dscale
                layer.scales = layer.scales + velocities[key]
            else:
                dshadow = layer.gw * scales_col + cfg.weight_decay * shadows[i]
                key = f"{i}.s"
                if key not in velocities:
                    velocities[key] = np.zeros_like(shadows[i])
                velocities[key] = cfg.momentum * velocities[key] - lr * dshadow
                if np.any(velocities[key]):
                    shadows[i] += velocities[key]
                    layer.codes = np.where(shadows[i] >= 0.0, 1, -1).astype(np.int8)
                    axes = tuple(range(1, layer.codes.ndim))
                    layer.scales = np.abs(shadows[i]).mean(axis=axes)
        for i, layer in enumerate(network.layers):
            if isinstance(layer, BatchNormLayer):
                for pname, gname in (("gamma", "ggamma"), ("beta", "gbeta")):
                    key = f"{i}.{pname}"
                    if key not in velocities:
                        velocities[key] = np.zeros_like(getattr(layer, pname))
                    velocities[key] = cfg.momentum * velocities[key] - lr * getattr(layer, gname)
                    setattr(layer, pname, getattr(layer, pname) + velocities[key])
    return history


# ---------------------------------------------------------------------------
# structural rewrites


def dense_from_binary(network: Network) -> Network:
    """Replace every binarized layer's weights with scale * codes, cleared flags."""
    out = network.clone()
    for _, layer in out.weight_layers():
        if layer.binarized:
            scale_shape = (-1,) + (1,) * (layer.codes.ndim - 1)
            layer.weight = layer.codes.astype(np.float64) * layer.scales.reshape(scale_shape)
            layer.codes = None
            layer.scales = None
            layer.spec.binary_ref = None
            layer.spec.scale_ref = None
            layer.spec.binarized = False
    return out


def merge_scale_into_batchnorm(network: Network) -> Network:
    """Fold each binarized layer's channel scales into the BatchNorm behind it.

    The conv keeps unit scales afterwards; gamma absorbs the scale and the
    running mean is rescaled so the output is unchanged. Layers without a
    directly following BatchNorm, or with a zero scale, are left as-is.
    """
    out = network.clone()
    for i, layer in out.weight_layers():
        if not layer.binarized or i + 1 >= len(out.layers):
            continue
        nxt = out.layers[i + 1]
        if not isinstance(nxt, BatchNormLayer) or np.any(layer.scales == 0.0):
            continue
        nxt.gamma = nxt.gamma * layer.scales
        nxt.running_mean = nxt.running_mean / layer.scales
        layer.scales = np.ones_like(layer.scales)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def _fd_grad(fn, x: np.ndarray, eps: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi = fn()
        flat[k] = orig - eps
        lo = fn()
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * eps)
    return grad


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(layer_kind: str, eps: float = 1e-3, seed: int = 0) -> float:
    """Compare analytic gradients to central differences on a small instance.

    Returns the max relative error over the input and all parameters.
    """
    rng = np.random.default_rng(seed)
    errs: list[float] = []

    if layer_kind == "Conv":
        spec = LayerSpec(kind="Conv", name="gc", in_channels=3, out_channels=4,
                         kernel=(3, 3), stride=1, pad=1, weight_ref="x")
        layer = ConvLayer(spec)
        layer.weight = rng.normal(size=layer.weight.shape)
        x = rng.normal(size=(2, 3, 5, 5))
        r = rng.normal(size=(2, 4, 5, 5))
        def loss():
            return float((layer.forward(x, binary=False) * r).sum())
        loss()
        dx = layer.backward(r)
        errs.append(_max_rel_err(dx, _fd_grad(loss, x, eps)))
        errs.append(_max_rel_err(layer.gw, _fd_grad(loss, layer.weight, eps)))
    elif layer_kind == "FullyConnected":
        spec = LayerSpec(kind="FullyConnected", name="gc", in_features=6,
                         out_features=5, weight_ref="x")
        layer = FCLayer(spec)
        layer.weight = rng.normal(size=layer.weight.shape)
        x = rng.normal(size=(4, 6))
        r = rng.normal(size=(4, 5))
        def loss():
            return float((layer.forward(x, binary=False) * r).sum())
        loss()
        dx = layer.backward(r)
        errs.append(_max_rel_err(dx, _fd_grad(loss, x, eps)))
        errs.append(_max_rel_err(layer.gw, _fd_grad(loss, layer.weight, eps)))
    elif layer_kind == "BatchNorm":
        spec = LayerSpec(kind="BatchNorm", name="gc", channels=3, stats_ref="x")
        layer = BatchNormLayer(spec)
        layer.gamma = rng.normal(1.0, 0.2, size=3)
        layer.beta = rng.normal(0.0, 0.2, size=3)
        x = rng.normal(size=(6, 3, 4, 4))
        r = rng.normal(size=(6, 3, 4, 4))
        def loss():
            mean, var = layer.running_mean.copy(), layer.running_var.copy()
            val = float((layer.forward(x, train=True) * r).sum())
            layer.running_mean, layer.running_var = mean, var
            return val
        loss()
        dx = layer.backward(r)
        errs.append(_max_rel_err(dx, _fd_grad(loss, x, eps)))
        errs.append(_max_rel_err(layer.ggamma, _fd_grad(loss, layer.gamma, eps)))
        errs.append(_max_rel_err(layer.gbeta, _fd_grad(loss, layer.beta, eps)))
    elif layer_kind == "ReLU":
        layer = ReLULayer(LayerSpec(kind="ReLU"))
        x = rng.normal(size=(4, 6))
        x += np.sign(x) * 0.1  # keep clear of the kink
        r = rng.normal(size=(4, 6))
        def loss():
            return float((layer.forward(x) * r).sum())
        loss()
        dx = layer.backward(r)
        errs.append(_max_rel_err(dx, _fd_grad(loss, x, eps)))
    elif layer_kind == "MaxPool":
        layer = MaxPoolLayer(LayerSpec(kind="MaxPool", pool=2, stride=2))
        x = rng.normal(size=(2, 3, 4, 4)) * 3.0  # well-separated maxima
        r = rng.normal(size=(2, 3, 2, 2))
        def loss():
            return float((layer.forward(x) * r).sum())
        loss()
        dx = layer.backward(r)
        errs.append(_max_rel_err(dx, _fd_grad(loss, x, eps)))
    elif layer_kind == "Softmax":
        x = rng.normal(size=(5, 7))
        y = rng.integers(0, 7, size=5)
        def loss():
            return cross_entropy(x, y)[0]
        _, dlogits = cross_entropy(x, y)
        errs.append(_max_rel_err(dlogits, _fd_grad(loss, x, eps)))
    else:
        raise ValueError(f"unknown layer kind {layer_kind!r}")
    return max(errs)
