"""Model manifests: ordered layer descriptions bound to tensor files.

A manifest is a JSON document with ``name``, ``input_shape``, ``tensor_dir``
and a ``layers`` list. Conv/FullyConnected layers carry a ``weight_ref`` and,
once binarized, a ``binary_ref`` (I8 codes) plus a ``scale_ref`` (one scale
per output channel). BatchNorm layers keep their parameters in a single
(4, channels) tensor referenced by ``stats_ref`` (rows: gamma, beta,
running mean, running variance).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensorio

KINDS = ("Conv", "FullyConnected", "BatchNorm", "ReLU", "MaxPool", "Softmax")
WEIGHT_KINDS = ("Conv", "FullyConnected")


class ManifestError(Exception):
    """Raised for schema violations and dangling tensor references."""


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    # Conv
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: tuple[int, int] | None = None
    stride: int = 1
    pad: int = 0
    # FullyConnected
    in_features: int | None = None
    out_features: int | None = None
    # BatchNorm
    channels: int | None = None
    # MaxPool
    pool: int | None = None
    # tensor bindings
    weight_ref: str | None = None
    binary_ref: str | None = None
    scale_ref: str | None = None
    stats_ref: str | None = None
    binarized: bool = False

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ManifestError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in WEIGHT_KINDS:
            if not self.weight_ref:
                raise ManifestError(f"{self.kind} layer {self.name!r} lacks weight_ref")
        elif self.weight_ref:
            raise ManifestError(f"{self.kind} layer {self.name!r} must not carry weight_ref")
        if self.kind == "Conv":
            if not (self.in_channels and self.out_channels and self.kernel):
                raise ManifestError(f"Conv layer {self.name!r}: missing shape params")
        if self.kind == "FullyConnected":
            if not (self.in_features and self.out_features):
                raise ManifestError(f"FullyConnected layer {self.name!r}: missing feature sizes")
        if self.kind == "BatchNorm":
            if not self.channels:
                raise ManifestError(f"BatchNorm layer {self.name!r}: missing channels")
            if not self.stats_ref:
                raise ManifestError(f"BatchNorm layer {self.name!r}: missing stats_ref")
        if self.kind == "MaxPool" and not self.pool:
            raise ManifestError(f"MaxPool layer {self.name!r}: missing pool size")
        both = bool(self.binary_ref) and bool(self.scale_ref)
        if self.binarized != both:
            raise ManifestError(
                f"layer {self.name!r}: binarized flag must match presence of "
                f"binary_ref and scale_ref"
            )

    @property
    def is_weight_layer(self) -> bool:
        return self.kind in WEIGHT_KINDS


@dataclass
class ModelManifest:
    name: str
    input_shape: tuple[int, ...]
    tensor_dir: str
    layers: list[LayerSpec] = field(default_factory=list)
    base_dir: str = "."  # directory the manifest was read from; not serialized

    def validate(self) -> None:
        if not self.name:
            raise ManifestError("manifest missing name")
        if len(self.input_shape) != 3:
            raise ManifestError(f"input_shape must be (C, H, W), got {self.input_shape}")
        for spec in self.layers:
            spec.validate()

    def resolve(self, ref: str) -> Path:
        base = Path(self.base_dir) / self.tensor_dir
        return base / ref

    def load_ref(self, ref: str) -> np.ndarray:
        path = self.resolve(ref)
        if not path.is_file():
            raise ManifestError(f"dangling tensor ref {ref!r}: {path} does not exist")
        return tensorio.read_tensor(path)

    def weight_layer_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.is_weight_layer]


_OMIT_DEFAULTS = {
    "name": "",
    "in_channels": None,
    "out_channels": None,
    "kernel": None,
    "stride": 1,
    "pad": 0,
    "in_features": None,
    "out_features": None,
    "channels": None,
    "pool": None,
    "weight_ref": None,
    "binary_ref": None,
    "scale_ref": None,
    "stats_ref": None,
    "binarized": False,
}


def _layer_to_json(spec: LayerSpec) -> dict:
    d = asdict(spec)
    out = {"kind": d.pop("kind")}
    for key, val in d.items():
        if _OMIT_DEFAULTS.get(key, object()) != val:
            out[key] = list(val) if isinstance(val, tuple) else val
    return out


def _layer_from_json(d: dict) -> LayerSpec:
    if "kind" not in d:
        raise ManifestError("layer entry missing kind")
    known = {f for f in LayerSpec.__dataclass_fields__}
    extra = set(d) - known
    if extra:
        raise ManifestError(f"layer entry has unknown fields {sorted(extra)}")
    kwargs = dict(d)
    if kwargs.get("kernel") is not None:
        kwargs["kernel"] = tuple(kwargs["kernel"])
    return LayerSpec(**kwargs)


def write_manifest(manifest: ModelManifest, path: str | Path) -> None:
    manifest.validate()
    doc = {
        "name": manifest.name,
        "input_shape": list(manifest.input_shape),
        "tensor_dir": manifest.tensor_dir,
        "layers": [_layer_to_json(s) for s in manifest.layers],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> ModelManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("name", "input_shape", "tensor_dir", "layers"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    manifest = ModelManifest(
        name=doc["name"],
        input_shape=tuple(int(d) for d in doc["input_shape"]),
        tensor_dir=doc["tensor_dir"],
        layers=[_layer_from_json(entry) for entry in doc["layers"]],
        base_dir=str(path.parent),
    )
    manifest.validate()
    return manifest


_CONV_RE = re.compile(r"^(\d+)C(\d+)$")
_POOL_RE = re.compile(r"^MP(\d+)$")
_FC_RE = re.compile(r"^(\d+)FC$")
_GROUP_RE = re.compile(r"^\((\d+)[x×](.+)\)$")


def parse_architecture(arch: str, input_shape: tuple[int, int, int]) -> list[LayerSpec]:
    """Expand an architecture string such as ``(2x8C3)-MP2-(2x16C3)-10FC-Softmax``.

    ``nCk`` is a convolution with n kernels of size k x k (stride 1, same
    padding) followed by BatchNorm and ReLU; ``MPk`` a k x k max pool with
    stride k; ``nFC`` a fully-connected layer (input flattened); ``Softmax``
    the classifier head.
    """
    tokens: list[str] = []
    for part in arch.split("-"):
        part = part.strip()
        if not part:
            raise ManifestError("empty token in architecture string")
        m = _GROUP_RE.match(part)
        if m:
            tokens.extend([m.group(2)] * int(m.group(1)))
        else:
            tokens.append(part)

    layers: list[LayerSpec] = []
    c, h, w = input_shape
    n_conv = n_fc = n_bn = 0
    for tok in tokens:
        m = _CONV_RE.match(tok)
        if m:
            n_out, k = int(m.group(1)), int(m.group(2))
            n_conv += 1
            n_bn += 1
            pad = k // 2
            layers.append(LayerSpec(
                kind="Conv", name=f"conv{n_conv}", in_channels=c, out_channels=n_out,
                kernel=(k, k), stride=1, pad=pad, weight_ref=f"conv{n_conv}.w.bwt",
            ))
            h = (h + 2 * pad - k) + 1
            w = (w + 2 * pad - k) + 1
            c = n_out
            layers.append(LayerSpec(
                kind="BatchNorm", name=f"bn{n_bn}", channels=c, stats_ref=f"bn{n_bn}.bwt",
            ))
            layers.append(LayerSpec(kind="ReLU"))
            continue
        m = _POOL_RE.match(tok)
        if m:
            k = int(m.group(1))
            if h % k or w % k:
                raise ManifestError(f"MP{k} does not divide feature size {h}x{w}")
            layers.append(LayerSpec(kind="MaxPool", pool=k, stride=k))
            h //= k
            w //= k
            continue
        m = _FC_RE.match(tok)
        if m:
            n_out = int(m.group(1))
            n_fc += 1
            layers.append(LayerSpec(
                kind="FullyConnected", name=f"fc{n_fc}", in_features=c * h * w,
                out_features=n_out, weight_ref=f"fc{n_fc}.w.bwt",
            ))
            c, h, w = n_out, 1, 1
            continue
        if tok == "Softmax":
            layers.append(LayerSpec(kind="Softmax"))
            continue
        raise ManifestError(f"cannot parse architecture token {tok!r}")
    return layers
