"""Small CNN (feature extractor f + classifier g) over named parameter tensors.

The network is evaluated functionally from a ``{name: tensor}`` dict so that the
same code path serves training (params with ``requires_grad``), frozen
surrogates, f64 gradient checks and checkpoint persistence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .tensorio import decode_text, encode_text, read_archive, write_archive


@dataclass(frozen=True)
class ModelSpec:
    """conv layers as (out_channels, kernel, stride); ``fc_layers`` are the hidden
    widths, followed by a final layer onto ``num_classes``."""

    conv_layers: tuple[tuple[int, int, int], ...] = ((8, 5, 1), (16, 5, 1), (32, 3, 2))
    pool_after: frozenset[int] = frozenset({0, 1})
    fc_layers: tuple[int, ...] = (64, 32)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    feature_boundary: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        object.__setattr__(self, "pool_after", frozenset(int(i) for i in self.pool_after))
        object.__setattr__(self, "fc_layers", tuple(int(w) for w in self.fc_layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        n = self.num_layers
        fb = n - 2 if self.feature_boundary is None else self.feature_boundary
        if not 0 <= fb < n - 1:
            raise ValueError(f"feature_boundary {fb} must lie strictly inside the {n} layers")
        object.__setattr__(self, "feature_boundary", fb)
        if any(i < 0 or i >= len(self.conv_layers) for i in self.pool_after):
            raise ValueError("pool_after refers to a missing conv layer")
        self.flat_dim  # validates spatial sizes

    @property
    def num_layers(self) -> int:
        return len(self.conv_layers) + len(self.fc_layers) + 1

    @property
    def layer_names(self) -> list[str]:
        conv = [f"conv{i + 1}" for i in range(len(self.conv_layers))]
        fc = [f"fc{i + 1}" for i in range(len(self.fc_layers) + 1)]
        return conv + fc

    def conv_output_shapes(self) -> list[tuple[int, int, int]]:
        c, h, w = self.input_shape
        shapes = []
        for i, (out, k, s) in enumerate(self.conv_layers):
            p = k // 2
            h = (h + 2 * p - k) // s + 1
            w = (w + 2 * p - k) // s + 1
            if i in self.pool_after:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError("input too small for the conv stack")
            c = out
            shapes.append((c, h, w))
        return shapes

    @property
    def flat_dim(self) -> int:
        if not self.conv_layers:
            return int(np.prod(self.input_shape))
        c, h, w = self.conv_output_shapes()[-1]
        return c * h * w

    def layer_widths(self) -> list[int]:
        return [c[0] for c in self.conv_layers] + list(self.fc_layers) + [self.num_classes]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = self.input_shape[0]
        for i, (out, k, _) in enumerate(self.conv_layers):
            shapes[f"conv{i + 1}.weight"] = (out, cin, k, k)
            shapes[f"conv{i + 1}.bias"] = (out,)
            cin = out
        fin = self.flat_dim
        for i, width in enumerate(list(self.fc_layers) + [self.num_classes]):
            shapes[f"fc{i + 1}.weight"] = (width, fin)
            shapes[f"fc{i + 1}.bias"] = (width,)
            fin = width
        return shapes

    def to_string(self) -> str:
        return json.dumps(
            {
                "conv_layers": [list(c) for c in self.conv_layers],
                "pool_after": sorted(self.pool_after),
                "fc_layers": list(self.fc_layers),
                "num_classes": self.num_classes,
                "input_shape": list(self.input_shape),
                "feature_boundary": self.feature_boundary,
            },
            sort_keys=True,
        )

    @classmethod
    def from_string(cls, s: str) -> "ModelSpec":
        d = json.loads(s)
        return cls(
            conv_layers=tuple(tuple(c) for c in d["conv_layers"]),
            pool_after=frozenset(d["pool_after"]),
            fc_layers=tuple(d["fc_layers"]),
            num_classes=d["num_classes"],
            input_shape=tuple(d["input_shape"]),
            feature_boundary=d["feature_boundary"],
        )


Params = dict[str, torch.Tensor]


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    spec: ModelSpec
    params: Params
    seed: int = 0
    provenance: str = ""

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if set(expected) != set(self.params):
            raise ValueError(f"parameter names {sorted(self.params)} do not match spec")
        for k, shape in expected.items():
            if tuple(self.params[k].shape) != shape:
                raise ValueError(f"{k}: shape {tuple(self.params[k].shape)} != {shape}")

    def with_params(self, params: Params, provenance: str | None = None) -> "ModelCheckpoint":
        return ModelCheckpoint(self.spec, params, self.seed, self.provenance if provenance is None else provenance)

    def to(self, dtype: torch.dtype) -> "ModelCheckpoint":
        return self.with_params({k: v.to(dtype) for k, v in self.params.items()})

    def to_entries(self) -> dict[str, np.ndarray]:
        entries = {k: v.detach().cpu().numpy() for k, v in self.params.items()}
        entries["spec"] = encode_text(self.spec.to_string())
        entries["meta"] = encode_text(json.dumps({"seed": int(self.seed), "provenance": self.provenance}))
        return entries

    def save(self, path) -> None:
        write_archive(path, self.to_entries())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        e = read_archive(path)
        spec = ModelSpec.from_string(decode_text(e.pop("spec")))
        meta = json.loads(decode_text(e.pop("meta"))) if "meta" in e else {}
        params = {k: torch.from_numpy(v) for k, v in e.items()}
        return cls(spec, params, int(meta.get("seed", 0)), meta.get("provenance", ""))


def params_equal(a: ModelCheckpoint | Params, b: ModelCheckpoint | Params) -> bool:
    pa = a.params if isinstance(a, ModelCheckpoint) else a
    pb = b.params if isinstance(b, ModelCheckpoint) else b
    return pa.keys() == pb.keys() and all(torch.equal(pa[k], pb[k]) for k in pa)


def init_params(spec: ModelSpec, seed: int) -> ModelCheckpoint:
    """Uniform(-b, b) weights with b = sqrt(3 / fan_in), i.e. std 1/sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x696e6974]))
    params: Params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = torch.zeros(shape, dtype=torch.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(3.0 / fan_in)
            params[name] = torch.from_numpy(rng.uniform(-bound, bound, shape).astype(np.float32))
    return ModelCheckpoint(spec, params, seed, f"init:{seed}")


@dataclass
class ActivationTrace:
    """Per-layer activations [N, d]; conv layers are global-average-pooled."""

    layers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.layers)


def as_batch(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def run_network(spec: ModelSpec, params: Params, x: torch.Tensor, capture: bool = False):
    """Return (logits, per-layer activations or None, feature at the boundary)."""
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"batch shape {tuple(x.shape)} does not match input {spec.input_shape}")
    acts: list[torch.Tensor] | None = [] if capture else None
    feat = None
    h = x
    li = 0
    for i, (_, k, s) in enumerate(spec.conv_layers):
        h = F.relu(F.conv2d(h, params[f"conv{i + 1}.weight"], params[f"conv{i + 1}.bias"], stride=s, padding=k // 2))
        if i in spec.pool_after:
            h = F.max_pool2d(h, 2)
        if capture:
            acts.append(h.mean(dim=(2, 3)))
        if li == spec.feature_boundary:
            feat = h.flatten(1)
        li += 1
    h = h.flatten(1)
    n_fc = len(spec.fc_layers) + 1
    for j in range(n_fc):
        h = F.linear(h, params[f"fc{j + 1}.weight"], params[f"fc{j + 1}.bias"])
        if j < n_fc - 1:
            h = F.relu(h)
        if capture:
            acts.append(h)
        if li == spec.feature_boundary:
            feat = h
        li += 1
    return h, acts, feat


def forward(ckpt: ModelCheckpoint, batch, capture: bool = False, batch_size: int = 512):
    """Logits [B, num_classes]; with ``capture`` also an ActivationTrace."""
    dtype = next(iter(ckpt.params.values())).dtype
    x = as_batch(batch, dtype)
    logits, traces = [], []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out, acts, _ = run_network(ckpt.spec, ckpt.params, x[start : start + batch_size], capture)
            logits.append(out)
            if capture:
                traces.append(acts)
    logits_t = torch.cat(logits) if logits else torch.zeros((0, ckpt.spec.num_classes), dtype=dtype)
    if not capture:
        return logits_t
    names = ckpt.spec.layer_names
    trace = ActivationTrace({n: torch.cat([t[i] for t in traces]).double().numpy() for i, n in enumerate(names)})
    return logits_t, trace


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy, accumulated in f64."""
    return F.cross_entropy(logits.double(), labels)


def loss_and_grad(
    ckpt: ModelCheckpoint,
    batch,
    labels,
    wrt: Literal["params", "input"] = "params",
):
    dtype = next(iter(ckpt.params.values())).dtype
    x = as_batch(batch, dtype).clone()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= ckpt.spec.num_classes):
        raise ValueError("labels out of range")
    if wrt == "params":
        params = {k: v.detach().clone().requires_grad_(True) for k, v in ckpt.params.items()}
        logits, _, _ = run_network(ckpt.spec, params, x)
        loss = cross_entropy(logits, y)
        names = list(params)
        grads = torch.autograd.grad(loss, [params[n] for n in names])
        return float(loss.detach()), dict(zip(names, grads))
    if wrt == "input":
        x.requires_grad_(True)
        logits, _, _ = run_network(ckpt.spec, ckpt.params, x)
        loss = cross_entropy(logits, y)
        (g,) = torch.autograd.grad(loss, [x])
        return float(loss.detach()), g
    raise ValueError(f"wrt must be 'params' or 'input', got {wrt!r}")


def predict(ckpt: ModelCheckpoint, batch) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    return predict_from_logits(forward(ckpt, batch))


def predict_from_logits(logits) -> np.ndarray:
    arr = logits.numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=1).astype(np.int64)


def feature(ckpt: ModelCheckpoint, batch, batch_size: int = 512) -> torch.Tensor:
    dtype = next(iter(ckpt.params.values())).dtype
    x = as_batch(batch, dtype)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(run_network(ckpt.spec, ckpt.params, x[start : start + batch_size])[2])
    return torch.cat(out)


def accuracy(ckpt: ModelCheckpoint, images, labels) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(ckpt, images) == np.asarray(labels)))


def mean_loss(ckpt: ModelCheckpoint, images, labels, batch_size: int = 512) -> float:
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    logits = forward(ckpt, images, batch_size=batch_size)
    with torch.no_grad():
        return float(cross_entropy(logits, y))


def zero_checkpoint(spec: ModelSpec) -> ModelCheckpoint:
    return ModelCheckpoint(spec, {k: torch.zeros(s) for k, s in spec.param_shapes().items()}, 0, "zeros")


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
