"""Five ways to remove one client's domain from a trained federated model."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .fedsim import FLConfig, TrainingTrace, aggregation_weights, local_update, run_rounds, train_federated
from .model import ModelCheckpoint, Params, accuracy, cross_entropy, feature, forward, run_network

METHODS = ("retrain", "rapid_retrain", "federaser", "increase_loss", "class_pruning")

DEFAULT_PARAMS = {
    "retrain": {},
    "rapid_retrain": {"warm_start": True, "curvature_damping": 1e-3, "rounds_fraction": 0.4, "max_lr_scale": 10.0},
    "federaser": {"calibration_ratio": 0.5, "retain_interval": 1, "step_rule": "calibration_direction"},
    "increase_loss": {"threshold": 5.0, "lr": 0.01, "momentum": 0.0, "max_steps": 2000},
    "class_pruning": {"R": 0.7, "finetune_rounds": 5},
}


class UnlearnError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnlearnRequest:
    target_client: int
    method: str
    method_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        unknown = set(self.method_params) - set(DEFAULT_PARAMS[self.method])
        if unknown:
            raise ValueError(f"{self.method}: unknown parameters {sorted(unknown)}")

    def params(self) -> dict:
        return {**DEFAULT_PARAMS[self.method], **self.method_params}


@dataclass
class UnlearnReport:
    method: str
    unlearned: ModelCheckpoint
    target_train_acc: float
    per_domain_test_acc: dict[str, float]
    wall_time: float
    rounds_used: int
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "target_train_acc": self.target_train_acc,
            "per_domain_test_acc": self.per_domain_test_acc,
            "wall_time": self.wall_time,
            "rounds_used": self.rounds_used,
            "details": self.details,
        }


def _remaining(seq: Sequence, k: int) -> list:
    if not 0 <= k < len(seq):
        raise ValueError(f"target client {k} out of range for {len(seq)} clients")
    return [x for i, x in enumerate(seq) if i != k]


def make_report(
    method: str,
    ckpt: ModelCheckpoint,
    target_train,
    test_sets,
    started: float,
    rounds_used: int,
    full: ModelCheckpoint | None = None,
    **details,
) -> UnlearnReport:
    """Accuracies are always recomputed from ``ckpt``."""
    wall = time.perf_counter() - started
    per_domain = {ds.domain_id: accuracy(ckpt, ds.images, ds.labels) for ds in test_sets}
    if full is not None and len(target_train):
        with torch.no_grad():
            d = (feature(ckpt, target_train.images).double() - feature(full, target_train.images).double())
        details.setdefault("target_feature_l2", float(d.norm(dim=1).mean()))
    return UnlearnReport(
        method=method,
        unlearned=ckpt,
        target_train_acc=accuracy(ckpt, target_train.images, target_train.labels),
        per_domain_test_acc=per_domain,
        wall_time=wall,
        rounds_used=rounds_used,
        details=details,
    )


def retrain(train_sets, k: int, cfg: FLConfig, test_sets=(), spec=None) -> UnlearnReport:
    """Federated training from scratch on every client except ``k``."""
    t0 = time.perf_counter()
    remaining = _remaining(train_sets, k)
    ckpt, _ = train_federated(remaining, cfg, spec=spec)
    return make_report("retrain", ckpt, train_sets[k], test_sets, t0, cfg.rounds)


def curvature_lr_scale(trace: TrainingTrace, clients: Sequence[int], damping: float, max_scale: float) -> Params:
    """Per-parameter step scale 1 / (F + damping), capped at ``max_scale``.

    F is the diagonal mean of squared historical pseudo-gradients (delta / lr)
    of ``clients``, normalised to unit mean per tensor.
    """
    lr = trace.cfg.lr
    acc: dict[str, torch.Tensor] = {}
    count = 0
    for t in range(trace.rounds):
        for i in clients:
            delta = trace.client_updates[t][i]
            for name, d in delta.items():
                g2 = (d.double() / lr) ** 2
                acc[name] = acc[name] + g2 if name in acc else g2
            count += 1
    if count == 0:
        raise UnlearnError("trace holds no historical updates")
    scale = {}
    for name, s in acc.items():
        fisher = s / count
        mean = fisher.mean()
        fisher = fisher / mean if mean > 0 else torch.ones_like(fisher)
        scale[name] = torch.clamp(1.0 / (fisher + damping), max=max_scale).float()
    return scale


def rapid_retrain(
    full: ModelCheckpoint,
    trace: TrainingTrace,
    train_sets,
    k: int,
    cfg: FLConfig,
    test_sets=(),
    warm_start: bool = True,
    curvature_damping: float = 1e-3,
    rounds_fraction: float = 0.4,
    max_lr_scale: float = 10.0,
) -> UnlearnReport:
    """Short curvature-preconditioned retraining on the remaining clients."""
    t0 = time.perf_counter()
    rounds_used = math.ceil(rounds_fraction * cfg.rounds)
    if trace.rounds < 1:
        raise UnlearnError("trace is missing the historical rounds rapid retrain needs")
    remaining_idx = _remaining(list(range(len(train_sets))), k)
    start = full if warm_start else trace.round_checkpoints[0]
    if rounds_used <= 0:
        return make_report("rapid_retrain", start, train_sets[k], test_sets, t0, 0, full=full)
    scale = curvature_lr_scale(trace, remaining_idx, curvature_damping, max_lr_scale)
    ckpt, _ = run_rounds(
        start,
        [train_sets[i] for i in remaining_idx],
        cfg,
        rounds_used,
        client_ids=[trace.client_ids[i] for i in remaining_idx],
        lr_scale=scale,
    )
    return make_report("rapid_retrain", ckpt, train_sets[k], test_sets, t0, rounds_used, full=full)


def _tensor_norm(t: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(t.double())


def federaser(
    trace: TrainingTrace,
    train_sets,
    k: int,
    test_sets=(),
    calibration_ratio: float = 0.5,
    retain_interval: int = 1,
    step_rule: str = "calibration_direction",
    full: ModelCheckpoint | None = None,
) -> UnlearnReport:
    """Replay retained rounds with calibrated updates.

    With the default ``step_rule="calibration_direction"`` each remaining client
    contributes the direction of its fresh calibration update scaled to the
    per-tensor norm of its stored historical update. ``"history_direction"``
    swaps the roles; it drifts once the replayed model leaves the recorded
    trajectory. The target client's history is never read.
    """
    t0 = time.perf_counter()
    cfg = trace.cfg
    if retain_interval < 1:
        raise ValueError("retain_interval must be >= 1")
    if step_rule not in ("history_direction", "calibration_direction"):
        raise ValueError(f"unknown step_rule {step_rule!r}")
    retained = list(range(0, trace.rounds, retain_interval))
    if not retained:
        raise UnlearnError("retained history is empty")
    remaining_idx = _remaining(list(range(len(train_sets))), k)
    cal_epochs = math.ceil(calibration_ratio * cfg.local_epochs)
    weights = aggregation_weights([len(train_sets[i]) for i in remaining_idx])
    glob = trace.round_checkpoints[0]
    for t in retained:
        new = {name: p.double().clone() for name, p in glob.params.items()}
        for w, i in zip(weights, remaining_idx):
            cal, _ = local_update(
                glob, train_sets[i], cfg, client_id=trace.client_ids[i], round_idx=t, epochs=cal_epochs
            )
            old = trace.client_updates[t][i]
            for name, p in glob.params.items():
                calib = cal.params[name].double() - p.double()
                hist = old[name].double()
                direction, size = (hist, calib) if step_rule == "history_direction" else (calib, hist)
                n_dir = _tensor_norm(direction)
                if n_dir > 0:
                    new[name] += w * _tensor_norm(size) * direction / n_dir
        glob = glob.with_params({n: v.float() for n, v in new.items()}, f"federaser:round{t + 1}")
    return make_report(
        "federaser", glob, train_sets[k], test_sets, t0, len(retained), full=full, calibration_epochs=cal_epochs
    )


def increase_loss(
    full: ModelCheckpoint,
    target_train,
    test_sets=(),
    threshold: float = 5.0,
    lr: float = 0.01,
    momentum: float = 0.0,
    max_steps: int = 2000,
) -> UnlearnReport:
    """Full-batch gradient ascent on the target client's cross-entropy, optionally with heavy-ball momentum.

    Stops as soon as the mean target loss reaches ``threshold``; the loss
    after every step is kept in ``details['loss_history']``.
    """
    t0 = time.perf_counter()
    spec = full.spec
    X = torch.from_numpy(np.ascontiguousarray(target_train.images, dtype=np.float32))
    Y = torch.from_numpy(target_train.labels.astype(np.int64))
    names = list(full.params)
    params = {n: v.detach().clone().requires_grad_(True) for n, v in full.params.items()}
    plist = [params[n] for n in names]
    bufs: dict[str, torch.Tensor] = {}

    def current_loss() -> float:
        with torch.no_grad():
            return float(cross_entropy(run_network(spec, params, X)[0], Y))

    history = [current_loss()]
    steps = 0
    while history[-1] < threshold and steps < max_steps:
        loss = cross_entropy(run_network(spec, params, X)[0], Y)
        grads = torch.autograd.grad(loss, plist)
        with torch.no_grad():
            for n, p, g in zip(names, plist, grads):
                buf = bufs[n].mul_(momentum).add_(g) if n in bufs else bufs.setdefault(n, g.clone())
                p.add_(lr * buf)
        steps += 1
        history.append(current_loss())
    ckpt = full.with_params({n: v.detach().clone() for n, v in params.items()}, "increase_loss")
    return make_report(
        "increase_loss", ckpt, target_train, test_sets, t0, 0, full=full, steps=steps, loss_history=history
    )


def tfidf_from_tf(tf: dict[str, np.ndarray], k: int) -> dict[str, np.ndarray]:
    """Scores from per-layer TF matrices [channels, domains].

    IDF[c] = log((1 + M) / (1 + #{j : TF[c, j] > mean over the layer's channels})),
    raw = TF[:, k] * IDF, then min-max over every channel of every layer.
    All-equal raw scores normalise to 0.
    """
    raw = {}
    for name, TF in tf.items():
        M = TF.shape[1]
        if not 0 <= k < M:
            raise ValueError(f"target {k} out of range")
        above = (TF > TF.mean(axis=0, keepdims=True)).sum(axis=1)
        idf = np.log((1.0 + M) / (1.0 + above))
        raw[name] = TF[:, k] * idf
    flat = np.concatenate(list(raw.values()))
    lo, hi = flat.min(), flat.max()
    if hi - lo <= 0:
        return {n: np.zeros_like(v) for n, v in raw.items()}
    return {n: (v - lo) / (hi - lo) for n, v in raw.items()}


def tfidf_channel_scores(full: ModelCheckpoint, all_datasets, k: int) -> dict[str, np.ndarray]:
    """Per-conv-channel relevance to domain ``k``; TF[c, j] is the mean absolute activation of c on domain j."""
    if not 0 <= k < len(all_datasets):
        raise ValueError(f"target {k} out of range")
    conv_names = full.spec.layer_names[: len(full.spec.conv_layers)]
    tf = {name: [] for name in conv_names}
    for ds in all_datasets:
        _, trace = forward(full, ds.images, capture=True)
        for name in conv_names:
            # post-ReLU, so mean |a| equals the mean activation
            tf[name].append(np.abs(trace.layers[name]).mean(axis=0))
    return tfidf_from_tf({n: np.stack(v, axis=1) for n, v in tf.items()}, k)


def channel_prune_mask(full: ModelCheckpoint, scores: dict[str, np.ndarray], R: float) -> tuple[Params, dict]:
    """Mask zeroing channels with score > R, their bias and their downstream inputs."""
    spec = full.spec
    mask = {n: torch.ones_like(p) for n, p in full.params.items()}
    pruned = {}
    conv_shapes = spec.conv_output_shapes()
    n_conv = len(spec.conv_layers)
    for li in range(n_conv):
        name = f"conv{li + 1}"
        chans = np.flatnonzero(scores[name] > R)
        pruned[name] = chans.tolist()
        if len(chans) == len(scores[name]):
            raise UnlearnError(f"layer fully pruned: {name} (R={R})")
        for c in chans:
            mask[f"{name}.weight"][c] = 0
            mask[f"{name}.bias"][c] = 0
            if li + 1 < n_conv:
                mask[f"conv{li + 2}.weight"][:, c] = 0
            else:
                _, h, w = conv_shapes[li]
                mask["fc1.weight"][:, c * h * w : (c + 1) * h * w] = 0
    return mask, pruned


def class_pruning(
    full: ModelCheckpoint,
    train_sets,
    k: int,
    cfg: FLConfig,
    test_sets=(),
    R: float = 0.7,
    finetune_rounds: int = 5,
    client_ids: Sequence[int] | None = None,
) -> UnlearnReport:
    """Prune target-relevant conv channels, then fine-tune federatedly without client ``k``."""
    t0 = time.perf_counter()
    scores = tfidf_channel_scores(full, train_sets, k)
    mask, pruned = channel_prune_mask(full, scores, R)
    pruned_ckpt = full.with_params({n: p * mask[n] for n, p in full.params.items()}, "class_pruning:pruned")
    remaining_idx = _remaining(list(range(len(train_sets))), k)
    ids = list(range(len(train_sets))) if client_ids is None else list(client_ids)
    ckpt = pruned_ckpt
    if finetune_rounds > 0:
        ckpt, _ = run_rounds(
            pruned_ckpt,
            [train_sets[i] for i in remaining_idx],
            cfg,
            finetune_rounds,
            client_ids=[ids[i] for i in remaining_idx],
            mask=mask,
        )
    return make_report(
        "class_pruning",
        ckpt,
        train_sets[k],
        test_sets,
        t0,
        finetune_rounds,
        full=full,
        pruned_channels=pruned,
        num_pruned=sum(len(v) for v in pruned.values()),
    )


def run_unlearning(
    request: UnlearnRequest,
    full: ModelCheckpoint,
    trace: TrainingTrace,
    train_sets,
    test_sets,
    cfg: FLConfig,
) -> UnlearnReport:
    k = request.target_client
    p = request.params()
    if request.method == "retrain":
        return retrain(train_sets, k, cfg, test_sets, spec=full.spec)
    if request.method == "rapid_retrain":
        return rapid_retrain(full, trace, train_sets, k, cfg, test_sets, **p)
    if request.method == "federaser":
        return federaser(trace, train_sets, k, test_sets, full=full, **p)
    if request.method == "increase_loss":
        return increase_loss(full, train_sets[k], test_sets, **p)
    return class_pruning(full, train_sets, k, cfg, test_sets, client_ids=trace.client_ids, **p)
