"""Federated training: local SGD, size-weighted aggregation and trace logging."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import ModelCheckpoint, ModelSpec, Params, cross_entropy, init_params, predict, run_network
from .records import MetricRecord
from .tensorio import DomainDataset, read_archive, write_archive

Objective = Callable[[Params, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 50
    local_epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    aggregator: str = "fedavg"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    @classmethod
    def desk(cls, **overrides) -> "FLConfig":
        """The laptop-scale schedule used throughout the tests (20 rounds x 3 epochs)."""
        kw = dict(rounds=20, local_epochs=3)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FLConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class ClientError(RuntimeError):
    def __init__(self, client: int, name: str, round_idx: int, cause: Exception):
        super().__init__(f"client {client} ({name}) failed in round {round_idx}: {cause}")
        self.client = client
        self.round = round_idx


def client_rng(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    """Per-client shuffling stream, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(client_id), int(round_idx)]))


def default_objective(spec: ModelSpec) -> Objective:
    def objective(params, xb, yb):
        logits, _, _ = run_network(spec, params, xb)
        return cross_entropy(logits, yb)

    return objective


def _predict_params(spec: ModelSpec, params: Params, X: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    with torch.no_grad():
        out = [run_network(spec, params, X[s : s + batch_size])[0] for s in range(0, len(X), batch_size)]
    return torch.cat(out).numpy().argmax(axis=1)


def local_update(
    ckpt: ModelCheckpoint,
    train_set: DomainDataset,
    cfg: FLConfig,
    rng_state: np.random.Generator | None = None,
    *,
    client_id: int = 0,
    round_idx: int = 0,
    epochs: int | None = None,
    lr: float | None = None,
    lr_scale: Params | None = None,
    mask: Params | None = None,
    objective: Objective | None = None,
    loss_log: list[float] | None = None,
) -> tuple[ModelCheckpoint, np.ndarray]:
    """Run SGD with momentum over shuffled mini-batches.

    Returns the new checkpoint and correctness bits [epochs, N]: after every
    epoch the model predicts the full training set in ``sample_ids`` order.
    The momentum buffer starts at zero on every call.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    rng = rng_state if rng_state is not None else client_rng(cfg.seed, client_id, round_idx)
    epochs = cfg.local_epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    spec = ckpt.spec
    objective = objective or default_objective(spec)

    names = list(ckpt.params)
    params = {k: v.detach().clone().requires_grad_(True) for k, v in ckpt.params.items()}
    plist = [params[k] for k in names]
    bufs: dict[str, torch.Tensor] = {}
    X = torch.from_numpy(np.ascontiguousarray(train_set.images, dtype=np.float32))
    Y = torch.from_numpy(train_set.labels.astype(np.int64))
    bits = np.zeros((epochs, n), dtype=bool)
    labels = train_set.labels

    for e in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[s : s + cfg.batch_size])
            loss = objective(params, X[idx], Y[idx])
            if loss_log is not None:
                loss_log.append(float(loss.detach()))
            grads = torch.autograd.grad(loss, plist)
            with torch.no_grad():
                for name, p, g in zip(names, plist, grads):
                    if name in bufs:
                        buf = bufs[name].mul_(cfg.momentum).add_(g)
                    else:
                        buf = bufs[name] = g.detach().clone()
                    step = buf * lr_scale[name] if lr_scale is not None else buf
                    p.sub_(lr * step)
                    if mask is not None and name in mask:
                        p.mul_(mask[name])
        bits[e] = _predict_params(spec, params, X) == labels

    new = {k: v.detach().clone() for k, v in params.items()}
    return ckpt.with_params(new, f"{ckpt.provenance}|client{client_id}@r{round_idx}"), bits


def param_delta(client: ModelCheckpoint, base: ModelCheckpoint) -> Params:
    """Client minus base, in f64 (exact for f32 inputs)."""
    return {k: client.params[k].double() - base.params[k].double() for k in base.params}


def apply_delta(base: ModelCheckpoint, delta: Params) -> Params:
    return {k: (base.params[k].double() + delta[k]).to(base.params[k].dtype) for k in base.params}


def aggregation_weights(sizes: Sequence[int]) -> list[float]:
    total = sum(int(s) for s in sizes)
    if total <= 0:
        raise ValueError("client sizes must sum to a positive number")
    return [float(Fraction(int(s), total)) for s in sizes]


def fedavg_aggregate(base: ModelCheckpoint, updates: Sequence[Params], sizes: Sequence[int]) -> ModelCheckpoint:
    if not updates:
        raise ValueError("no client updates to aggregate")
    if len(updates) != len(sizes):
        raise ValueError("updates and sizes differ in length")
    weights = aggregation_weights(sizes)
    new = {}
    for k, p in base.params.items():
        acc = p.double().clone()
        for w, d in zip(weights, updates):
            if tuple(d[k].shape) != tuple(p.shape):
                raise ValueError(f"{k}: delta shape {tuple(d[k].shape)} != {tuple(p.shape)}")
            acc += w * d[k].double()
        new[k] = acc.to(p.dtype)
    return base.with_params(new)


AGGREGATORS: dict[str, Callable] = {"fedavg": fedavg_aggregate}


def aggregate(base: ModelCheckpoint, updates: Sequence[Params], sizes: Sequence[int], method: str = "fedavg"):
    return AGGREGATORS[method](base, updates, sizes)


@dataclass
class TrainingTrace:
    """Everything a federated run leaves behind.

    ``round_checkpoints[t]`` is the global model broadcast at the start of round
    ``t`` (the last entry is the final model); ``client_updates[t][i]`` is client
    ``i``'s f64 delta against it; ``correctness[i]`` is a bool matrix
    [rounds * local_epochs, N_i] in time order.
    """

    cfg: FLConfig
    round_checkpoints: list[ModelCheckpoint]
    client_updates: Sequence[Sequence[Params]]
    correctness: list[np.ndarray]
    sample_ids: list[np.ndarray]
    sizes: list[int]
    client_names: list[str]
    client_ids: list[int] = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.round_checkpoints) - 1

    @property
    def final(self) -> ModelCheckpoint:
        return self.round_checkpoints[-1]

    @property
    def num_clients(self) -> int:
        return len(self.sizes)

    def client_params(self, t: int, i: int) -> Params:
        return apply_delta(self.round_checkpoints[t], self.client_updates[t][i])

    def correctness_log(self, client: int, rounds: int | None = None) -> np.ndarray:
        log = self.correctness[client]
        if rounds is None:
            return log
        return log[: rounds * self.cfg.local_epochs]


def run_rounds(
    start: ModelCheckpoint,
    datasets: Sequence[DomainDataset],
    cfg: FLConfig,
    rounds: int,
    *,
    round_offset: int = 0,
    client_ids: Sequence[int] | None = None,
    objective_for: Callable[[int, int, ModelCheckpoint], Objective | None] | None = None,
    lr_scale: Params | None = None,
    mask: Params | None = None,
    local_epochs: int | None = None,
    progress: Callable[[int, ModelCheckpoint], None] | None = None,
) -> tuple[ModelCheckpoint, TrainingTrace]:
    """Run ``rounds`` FedAvg rounds starting from ``start``.

    Round numbering for RNG streams starts at ``round_offset``; ``objective_for``
    may swap a client's local objective for a given round.
    """
    if len(datasets) < 1:
        raise ValueError("need at least one client")
    ids = list(range(len(datasets))) if client_ids is None else list(client_ids)
    sizes = [len(d) for d in datasets]
    epochs = cfg.local_epochs if local_epochs is None else local_epochs
    glob = start
    checkpoints = [start]
    updates: list[list[Params]] = []
    corr: list[list[np.ndarray]] = [[] for _ in datasets]
    for r in range(rounds):
        t = round_offset + r
        round_updates = []
        for i, ds in enumerate(datasets):
            try:
                obj = objective_for(i, t, glob) if objective_for is not None else None
                local, bits = local_update(
                    glob, ds, cfg, client_id=ids[i], round_idx=t, epochs=epochs,
                    lr_scale=lr_scale, mask=mask, objective=obj,
                )
            except Exception as exc:  # noqa: BLE001
                raise ClientError(ids[i], ds.domain_id, t, exc) from exc
            round_updates.append(param_delta(local, glob))
            corr[i].append(bits)
        glob = aggregate(glob, round_updates, sizes, cfg.aggregator)
        glob = glob.with_params(glob.params, f"seed{cfg.seed}:round{t + 1}")
        checkpoints.append(glob)
        updates.append(round_updates)
        if progress is not None:
            progress(t, glob)
    trace = TrainingTrace(
        cfg=cfg,
        round_checkpoints=checkpoints,
        client_updates=updates,
        correctness=[np.concatenate(c) if c else np.zeros((0, len(d)), bool) for c, d in zip(corr, datasets)],
        sample_ids=[d.sample_ids.copy() for d in datasets],
        sizes=sizes,
        client_names=[d.domain_id for d in datasets],
        client_ids=ids,
    )
    return glob, trace


def default_spec(datasets: Sequence[DomainDataset]) -> ModelSpec:
    return ModelSpec(num_classes=datasets[0].num_classes, input_shape=tuple(datasets[0].images.shape[1:]))


def train_federated(
    datasets: Sequence[DomainDataset],
    cfg: FLConfig,
    spec: ModelSpec | None = None,
    **kwargs,
) -> tuple[ModelCheckpoint, TrainingTrace]:
    """Train from ``init_params(spec, cfg.seed)`` for ``cfg.rounds`` rounds."""
    if len(datasets) < 2:
        raise ValueError("federated training needs at least 2 clients")
    spec = spec or default_spec(datasets)
    start = init_params(spec, cfg.seed)
    return run_rounds(start, datasets, cfg, cfg.rounds, **kwargs)


def merge_traces(head: TrainingTrace, tail: TrainingTrace, head_rounds: int) -> TrainingTrace:
    """First ``head_rounds`` rounds of ``head`` followed by ``tail``."""
    e = head.cfg.local_epochs
    return TrainingTrace(
        cfg=head.cfg,
        round_checkpoints=list(head.round_checkpoints[:head_rounds]) + list(tail.round_checkpoints),
        client_updates=[head.client_updates[t] for t in range(head_rounds)] + list(tail.client_updates),
        correctness=[np.concatenate([h[: head_rounds * e], t]) for h, t in zip(head.correctness, tail.correctness)],
        sample_ids=head.sample_ids,
        sizes=head.sizes,
        client_names=head.client_names,
        client_ids=head.client_ids,
    )


def evaluate_per_domain(
    ckpt: ModelCheckpoint,
    test_sets: Sequence[DomainDataset],
    run_id: str = "",
    method: str = "full",
) -> list[MetricRecord]:
    out = []
    for ds in test_sets:
        acc = float(np.mean(predict(ckpt, ds.images) == ds.labels)) if len(ds) else 0.0
        out.append(MetricRecord("test_acc", acc, run_id=run_id, method=method, domain=ds.domain_id))
    return out


# ---------------------------------------------------------------------------
# run-directory persistence

CORR_MAGIC = b"FDUCORR\x00"


def write_correctness(path, correctness: Sequence[np.ndarray]) -> None:
    """Bit-packed log: header, then per client (client-major) its bits in
    epoch-major, sample-id order, packed little-endian and padded to a byte."""
    epochs = {int(c.shape[0]) for c in correctness}
    if len(epochs) > 1:
        raise ValueError("all clients must log the same number of epochs")
    n_ep = epochs.pop() if epochs else 0
    parts = [CORR_MAGIC, struct.pack("<HII", 1, len(correctness), n_ep)]
    parts.append(struct.pack(f"<{len(correctness)}I", *[c.shape[1] for c in correctness]))
    for c in correctness:
        parts.append(np.packbits(c.astype(bool).ravel(), bitorder="little").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_correctness(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CORR_MAGIC:
        raise ValueError(f"{path}: bad correctness magic")
    _, m, n_ep = struct.unpack_from("<HII", buf, 8)
    pos = 18
    ns = struct.unpack_from(f"<{m}I", buf, pos)
    pos += 4 * m
    out = []
    for n in ns:
        nbytes = (n_ep * n + 7) // 8
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, pos), bitorder="little")[: n_ep * n]
        out.append(bits.reshape(n_ep, n).astype(bool))
        pos += nbytes
    return out


def _delta_path(run_dir: Path, t: int, i: int) -> Path:
    return run_dir / f"round_{t:04d}" / f"client_{i:02d}_delta.tar"


class LazyDeltas:
    """``deltas[t][i]`` reads one client's delta archive on access."""

    def __init__(self, run_dir: Path, rounds: int, clients: int):
        self.run_dir, self.rounds, self.clients = Path(run_dir), rounds, clients

    def __len__(self):
        return self.rounds

    def __getitem__(self, t: int):
        if not 0 <= t < self.rounds:
            raise IndexError(t)
        return _LazyRound(self, t)


class _LazyRound:
    def __init__(self, parent: LazyDeltas, t: int):
        self.parent, self.t = parent, t

    def __len__(self):
        return self.parent.clients

    def __getitem__(self, i: int) -> Params:
        if not 0 <= i < self.parent.clients:
            raise IndexError(i)
        e = read_archive(_delta_path(self.parent.run_dir, self.t, i))
        return {k: torch.from_numpy(v) for k, v in e.items()}


def save_trace(trace: TrainingTrace, run_dir) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for t, ck in enumerate(trace.round_checkpoints):
        rdir = run_dir / f"round_{t:04d}"
        rdir.mkdir(exist_ok=True)
        ck.save(rdir / "global.tar")
        if t < trace.rounds:
            for i in range(trace.num_clients):
                d = trace.client_updates[t][i]
                write_archive(_delta_path(run_dir, t, i), {k: v.numpy() for k, v in d.items()})
    write_correctness(run_dir / "correctness.bin", trace.correctness)
    for i, ids in enumerate(trace.sample_ids):
        write_archive(run_dir / f"sample_ids_{i:02d}.tar", {"sample_ids": ids.astype(np.int64)})
    meta = {
        "fl_config": trace.cfg.to_dict(),
        "rounds": trace.rounds,
        "sizes": trace.sizes,
        "client_names": trace.client_names,
        "client_ids": trace.client_ids,
    }
    (run_dir / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_trace(run_dir) -> TrainingTrace:
    """Load a persisted trace; client deltas are read lazily on access."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "config.json").read_text())
    rounds = int(meta["rounds"])
    ckpts = [ModelCheckpoint.load(run_dir / f"round_{t:04d}" / "global.tar") for t in range(rounds + 1)]
    m = len(meta["sizes"])
    return TrainingTrace(
        cfg=FLConfig.from_dict(meta["fl_config"]),
        round_checkpoints=ckpts,
        client_updates=LazyDeltas(run_dir, rounds, m),
        correctness=read_correctness(run_dir / "correctness.bin"),
        sample_ids=[read_archive(run_dir / f"sample_ids_{i:02d}.tar")["sample_ids"] for i in range(m)],
        sizes=list(meta["sizes"]),
        client_names=list(meta["client_names"]),
        client_ids=list(meta.get("client_ids", range(m))),
    )
