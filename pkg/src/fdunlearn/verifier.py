"""Marker-based verification of domain unlearning, plus a pixel-pattern backdoor baseline."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fedsim import (
    ClientError,
    FLConfig,
    TrainingTrace,
    aggregate,
    local_update,
    merge_traces,
    param_delta,
    train_federated,
)
from .model import ModelCheckpoint, Params, cross_entropy, predict, run_network
from .tensorio import DomainDataset, decode_text, encode_text, read_archive, write_archive

# Keeps fl32(z + m) - z within epsilon after rounding; see MarkerGenerator.
BOUND_MARGIN = 2.0**-21
COSINE_MODES = ("one_minus", "as_printed", "off")
CLEAN_SOURCES = ("marked_set", "local_set")


class SelectionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# forgetting events


@dataclass(frozen=True)
class EventCounts:
    sample_id: int
    learning_events: int
    forgetting_events: int
    R: int
    unforgettable: bool


def count_events(acc_sequence, sample_id: int = -1, delta_min: int = 1) -> EventCounts:
    """Count 0->1 (learning) and 1->0 (forgetting) transitions of one sample."""
    a = np.asarray(acc_sequence).astype(np.int8).ravel()
    if a.size < 2:
        raise ValueError("need at least two observations")
    d = np.diff(a)
    learning = int((d > 0).sum())
    forgetting = int((d < 0).sum())
    return EventCounts(
        sample_id=int(sample_id),
        learning_events=learning,
        forgetting_events=forgetting,
        R=forgetting - learning,
        unforgettable=forgetting < delta_min,
    )


def count_events_matrix(log: np.ndarray, sample_ids, delta_min: int = 1) -> list[EventCounts]:
    """``log`` is [time, N] booleans; one EventCounts per column."""
    return [count_events(log[:, j], sid, delta_min) for j, sid in enumerate(sample_ids)]


def select_from_counts(counts: Sequence[EventCounts], tau: float) -> list[int]:
    kept = [c for c in counts if not c.unforgettable and c.R > tau]
    if not kept:
        raise SelectionError(f"no representative samples with R > tau={tau}; lower tau")
    kept.sort(key=lambda c: (-c.R, c.sample_id))
    return [c.sample_id for c in kept]


def select_representative(
    trace: TrainingTrace, k: int, tau: float, rounds: int | None = None, delta_min: int = 1
) -> list[int]:
    """Sample ids of client ``k`` that are forgettable with R > tau.

    ``rounds`` limits the log to the first rounds of training, which is how the
    pre-injection history is isolated.
    """
    log = trace.correctness_log(k, rounds)
    return select_from_counts(count_events_matrix(log, trace.sample_ids[k], delta_min), tau)


# ---------------------------------------------------------------------------
# marker generator


class MarkerGenerator(nn.Module):
    """Two-level U-Net whose output is tanh-bounded: |M(z)| <= epsilon - BOUND_MARGIN."""

    def __init__(self, channels: int = 3, width: int = 16, epsilon: float = 0.3, target_label: int = 0, seed: int = 0):
        super().__init__()
        if not 0 < epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if epsilon <= BOUND_MARGIN:
            raise ValueError(f"epsilon must exceed {BOUND_MARGIN}")
        self.epsilon = float(epsilon)
        self.target_label = int(target_label)
        self.channels, self.width, self.seed = channels, width, seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.enc1 = nn.Conv2d(channels, width, 3, padding=1)
            self.enc2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
            self.mid = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
            self.up = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
            self.dec = nn.Conv2d(2 * width, width, 3, padding=1)
            self.out = nn.Conv2d(width, channels, 1)
        self.register_buffer("scale", torch.tensor(self.epsilon - BOUND_MARGIN, dtype=torch.float32))

    def perturbation(self, z: torch.Tensor) -> torch.Tensor:
        e1 = F.relu(self.enc1(z))
        e2 = F.relu(self.enc2(e1))
        m = F.relu(self.mid(e2))
        u = F.relu(self.up(m))
        if u.shape[-2:] != e1.shape[-2:]:
            u = F.interpolate(u, size=e1.shape[-2:])
        d = F.relu(self.dec(torch.cat([u, e1], dim=1)))
        return torch.tanh(self.out(d)) * self.scale

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.clamp(z + self.perturbation(z), 0.0, 1.0)

    def mark(self, images, batch_size: int = 512) -> np.ndarray:
        X = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        with torch.no_grad():
            return torch.cat([self(X[s : s + batch_size]) for s in range(0, len(X), batch_size)]).numpy()

    def config(self) -> dict:
        return {
            "channels": self.channels,
            "width": self.width,
            "epsilon": self.epsilon,
            "target_label": self.target_label,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        entries = {f"param.{k}": v.detach().numpy() for k, v in self.state_dict().items() if k != "scale"}
        entries["config"] = encode_text(json.dumps(self.config(), sort_keys=True))
        write_archive(path, entries)

    @classmethod
    def load(cls, path) -> "MarkerGenerator":
        entries = read_archive(path)
        gen = cls(**json.loads(decode_text(entries["config"])))
        state = {k[len("param.") :]: torch.from_numpy(v.copy()) for k, v in entries.items() if k.startswith("param.")}
        state["scale"] = gen.scale
        gen.load_state_dict(state)
        return gen


def marker_bound_violation(gen: MarkerGenerator, z: torch.Tensor, batch_size: int = 256) -> float:
    """max(||T(z) - z||_inf - epsilon, distance of T(z) outside [0, 1]); <= 0 means sound."""
    dev = outside = 0.0
    with torch.no_grad():
        for s in range(0, len(z), batch_size):
            zb = z[s : s + batch_size]
            t = gen(zb)
            dev = max(dev, float((t.double() - zb.double()).abs().max()))
            outside = max(outside, float(torch.clamp(-t, min=0).max() + torch.clamp(t - 1, min=0).max()))
    return max(dev - gen.epsilon, outside)


def train_marker_generator(
    gen: MarkerGenerator,
    surrogate: ModelCheckpoint,
    D_R: np.ndarray,
    y_T: int,
    eta_delta: float = 1e-3,
    steps: int = 200,
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
    on_step: Callable[[int, MarkerGenerator], None] | None = None,
) -> MarkerGenerator:
    """Adam on the generator so the frozen surrogate labels marked D_R samples ``y_T``.

    Updates ``gen`` in place and returns it.
    """
    if len(D_R) == 0:
        raise ValueError("D_R is empty")
    rng = rng or np.random.default_rng(0)
    X = torch.from_numpy(np.ascontiguousarray(D_R, dtype=np.float32))
    target = torch.full((min(batch_size, len(X)),), int(y_T), dtype=torch.int64)
    frozen = {k: v.detach() for k, v in surrogate.params.items()}
    opt = torch.optim.Adam(gen.parameters(), lr=eta_delta)
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(len(X), size=min(batch_size, len(X)), replace=False))
        logits, _, _ = run_network(surrogate.spec, frozen, gen(X[idx]))
        loss = cross_entropy(logits, target[: len(idx)])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if on_step is not None:
            on_step(step, gen)
    return gen


# ---------------------------------------------------------------------------
# injection


@dataclass(frozen=True)
class VerificationConfig:
    # R = forgetting - learning only takes values in {-1, 0, 1}; -1 keeps every
    # forgettable sample whose correctness did not end lower than it started.
    tau: float = -1.0
    mu: float = 0.5
    lam: float = 0.5
    epsilon: float = 0.3
    inject_rounds: int = 10
    proximal_coeff: float = 0.01
    y_T: int = 0
    cosine: str = "one_minus"
    clean_source: str = "marked_set"
    eta_delta: float = 1e-3
    generator_steps: int = 100
    inject_epochs: int | None = None
    delta_min: int = 1

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError("mu and lambda must be non-negative")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.inject_rounds < 1:
            raise ValueError("inject_rounds must be >= 1")
        if self.cosine not in COSINE_MODES:
            raise ValueError(f"cosine must be one of {COSINE_MODES}")
        if self.clean_source not in CLEAN_SOURCES:
            raise ValueError(f"clean_source must be one of {CLEAN_SOURCES}")

    def to_dict(self) -> dict:
        return asdict(self)


def injection_objective(
    spec,
    vcfg: VerificationConfig,
    marked_lookup: Callable[[torch.Tensor], torch.Tensor],
    global_params: Params | None,
):
    """Objective over (params, z, y) mini-batches; ``marked_lookup(z)`` returns T(z)."""
    y_t = int(vcfg.y_T)

    def objective(params, xb, yb):
        terms = []
        logits, _, feat = run_network(spec, params, xb)
        if vcfg.mu != 0:
            terms.append(vcfg.mu * cross_entropy(logits, yb))
        if vcfg.lam != 0 or vcfg.cosine != "off":
            m_logits, _, m_feat = run_network(spec, params, marked_lookup(xb))
            if vcfg.lam != 0:
                target = torch.full_like(yb, y_t)
                terms.append(vcfg.lam * cross_entropy(m_logits, target))
            if vcfg.cosine != "off":
                cos = F.cosine_similarity(feat.double(), m_feat.double(), dim=1).mean()
                terms.append(1.0 - cos if vcfg.cosine == "one_minus" else cos)
        if vcfg.proximal_coeff != 0 and global_params is not None:
            sq = sum(((params[n].double() - global_params[n].double()) ** 2).sum() for n in params)
            terms.append(vcfg.proximal_coeff * sq)
        if not terms:
            raise ValueError("injection objective has no active term")
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    return objective


class _MarkedLookup:
    """Maps a batch of D_R images to their precomputed marked versions."""

    def __init__(self, clean: torch.Tensor, marked: torch.Tensor):
        self.clean, self.marked = clean, marked
        self._index = {clean[i].numpy().tobytes(): i for i in range(len(clean))}

    def __call__(self, xb: torch.Tensor) -> torch.Tensor:
        idx = [self._index[x.numpy().tobytes()] for x in xb]
        return self.marked[idx]


def inject_marker(
    local: ModelCheckpoint,
    D_R: DomainDataset,
    gen: MarkerGenerator | None,
    vcfg: VerificationConfig,
    global_ckpt: ModelCheckpoint | None,
    cfg: FLConfig,
    *,
    rng: np.random.Generator | None = None,
    epochs: int | None = None,
    loss_log: list[float] | None = None,
) -> ModelCheckpoint:
    """SGD on the marker-injection objective over D_R, starting from ``local``."""
    if gen is None and (vcfg.lam != 0 or vcfg.cosine != "off"):
        raise ValueError("marker generator missing")
    clean = torch.from_numpy(np.ascontiguousarray(D_R.images, dtype=np.float32))
    lookup = None
    if gen is not None:
        marked = torch.from_numpy(gen.mark(D_R.images))
        lookup = _MarkedLookup(clean, marked)
    glob = global_ckpt.params if global_ckpt is not None else None
    objective = injection_objective(local.spec, vcfg, lookup, glob)
    epochs = epochs if epochs is not None else (vcfg.inject_epochs or cfg.local_epochs)
    out, _ = local_update(
        local, D_R, cfg, rng_state=rng or np.random.default_rng(0), epochs=epochs, objective=objective, loss_log=loss_log
    )
    return out


def verify_accuracy(ckpt: ModelCheckpoint, D_R_marked: np.ndarray, y_T: int) -> float:
    if len(D_R_marked) == 0:
        raise ValueError("no marked samples")
    return float(np.mean(predict(ckpt, D_R_marked) == int(y_T)))


@dataclass
class InjectionResult:
    final: ModelCheckpoint
    trace: TrainingTrace
    generator: MarkerGenerator
    D_R: DomainDataset
    marked: np.ndarray
    selected_ids: list[int]
    history: list[dict] = field(default_factory=list)
    # generator state before injection and after each injected round
    generator_states: list[dict] = field(default_factory=list)


def representative_subset(ds: DomainDataset, ids: Sequence[int], y_T: int) -> DomainDataset:
    """Rows of ``ds`` whose sample id is in ``ids``, dropping label ``y_T``, in ``ids`` order."""
    pos = {int(s): i for i, s in enumerate(ds.sample_ids)}
    rows = np.array([pos[int(s)] for s in ids if ds.labels[pos[int(s)]] != y_T], dtype=np.int64)
    if rows.size == 0:
        raise SelectionError("every representative sample already carries the target label")
    return ds.subset(rows)


def run_injected_training(
    clean_trace: TrainingTrace,
    datasets: Sequence[DomainDataset],
    k: int,
    vcfg: VerificationConfig,
    progress: Callable[[int, ModelCheckpoint], None] | None = None,
) -> InjectionResult:
    """Replay the last ``inject_rounds`` rounds with marker injection on client ``k``.

    Rounds before injection are identical to the clean run, so training resumes
    from the stored checkpoint. Representatives come from the pre-injection
    correctness log. Each injected round: the target client trains normally,
    the generator is refit against that local model, then the injection
    objective runs on D_R.
    """
    cfg = clean_trace.cfg
    T = clean_trace.rounds
    if vcfg.inject_rounds > T:
        raise ValueError(f"inject_rounds={vcfg.inject_rounds} exceeds the {T} available rounds")
    start_round = T - vcfg.inject_rounds
    if start_round < 1:
        raise ValueError("representative selection needs at least one clean round before injection")
    ids = select_representative(clean_trace, k, vcfg.tau, rounds=start_round, delta_min=vcfg.delta_min)
    D_R = representative_subset(datasets[k], ids, vcfg.y_T)
    gen = MarkerGenerator(
        channels=D_R.images.shape[1], epsilon=vcfg.epsilon, target_label=vcfg.y_T, seed=cfg.seed
    )
    sizes = [len(d) for d in datasets]
    ids_all = clean_trace.client_ids
    glob = clean_trace.round_checkpoints[start_round]
    checkpoints = [glob]
    updates, corr, history = [], [[] for _ in datasets], []
    gen_states = [_snapshot(gen)]
    for t in range(start_round, T):
        round_updates = []
        for i, ds in enumerate(datasets):
            try:
                local, bits = local_update(glob, ds, cfg, client_id=ids_all[i], round_idx=t)
                if i == k:
                    grng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ids_all[i], t, 0x6D61726B]))
                    train_marker_generator(
                        gen, local, D_R.images, vcfg.y_T, vcfg.eta_delta, vcfg.generator_steps, cfg.batch_size, grng
                    )
                    irng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ids_all[i], t, 0x696E6A]))
                    if vcfg.clean_source == "local_set":
                        local = _inject_full_local(local, ds, D_R, gen, vcfg, glob, cfg, irng)
                    else:
                        local = inject_marker(local, D_R, gen, vcfg, glob, cfg, rng=irng)
            except Exception as exc:  # noqa: BLE001
                raise ClientError(ids_all[i], ds.domain_id, t, exc) from exc
            round_updates.append(param_delta(local, glob))
            corr[i].append(bits)
        glob = aggregate(glob, round_updates, sizes, cfg.aggregator)
        glob = glob.with_params(glob.params, f"seed{cfg.seed}:inject:round{t + 1}")
        checkpoints.append(glob)
        updates.append(round_updates)
        gen_states.append(_snapshot(gen))
        history.append({"round": t + 1, "marker_acc": verify_accuracy(glob, gen.mark(D_R.images), vcfg.y_T)})
        if progress is not None:
            progress(t, glob)
    tail = TrainingTrace(
        cfg=cfg,
        round_checkpoints=checkpoints,
        client_updates=updates,
        correctness=[np.concatenate(c) for c in corr],
        sample_ids=[d.sample_ids.copy() for d in datasets],
        sizes=sizes,
        client_names=[d.domain_id for d in datasets],
        client_ids=list(ids_all),
    )
    trace = merge_traces(clean_trace, tail, start_round)
    return InjectionResult(
        final=glob,
        trace=trace,
        generator=gen,
        D_R=D_R,
        marked=gen.mark(D_R.images),
        selected_ids=list(ids),
        history=history,
        generator_states=gen_states,
    )


def _snapshot(gen: MarkerGenerator) -> dict:
    return {k: v.detach().clone() for k, v in gen.state_dict().items()}


def _inject_full_local(local, ds, D_R, gen, vcfg, glob, cfg, rng) -> ModelCheckpoint:
    """Clean term over the whole local set; marker terms only on D_R members."""
    member = set(int(s) for s in D_R.sample_ids)
    rows = np.array([i for i, s in enumerate(ds.sample_ids) if int(s) in member], dtype=np.int64)
    clean_imgs = torch.from_numpy(np.ascontiguousarray(ds.images, dtype=np.float32))
    marked_all = clean_imgs.clone()
    marked_all[rows] = torch.from_numpy(gen.mark(ds.images[rows]))
    lookup = _MarkedLookup(clean_imgs, marked_all)
    objective = injection_objective(local.spec, vcfg, lookup, glob.params)
    epochs = vcfg.inject_epochs or cfg.local_epochs
    out, _ = local_update(local, ds, cfg, rng_state=rng, epochs=epochs, objective=objective)
    return out


# ---------------------------------------------------------------------------
# pixel-pattern backdoor baseline

TRIGGER = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]], dtype=np.float32)


def stamp(images: np.ndarray, pattern: np.ndarray = TRIGGER) -> np.ndarray:
    """Write ``pattern`` into the bottom-right corner of every channel."""
    out = np.array(images, dtype=np.float32, copy=True)
    h, w = pattern.shape
    out[..., -h:, -w:] = pattern
    return out


@dataclass
class BackdoorResult:
    final: ModelCheckpoint
    trace: TrainingTrace
    poisoned_ids: list[int]
    accuracy_fn: Callable[[ModelCheckpoint], float]


def backdoor_baseline(
    datasets: Sequence[DomainDataset],
    k: int,
    cfg: FLConfig,
    y_T: int = 0,
    poison_fraction: float = 0.1,
    pattern: np.ndarray = TRIGGER,
    spec=None,
) -> BackdoorResult:
    """Federated training where a fraction of client k's samples carry the trigger and label y_T."""
    if not 0 < poison_fraction <= 1:
        raise ValueError("poison_fraction must lie in (0, 1]")
    ds = datasets[k]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, k, 0x62646F6F72]))
    n_poison = max(1, int(math.floor(poison_fraction * len(ds) + 0.5)))
    rows = np.sort(rng.choice(len(ds), size=n_poison, replace=False))
    images = ds.images.copy()
    labels = ds.labels.copy()
    images[rows] = stamp(images[rows], pattern)
    labels[rows] = y_T
    poisoned = DomainDataset(
        domain_id=ds.domain_id,
        images=images,
        labels=labels,
        transform_spec=ds.transform_spec,
        seed=ds.seed,
        num_classes=ds.num_classes,
        sample_ids=ds.sample_ids.copy(),
    )
    train_sets = list(datasets)
    train_sets[k] = poisoned
    final, trace = train_federated(train_sets, cfg, spec=spec)
    probe = stamp(ds.images[ds.labels != y_T], pattern)

    def accuracy_fn(ckpt: ModelCheckpoint) -> float:
        return verify_accuracy(ckpt, probe, y_T)

    return BackdoorResult(final, trace, [int(ds.sample_ids[r]) for r in rows], accuracy_fn)
