"""Shadow-model membership inference against per-domain federated models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .fedsim import FLConfig, train_federated
from .model import ModelCheckpoint, forward
from .tensorio import DomainDataset, split_train_test


@dataclass
class ShadowModel:
    ckpt: ModelCheckpoint
    train_sets: list[DomainDataset]
    held_out: list[DomainDataset]


@dataclass(frozen=True)
class AttackSet:
    features: np.ndarray  # [n, num_classes + 1]: sorted softmax then loss
    member: np.ndarray  # bool [n]


@dataclass(frozen=True)
class AttackMetrics:
    precision: float
    recall: float
    flags: str = ""


def _concat(a: DomainDataset, b: DomainDataset) -> DomainDataset:
    return DomainDataset(
        domain_id=a.domain_id,
        images=np.concatenate([a.images, b.images]),
        labels=np.concatenate([a.labels, b.labels]),
        transform_spec=a.transform_spec,
        seed=a.seed,
        num_classes=a.num_classes,
        sample_ids=np.concatenate([a.sample_ids, b.sample_ids]),
    )


def shadow_seed(seed: int, s: int) -> int:
    return int(np.random.SeedSequence([int(seed), s, 0x736861646F77]).generate_state(1)[0])


def train_shadows(
    train_sets: Sequence[DomainDataset],
    test_sets: Sequence[DomainDataset],
    cfg: FLConfig,
    num_shadows: int = 3,
    seed: int = 0,
    test_fraction: float | None = None,
    spec=None,
) -> list[ShadowModel]:
    """Full federated runs over re-drawn train/held-out splits of every domain."""
    if num_shadows < 1:
        raise ValueError("num_shadows must be >= 1")
    pooled = [_concat(a, b) for a, b in zip(train_sets, test_sets)]
    if test_fraction is None:
        test_fraction = len(test_sets[0]) / len(pooled[0])
    shadows = []
    for s in range(num_shadows):
        sseed = shadow_seed(seed, s)
        splits = [split_train_test(d, test_fraction, sseed) for d in pooled]
        tr = [a for a, _ in splits]
        ho = [b for _, b in splits]
        ckpt, _ = train_federated(tr, FLConfig.from_dict({**cfg.to_dict(), "seed": sseed}), spec=spec)
        shadows.append(ShadowModel(ckpt, tr, ho))
    return shadows


def confidence_features(ckpt: ModelCheckpoint, images, labels) -> np.ndarray:
    logits = forward(ckpt, images).double()
    probs = F.softmax(logits, dim=1)
    loss = F.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.int64), reduction="none")
    ordered = torch.sort(probs, dim=1, descending=True).values
    return torch.cat([ordered, loss[:, None]], dim=1).numpy()


def _balance(rng: np.random.Generator, members: np.ndarray, non_members: np.ndarray):
    n = min(len(members), len(non_members))
    return tuple(a[np.sort(rng.choice(len(a), size=n, replace=False))] for a in (members, non_members))


def build_attack_set(shadows: Sequence[ShadowModel], seed: int = 0) -> AttackSet:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x61747461636B]))
    feats, member = [], []
    for sh in shadows:
        for tr, ho in zip(sh.train_sets, sh.held_out):
            m, nm = _balance(rng, confidence_features(sh.ckpt, tr.images, tr.labels),
                             confidence_features(sh.ckpt, ho.images, ho.labels))
            feats += [m, nm]
            member += [np.ones(len(m), bool), np.zeros(len(nm), bool)]
    return AttackSet(np.concatenate(feats), np.concatenate(member))


class AttackModel(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 32, mean=None, std=None):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.register_buffer("mean", torch.zeros(in_dim, dtype=torch.float64) if mean is None else mean)
        self.register_buffer("std", torch.ones(in_dim, dtype=torch.float64) if std is None else std)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = ((feats.double() - self.mean) / self.std).float()
        return self.fc2(F.relu(self.fc1(x))).squeeze(1)

    def predict(self, feats) -> np.ndarray:
        with torch.no_grad():
            return (self(torch.as_tensor(feats)) > 0).numpy()


def train_attack_model(
    attack_set: AttackSet, seed: int = 0, hidden: int = 32, epochs: int = 300, lr: float = 1e-2
) -> AttackModel:
    """Full-batch Adam on binary cross-entropy; deterministic in ``seed``."""
    X = torch.from_numpy(attack_set.features)
    y = torch.from_numpy(attack_set.member.astype(np.float32))
    std = X.std(dim=0)
    std = torch.where(std > 0, std, torch.ones_like(std))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = AttackModel(X.shape[1], hidden, X.mean(dim=0), std)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(epochs):
        loss = F.binary_cross_entropy_with_logits(model(X), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return model


def precision_recall(pred: np.ndarray, truth: np.ndarray) -> AttackMetrics:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    tp = int((pred & truth).sum())
    flags = []
    if pred.sum() == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = tp / int(pred.sum())
    if truth.sum() == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = tp / int(truth.sum())
    return AttackMetrics(precision, recall, ";".join(flags))


def evaluate_attack(
    attack: AttackModel,
    victim: ModelCheckpoint,
    members: DomainDataset,
    non_members: DomainDataset,
    seed: int = 0,
    balance: bool = True,
) -> AttackMetrics:
    """Precision/recall with ``members`` as positives; balanced by downsampling by default."""
    fm = confidence_features(victim, members.images, members.labels)
    fn = confidence_features(victim, non_members.images, non_members.labels)
    if balance:
        fm, fn = _balance(np.random.default_rng(np.random.SeedSequence([int(seed), 0x6576616C])), fm, fn)
    feats = np.concatenate([fm, fn])
    truth = np.concatenate([np.ones(len(fm), bool), np.zeros(len(fn), bool)])
    return precision_recall(attack.predict(feats), truth)
