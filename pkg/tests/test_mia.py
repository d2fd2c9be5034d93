from __future__ import annotations

import numpy as np
import pytest
import torch

from fdunlearn.fedsim import FLConfig
from fdunlearn.mia import (
    AttackSet,
    build_attack_set,
    confidence_features,
    evaluate_attack,
    precision_recall,
    train_attack_model,
    train_shadows,
)
from fdunlearn.model import zero_checkpoint


@pytest.fixture(scope="module")
def shadows(tiny_domains, tiny_spec):
    train, test = tiny_domains
    cfg = FLConfig(rounds=2, local_epochs=2, lr=0.05, batch_size=32)
    return train_shadows(train, test, cfg, num_shadows=2, seed=0, spec=tiny_spec)


def test_shadow_splits_partition_the_pool(shadows, tiny_domains):
    train, test = tiny_domains
    for sh in shadows:
        for tr, ho, a, b in zip(sh.train_sets, sh.held_out, train, test):
            ids = set(tr.sample_ids.tolist()) | set(ho.sample_ids.tolist())
            assert ids == set(a.sample_ids.tolist()) | set(b.sample_ids.tolist())
            assert not set(tr.sample_ids.tolist()) & set(ho.sample_ids.tolist())
            assert len(ho) == len(b)
    assert not np.array_equal(shadows[0].train_sets[0].sample_ids, shadows[1].train_sets[0].sample_ids)


def test_attack_set_is_balanced(shadows, tiny_spec):
    s = build_attack_set(shadows, seed=0)
    assert s.member.sum() == (~s.member).sum()
    assert s.features.shape[1] == tiny_spec.num_classes + 1


def test_features_sorted_with_loss(tiny_run, tiny_domains):
    full, _ = tiny_run
    ds = tiny_domains[0][0]
    f = confidence_features(full, ds.images, ds.labels)
    probs = f[:, :-1]
    assert np.all(np.diff(probs, axis=1) <= 0)
    assert np.allclose(probs.sum(axis=1), 1)
    assert (f[:, -1] >= 0).all()


def test_confident_correct_prediction_features(tiny_spec):
    ck = zero_checkpoint(tiny_spec)
    bias = torch.zeros(tiny_spec.num_classes)
    bias[2] = 50.0
    last = f"fc{len(tiny_spec.fc_layers) + 1}.bias"
    ck = ck.with_params({**ck.params, last: bias})
    f = confidence_features(ck, np.zeros((3,) + tiny_spec.input_shape, np.float32), [2, 2, 2])
    assert np.allclose(f[:, 0], 1.0) and np.allclose(f[:, -1], 0.0, atol=1e-12)


def test_precision_recall_edge_cases():
    truth = np.array([1, 0, 0, 1, 0], bool)
    m = precision_recall(np.zeros(5, bool), truth)
    assert (m.precision, m.recall) == (0.0, 0.0) and "precision_undefined" in m.flags
    m = precision_recall(np.ones(5, bool), truth)
    assert m.recall == 1.0 and m.precision == pytest.approx(2 / 5) and m.flags == ""
    m = precision_recall(np.array([1, 1, 0, 0, 0], bool), truth)
    assert (m.precision, m.recall) == (0.5, 0.5)


def test_attack_training_deterministic_and_learns_separable():
    rng = np.random.default_rng(0)
    feats = np.concatenate([rng.normal(2, 0.3, (50, 3)), rng.normal(-2, 0.3, (50, 3))])
    member = np.r_[np.ones(50, bool), np.zeros(50, bool)]
    s = AttackSet(feats, member)
    a, b = train_attack_model(s, seed=1, epochs=50), train_attack_model(s, seed=1, epochs=50)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    m = precision_recall(a.predict(feats), member)
    assert m.precision > 0.95 and m.recall > 0.95


def test_evaluate_attack_balanced_and_deterministic(shadows, tiny_run, tiny_domains):
    full, _ = tiny_run
    train, test = tiny_domains
    attack = train_attack_model(build_attack_set(shadows, 0), seed=0, epochs=30)
    a = evaluate_attack(attack, full, train[1], test[1], seed=0)
    b = evaluate_attack(attack, full, train[1], test[1], seed=0)
    assert a == b and 0 <= a.precision <= 1 and 0 <= a.recall <= 1


def test_shadow_count_validated(tiny_domains):
    with pytest.raises(ValueError):
        train_shadows(*tiny_domains, FLConfig(), num_shadows=0)
