from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fdunlearn.tensorio import (
    HEADER_SIZE,
    BadMagicError,
    CorruptPayloadError,
    DomainDataset,
    DuplicateEntryError,
    TRANSFORM_MENU,
    VersionMismatchError,
    apply_transform,
    entry_header_size,
    generate_domains,
    load_domains,
    read_archive,
    render_base,
    class_glyphs,
    save_domains,
    split_train_test,
    write_archive,
)

GOLDEN = Path(__file__).parent / "golden"


def test_roundtrip_zeros(tmp_path):
    x = np.zeros((2, 3), np.float32)
    write_archive(tmp_path / "a.tar", {"x": x})
    out = read_archive(tmp_path / "a.tar")
    assert out["x"].dtype == np.float32 and out["x"].tobytes() == x.tobytes()


def test_truncation_is_corrupt_payload(tmp_path):
    p = tmp_path / "a.tar"
    write_archive(p, {"x": np.arange(6, dtype=np.float32).reshape(2, 3)})
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(CorruptPayloadError):
        read_archive(p)


def test_file_size_matches_format(tmp_path):
    # 3 entries, 1000 f32 values in total
    entries = {"a": np.zeros((10, 50), np.float32), "bb": np.zeros(300, np.float32), "ccc": np.zeros((2, 10, 10), np.float32)}
    p = tmp_path / "a.tar"
    write_archive(p, entries)
    expected = HEADER_SIZE + 4000 + sum(entry_header_size(n, v.ndim) for n, v in entries.items())
    # header 14 + per-entry (2 + len(name) + 2 + 8 * ndim) = 14 + 21 + 14 + 31
    assert expected == 14 + 4000 + 21 + 14 + 31
    assert p.stat().st_size == expected


def test_error_kinds_are_distinct(tmp_path):
    p = tmp_path / "a.tar"
    write_archive(p, {"x": np.ones(3, np.float64)})
    raw = bytearray(p.read_bytes())
    bad = bytearray(raw)
    bad[0] ^= 0xFF
    (tmp_path / "m.tar").write_bytes(bad)
    with pytest.raises(BadMagicError):
        read_archive(tmp_path / "m.tar")
    ver = bytearray(raw)
    ver[8] = 9
    (tmp_path / "v.tar").write_bytes(ver)
    with pytest.raises(VersionMismatchError):
        read_archive(tmp_path / "v.tar")
    assert not issubclass(BadMagicError, VersionMismatchError)
    assert not issubclass(CorruptPayloadError, BadMagicError)


def test_duplicate_names_rejected(tmp_path):
    with pytest.raises(DuplicateEntryError):
        write_archive(tmp_path / "a.tar", [("x", np.zeros(1)), ("x", np.ones(1))])


def test_scalar_entries_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_archive(tmp_path / "a.tar", {"x": np.float32(1.0)})


_dtypes = st.sampled_from([np.float32, np.float64, np.uint8, np.int64])
_arrays = _dtypes.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=1, max_dims=4, min_side=0, max_side=5)))


@settings(max_examples=60, deadline=None)
@given(st.lists(_arrays, min_size=0, max_size=5))
def test_roundtrip_property(tmp_path_factory, arrays):
    entries = [(f"t{i}-é", a) for i, a in enumerate(arrays)]
    p = tmp_path_factory.mktemp("rt") / "a.tar"
    write_archive(p, entries)
    out = read_archive(p)
    assert list(out) == [n for n, _ in entries]
    for n, a in entries:
        assert out[n].dtype == a.dtype and out[n].shape == a.shape
        assert out[n].tobytes() == a.tobytes()


def test_generate_is_deterministic():
    a = generate_domains(3, 3, 4, 40, (3, 16, 16))
    b = generate_domains(3, 3, 4, 40, (3, 16, 16))
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()
        assert x.transform_spec == y.transform_spec


def test_transform_specs_distinct_and_from_menu():
    doms = generate_domains(0, 6, 3, 12, (3, 8, 8))
    specs = [d.transform_spec for d in doms]
    assert len(set(specs)) == 6 and set(specs) <= set(TRANSFORM_MENU)
    with pytest.raises(ValueError):
        generate_domains(0, len(TRANSFORM_MENU) + 1, 3, 12, (3, 8, 8))


def test_inversion_is_exact():
    doms = generate_domains(4, 2, 5, 50, (3, 16, 16))
    ident, inv = doms[0], doms[1]
    # same base glyphs: re-render domain 1's base and compare means
    base = render_base(4, 1, inv.labels, class_glyphs(4, 5), (3, 16, 16))
    assert abs(inv.images.astype(np.float64).mean() - (1 - base.astype(np.float64).mean())) < 1e-6
    assert ident.transform_spec == "identity"


def test_all_labels_present():
    for d in generate_domains(1, 3, 10, 100, (3, 8, 8)):
        assert set(np.unique(d.labels)) == set(range(10))
        assert d.images.min() >= 0 and d.images.max() <= 1


def test_domain_means_golden():
    golden = json.loads((GOLDEN / "domain_means.json").read_text())
    doms = generate_domains(7, 4, 10, 500)
    means = {d.domain_id: float(d.images.astype(np.float64).mean()) for d in doms}
    assert means.keys() == golden["means"].keys()
    for k, v in golden["means"].items():
        assert means[k] == pytest.approx(v, abs=1e-9)
    vals = list(golden["means"].values())
    assert all(abs(a - b) > 0.01 for i, a in enumerate(vals) for b in vals[i + 1 :])


def test_per_class_mean_images_differ_across_domains():
    doms = generate_domains(2, 4, 5, 100, (3, 16, 16))
    for c in range(5):
        means = [d.images[d.labels == c].mean(axis=0) for d in doms]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(means[i] - means[j]) > 0


def test_split_sizes_and_partition():
    ds = generate_domains(0, 2, 10, 100, (3, 8, 8))[0]
    tr, te = split_train_test(ds, 0.2, 0)
    assert (len(tr), len(te)) == (80, 20)
    ids_tr, ids_te = set(tr.sample_ids.tolist()), set(te.sample_ids.tolist())
    assert ids_tr | ids_te == set(range(100)) and not ids_tr & ids_te


def test_split_stratified_within_one_sample():
    ds = generate_domains(9, 2, 7, 123, (3, 8, 8))[1]
    _, te = split_train_test(ds, 0.2, 3)
    for c in range(7):
        n_c = int((ds.labels == c).sum())
        # brute-force count of test samples per class
        n_test = sum(1 for y in te.labels if y == c)
        assert abs(n_test - 0.2 * n_c) <= 1


def test_split_deterministic_and_errors():
    ds = generate_domains(0, 2, 3, 30, (3, 8, 8))[0]
    a, b = split_train_test(ds, 0.3, 5), split_train_test(ds, 0.3, 5)
    assert np.array_equal(a[1].sample_ids, b[1].sample_ids)
    with pytest.raises(ValueError):
        split_train_test(ds, 1.0, 0)
    lonely = ds.subset(np.array([0, 1, 2]))  # three classes, one sample each
    with pytest.raises(ValueError):
        split_train_test(lonely, 0.5, 0)


def test_dataset_persistence_and_import_path(tmp_path):
    doms = generate_domains(0, 2, 3, 12, (3, 8, 8))
    save_domains(doms, tmp_path / "d")
    back = load_domains(tmp_path / "d")
    assert [d.domain_id for d in back] == [d.domain_id for d in doms]
    assert back[1].images.tobytes() == doms[1].images.tobytes()
    # an external archive with only images and labels is accepted
    write_archive(tmp_path / "ext.tar", {"images": doms[0].images, "labels": doms[0].labels})
    ext = DomainDataset.load(tmp_path / "ext.tar")
    assert ext.transform_spec == "external" and len(ext) == 12


def test_rotation_transform_rejects_odd_angles():
    with pytest.raises(ValueError):
        apply_transform("rotate:45", np.zeros((1, 3, 4, 4), np.float32))
