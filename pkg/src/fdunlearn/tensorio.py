"""Tensor archives, procedural multi-domain glyph data and stratified splits.

Archive layout (all integers little-endian)::

    magic    8 bytes  b"FDUTENS\\x00"
    version  u16
    count    u32
    count x entry:
        name_len u16, name (utf-8)
        dtype    u8   (0=f32, 1=f64, 2=u8, 3=i64)
        ndim     u8
        shape    ndim x u64
        payload  prod(shape) * itemsize bytes, row-major
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"FDUTENS\x00"
VERSION = 1
HEADER_SIZE = len(MAGIC) + 2 + 4

DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
_CANONICAL = {(dt.kind, dt.itemsize): dt for dt in DTYPE_CODES}


class ArchiveError(Exception):
    """Base class for archive read/write failures."""


class BadMagicError(ArchiveError):
    pass


class VersionMismatchError(ArchiveError):
    pass


class CorruptPayloadError(ArchiveError):
    pass


class DuplicateEntryError(ArchiveError, ValueError):
    pass


def entry_header_size(name: str, ndim: int) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 1 + 8 * ndim


def _normalize_entries(entries) -> list[tuple[str, np.ndarray]]:
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    seen = set()
    out = []
    for name, arr in items:
        if name in seen:
            raise DuplicateEntryError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.ndim == 0:
            raise ValueError(f"entry {name!r} has an empty shape")
        dt = _CANONICAL.get((arr.dtype.kind, arr.dtype.itemsize))
        if dt is None:
            raise ValueError(f"entry {name!r}: unsupported dtype {arr.dtype}")
        out.append((name, np.ascontiguousarray(arr, dtype=dt)))
    return out


def write_archive(path, entries) -> None:
    """Write named tensors (mapping or sequence of pairs) to ``path``."""
    items = _normalize_entries(entries)
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def read_archive(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a tensor archive")
    if len(buf) < HEADER_SIZE:
        raise CorruptPayloadError(f"{path}: truncated header")
    version, count = struct.unpack_from("<HI", buf, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: archive version {version}, expected {VERSION}")
    pos = HEADER_SIZE
    out: dict[str, np.ndarray] = {}

    def need(n: int) -> None:
        if pos + n > len(buf):
            raise CorruptPayloadError(f"{path}: truncated at byte {pos}")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2)
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in CODE_DTYPES:
            raise CorruptPayloadError(f"{path}: unknown dtype code {code} for {name!r}")
        need(8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = CODE_DTYPES[code]
        nbytes = math.prod(shape) * dt.itemsize
        need(nbytes)
        if name in out:
            raise DuplicateEntryError(f"{path}: duplicate entry {name!r}")
        out[name] = np.frombuffer(buf, dtype=dt, count=math.prod(shape), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise CorruptPayloadError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def encode_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy() if s else np.zeros(0, np.uint8).reshape(0)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


# ---------------------------------------------------------------------------
# domain datasets

TRANSFORM_MENU = (
    "identity",
    "invert",
    "noise:0.2",
    "texture:0.35",
    "rotate:90",
    "permute:2,0,1",
)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    domain_id: str
    images: np.ndarray  # f32 [N, C, H, W] in [0, 1]
    labels: np.ndarray  # i64 [N]
    transform_spec: str
    seed: int
    num_classes: int
    sample_ids: np.ndarray = field(default=None)  # i64 [N], ids into the generating dataset

    def __post_init__(self):
        if self.sample_ids is None:
            object.__setattr__(self, "sample_ids", np.arange(len(self.labels), dtype=np.int64))
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.sample_ids):
            raise ValueError("images, labels and sample_ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx], sample_ids=self.sample_ids[idx])

    def with_images(self, images: np.ndarray) -> "DomainDataset":
        return replace(self, images=np.ascontiguousarray(images, dtype=np.float32))

    def to_entries(self) -> dict[str, np.ndarray]:
        meta = {
            "domain_id": self.domain_id,
            "transform_spec": self.transform_spec,
            "seed": int(self.seed),
            "num_classes": int(self.num_classes),
        }
        return {
            "images": self.images.astype(np.float32),
            "labels": self.labels.astype(np.int64),
            "sample_ids": self.sample_ids.astype(np.int64),
            "meta": encode_text(json.dumps(meta, sort_keys=True)),
        }

    def save(self, path) -> None:
        write_archive(path, self.to_entries())

    @classmethod
    def load(cls, path, domain_id: str | None = None) -> "DomainDataset":
        """Load a dataset archive. Only ``images`` and ``labels`` are required, so
        external data can be plugged in as a two-entry archive."""
        e = read_archive(path)
        if "images" not in e or "labels" not in e:
            raise ArchiveError(f"{path}: dataset archives need 'images' and 'labels' entries")
        meta = json.loads(decode_text(e["meta"])) if "meta" in e else {}
        labels = e["labels"].astype(np.int64)
        images = e["images"].astype(np.float32)
        if images.ndim != 4:
            raise ArchiveError(f"{path}: images must be [N, C, H, W], got {images.shape}")
        return cls(
            domain_id=domain_id or meta.get("domain_id", Path(path).stem),
            images=images,
            labels=labels,
            transform_spec=meta.get("transform_spec", "external"),
            seed=int(meta.get("seed", 0)),
            num_classes=int(meta.get("num_classes", int(labels.max()) + 1)),
            sample_ids=e.get("sample_ids"),
        )


# Glyph strokes live on a 2x3 lattice; a class is a distinct set of segments.
_LATTICE = np.array([[x, y] for y in (0.2, 0.5, 0.8) for x in (0.3, 0.7)], dtype=np.float64)
_SEGMENTS = [(a, b) for a in range(6) for b in range(a + 1, 6)]


def class_glyphs(seed: int, num_classes: int) -> list[np.ndarray]:
    """Stroke endpoints per class, shape [S, 2, 2] in unit coordinates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x61797068]))
    seen: set[tuple[int, ...]] = set()
    glyphs = []
    while len(glyphs) < num_classes:
        n = int(rng.integers(3, 6))
        pick = tuple(sorted(rng.choice(len(_SEGMENTS), size=n, replace=False).tolist()))
        if pick in seen:
            continue
        seen.add(pick)
        glyphs.append(np.array([[_LATTICE[_SEGMENTS[s][0]], _LATTICE[_SEGMENTS[s][1]]] for s in pick]))
    return glyphs


def render_base(seed: int, stream: int, labels: np.ndarray, glyphs, image_size) -> np.ndarray:
    """Render jittered, coloured glyphs on a black background."""
    C, H, W = image_size
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream, 0x72656e64]))
    n = len(labels)
    ang = rng.uniform(-0.2, 0.2, n)
    scale = rng.uniform(0.85, 1.1, n)
    shift = rng.uniform(-0.08, 0.08, (n, 2))
    thick = rng.uniform(0.045, 0.075, n)
    color = rng.uniform(0.55, 1.0, (n, C))

    ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)  # [P, 2]
    aa = 1.0 / max(H, W)
    out = np.zeros((n, C, H, W), dtype=np.float32)
    for i in range(n):
        seg = glyphs[int(labels[i])]  # [S, 2, 2]
        c, s = math.cos(ang[i]), math.sin(ang[i])
        rot = np.array([[c, -s], [s, c]]) * scale[i]
        pts = (seg - 0.5) @ rot.T + 0.5 + shift[i]
        a, b = pts[:, 0, :], pts[:, 1, :]  # [S, 2]
        ab = b - a
        t = ((pix[None, :, :] - a[:, None, :]) * ab[:, None, :]).sum(-1) / (ab * ab).sum(-1)[:, None]
        t = np.clip(t, 0.0, 1.0)
        proj = a[:, None, :] + t[..., None] * ab[:, None, :]
        d = np.sqrt(((pix[None] - proj) ** 2).sum(-1)).min(0)
        inten = np.clip(1.0 - (d - thick[i]) / aa, 0.0, 1.0).reshape(H, W)
        out[i] = (color[i][:, None, None] * inten[None]).astype(np.float32)
    return out


def apply_transform(spec: str, images: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one domain-shift recipe from ``TRANSFORM_MENU``."""
    kind, _, arg = spec.partition(":")
    x = images.astype(np.float32, copy=True)
    if kind == "identity":
        return x
    if kind == "invert":
        return (1.0 - x).astype(np.float32)
    if kind == "noise":
        sigma = float(arg)
        return np.clip(x + rng.normal(0.0, sigma, x.shape).astype(np.float32), 0.0, 1.0)
    if kind == "texture":
        amp = float(arg)
        n, _, H, W = x.shape
        ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        theta = rng.uniform(0, np.pi, n)
        phase = rng.uniform(0, 2 * np.pi, n)
        freq = rng.uniform(0.5, 0.9, n)
        proj = np.cos(theta)[:, None, None] * xs + np.sin(theta)[:, None, None] * ys
        tex = amp * (0.5 + 0.5 * np.sin(freq[:, None, None] * proj + phase[:, None, None]))
        return np.maximum(x, tex[:, None].astype(np.float32))
    if kind == "rotate":
        k = int(arg) // 90
        if int(arg) % 90:
            raise ValueError("rotation angle must be a multiple of 90 degrees")
        return np.ascontiguousarray(np.rot90(x, k=k, axes=(2, 3)))
    if kind == "permute":
        order = [int(v) for v in arg.split(",")]
        return np.ascontiguousarray(x[:, order])
    raise ValueError(f"unknown transform {spec!r}")


def generate_domains(
    seed: int,
    num_domains: int,
    num_classes: int,
    n_per_domain: int,
    image_size: tuple[int, int, int] = (3, 32, 32),
) -> list[DomainDataset]:
    """Generate ``num_domains`` label-balanced datasets sharing class glyphs.

    Domain ``i`` uses ``TRANSFORM_MENU[i]``; the class prior is identical across
    domains while the pixel distribution given the class differs.
    """
    if num_domains < 2 or num_classes < 2:
        raise ValueError("need at least 2 domains and 2 classes")
    if num_domains > len(TRANSFORM_MENU):
        raise ValueError(f"at most {len(TRANSFORM_MENU)} domains (transform menu size)")
    if image_size[0] != 3 and num_domains > 5:
        raise ValueError("channel permutation needs 3-channel images")
    glyphs = class_glyphs(seed, num_classes)
    out = []
    for d in range(num_domains):
        spec = TRANSFORM_MENU[d]
        rng = np.random.default_rng(np.random.SeedSequence([seed, d, 0x6c61626c]))
        labels = (np.arange(n_per_domain) % num_classes).astype(np.int64)
        labels = labels[rng.permutation(n_per_domain)]
        base = render_base(seed, d, labels, glyphs, image_size)
        trng = np.random.default_rng(np.random.SeedSequence([seed, d, 0x7866726d]))
        images = apply_transform(spec, base, trng)
        out.append(
            DomainDataset(
                domain_id=f"d{d}-{spec.split(':')[0]}",
                images=images,
                labels=labels,
                transform_spec=spec,
                seed=seed,
                num_classes=num_classes,
            )
        )
    return out


def split_train_test(ds: DomainDataset, test_fraction: float, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Stratified split; each class contributes round(test_fraction * n_c) test samples."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x73706c74]))
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {int(c)} has {len(idx)} sample(s); cannot stratify")
        idx = idx[rng.permutation(len(idx))]
        n_test = min(max(int(math.floor(test_fraction * len(idx) + 0.5)), 1), len(idx) - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr), ds.subset(te)


def save_domains(datasets: Iterable[DomainDataset], out_dir, prefix: str = "domain") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, ds in enumerate(datasets):
        p = out_dir / f"{prefix}_{i:02d}.tar"
        ds.save(p)
        paths.append(p)
    return paths


def load_domains(in_dir, prefix: str = "domain") -> list[DomainDataset]:
    paths = sorted(Path(in_dir).glob(f"{prefix}_*.tar"))
    if not paths:
        raise FileNotFoundError(f"no {prefix}_*.tar archives in {in_dir}")
    return [DomainDataset.load(p) for p in paths]
