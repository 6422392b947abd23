"""Bag files, dataset manifests, patient-disjoint splits, synthetic bags.

Bag file layout (little-endian)::

    b"RMB1" | u32 N | u32 d | u32 label | f32[N*d] features | f32[N*2] coords
    | u16 len + utf-8 slide_id | u16 len + utf-8 patient_id

The manifest is tab-separated ``slide_id patient_id label split path`` with
``#``-prefixed ``key=value`` header lines; paths are relative to the
manifest's directory.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BAG_MAGIC = b"RMB1"
SPLITS = ("train", "val", "test")


class BagFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class BagRecord:
    slide_id: str
    features: np.ndarray  # (N, d) float32
    coords: np.ndarray  # (N, 2) float32, tile centers in pixels
    label: int
    patient_id: str

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id!r}: features must be (N>=1, d), got {self.features.shape}")
        if self.coords.shape != (self.features.shape[0], 2):
            raise ValueError(f"bag {self.slide_id!r}: coords {self.coords.shape} do not align with features")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.coords))):
            raise ValueError(f"bag {self.slide_id!r}: non-finite features or coordinates")

    @property
    def n_tiles(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("identifier longer than 65535 bytes")
    return struct.pack("<H", len(raw)) + raw


def encode_bag(record: BagRecord) -> bytes:
    n, d = record.features.shape
    return b"".join(
        (
            BAG_MAGIC,
            struct.pack("<III", n, d, record.label),
            record.features.astype("<f4").tobytes(),
            record.coords.astype("<f4").tobytes(),
            _pack_str(record.slide_id),
            _pack_str(record.patient_id),
        )
    )


def decode_bag(buf: bytes, expected_dim: int | None = None) -> BagRecord:
    if len(buf) < 4 or buf[:4] != BAG_MAGIC:
        raise BagFormatError(f"bad magic {buf[:4]!r}, expected {BAG_MAGIC!r}", 0)
    pos = 4

    def need(k: int, what: str) -> None:
        if pos + k > len(buf):
            raise BagFormatError(f"truncated file while reading {what}", pos)

    need(12, "header")
    n, d, label = struct.unpack_from("<III", buf, pos)
    if expected_dim is not None and d != expected_dim:
        raise BagFormatError(f"feature dim {d} does not match manifest dim {expected_dim}", 8)
    pos += 12
    need(4 * n * d, "features")
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    pos += 4 * n * d
    need(8 * n, "coordinates")
    coords = np.frombuffer(buf, dtype="<f4", count=n * 2, offset=pos).reshape(n, 2)
    pos += 8 * n
    ids = []
    for what in ("slide_id", "patient_id"):
        need(2, f"{what} length")
        (k,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(k, what)
        try:
            ids.append(buf[pos : pos + k].decode("utf-8"))
        except UnicodeDecodeError:
            raise BagFormatError(f"{what} is not valid utf-8", pos) from None
        pos += k
    if pos != len(buf):
        raise BagFormatError(f"{len(buf) - pos} trailing bytes", pos)
    if n == 0:
        raise BagFormatError("bag declares zero tiles", 4)
    return BagRecord(slide_id=ids[0], features=feats.astype(np.float32), coords=coords.astype(np.float32),
                     label=int(label), patient_id=ids[1])


def write_bag(record: BagRecord, path) -> None:
    Path(path).write_bytes(encode_bag(record))


def read_bag(path, expected_dim: int | None = None) -> BagRecord:
    return decode_bag(Path(path).read_bytes(), expected_dim)


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    slide_id: str
    patient_id: str
    label: int
    split: str
    path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    feature_dim: int
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def bag_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load(self, entry: ManifestEntry) -> BagRecord:
        return read_bag(self.bag_path(entry), self.feature_dim)

    def load_split(self, name: str) -> list[BagRecord]:
        return [self.load(e) for e in self.split(name)]

    def entry(self, slide_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.slide_id == slide_id:
                return e
        raise KeyError(f"slide {slide_id!r} not in manifest")

    def evidence_path(self, entry: ManifestEntry) -> Path:
        return self.bag_path(entry).with_name(f"{entry.slide_id}.evidence.txt")

    def validate(self) -> None:
        check_patient_disjoint({e.slide_id: e.split for e in self.entries},
                               {e.slide_id: e.patient_id for e in self.entries})
        for e in self.entries:
            p = self.bag_path(e)
            if not p.exists():
                raise FileNotFoundError(f"bag file for {e.slide_id} missing: {p}")
            with open(p, "rb") as fh:
                head = fh.read(16)
            if len(head) < 16 or head[:4] != BAG_MAGIC:
                raise BagFormatError(f"{p}: not a bag file", 0)
            (d,) = struct.unpack_from("<I", head, 8)
            if d != self.feature_dim:
                raise BagFormatError(f"{p}: dim {d} != manifest dim {self.feature_dim}", 8)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"# num_classes={manifest.num_classes}", f"# feature_dim={manifest.feature_dim}"]
    for e in manifest.entries:
        lines.append("\t".join((e.slide_id, e.patient_id, str(e.label), e.split, e.path)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    meta: dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        sid, pid, label, split, rel = parts
        if split not in SPLITS:
            raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
        entries.append(ManifestEntry(sid, pid, int(label), split, rel))
    try:
        num_classes = int(meta["num_classes"])
        feature_dim = int(meta["feature_dim"])
    except KeyError as exc:
        raise ValueError(f"{path}: manifest header is missing {exc.args[0]}") from None
    return DatasetManifest(entries, num_classes, feature_dim, root=path.parent)


# ---------------------------------------------------------------- splits


def check_patient_disjoint(split: dict[str, str], patients: dict[str, str]) -> None:
    seen: dict[str, str] = {}
    for sid, part in split.items():
        pid = patients[sid]
        if seen.setdefault(pid, part) != part:
            raise ValueError(f"patient {pid!r} appears in both {seen[pid]!r} and {part!r}")


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation, then at least one item per split."""
    raw = [r * n for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(raw)), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    for j in range(len(counts)):
        if counts[j] == 0:
            donor = max(range(len(counts)), key=lambda i: (counts[i], -i))
            counts[donor] -= 1
            counts[j] = 1
    return counts


def split_patients(
    records: Iterable[tuple[str, str, int]],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    names: Sequence[str] = SPLITS,
) -> dict[str, str]:
    """Stratified, patient-level split of ``(slide_id, patient_id, label)`` triples.

    A patient's class is the label of their lowest-id slide. Returns a map
    slide_id -> split name.
    """
    if len(ratios) != len(names):
        raise ValueError("need one ratio per split")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {tuple(ratios)}")
    records = sorted(records)
    slides_of: dict[str, list[str]] = {}
    label_of: dict[str, int] = {}
    for sid, pid, label in records:
        slides_of.setdefault(pid, []).append(sid)
        label_of.setdefault(pid, int(label))
    rng = np.random.default_rng(seed)
    active = [i for i, r in enumerate(ratios) if r > 0]
    out: dict[str, str] = {}
    for cls in sorted(set(label_of.values())):
        pats = sorted(p for p, c in label_of.items() if c == cls)
        if len(pats) < len(active):
            raise ValueError(f"class {cls} has {len(pats)} patients, fewer than {len(active)} splits")
        order = [pats[i] for i in rng.permutation(len(pats))]
        counts = _allocate(len(pats), [ratios[i] for i in active])
        start = 0
        for idx, cnt in zip(active, counts):
            for pid in order[start : start + cnt]:
                for sid in slides_of[pid]:
                    out[sid] = names[idx]
            start += cnt
    return out


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    tiles: int = 64
    feature_dim: int = 64
    num_classes: int = 2
    k_ev: int = 4
    radius: float = 256.0
    extent: float = 4096.0
    signal: float = 4.0
    noise: float = 1.0
    null_class: int = 0  # class without planted evidence; -1 for none
    slides_per_patient: int = 1
    seed: int = 17

    def __post_init__(self):
        if not 0 <= self.k_ev <= self.tiles:
            raise ValueError("need 0 <= k_ev <= tiles")
        if self.radius <= 0 or self.signal <= 0 or self.noise <= 0 or self.extent <= 2 * self.radius:
            raise ValueError("radius, signal and noise must be positive and 2*radius < extent")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.tiles < 1:
            raise ValueError("bag counts must be nonnegative and tiles >= 1")
        if self.num_classes < 2 or self.feature_dim < self.num_classes:
            raise ValueError("need num_classes >= 2 and feature_dim >= num_classes")
        if self.null_class >= self.num_classes:
            raise ValueError("null_class out of range")
        if self.slides_per_patient < 1:
            raise ValueError("slides_per_patient must be >= 1")


@dataclass
class SyntheticBag:
    record: BagRecord
    evidence: np.ndarray  # planted tile indices, ascending


def class_directions(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal class signal vectors of norm ``config.signal``; (C, d)."""
    q, _ = np.linalg.qr(rng.standard_normal((config.feature_dim, config.num_classes)))
    return (q.T * config.signal).astype(np.float64)


def make_bag(config: SynthConfig, label: int, mu: np.ndarray, rng: np.random.Generator,
             slide_id: str, patient_id: str) -> SyntheticBag:
    n, d = config.tiles, config.feature_dim
    feats = rng.standard_normal((n, d)) * config.noise
    coords = rng.uniform(0.0, config.extent, size=(n, 2))
    k = 0 if label == config.null_class else config.k_ev
    ev = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    if k:
        center = rng.uniform(config.radius, config.extent - config.radius, size=2)
        rad = config.radius * np.sqrt(rng.uniform(size=k))
        ang = rng.uniform(0.0, 2 * np.pi, size=k)
        coords[ev] = center + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
        feats[ev] += mu[label]
    rec = BagRecord(slide_id=slide_id, features=feats, coords=coords, label=int(label), patient_id=patient_id)
    return SyntheticBag(rec, ev.astype(np.int64))


def generate_bags(config: SynthConfig) -> tuple[list[SyntheticBag], dict[str, str]]:
    """Bags plus their split assignment; a pure function of the config."""
    rng = np.random.default_rng(config.seed)
    mu = class_directions(config, rng)
    total = config.n_train + config.n_val + config.n_test
    labels = rng.permutation(np.arange(total) % config.num_classes)
    bags = []
    for i, y in enumerate(labels):
        sid = f"slide_{i:04d}"
        pid = f"patient_{i // config.slides_per_patient:04d}"
        bags.append(make_bag(config, int(y), mu, rng, sid, pid))
    ratios = np.array([config.n_train, config.n_val, config.n_test], dtype=np.float64) / max(total, 1)
    names = [s for s, r in zip(SPLITS, ratios) if r > 0]
    triples = [(b.record.slide_id, b.record.patient_id, b.record.label) for b in bags]
    split = split_patients(triples, [r for r in ratios if r > 0], seed=config.seed, names=names)
    return bags, split


def gen_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write bags, evidence sidecars and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    bag_dir = out_dir / "bags"
    bag_dir.mkdir(parents=True, exist_ok=True)
    bags, split = generate_bags(config)
    entries = []
    for b in bags:
        r = b.record
        rel = os.path.join("bags", f"{r.slide_id}.rmb")
        write_bag(r, out_dir / rel)
        (bag_dir / f"{r.slide_id}.evidence.txt").write_text(" ".join(map(str, b.evidence.tolist())) + "\n")
        entries.append(ManifestEntry(r.slide_id, r.patient_id, r.label, split[r.slide_id], rel))
    manifest = DatasetManifest(entries, config.num_classes, config.feature_dim, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def read_evidence(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([int(t) for t in text], dtype=np.int64)
