"""Archive model: manifests, the binary feature store and synthetic archives.

A WSI is modelled as an already tissue-segmented grid of patches.  Each WSI has
one feature file holding a feature vector (and optionally a stain histogram)
per patch, so every search engine consumes exactly the same inputs.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

FEATURE_MAGIC = b"HSFV"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.json"
FEATURE_DIR = "features"
FEATURE_SUFFIX = ".hsfv"

_HEADER = struct.Struct("<4sIIII")


class ArchiveError(Exception):
    """Raised for malformed manifests or feature stores."""


class ManifestError(ArchiveError):
    pass


class FeatureStoreError(ArchiveError):
    """Per-WSI load failure.  The benchmark counts these as failed WSIs."""

    def __init__(self, wsi_id: str, message: str):
        super().__init__(f"{wsi_id}: {message}")
        self.wsi_id = wsi_id


class MissingWsiError(FeatureStoreError):
    pass


class NonFiniteFeatureError(FeatureStoreError):
    pass


class DimensionMismatchError(FeatureStoreError):
    pass


@dataclass(frozen=True)
class PatchRef:
    wsi_id: str
    grid_x: int
    grid_y: int
    patch_px: int = 256
    magnification: Fraction = Fraction(20)


@dataclass
class WsiRecord:
    wsi_id: str
    patient_id: str
    label: str
    grid_w: int
    grid_h: int
    patch_px: int = 256
    magnification: Fraction = Fraction(20)
    cells: Optional[List[Tuple[int, int]]] = None  # sparse tissue; None = full grid

    @property
    def patches(self) -> List[PatchRef]:
        if self.cells is not None:
            coords: Iterable[Tuple[int, int]] = self.cells
        else:
            coords = ((x, y) for y in range(self.grid_h) for x in range(self.grid_w))
        return [PatchRef(self.wsi_id, x, y, self.patch_px, self.magnification) for x, y in coords]

    @property
    def patch_count(self) -> int:
        return len(self.cells) if self.cells is not None else self.grid_w * self.grid_h


@dataclass
class ArchiveManifest:
    records: List[WsiRecord]
    classes: List[str]
    feature_dim: int
    feature_store: Path

    def record(self, wsi_id: str) -> WsiRecord:
        for rec in self.records:
            if rec.wsi_id == wsi_id:
                return rec
        raise KeyError(wsi_id)

    @property
    def wsi_ids(self) -> List[str]:
        return [r.wsi_id for r in self.records]

    def feature_path(self, wsi_id: str) -> Path:
        return self.feature_store / f"{wsi_id}{FEATURE_SUFFIX}"

    def to_json(self) -> dict:
        wsis = []
        for r in self.records:
            entry = {
                "wsi_id": r.wsi_id,
                "patient_id": r.patient_id,
                "label": r.label,
                "grid_w": r.grid_w,
                "grid_h": r.grid_h,
                "patch_px": r.patch_px,
                "magnification": _format_mag(r.magnification),
            }
            if r.cells is not None:
                entry["patches"] = [list(c) for c in r.cells]
            wsis.append(entry)
        return {"classes": list(self.classes), "feature_dim": self.feature_dim, "wsis": wsis}


@dataclass
class WsiFeatures:
    """Everything stored for one WSI, in patch order."""

    wsi_id: str
    coords: np.ndarray  # (N, 2) uint32 grid_x, grid_y
    features: np.ndarray  # (N, d) float32
    stain: Optional[np.ndarray] = None  # (N, bins) float32

    def __len__(self) -> int:
        return len(self.coords)

    def as_dict(self, record: Optional[WsiRecord] = None) -> Dict[PatchRef, np.ndarray]:
        px = record.patch_px if record else 256
        mag = record.magnification if record else Fraction(20)
        return {
            PatchRef(self.wsi_id, int(x), int(y), px, mag): self.features[i]
            for i, (x, y) in enumerate(self.coords)
        }


@dataclass
class SynthSpec:
    num_classes: int = 3
    wsis_per_class: int = 30
    patients_per_class: int = 10
    grid_w: int = 50
    grid_h: int = 40
    class_separation: float = 10.0
    noise_sigma: float = 1.0
    seed: int = 0
    feature_dim: int = 128
    stain_bins: int = 16  # per channel


def _format_mag(m: Fraction) -> str:
    return str(m.numerator) if m.denominator == 1 else f"{m.numerator}/{m.denominator}"


def _parse_mag(value, where: str) -> Fraction:
    try:
        text = str(value).strip().lower().rstrip("x")
        mag = Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ManifestError(f"{where}: bad magnification {value!r}") from exc
    if mag <= 0:
        raise ManifestError(f"{where}: magnification must be positive")
    return mag


def _require_int(entry: dict, key: str, where: str, minimum: int = 0) -> int:
    if key not in entry:
        raise ManifestError(f"{where}: missing field {key!r}")
    value = entry[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ManifestError(f"{where}: field {key!r} must be an integer >= {minimum}, got {value!r}")
    return value


def parse_manifest(data: dict, feature_store: Path) -> ArchiveManifest:
    if not isinstance(data, dict):
        raise ManifestError("manifest: top level must be an object")
    for key in ("classes", "feature_dim", "wsis"):
        if key not in data:
            raise ManifestError(f"manifest: missing top-level field {key!r}")
    classes = data["classes"]
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise ManifestError("manifest: 'classes' must be a list of strings")
    if len(set(classes)) != len(classes):
        raise ManifestError("manifest: duplicate class names")
    feature_dim = _require_int(data, "feature_dim", "manifest", minimum=1)
    class_set = set(classes)
    records: List[WsiRecord] = []
    seen: Dict[str, int] = {}
    for i, entry in enumerate(data["wsis"]):
        where = f"wsis[{i}]"
        if not isinstance(entry, dict):
            raise ManifestError(f"{where}: must be an object")
        wsi_id = entry.get("wsi_id")
        if not isinstance(wsi_id, str) or not wsi_id or "/" in wsi_id or "\\" in wsi_id:
            raise ManifestError(f"{where}: invalid wsi_id {wsi_id!r}")
        where = f"wsis[{i}] (wsi_id={wsi_id})"
        if wsi_id in seen:
            raise ManifestError(f"{where}: duplicate wsi_id {wsi_id!r} (first at wsis[{seen[wsi_id]}])")
        seen[wsi_id] = i
        label = entry.get("label")
        if label not in class_set:
            raise ManifestError(f"{where}: unknown label {label!r} not in class set")
        patient = entry.get("patient_id")
        if not isinstance(patient, str) or not patient:
            raise ManifestError(f"{where}: invalid patient_id {patient!r}")
        cells = None
        if "patches" in entry:
            try:
                cells = [(int(x), int(y)) for x, y in entry["patches"]]
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{where}: 'patches' must be a list of [x, y] pairs") from exc
            if len(set(cells)) != len(cells):
                raise ManifestError(f"{where}: duplicate patch coordinates")
        records.append(
            WsiRecord(
                wsi_id=wsi_id,
                patient_id=patient,
                label=label,
                grid_w=_require_int(entry, "grid_w", where),
                grid_h=_require_int(entry, "grid_h", where),
                patch_px=_require_int(entry, "patch_px", where, minimum=1) if "patch_px" in entry else 256,
                magnification=_parse_mag(entry.get("magnification", 20), where),
                cells=cells,
            )
        )
    return ArchiveManifest(records, list(classes), feature_dim, feature_store)


def load_manifest(path) -> ArchiveManifest:
    """Load a manifest from a JSON file or from an archive directory containing one."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    store = data.get("feature_store", FEATURE_DIR) if isinstance(data, dict) else FEATURE_DIR
    return parse_manifest(data, path.parent / store)


def write_manifest(manifest: ArchiveManifest, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def encode_feature_file(coords: np.ndarray, features: np.ndarray, stain: Optional[np.ndarray] = None) -> bytes:
    n, d = features.shape
    bins = 0 if stain is None else stain.shape[1]
    rec = np.dtype([("x", "<u4"), ("y", "<u4"), ("f", "<f4", (d,))] + ([("s", "<f4", (bins,))] if bins else []))
    body = np.zeros(n, dtype=rec)
    body["x"] = coords[:, 0]
    body["y"] = coords[:, 1]
    body["f"] = features
    if bins:
        body["s"] = stain
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d, bins) + body.tobytes()


def decode_feature_file(wsi_id: str, blob: bytes, feature_dim: Optional[int] = None) -> WsiFeatures:
    if len(blob) < _HEADER.size:
        raise FeatureStoreError(wsi_id, "truncated header")
    magic, version, n, d, bins = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureStoreError(wsi_id, f"bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureStoreError(wsi_id, f"unsupported version {version}")
    if feature_dim is not None and d != feature_dim:
        raise DimensionMismatchError(wsi_id, f"feature_dim {d} != manifest feature_dim {feature_dim}")
    rec = np.dtype([("x", "<u4"), ("y", "<u4"), ("f", "<f4", (d,))] + ([("s", "<f4", (bins,))] if bins else []))
    if len(blob) != _HEADER.size + n * rec.itemsize:
        raise FeatureStoreError(wsi_id, f"size mismatch: expected {n} records of {rec.itemsize} bytes")
    body = np.frombuffer(blob, dtype=rec, offset=_HEADER.size, count=n)
    coords = np.stack([body["x"], body["y"]], axis=1).astype(np.uint32)
    feats = np.array(body["f"], dtype=np.float32).reshape(n, d)
    stain = np.array(body["s"], dtype=np.float32).reshape(n, bins) if bins else None
    if not np.isfinite(feats).all() or (stain is not None and not np.isfinite(stain).all()):
        raise NonFiniteFeatureError(wsi_id, "non-finite value in feature store")
    return WsiFeatures(wsi_id, coords, feats, stain)


def load_features(manifest: ArchiveManifest, wsi_id: str) -> WsiFeatures:
    """Read one WSI's stored vectors.  Raises a FeatureStoreError subclass on any problem."""
    path = manifest.feature_path(wsi_id)
    if not path.is_file():
        raise MissingWsiError(wsi_id, f"no feature file at {path}")
    feats = decode_feature_file(wsi_id, path.read_bytes(), manifest.feature_dim)
    try:
        rec = manifest.record(wsi_id)
    except KeyError:
        return feats
    if rec.cells is not None or rec.grid_w * rec.grid_h:
        expected = {(p.grid_x, p.grid_y) for p in rec.patches}
        got = {(int(x), int(y)) for x, y in feats.coords}
        if len(got) != len(feats.coords):
            raise FeatureStoreError(wsi_id, "duplicate patch coordinates in feature store")
        if not got <= expected:
            raise FeatureStoreError(wsi_id, "feature store holds patches outside the manifest grid")
    return feats


def _class_centroids(rng: np.random.Generator, num_classes: int, dim: int, separation: float) -> np.ndarray:
    # Orthonormal directions scaled so every pair of centroids is exactly `separation` apart.
    if num_classes > dim:
        raise ValueError("num_classes must not exceed feature_dim")
    q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    return q.T * (separation / math.sqrt(2.0))


def generate_synthetic_archive(spec: SynthSpec, out) -> ArchiveManifest:
    """Write a deterministic synthetic archive (manifest + feature store) under `out`."""
    if min(spec.num_classes, spec.wsis_per_class, spec.patients_per_class) < 1:
        raise ValueError("class, WSI and patient counts must be positive")
    if spec.wsis_per_class < spec.patients_per_class:
        raise ValueError("wsis_per_class must be >= patients_per_class")
    if spec.grid_w * spec.grid_h < 1:
        raise ValueError("grid must contain at least one patch")
    if spec.class_separation < 0 or spec.noise_sigma < 0:
        raise ValueError("class_separation and noise_sigma must be non-negative")
    out = Path(out)
    store = out / FEATURE_DIR
    store.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    d, bins = spec.feature_dim, spec.stain_bins
    centroids = _class_centroids(rng, spec.num_classes, d, spec.class_separation)
    # per-class Dirichlet base measure for each of the 3 channels
    stain_base = rng.gamma(2.0, 1.0, size=(spec.num_classes, 3, bins)) + 0.05

    classes = [f"C{c}" for c in range(spec.num_classes)]
    xs, ys = np.meshgrid(np.arange(spec.grid_w), np.arange(spec.grid_h))
    coords = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.uint32)
    n = len(coords)
    records = []
    for c in range(spec.num_classes):
        for w in range(spec.wsis_per_class):
            wsi_id = f"{classes[c]}_W{w:03d}"
            patient = f"{classes[c]}_P{w % spec.patients_per_class:03d}"
            noise = rng.standard_normal((n, d)) * (spec.noise_sigma / math.sqrt(d))
            feats = (centroids[c] + noise).astype(np.float32)
            stain = np.concatenate(
                [rng.dirichlet(20.0 * stain_base[c, ch] / stain_base[c, ch].sum(), size=n) for ch in range(3)],
                axis=1,
            ) / 3.0
            (store / f"{wsi_id}{FEATURE_SUFFIX}").write_bytes(
                encode_feature_file(coords, feats, stain.astype(np.float32))
            )
            records.append(WsiRecord(wsi_id, patient, classes[c], spec.grid_w, spec.grid_h))
    manifest = ArchiveManifest(records, classes, d, store)
    write_manifest(manifest, out / MANIFEST_NAME)
    return manifest


def validate_archive(manifest: ArchiveManifest, check_store: bool = True) -> List[str]:
    """Return every invariant violation found; an empty list means benchmark-ready."""
    problems: List[str] = []
    if len(manifest.classes) < 2:
        problems.append(f"fewer than 2 classes ({len(manifest.classes)})")
    if manifest.feature_dim < 1:
        problems.append("feature_dim must be positive")
    seen = set()
    class_set = set(manifest.classes)
    for rec in manifest.records:
        if rec.wsi_id in seen:
            problems.append(f"{rec.wsi_id}: duplicate wsi_id")
        seen.add(rec.wsi_id)
        if rec.label not in class_set:
            problems.append(f"{rec.wsi_id}: label {rec.label!r} not in class set")
        if rec.patch_count == 0:
            problems.append(f"{rec.wsi_id}: empty WSI (no patches)")
        if rec.patch_px <= 0:
            problems.append(f"{rec.wsi_id}: patch_px must be positive")
        if check_store and rec.patch_count:
            try:
                load_features(manifest, rec.wsi_id)
            except FeatureStoreError as exc:
                problems.append(str(exc))
    if not manifest.records:
        problems.append("archive has no WSIs")
    return problems


def stable_seed(seed: int, *parts: str) -> List[int]:
    """Seed material for per-item generators that does not depend on processing order."""
    return [seed & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(p.encode("utf-8")) for p in parts]
