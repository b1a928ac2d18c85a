"""Synthetic dataset generation and bit-exact on-disk formats.

Three formats live here. Feature files: magic "RTFM", u8 version, u32
little-endian T and D, then T*D float32 little-endian values row-major.
Checkpoints: magic "RTFMCKPT", u8 version, u32 array count, then per
array a u32 name length, UTF-8 name, u32 rank, u32 extents, and float64
little-endian values row-major. Manifests: a text header line declaring
T and D, then one tab-separated record per video (id, relative path,
label, optional comma-joined per-snippet labels).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"RTFM"
FEATURE_VERSION = 1
FEATURE_HEADER_BYTES = 13
CHECKPOINT_MAGIC = b"RTFMCKPT"
CHECKPOINT_VERSION = 1
MANIFEST_PREFIX = "#rtfm-manifest v1"


class FormatError(ValueError):
    """Malformed binary file; the message cites the failing byte offset."""


class ManifestError(ValueError):
    """Malformed or internally inconsistent manifest."""


# ---------------------------------------------------------------------------
# feature files

def write_features(path, matrix):
    """Write a (T, D) matrix as float32; values must be finite."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"write_features: need a 2-d matrix, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("write_features: non-finite values")
    t, d = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<BII", FEATURE_VERSION, t, d))
        fh.write(payload)


def read_features(path):
    """Read a feature file back as a float32 (T, D) array."""
    raw = Path(path).read_bytes()
    if len(raw) < FEATURE_HEADER_BYTES:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(raw)}")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    version, t, d = struct.unpack_from("<BII", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    expected = FEATURE_HEADER_BYTES + 4 * t * d
    if len(raw) != expected:
        raise FormatError(f"{path}: payload for {t}x{d} should end at byte "
                          f"{expected}, file ends at byte {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=FEATURE_HEADER_BYTES)
    return data.reshape(t, d).copy()


def probe_features_header(path):
    """Read only (T, D) from a feature file header."""
    with open(path, "rb") as fh:
        raw = fh.read(FEATURE_HEADER_BYTES)
    if len(raw) < FEATURE_HEADER_BYTES:
        raise FormatError(f"{path}: truncated header, file ends at byte {len(raw)}")
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r} at byte 0")
    version, t, d = struct.unpack_from("<BII", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    return t, d


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, arrays):
    """Write an ordered name -> array mapping as float64."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(arrays)))
        for name, values in arrays.items():
            values = np.asarray(values, dtype=np.float64)
            if not np.all(np.isfinite(values)):
                raise ValueError(f"save_checkpoint: non-finite values in {name!r}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.ndim))
            for extent in values.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered name -> float64 array dict."""
    raw = Path(path).read_bytes()
    offset = 0

    def need(n, what):
        nonlocal offset
        if offset + n > len(raw):
            raise FormatError(f"{path}: truncated {what} at byte {offset}, "
                              f"file ends at byte {len(raw)}")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    if need(8, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version, count = struct.unpack("<BI", need(5, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 8")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", need(4, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", need(4, "rank"))
        shape = tuple(struct.unpack(f"<{rank}I", need(4 * rank, "extents")))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(need(8 * n_values, f"values of {name!r}"), dtype="<f8")
        arrays[name] = data.reshape(shape).copy()
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes at "
                          f"byte {offset}")
    return arrays


# ---------------------------------------------------------------------------
# manifests and videos

@dataclass
class ManifestEntry:
    video_id: str
    path: str
    label: int
    snippet_labels: np.ndarray | None = None


@dataclass
class DatasetManifest:
    t: int
    d: int
    entries: list = field(default_factory=list)


@dataclass
class LabeledVideo:
    video_id: str
    features: np.ndarray
    label: int
    snippet_labels: np.ndarray | None = None


def write_manifest(path, manifest):
    lines = [f"{MANIFEST_PREFIX} T={manifest.t} D={manifest.d}"]
    for e in manifest.entries:
        fields = [e.video_id, e.path, str(int(e.label))]
        if e.snippet_labels is not None:
            fields.append(",".join(str(int(v)) for v in e.snippet_labels))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    """Parse and validate a manifest; probes every referenced feature
    file's header and reports all T/D offenders at once."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_PREFIX):
        raise ManifestError(f"{path}: missing header line {MANIFEST_PREFIX!r}")
    try:
        parts = dict(p.split("=", 1) for p in lines[0].split()[2:])
        t, d = int(parts["T"]), int(parts["D"])
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: unparseable header {lines[0]!r}") from exc

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 fields, "
                                f"got {len(fields)}")
        video_id, rel, label = fields[0], fields[1], fields[2]
        if label not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: label {label!r} not in {{0,1}}")
        snippet_labels = None
        if len(fields) == 4:
            values = [v for v in fields[3].split(",") if v != ""]
            if any(v not in ("0", "1") for v in values):
                raise ManifestError(f"{path}:{lineno}: snippet labels must be 0/1")
            snippet_labels = np.array([int(v) for v in values], dtype=np.int64)
            if len(snippet_labels) != t:
                raise ManifestError(f"{path}:{lineno}: {len(snippet_labels)} "
                                    f"snippet labels, manifest declares T={t}")
        entries.append(ManifestEntry(video_id, rel, int(label), snippet_labels))

    offenders = []
    for e in entries:
        ft, fd = probe_features_header(path.parent / e.path)
        if (ft, fd) != (t, d):
            offenders.append(f"{e.video_id}: file is {ft}x{fd}")
    if offenders:
        raise ManifestError(f"{path}: entries disagree with declared "
                            f"{t}x{d}: " + "; ".join(offenders))
    return DatasetManifest(t=t, d=d, entries=entries)


def load_dataset(manifest_path):
    """Read a manifest and all referenced features as LabeledVideo list."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    videos = []
    for e in manifest.entries:
        features = read_features(manifest_path.parent / e.path).astype(np.float64)
        videos.append(LabeledVideo(e.video_id, features, e.label,
                                   e.snippet_labels))
    return videos


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SyntheticSpec:
    """Controls for the separable synthetic corpus.

    Every snippet draws per-component Gaussian base features. In each
    abnormal video a contiguous window of mu snippets additionally gets
    perturbation_magnitude times a unit direction (default: normalized
    all-ones) plus optional extra iid noise, which raises the expected
    feature norm of exactly those snippets.
    """

    n_normal: int
    n_abnormal: int
    t: int = 32
    d: int = 64
    mu: int = 3
    base_mean: float = 0.0
    base_std: float = 0.5
    perturbation_magnitude: float = 8.0
    perturbation_direction: tuple | None = None
    noise_std: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise ValueError("SyntheticSpec: negative video counts")
        if not 1 <= self.mu <= self.t:
            raise ValueError(f"SyntheticSpec: mu={self.mu} outside [1, T={self.t}]")
        if self.perturbation_magnitude < 0:
            raise ValueError("SyntheticSpec: perturbation_magnitude < 0")
        if self.base_std < 0 or self.noise_std < 0:
            raise ValueError("SyntheticSpec: negative stddev")
        if self.perturbation_direction is not None:
            direction = np.asarray(self.perturbation_direction, dtype=float)
            if direction.shape != (self.d,):
                raise ValueError(f"SyntheticSpec: direction shape "
                                 f"{direction.shape}, expected ({self.d},)")
            if not np.linalg.norm(direction) > 0:
                raise ValueError("SyntheticSpec: zero direction vector")
            object.__setattr__(self, "perturbation_direction",
                               tuple(float(v) for v in direction))

    def unit_direction(self):
        if self.perturbation_direction is None:
            v = np.ones(self.d)
        else:
            v = np.asarray(self.perturbation_direction, dtype=float)
        return v / np.linalg.norm(v)


def generate_synthetic_dataset(spec, out_dir):
    """Write feature files plus manifest.txt under out_dir; returns the
    manifest. Per-snippet ground truth is recorded for every video
    (all zeros for normal ones)."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.rng_seed)
    direction = spec.unit_direction()
    entries = []

    def emit(video_id, features, label, snippet_labels):
        rel = f"features/{video_id}.rtfm"
        write_features(out_dir / rel, features.astype(np.float32))
        entries.append(ManifestEntry(video_id, rel, label, snippet_labels))

    for i in range(spec.n_normal):
        features = rng.normal(spec.base_mean, spec.base_std, size=(spec.t, spec.d))
        emit(f"normal_{i:04d}", features, 0, np.zeros(spec.t, dtype=np.int64))
    for i in range(spec.n_abnormal):
        features = rng.normal(spec.base_mean, spec.base_std, size=(spec.t, spec.d))
        start = int(rng.integers(0, spec.t - spec.mu + 1))
        window = slice(start, start + spec.mu)
        features[window] += spec.perturbation_magnitude * direction
        if spec.noise_std > 0:
            features[window] += rng.normal(0.0, spec.noise_std,
                                           size=(spec.mu, spec.d))
        labels = np.zeros(spec.t, dtype=np.int64)
        labels[window] = 1
        emit(f"abnormal_{i:04d}", features, 1, labels)

    manifest = DatasetManifest(t=spec.t, d=spec.d, entries=entries)
    write_manifest(out_dir / "manifest.txt", manifest)
    return manifest
