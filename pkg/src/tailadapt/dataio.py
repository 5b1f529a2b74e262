"""Embedding file format, dataset manifest, prompts, and the synthetic benchmark.

TFAE binary layout (little-endian throughout):

    offset  size  field
    0       4     magic b"TFAE"
    4       4     u32 version (currently 1)
    8       4     u32 flags: bit0 = has_labels, bits1-7 = dtype code
    12      8     u64 rows
    20      8     u64 cols
    28      ...   rows*cols payload floats, row-major
                  (dtype code 0 = float32, 1 = float64)
    ...     ...   rows u32 labels, present iff bit0 set

Dataset embedding files are always float32 (dtype code 0) and are widened
to float64 on load; checkpoint parameter files use dtype code 1 so that
trained weights round-trip bit-exactly.

The manifest is a JSON document recording dims, per-class names / prompts /
train counts, subset thresholds and the three data file names (resolved
relative to the manifest's directory). It is the on-disk contract shared
with external embedding exporters.
"""

import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DegenerateVectorError,
    DtypeMismatchError,
    FormatError,
    InvalidArgumentError,
    InvalidConfigError,
    InvalidDatasetError,
    LabelRangeError,
    ManifestError,
    TruncatedPayloadError,
    UnsupportedFlagsError,
    UnsupportedVersionError,
)
from .numerics import DEGENERATE_NORM
from .seeding import named_rng

MAGIC = b"TFAE"
FORMAT_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")

DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}

PROMPT_TEMPLATE = "The category of this {data_type} image is {class_name}."


def make_prompt(data_type: str, class_name: str) -> str:
    """Render the fixed sentence template for one class."""
    if not data_type or not class_name:
        raise InvalidArgumentError("data_type and class_name must be non-empty")
    return PROMPT_TEMPLATE.format(data_type=data_type, class_name=class_name)


# ---------------------------------------------------------------------------
# Core containers


@dataclass
class EmbeddingSet:
    """N x d float64 feature matrix with optional integer labels."""

    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise InvalidDatasetError("features must be a 2-D matrix")
        n, d = self.features.shape
        if n < 1 or d < 2:
            raise InvalidDatasetError(f"need N >= 1 and d >= 2, got {n} x {d}")
        if not np.isfinite(self.features).all():
            raise InvalidDatasetError("features contain NaN or Inf")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise InvalidDatasetError("labels length must equal the number of rows")
            if (self.labels < 0).any():
                raise InvalidDatasetError("labels must be non-negative")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check_labels(self, num_classes: int) -> None:
        if self.labels is None:
            raise InvalidDatasetError("this embedding set carries no labels")
        if int(self.labels.max()) >= num_classes:
            raise LabelRangeError(
                f"label {int(self.labels.max())} >= declared class count {num_classes}"
            )


@dataclass
class PromptBank:
    """Per-class text anchors (rows unit-normalized on construction) with prompt provenance."""

    anchors: np.ndarray
    prompts: list[str]
    class_names: list[str]

    def __post_init__(self):
        self.anchors = np.ascontiguousarray(self.anchors, dtype=np.float64)
        if self.anchors.ndim != 2 or self.anchors.shape[0] < 2:
            raise InvalidDatasetError("prompt bank needs a (C >= 2) x d anchor matrix")
        if len(self.prompts) != self.anchors.shape[0] or len(self.class_names) != self.anchors.shape[0]:
            raise InvalidDatasetError("prompts / class_names length must equal anchor rows")
        norms = np.linalg.norm(self.anchors, axis=1)
        if (norms <= DEGENERATE_NORM).any():
            raise DegenerateVectorError("prompt bank contains a near-zero anchor")
        self.anchors = self.anchors / norms[:, None]

    @property
    def num_classes(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]


class Subset(str, Enum):
    MANY = "many"
    MEDIUM = "medium"
    FEW = "few"


def assign_subsets(train_counts, many_min: int, few_max: int) -> list[Subset]:
    """Bucket classes by training count: >= many_min -> MANY, <= few_max -> FEW."""
    out = []
    for count in train_counts:
        if count >= many_min:
            out.append(Subset.MANY)
        elif count <= few_max:
            out.append(Subset.FEW)
        else:
            out.append(Subset.MEDIUM)
    return out


# ---------------------------------------------------------------------------
# TFAE read/write


def write_tfae(path, data: np.ndarray, labels=None, dtype_code: int = DTYPE_F32) -> None:
    """Write one matrix (plus optional labels) in the TFAE layout."""
    if dtype_code not in _DTYPES:
        raise DtypeMismatchError(f"unknown dtype code {dtype_code}")
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise FormatError("TFAE payload must be a 2-D matrix")
    rows, cols = data.shape
    flags = (dtype_code << 1) | (1 if labels is not None else 0)
    blob = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, flags, rows, cols))
    blob += data.astype(_DTYPES[dtype_code]).tobytes(order="C")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (rows,):
            raise FormatError("labels length must equal rows")
        if (labels < 0).any() or (labels > 0xFFFFFFFF).any():
            raise FormatError("labels must fit in u32")
        blob += labels.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_tfae(path) -> tuple[np.ndarray, np.ndarray | None, int]:
    """Read a TFAE file; returns (float64 matrix, labels or None, dtype code)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: shorter than the fixed header")
    magic, version, flags, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version} unsupported")
    has_labels = bool(flags & 1)
    dtype_code = (flags >> 1) & 0x7F
    if flags >> 8:
        raise UnsupportedFlagsError(f"{path}: unknown flag bits 0x{flags:x}")
    if dtype_code not in _DTYPES:
        raise UnsupportedFlagsError(f"{path}: unknown dtype code {dtype_code}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: degenerate shape {rows} x {cols}")
    dt = _DTYPES[dtype_code]
    need = _HEADER.size + rows * cols * dt.itemsize + (rows * 4 if has_labels else 0)
    if len(raw) < need:
        raise TruncatedPayloadError(f"{path}: need {need} bytes, file has {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after payload")
    offset = _HEADER.size
    data = np.frombuffer(raw, dtype=dt, count=rows * cols, offset=offset)
    data = data.reshape(rows, cols).astype(np.float64)
    labels = None
    if has_labels:
        offset += rows * cols * dt.itemsize
        labels = np.frombuffer(raw, dtype="<u4", count=rows, offset=offset).astype(np.int64)
    return data, labels, dtype_code


def write_embedding_file(path, dataset: EmbeddingSet) -> None:
    """Persist an embedding set as float32 TFAE."""
    write_tfae(path, dataset.features, dataset.labels, dtype_code=DTYPE_F32)


def read_embedding_file(path, num_classes: int | None = None) -> EmbeddingSet:
    """Load a float32 TFAE embedding file, widening to float64."""
    data, labels, dtype_code = read_tfae(path)
    if dtype_code != DTYPE_F32:
        raise DtypeMismatchError(f"{path}: embedding files must be float32 (dtype code 0)")
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains NaN or Inf")
    dataset = EmbeddingSet(features=data, labels=labels)
    if num_classes is not None and labels is not None:
        dataset.check_labels(num_classes)
    return dataset


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class DatasetManifest:
    version: int
    dim: int
    data_type: str
    class_names: list[str]
    train_counts: list[int]
    prompts: list[str]
    many_min: int
    few_max: int
    train_file: str
    test_file: str
    bank_file: str
    root: Path | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def _resolve(self, name: str) -> Path:
        if self.root is None:
            raise ManifestError("manifest has no root directory; load or write it first")
        return self.root / name

    @property
    def train_path(self) -> Path:
        return self._resolve(self.train_file)

    @property
    def test_path(self) -> Path:
        return self._resolve(self.test_file)

    @property
    def bank_path(self) -> Path:
        return self._resolve(self.bank_file)

    def subsets(self) -> list[Subset]:
        return assign_subsets(self.train_counts, self.many_min, self.few_max)

    def load_train(self) -> EmbeddingSet:
        return read_embedding_file(self.train_path, num_classes=self.num_classes)

    def load_test(self) -> EmbeddingSet:
        return read_embedding_file(self.test_path, num_classes=self.num_classes)

    def load_bank(self) -> PromptBank:
        anchors, labels, dtype_code = read_tfae(self.bank_path)
        if dtype_code != DTYPE_F32:
            raise DtypeMismatchError(f"{self.bank_path}: prompt bank must be float32")
        if labels is not None:
            raise ManifestError("prompt bank file must not carry labels")
        return PromptBank(anchors=anchors, prompts=list(self.prompts), class_names=list(self.class_names))


def write_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "version": manifest.version,
        "dim": manifest.dim,
        "data_type": manifest.data_type,
        "classes": [
            {"name": n, "train_count": c, "prompt": p}
            for n, c, p in zip(manifest.class_names, manifest.train_counts, manifest.prompts)
        ],
        "subset_thresholds": {"many_min": manifest.many_min, "few_max": manifest.few_max},
        "files": {
            "train": manifest.train_file,
            "test": manifest.test_file,
            "prompt_bank": manifest.bank_file,
        },
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.root = path.parent


def load_manifest(path) -> DatasetManifest:
    """Parse and fully validate a manifest against the files it references."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    try:
        classes = doc["classes"]
        manifest = DatasetManifest(
            version=int(doc["version"]),
            dim=int(doc["dim"]),
            data_type=str(doc["data_type"]),
            class_names=[str(c["name"]) for c in classes],
            train_counts=[int(c["train_count"]) for c in classes],
            prompts=[str(c["prompt"]) for c in classes],
            many_min=int(doc["subset_thresholds"]["many_min"]),
            few_max=int(doc["subset_thresholds"]["few_max"]),
            train_file=str(doc["files"]["train"]),
            test_file=str(doc["files"]["test"]),
            bank_file=str(doc["files"]["prompt_bank"]),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: missing or malformed field ({exc})") from exc

    if manifest.version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: manifest version {manifest.version} unsupported")
    if manifest.num_classes < 2:
        raise ManifestError(f"{path}: need at least 2 classes")
    if manifest.many_min <= manifest.few_max:
        raise ManifestError(
            f"{path}: threshold inversion, many_min={manifest.many_min} <= few_max={manifest.few_max}"
        )
    if any(c < 1 for c in manifest.train_counts):
        raise ManifestError(f"{path}: every train_count must be >= 1")
    for name, prompt in zip(manifest.class_names, manifest.prompts):
        expected = make_prompt(manifest.data_type, name)
        if prompt != expected:
            raise ManifestError(f"{path}: prompt for {name!r} does not follow the template")

    for file_field in (manifest.train_path, manifest.test_path, manifest.bank_path):
        if not file_field.exists():
            raise ManifestError(f"{path}: referenced file missing: {file_field}")

    train = manifest.load_train()
    test = manifest.load_test()
    bank = manifest.load_bank()
    for label, got in (("train", train.dim), ("test", test.dim), ("prompt bank", bank.dim)):
        if got != manifest.dim:
            raise ManifestError(f"{path}: {label} dim {got} != manifest dim {manifest.dim}")
    if bank.num_classes != manifest.num_classes:
        raise ManifestError(
            f"{path}: prompt bank rows {bank.num_classes} != class count {manifest.num_classes}"
        )
    if train.labels is None or test.labels is None:
        raise ManifestError(f"{path}: train and test files must carry labels")
    actual = np.bincount(train.labels, minlength=manifest.num_classes).tolist()
    if actual != manifest.train_counts:
        raise ManifestError(f"{path}: manifest train_counts {manifest.train_counts} != file counts {actual}")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic long-tailed benchmark


@dataclass
class SynthConfig:
    """Desk-scale long-tailed generator: orthonormal class anchors, geometric
    head-to-tail train counts, a fixed well-conditioned linear distortion of
    every embedding, and an exactly balanced test set."""

    num_classes: int = 10
    dim: int = 64
    head_count: int = 500
    tail_count: int = 5
    noise_sigma: float = 0.05
    test_per_class: int = 100
    distortion_seed: int = 0
    sample_seed: int = 1
    data_type: str = "synthetic"
    many_min: int = 100
    few_max: int = 20

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidConfigError("need at least 2 classes")
        if self.dim < self.num_classes:
            raise InvalidConfigError(
                f"dim {self.dim} < num_classes {self.num_classes}: orthonormal anchors impossible"
            )
        if not self.head_count >= self.tail_count >= 1:
            raise InvalidConfigError("need head_count >= tail_count >= 1")
        if self.noise_sigma < 0.0:
            raise InvalidConfigError("noise_sigma must be non-negative")
        if self.test_per_class < 1:
            raise InvalidConfigError("test_per_class must be >= 1")
        if self.many_min <= self.few_max:
            raise InvalidConfigError("many_min must exceed few_max")
        if not self.data_type:
            raise InvalidConfigError("data_type must be non-empty")

    @property
    def decay(self) -> float:
        """Per-class geometric ratio implied by the endpoints."""
        if self.num_classes == 1 or self.head_count == self.tail_count:
            return 1.0
        return (self.tail_count / self.head_count) ** (1.0 / (self.num_classes - 1))

    def train_counts(self) -> list[int]:
        ratio = self.decay
        counts = [
            max(self.tail_count, round(self.head_count * ratio**k))
            for k in range(self.num_classes)
        ]
        counts[0] = self.head_count
        counts[-1] = self.tail_count
        return counts


def _random_orthonormal(rng: np.random.Generator, dim: int) -> np.ndarray:
    gauss = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    return q * np.sign(np.diag(r))


def synth_generate(cfg: SynthConfig):
    """Build (train, test, bank, manifest) fully determined by the config seeds."""
    rng_distort = named_rng(cfg.distortion_seed, "distortion")
    rng_sample = named_rng(cfg.sample_seed, "sample")

    basis = _random_orthonormal(rng_distort, cfg.dim)
    anchors = basis[: cfg.num_classes].copy()
    rotation = _random_orthonormal(rng_distort, cfg.dim)
    scales = rng_distort.uniform(0.5, 2.0, size=cfg.dim)
    distortion = rotation @ np.diag(scales)

    counts = cfg.train_counts()
    train_labels = np.concatenate(
        [np.full(n, c, dtype=np.int64) for c, n in enumerate(counts)]
    )
    noise = rng_sample.standard_normal((len(train_labels), cfg.dim)) * cfg.noise_sigma
    train_feats = (anchors[train_labels] + noise) @ distortion.T

    test_labels = np.repeat(np.arange(cfg.num_classes, dtype=np.int64), cfg.test_per_class)
    test_noise = rng_sample.standard_normal((len(test_labels), cfg.dim)) * cfg.noise_sigma
    test_feats = (anchors[test_labels] + test_noise) @ distortion.T

    class_names = [f"class{c}" for c in range(cfg.num_classes)]
    prompts = [make_prompt(cfg.data_type, name) for name in class_names]

    train = EmbeddingSet(features=train_feats, labels=train_labels)
    test = EmbeddingSet(features=test_feats, labels=test_labels)
    bank = PromptBank(anchors=anchors, prompts=prompts, class_names=class_names)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        dim=cfg.dim,
        data_type=cfg.data_type,
        class_names=class_names,
        train_counts=counts,
        prompts=prompts,
        many_min=cfg.many_min,
        few_max=cfg.few_max,
        train_file="train.tfae",
        test_file="test.tfae",
        bank_file="prompt_bank.tfae",
    )
    return train, test, bank, manifest


def write_dataset(out_dir, train: EmbeddingSet, test: EmbeddingSet, bank: PromptBank,
                  manifest: DatasetManifest) -> Path:
    """Write the three TFAE files plus manifest.json into out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_embedding_file(out_dir / manifest.train_file, train)
    write_embedding_file(out_dir / manifest.test_file, test)
    write_tfae(out_dir / manifest.bank_file, bank.anchors, labels=None, dtype_code=DTYPE_F32)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, manifest)
    return manifest_path
