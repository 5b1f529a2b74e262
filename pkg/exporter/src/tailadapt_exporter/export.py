"""Export a per-class image folder into a tailadapt TFAE dataset.

Folder layout expected under `image_root`: one subdirectory per class, each
holding the class's image files. Classes are indexed in sorted-name order
and rows within each split follow sorted file paths, so the label indices,
manifest class order and prompt-bank rows are mutually consistent by
construction. Embeddings are written un-normalized; the consumer normalizes
at use.
"""

import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from tailadapt.dataio import (
    MANIFEST_VERSION,
    DatasetManifest,
    EmbeddingSet,
    make_prompt,
    write_embedding_file,
    write_manifest,
    write_tfae,
)
from tailadapt.errors import InvalidConfigError, InvalidDatasetError
from tailadapt.seeding import named_rng

SIDECAR_NAME = "export_log.json"


@dataclass
class ExportSpec:
    encoder: str
    image_root: Path
    data_type: str
    out_dir: Path
    test_ratio: float = 0.2
    balanced_test: bool = True
    seed: int = 0
    many_min: int = 100
    few_max: int = 20

    def __post_init__(self):
        self.image_root = Path(self.image_root)
        self.out_dir = Path(self.out_dir)
        if not 0.0 < self.test_ratio < 1.0:
            raise InvalidConfigError("test_ratio must be in (0, 1)")
        if not self.data_type:
            raise InvalidConfigError("data_type must be non-empty")
        if self.many_min <= self.few_max:
            raise InvalidConfigError("many_min must exceed few_max")
        if self.seed < 0:
            raise InvalidConfigError("seed must be non-negative")


def _scan_classes(root: Path) -> dict[str, list[Path]]:
    if not root.is_dir():
        raise InvalidDatasetError(f"image root {root} is not a directory")
    classes = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith(".")):
        files = sorted(p for p in sub.iterdir() if p.is_file() and not p.name.startswith("."))
        classes[sub.name] = files
    if len(classes) < 2:
        raise InvalidDatasetError(f"need at least 2 class folders under {root}")
    return classes


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.load()
        return True
    except (UnidentifiedImageError, OSError):
        return False


def _split_class(files: list[Path], ratio: float, rng) -> tuple[list[Path], list[Path]]:
    """Deterministic train/test split of one class; both sides stay non-empty."""
    if len(files) < 2:
        raise InvalidDatasetError(
            f"class with {len(files)} decodable image(s) cannot be split"
        )
    n_test = min(len(files) - 1, max(1, round(len(files) * ratio)))
    order = rng.permutation(len(files))
    test = sorted(files[i] for i in order[:n_test])
    train = sorted(files[i] for i in order[n_test:])
    return train, test


def export(spec: ExportSpec) -> Path:
    """Run the frozen encoder pair over the folder; returns the manifest path."""
    encoder = _resolve(spec.encoder)
    classes = _scan_classes(spec.image_root)
    class_names = list(classes)

    skipped = []
    usable = {}
    for name, files in classes.items():
        kept = []
        for path in files:
            if _decodable(path):
                kept.append(path)
            else:
                print(f"warning: skipping undecodable image {path}", file=sys.stderr)
                skipped.append(str(path))
        if not kept:
            raise InvalidDatasetError(f"class {name!r} has no decodable images")
        usable[name] = kept

    splits = {
        name: _split_class(files, spec.test_ratio, named_rng(spec.seed, "split", name))
        for name, files in usable.items()
    }
    if spec.balanced_test:
        floor = min(len(test) for _, test in splits.values())
        splits = {name: (train, test[:floor]) for name, (train, test) in splits.items()}

    train_paths, train_labels, test_paths, test_labels = [], [], [], []
    for index, name in enumerate(class_names):
        train, test = splits[name]
        train_paths += train
        train_labels += [index] * len(train)
        test_paths += test
        test_labels += [index] * len(test)

    prompts = [make_prompt(spec.data_type, name) for name in class_names]
    train_feats = encoder.encode_images(train_paths)
    test_feats = encoder.encode_images(test_paths)
    anchor_feats = encoder.encode_texts(prompts)

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    write_embedding_file(
        spec.out_dir / "train.tfae",
        EmbeddingSet(features=train_feats, labels=np.asarray(train_labels)),
    )
    write_embedding_file(
        spec.out_dir / "test.tfae",
        EmbeddingSet(features=test_feats, labels=np.asarray(test_labels)),
    )
    write_tfae(spec.out_dir / "prompt_bank.tfae", anchor_feats.astype(np.float64))

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        dim=encoder.dim,
        data_type=spec.data_type,
        class_names=class_names,
        train_counts=[len(splits[name][0]) for name in class_names],
        prompts=prompts,
        many_min=spec.many_min,
        few_max=spec.few_max,
        train_file="train.tfae",
        test_file="test.tfae",
        bank_file="prompt_bank.tfae",
    )
    manifest_path = spec.out_dir / "manifest.json"
    write_manifest(manifest_path, manifest)

    log = {
        "encoder": spec.encoder,
        "dim": encoder.dim,
        "num_skipped": len(skipped),
        "skipped": sorted(skipped),
        "num_train": len(train_paths),
        "num_test": len(test_paths),
    }
    (spec.out_dir / SIDECAR_NAME).write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest_path


def _resolve(identifier: str):
    from .encoders import resolve_encoder

    return resolve_encoder(identifier)
