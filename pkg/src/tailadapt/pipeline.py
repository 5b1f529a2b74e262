"""Two-stage training orchestration and checkpoint persistence.

Stage I trains one residual adapter per re-balanced view of the training set
(WRS stream redrawn each epoch, or a fixed RUS subset reshuffled each epoch;
"none" trains on the raw long-tailed order for ablations). Stage II freezes
both adapters, precomputes their features and logits over the original
un-resampled training set, and fits only the ensembler under focal loss.

A checkpoint is a directory: parameter matrices in float64 TFAE files plus a
metadata.json carrying scalars, member-file hashes and (for stage II)
content-hash references to both stage-I checkpoints. Nothing in a checkpoint
depends on wall-clock time or absolute paths, so identical seeds reproduce
identical bytes.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    DTYPE_F64,
    DatasetManifest,
    EmbeddingSet,
    PromptBank,
    read_tfae,
    write_tfae,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    DanglingReferenceError,
    DivergenceError,
    DtypeMismatchError,
    HashMismatchError,
    InvalidConfigError,
)
from .metrics import EvalReport, confusion, report
from .model import (
    AdapterParams,
    EnsemblerParams,
    HeadConfig,
    branch_logits_batch,
    ensemble_logits_batch,
    init_adapter,
    init_ensembler,
    probe_logits_batch,
    stage1_backward_batch,
    stage2_backward_batch,
    zero_shot_logits_batch,
)
from .optim import SgdHyper, SgdState, cosine_lr, sgd_step
from .sampling import SAMPLER_KINDS, rus_select, wrs_stream
from .seeding import derive_seed, named_rng

LOSS_ABORT = 1e6
METADATA_NAME = "metadata.json"


@dataclass
class RunConfig:
    batch_size: int = 128
    epochs_stage1: int = 200
    epochs_stage2: int = 100
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta_min: float = 0.0
    tau: float = 0.01
    gamma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise InvalidConfigError("epoch counts must be >= 0")
        if self.gamma < 0.0:
            raise InvalidConfigError("gamma must be >= 0")
        if self.seed < 0:
            raise InvalidConfigError("seed must be >= 0")

    def hyper(self, total_epochs: int) -> SgdHyper:
        return SgdHyper(
            lr0=self.lr0,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            eta_min=self.eta_min,
            total_steps=max(1, total_epochs),
        )

    def head(self) -> HeadConfig:
        return HeadConfig(tau=self.tau)


@dataclass
class Stage1Checkpoint:
    adapter: AdapterParams
    sampler_kind: str
    head: HeadConfig
    epochs: int
    seed: int
    final_loss: float | None
    num_classes: int
    epoch_losses: list[float] = field(default_factory=list)
    source_path: Path | None = None

    def content_hash(self) -> str:
        return _adapter_hash(self.adapter)


@dataclass
class Stage2Checkpoint:
    ensembler: EnsemblerParams
    gamma: float
    head: HeadConfig
    epochs: int
    seed: int
    final_loss: float | None
    num_classes: int
    dim: int
    wrs_hash: str
    rus_hash: str
    epoch_losses: list[float] = field(default_factory=list)
    ckpt_w: Stage1Checkpoint | None = None
    ckpt_r: Stage1Checkpoint | None = None
    source_path: Path | None = None


@dataclass
class ProbeCheckpoint:
    weight: np.ndarray
    bias: np.ndarray
    epochs: int
    seed: int
    source_path: Path | None = None


def _adapter_hash(adapter: AdapterParams) -> str:
    h = hashlib.sha256()
    h.update(adapter.weight.astype("<f8").tobytes(order="C"))
    h.update(struct.pack("<d", adapter.gate))
    return h.hexdigest()


def _finite_or_raise(loss: float, epoch: int, stage: str) -> None:
    if not np.isfinite(loss) or abs(loss) > LOSS_ABORT:
        raise DivergenceError(f"{stage} loss diverged ({loss}) at epoch {epoch}", epoch=epoch)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# Stage I


def train_stage1(manifest: DatasetManifest, sampler_kind: str, cfg: RunConfig) -> Stage1Checkpoint:
    """Train one adapter branch on the re-balanced training stream."""
    if sampler_kind not in SAMPLER_KINDS:
        raise ConfigurationError(f"unknown sampler kind {sampler_kind!r}")
    train = manifest.load_train()
    bank = manifest.load_bank()
    head = cfg.head()
    num_classes = manifest.num_classes
    n = train.num_samples

    adapter = init_adapter(train.dim, named_rng(cfg.seed, "init", sampler_kind))
    params = {"weight": adapter.weight, "gate": np.float64(adapter.gate)}
    state = SgdState.init_like(params)
    hyper = cfg.hyper(cfg.epochs_stage1)
    rng_shuffle = named_rng(cfg.seed, "shuffle", sampler_kind)

    rus_subset = None
    if sampler_kind == "rus":
        rus_subset = rus_select(train, derive_seed(cfg.seed, "sampler", "rus"), num_classes)

    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs_stage1):
        lr = cosine_lr(epoch, hyper)
        if sampler_kind == "wrs":
            order = wrs_stream(
                train, n, derive_seed(cfg.seed, "sampler", "wrs", str(epoch)), num_classes
            )
        elif sampler_kind == "rus":
            order = rng_shuffle.permutation(rus_subset)
        else:
            order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(order, cfg.batch_size):
            current = AdapterParams(weight=params["weight"], gate=float(params["gate"]))
            loss, grads = stage1_backward_batch(
                current, bank, train.features[idx], train.labels[idx], head
            )
            _finite_or_raise(loss, epoch, "stage1")
            sgd_step(
                params,
                {"weight": grads.adapter_weight, "gate": np.float64(grads.adapter_gate)},
                state, hyper, lr,
            )
            epoch_loss += loss
            n_batches += 1
        epoch_losses.append(epoch_loss / n_batches)

    return Stage1Checkpoint(
        adapter=AdapterParams(weight=params["weight"], gate=float(params["gate"])),
        sampler_kind=sampler_kind,
        head=head,
        epochs=cfg.epochs_stage1,
        seed=cfg.seed,
        final_loss=epoch_losses[-1] if epoch_losses else None,
        num_classes=num_classes,
        epoch_losses=epoch_losses,
    )


# ---------------------------------------------------------------------------
# Stage II


def train_stage2(ckpt_w: Stage1Checkpoint, ckpt_r: Stage1Checkpoint, mode: str,
                 manifest: DatasetManifest, cfg: RunConfig) -> Stage2Checkpoint:
    """Fit the ensembler over both frozen branches on the un-resampled training set."""
    if ckpt_w.sampler_kind != "wrs" or ckpt_r.sampler_kind != "rus":
        raise ConfigurationError(
            f"stage II needs one WRS and one RUS checkpoint, got "
            f"({ckpt_w.sampler_kind!r}, {ckpt_r.sampler_kind!r})"
        )
    if ckpt_w.adapter.dim != ckpt_r.adapter.dim:
        raise ConfigurationError("branch checkpoints disagree on feature dim")
    if ckpt_w.head.tau != ckpt_r.head.tau:
        raise ConfigurationError("branch checkpoints disagree on tau")

    train = manifest.load_train()
    bank = manifest.load_bank()
    head = ckpt_w.head
    frozen_before = (_adapter_hash(ckpt_w.adapter), _adapter_hash(ckpt_r.adapter))

    logits_w, feats_w = branch_logits_batch(ckpt_w.adapter, bank, train.features, head)
    logits_r, feats_r = branch_logits_batch(ckpt_r.adapter, bank, train.features, head)

    ens = init_ensembler(mode, manifest.num_classes, train.dim)
    params = {"weight": ens.weight, "bias": ens.bias}
    state = SgdState.init_like(params)
    hyper = cfg.hyper(cfg.epochs_stage2)
    rng_shuffle = named_rng(cfg.seed, "shuffle", "stage2")
    n = train.num_samples

    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs_stage2):
        lr = cosine_lr(epoch, hyper)
        order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(order, cfg.batch_size):
            current = EnsemblerParams(mode=mode, weight=params["weight"], bias=params["bias"])
            loss, grads = stage2_backward_batch(
                current, feats_w[idx], feats_r[idx], logits_w[idx], logits_r[idx],
                bank, train.labels[idx], head, cfg.gamma,
            )
            _finite_or_raise(loss, epoch, "stage2")
            sgd_step(
                params,
                {"weight": grads.ensembler_weight, "bias": grads.ensembler_bias},
                state, hyper, lr,
            )
            epoch_loss += loss
            n_batches += 1
        epoch_losses.append(epoch_loss / n_batches)

    frozen_after = (_adapter_hash(ckpt_w.adapter), _adapter_hash(ckpt_r.adapter))
    if frozen_before != frozen_after:
        raise ConfigurationError("stage II mutated a frozen adapter")

    return Stage2Checkpoint(
        ensembler=EnsemblerParams(mode=mode, weight=params["weight"], bias=params["bias"]),
        gamma=cfg.gamma,
        head=head,
        epochs=cfg.epochs_stage2,
        seed=cfg.seed,
        final_loss=epoch_losses[-1] if epoch_losses else None,
        num_classes=manifest.num_classes,
        dim=train.dim,
        wrs_hash=frozen_before[0],
        rus_hash=frozen_before[1],
        epoch_losses=epoch_losses,
        ckpt_w=ckpt_w,
        ckpt_r=ckpt_r,
    )


# ---------------------------------------------------------------------------
# Prediction / evaluation


def predict_zero_shot(bank: PromptBank, feats: np.ndarray, head: HeadConfig) -> np.ndarray:
    return zero_shot_logits_batch(bank, feats, head).argmax(axis=1)


def predict_stage1(ckpt: Stage1Checkpoint, bank: PromptBank, feats: np.ndarray) -> np.ndarray:
    logits, _ = branch_logits_batch(ckpt.adapter, bank, feats, ckpt.head)
    return logits.argmax(axis=1)


def predict_stage2(ckpt: Stage2Checkpoint, bank: PromptBank, feats: np.ndarray) -> np.ndarray:
    if ckpt.ckpt_w is None or ckpt.ckpt_r is None:
        raise CheckpointError("stage II checkpoint has no attached branch checkpoints")
    logits_w, feats_w = branch_logits_batch(ckpt.ckpt_w.adapter, bank, feats, ckpt.head)
    logits_r, feats_r = branch_logits_batch(ckpt.ckpt_r.adapter, bank, feats, ckpt.head)
    fused = ensemble_logits_batch(
        ckpt.ensembler, feats_w, feats_r, logits_w, logits_r, bank, ckpt.head
    )
    return fused.argmax(axis=1)


def predict_probe(ckpt: ProbeCheckpoint, feats: np.ndarray) -> np.ndarray:
    return probe_logits_batch(ckpt.weight, ckpt.bias, feats).argmax(axis=1)


def evaluate_predictions(preds: np.ndarray, test: EmbeddingSet,
                         manifest: DatasetManifest) -> EvalReport:
    """Confusion-based EvalReport using the manifest's subset assignment."""
    matrix = confusion(preds, test.labels, manifest.num_classes)
    return report(matrix, manifest.subsets())


# ---------------------------------------------------------------------------
# Checkpoint persistence


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_metadata(directory: Path, doc: dict) -> None:
    (directory / METADATA_NAME).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_member(directory: Path, name: str, matrix: np.ndarray) -> str:
    write_tfae(directory / name, matrix, labels=None, dtype_code=DTYPE_F64)
    return _sha256_file(directory / name)


def _read_member(directory: Path, name: str, expected_hash: str) -> np.ndarray:
    path = directory / name
    if not path.exists():
        raise CheckpointError(f"missing checkpoint member {path}")
    if _sha256_file(path) != expected_hash:
        raise HashMismatchError(f"checkpoint member {path} does not match its stored hash")
    data, labels, dtype_code = read_tfae(path)
    if dtype_code != DTYPE_F64 or labels is not None:
        raise DtypeMismatchError(f"{path}: checkpoint members must be unlabeled float64")
    return data


def save_checkpoint(path, ckpt) -> Path:
    """Write a checkpoint directory; returns its path and records it on the object."""
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(ckpt, Stage1Checkpoint):
        member_hash = _write_member(directory, "adapter.tfae", ckpt.adapter.weight)
        doc = {
            "kind": "stage1",
            "sampler": ckpt.sampler_kind,
            "gate": ckpt.adapter.gate,
            "tau": ckpt.head.tau,
            "epochs": ckpt.epochs,
            "seed": ckpt.seed,
            "final_loss": ckpt.final_loss,
            "dim": ckpt.adapter.dim,
            "num_classes": ckpt.num_classes,
            "files": {"adapter.tfae": member_hash},
            "content_hash": ckpt.content_hash(),
        }
    elif isinstance(ckpt, Stage2Checkpoint):
        if ckpt.ckpt_w is None or ckpt.ckpt_r is None \
                or ckpt.ckpt_w.source_path is None or ckpt.ckpt_r.source_path is None:
            raise CheckpointError(
                "save the two stage-I checkpoints first so stage II can reference them"
            )
        weight_hash = _write_member(directory, "ens_weight.tfae", ckpt.ensembler.weight)
        bias_hash = _write_member(directory, "ens_bias.tfae", ckpt.ensembler.bias[None, :])
        doc = {
            "kind": "stage2",
            "mode": ckpt.ensembler.mode,
            "gamma": ckpt.gamma,
            "tau": ckpt.head.tau,
            "epochs": ckpt.epochs,
            "seed": ckpt.seed,
            "final_loss": ckpt.final_loss,
            "dim": ckpt.dim,
            "num_classes": ckpt.num_classes,
            "files": {"ens_weight.tfae": weight_hash, "ens_bias.tfae": bias_hash},
            "stage1_refs": {
                "wrs": {
                    "path": _relative_ref(ckpt.ckpt_w.source_path, directory),
                    "content_hash": ckpt.wrs_hash,
                },
                "rus": {
                    "path": _relative_ref(ckpt.ckpt_r.source_path, directory),
                    "content_hash": ckpt.rus_hash,
                },
            },
        }
    elif isinstance(ckpt, ProbeCheckpoint):
        weight_hash = _write_member(directory, "weight.tfae", ckpt.weight)
        bias_hash = _write_member(directory, "bias.tfae", ckpt.bias[None, :])
        doc = {
            "kind": "probe",
            "epochs": ckpt.epochs,
            "seed": ckpt.seed,
            "num_classes": ckpt.weight.shape[0],
            "dim": ckpt.weight.shape[1],
            "files": {"weight.tfae": weight_hash, "bias.tfae": bias_hash},
        }
    else:
        raise CheckpointError(f"cannot save object of type {type(ckpt).__name__}")
    _write_metadata(directory, doc)
    ckpt.source_path = directory
    return directory


def _relative_ref(target: Path, base: Path) -> str:
    """Reference path stored POSIX-style, relative to the checkpoint dir when possible."""
    try:
        return Path(os.path.relpath(Path(target).resolve(), Path(base).resolve())).as_posix()
    except ValueError:
        return Path(target).resolve().as_posix()


def load_checkpoint(path):
    """Load any checkpoint directory, verifying hashes and stage-I references."""
    directory = Path(path)
    meta_path = directory / METADATA_NAME
    if not meta_path.exists():
        raise CheckpointError(f"no {METADATA_NAME} in {directory}")
    doc = json.loads(meta_path.read_text(encoding="utf-8"))
    kind = doc.get("kind")
    files = doc.get("files", {})
    if kind == "stage1":
        weight = _read_member(directory, "adapter.tfae", files["adapter.tfae"])
        ckpt = Stage1Checkpoint(
            adapter=AdapterParams(weight=weight, gate=float(doc["gate"])),
            sampler_kind=doc["sampler"],
            head=HeadConfig(tau=float(doc["tau"])),
            epochs=int(doc["epochs"]),
            seed=int(doc["seed"]),
            final_loss=doc["final_loss"],
            num_classes=int(doc["num_classes"]),
            source_path=directory,
        )
        if ckpt.content_hash() != doc["content_hash"]:
            raise HashMismatchError(f"{directory}: adapter content hash mismatch")
        return ckpt
    if kind == "stage2":
        weight = _read_member(directory, "ens_weight.tfae", files["ens_weight.tfae"])
        bias = _read_member(directory, "ens_bias.tfae", files["ens_bias.tfae"])[0]
        refs = doc["stage1_refs"]
        branches = {}
        for name in ("wrs", "rus"):
            ref_path = Path(refs[name]["path"])
            if not ref_path.is_absolute():
                ref_path = directory / ref_path
            if not (ref_path / METADATA_NAME).exists():
                raise DanglingReferenceError(
                    f"{directory}: stage-I reference {ref_path} is missing"
                )
            branch = load_checkpoint(ref_path)
            if branch.content_hash() != refs[name]["content_hash"]:
                raise HashMismatchError(
                    f"{directory}: stage-I reference {ref_path} has a different content hash"
                )
            branches[name] = branch
        return Stage2Checkpoint(
            ensembler=EnsemblerParams(mode=doc["mode"], weight=weight, bias=bias),
            gamma=float(doc["gamma"]),
            head=HeadConfig(tau=float(doc["tau"])),
            epochs=int(doc["epochs"]),
            seed=int(doc["seed"]),
            final_loss=doc["final_loss"],
            num_classes=int(doc["num_classes"]),
            dim=int(doc["dim"]),
            wrs_hash=refs["wrs"]["content_hash"],
            rus_hash=refs["rus"]["content_hash"],
            ckpt_w=branches["wrs"],
            ckpt_r=branches["rus"],
            source_path=directory,
        )
    if kind == "probe":
        weight = _read_member(directory, "weight.tfae", files["weight.tfae"])
        bias = _read_member(directory, "bias.tfae", files["bias.tfae"])[0]
        return ProbeCheckpoint(
            weight=weight, bias=bias, epochs=int(doc["epochs"]), seed=int(doc["seed"]),
            source_path=directory,
        )
    raise CheckpointError(f"{directory}: unknown checkpoint kind {kind!r}")
