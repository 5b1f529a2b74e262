import numpy as np
import pytest

from tailadapt import dataio, pipeline
from tailadapt.pipeline import RunConfig


def make_bank(num_classes: int, dim: int, rng=None, orthonormal: bool = True):
    """Prompt bank with template-conformant prompts; orthonormal anchors by default."""
    if rng is None:
        rng = np.random.default_rng(7)
    gauss = rng.standard_normal((dim, dim if orthonormal else num_classes))
    if orthonormal:
        q, r = np.linalg.qr(gauss)
        anchors = (q * np.sign(np.diag(r)))[:num_classes]
    else:
        anchors = rng.standard_normal((num_classes, dim))
    names = [f"class{c}" for c in range(num_classes)]
    return dataio.PromptBank(
        anchors=anchors,
        prompts=[dataio.make_prompt("synthetic", n) for n in names],
        class_names=names,
    )


class BenchFactory:
    """Builds and caches fully trained benchmark runs, one per seed."""

    def __init__(self, root):
        self.root = root
        self._cache = {}

    def __call__(self, seed: int) -> dict:
        if seed in self._cache:
            return self._cache[seed]
        base = self.root / f"seed{seed}"
        cfg_synth = dataio.SynthConfig(distortion_seed=seed, sample_seed=seed)
        train, test, bank, manifest = dataio.synth_generate(cfg_synth)
        manifest_path = dataio.write_dataset(base / "data", train, test, bank, manifest)
        manifest = dataio.load_manifest(manifest_path)
        cfg = RunConfig(epochs_stage1=50, epochs_stage2=30, seed=seed)
        run = {
            "manifest_path": manifest_path,
            "manifest": manifest,
            "test": manifest.load_test(),
            "bank": manifest.load_bank(),
            "cfg": cfg,
            "dir": base,
        }
        for kind in ("wrs", "rus", "none"):
            ckpt = pipeline.train_stage1(manifest, kind, cfg)
            pipeline.save_checkpoint(base / f"ck_{kind}", ckpt)
            run[kind] = ckpt
        for mode in ("feature", "logit"):
            ckpt2 = pipeline.train_stage2(run["wrs"], run["rus"], mode, manifest, cfg)
            pipeline.save_checkpoint(base / f"ck_s2_{mode}", ckpt2)
            run[f"stage2_{mode}"] = ckpt2
        self._cache[seed] = run
        return run


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    return BenchFactory(tmp_path_factory.mktemp("bench"))


def accuracy(preds, labels) -> float:
    return float((np.asarray(preds) == np.asarray(labels)).mean())
