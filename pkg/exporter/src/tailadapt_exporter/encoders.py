"""Frozen vision-language encoder pairs behind one small interface.

Two families are registered:

  toy[:dim]   -- dependency-light deterministic featurizer for offline tests:
                 images are downsampled to an 8x8 grayscale patch and passed
                 through a fixed random projection; texts are hashed into a
                 seeded Gaussian vector. Not semantically meaningful, but
                 stable across runs and platforms.
  clip[:id]   -- a pretrained CLIP checkpoint via transformers (ViT-B/16 by
                 default). Imported lazily; needs torch + transformers and
                 downloaded weights.

Both produce float32 features of a fixed dimension for images and texts.
"""

import hashlib

import numpy as np
from PIL import Image

from tailadapt.errors import InvalidConfigError

DEFAULT_CLIP_ID = "openai/clip-vit-base-patch16"
_TOY_PATCH = 8
_TOY_PROJECTION_SEED = 0x70F0


class ToyEncoder:
    """Deterministic stand-in encoder pair for environments without model weights."""

    def __init__(self, dim: int = 32):
        if dim < 2:
            raise InvalidConfigError("toy encoder dim must be >= 2")
        self.dim = dim
        rng = np.random.default_rng(_TOY_PROJECTION_SEED)
        self._projection = rng.standard_normal((_TOY_PATCH * _TOY_PATCH, dim)) / _TOY_PATCH

    def encode_images(self, paths) -> np.ndarray:
        rows = []
        for path in paths:
            with Image.open(path) as img:
                patch = img.convert("L").resize((_TOY_PATCH, _TOY_PATCH), Image.BILINEAR)
            pixels = np.asarray(patch, dtype=np.float64).reshape(-1) / 255.0
            rows.append(pixels @ self._projection)
        return np.asarray(rows, dtype=np.float32)

    def encode_texts(self, texts) -> np.ndarray:
        rows = []
        for text in texts:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            rows.append(rng.standard_normal(self.dim))
        return np.asarray(rows, dtype=np.float32)


class ClipEncoder:
    """Pretrained CLIP image/text encoder pair (frozen, eval mode)."""

    def __init__(self, model_id: str = DEFAULT_CLIP_ID, batch_size: int = 32):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise InvalidConfigError(
                "the clip encoder needs the optional [clip] extra (torch + transformers)"
            ) from exc
        self._torch = torch
        self._model = CLIPModel.from_pretrained(model_id).eval()
        self._processor = CLIPProcessor.from_pretrained(model_id)
        self._batch_size = batch_size
        self.dim = int(self._model.config.projection_dim)

    def encode_images(self, paths) -> np.ndarray:
        rows = []
        for start in range(0, len(paths), self._batch_size):
            images = []
            for path in paths[start:start + self._batch_size]:
                with Image.open(path) as img:
                    images.append(img.convert("RGB"))
            inputs = self._processor(images=images, return_tensors="pt")
            with self._torch.no_grad():
                feats = self._model.get_image_features(**inputs)
            rows.append(feats.cpu().numpy().astype(np.float32))
        return np.concatenate(rows, axis=0)

    def encode_texts(self, texts) -> np.ndarray:
        inputs = self._processor(text=list(texts), return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.cpu().numpy().astype(np.float32)


def resolve_encoder(identifier: str):
    """Build an encoder from its identifier string ("toy", "toy:64", "clip", "clip:<hf-id>")."""
    name, _, arg = identifier.partition(":")
    if name == "toy":
        return ToyEncoder(dim=int(arg)) if arg else ToyEncoder()
    if name == "clip":
        return ClipEncoder(model_id=arg or DEFAULT_CLIP_ID)
    raise InvalidConfigError(f"unknown encoder identifier {identifier!r}")
