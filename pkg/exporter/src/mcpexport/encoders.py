"""Encoder backends.

`toy[:dim]` is a deterministic, dependency-free stand-in: images are
downscaled and pushed through a fixed random projection, texts are hashed to
a direction on the sphere. It produces valid unit embeddings with stable
bytes across runs and platforms, which is what the tests and the stream
format care about; it has no semantics.

`clip:<model-or-path>` adapts a locally available vision-language checkpoint
through the `transformers` library. It is optional and only usable where the
weights already exist on disk.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

TOY_GRID = 32  # images are resampled to TOY_GRID x TOY_GRID RGB


class ToyEncoder:
    """Fixed random projection of pixel grids; hashed directions for text."""

    def __init__(self, dim: int = 64):
        if dim < 2:
            raise ValueError("encoder dimension must be >= 2")
        self.dim = dim
        # the projection is a fixed constant of dim, derived via sha256 so it
        # is stable across processes and platforms
        rng = np.random.default_rng(
            int.from_bytes(hashlib.sha256(f"toy-projection-{dim}".encode()).digest()[:8], "little")
        )
        self._w = rng.standard_normal((dim, TOY_GRID * TOY_GRID * 3)) / np.sqrt(
            TOY_GRID * TOY_GRID * 3
        )

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        rows = []
        for img in images:
            small = img.convert("RGB").resize((TOY_GRID, TOY_GRID), Image.BILINEAR)
            x = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0 - 0.5
            z = self._w @ x
            n = np.linalg.norm(z)
            if n <= 1e-12:
                # blank images project to zero; give them a fixed direction
                z = self._w[:, 0].copy()
                n = np.linalg.norm(z)
            rows.append(z / n)
        return np.stack(rows)

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        rows = []
        for text in texts:
            seed = int.from_bytes(
                hashlib.sha256(text.encode("utf-8")).digest()[:8], "little"
            )
            rng = np.random.default_rng(seed)
            z = rng.standard_normal(self.dim)
            rows.append(z / np.linalg.norm(z))
        return np.stack(rows)


class ClipEncoder:
    """Thin adapter over a transformers CLIP checkpoint available locally."""

    def __init__(self, model_name_or_path: str):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise RuntimeError(
                "the clip encoder needs torch and transformers installed"
            ) from e
        try:
            self._model = CLIPModel.from_pretrained(model_name_or_path)
            self._processor = CLIPProcessor.from_pretrained(model_name_or_path)
        except Exception as e:
            raise RuntimeError(
                f"could not load {model_name_or_path!r}; the encoder must be "
                "available locally"
            ) from e
        self._model.eval()
        self.dim = int(self._model.config.projection_dim)

    def encode_images(self, images):
        import torch

        inputs = self._processor(images=images, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.double().cpu().numpy()

    def encode_texts(self, texts):
        import torch

        inputs = self._processor(text=texts, return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        feats = feats / feats.norm(dim=-1, keepdim=True)
        return feats.double().cpu().numpy()


def make_encoder(name: str):
    """Parse an encoder spec: `toy`, `toy:128`, or `clip:<model-or-path>`."""
    kind, _, arg = name.partition(":")
    if kind == "toy":
        return ToyEncoder(int(arg) if arg else 64)
    if kind == "clip":
        if not arg:
            raise ValueError("clip encoder needs a model name or path, e.g. clip:/path")
        return ClipEncoder(arg)
    raise ValueError(f"unknown encoder {name!r}")
