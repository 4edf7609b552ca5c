"""Walk a class-per-subdirectory image folder, encode one original plus
random-resized-crop views per image, and write the embedding stream.

Class order is the sorted subdirectory names and record order the sorted
file names, so exports are reproducible across filesystems; the crop sampler
is driven by a single seeded generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import make_encoder
from .templates import DEFAULT_TEMPLATES, apply_template
from .writer import write_header, write_record

log = logging.getLogger("mcpexport")

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

CROP_SCALE = (0.6, 1.0)    # area fraction range for random resized crops
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)


@dataclass
class ExportSpec:
    root: str
    out: str
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    encoder: str = "toy:64"
    views_per_image: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.views_per_image < 1:
            raise ValueError("views_per_image must be >= 1")
        if not self.templates:
            raise ValueError("need at least one prompt template")


@dataclass
class ExportReport:
    classes: list[str]
    records: int
    skipped: int
    dim: int


def _class_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"{root} has no class subdirectories")
    return dirs


def _image_files(class_dir: Path) -> list[Path]:
    return sorted(
        p
        for p in class_dir.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def random_resized_crop(
    img: Image.Image, rng: np.random.Generator, size: tuple[int, int]
) -> Image.Image:
    """One crop with uniform area fraction and log-uniform aspect ratio."""
    w, h = img.size
    area = w * h
    for _ in range(10):
        frac = rng.uniform(*CROP_SCALE)
        log_ratio = rng.uniform(np.log(CROP_RATIO[0]), np.log(CROP_RATIO[1]))
        ratio = float(np.exp(log_ratio))
        cw = int(round(np.sqrt(area * frac * ratio)))
        ch = int(round(np.sqrt(area * frac / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            return img.crop((x0, y0, x0 + cw, y0 + ch)).resize(size, Image.BILINEAR)
    return img.resize(size, Image.BILINEAR)


def export(spec: ExportSpec) -> ExportReport:
    """Encode the folder and write the stream file; returns a summary."""
    root = Path(spec.root)
    if not root.is_dir():
        raise ValueError(f"{spec.root} is not a directory")
    encoder = make_encoder(spec.encoder)
    rng = np.random.default_rng(spec.seed)

    class_dirs = _class_dirs(root)
    class_names = [d.name for d in class_dirs]
    prompts = []
    for name in class_names:
        texts = [apply_template(t, name) for t in spec.templates]
        prompts.append(encoder.encode_texts(texts))

    records = 0
    skipped = 0
    with open(spec.out, "wb") as fh:
        write_header(fh, encoder.dim, class_names, prompts)
        for label, class_dir in enumerate(class_dirs):
            files = _image_files(class_dir)
            if not files:
                raise ValueError(f"class directory {class_dir} has no images")
            for path in files:
                try:
                    with Image.open(path) as img:
                        img = img.convert("RGB")
                except Exception as e:
                    log.warning("skipping unreadable image %s: %s", path, e)
                    skipped += 1
                    continue
                views = [img]
                for _ in range(spec.views_per_image - 1):
                    views.append(random_resized_crop(img, rng, img.size))
                feats = encoder.encode_images(views)
                write_record(fh, label, feats)
                records += 1
    if records == 0:
        raise ValueError("no images could be exported")
    return ExportReport(
        classes=class_names, records=records, skipped=skipped, dim=encoder.dim
    )
