"""Writer for the embedding-stream wire format consumed by the adaptation
engine (magic MCPE, version 1, little-endian, float32 unit vectors).

This package deliberately implements the format against its documented
layout rather than importing the engine, so the two sides of the contract
stay independent.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MCPE"
VERSION = 1
UNLABELED = 0xFFFFFFFF


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _check_unit(rows: np.ndarray, what: str) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError(f"{what} must be unit-normalized before writing")
    return rows


def write_header(
    fh: BinaryIO, dim: int, class_names: list[str], prompts: list[np.ndarray]
) -> None:
    if len(class_names) != len(prompts) or not class_names:
        raise ValueError("need one prompt block per class")
    fh.write(MAGIC)
    fh.write(_u32(VERSION))
    fh.write(_u32(dim))
    fh.write(_u32(len(class_names)))
    for name in class_names:
        raw = name.encode("utf-8")
        fh.write(_u32(len(raw)))
        fh.write(raw)
    for name, block in zip(class_names, prompts):
        block = _check_unit(block, f"prompts for {name}")
        if block.ndim != 2 or block.shape[1] != dim or block.shape[0] < 1:
            raise ValueError(f"prompt block for {name} has wrong shape")
        fh.write(_u32(block.shape[0]))
        fh.write(block.astype("<f4").tobytes())


def write_record(fh: BinaryIO, label: int | None, views: np.ndarray) -> None:
    views = _check_unit(views, "views")
    if views.ndim != 2 or views.shape[0] < 1:
        raise ValueError("a record needs at least one view row")
    fh.write(_u32(UNLABELED if label is None else int(label)))
    fh.write(_u32(views.shape[0]))
    fh.write(views.astype("<f4").tobytes())
