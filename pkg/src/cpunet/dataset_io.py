"""Dataset directories: ``img_%05d.pgm`` / ``msk_%05d.pgm`` pairs plus ``manifest.txt``.

The manifest's first line is a ``#`` header recording the generator seed and
the ``SynthSpec`` used; every following line is ``image<TAB>mask``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .data import Sample, SynthSpec, generate_dataset
from .errors import DataError
from .pgm import from_uint8, read_pgm, to_uint8, write_pgm

MANIFEST = "manifest.txt"
HEADER_PREFIX = "# cpunet-synth "


def write_dataset(directory, samples, seed: int | None = None, spec: SynthSpec | None = None) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        if spec is not None:
            lines.append(HEADER_PREFIX + json.dumps({"seed": seed, "spec": dataclasses.asdict(spec)}))
        for i, s in enumerate(samples):
            img, msk = f"img_{i:05d}.pgm", f"msk_{i:05d}.pgm"
            write_pgm(directory / img, to_uint8(s.image))
            write_pgm(directory / msk, np.where(s.mask, 255, 0).astype(np.uint8))
            lines.append(f"{img}\t{msk}")
        (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {directory}: {exc.strerror} ({exc.filename})") from None
    return directory


def manifest_pairs(directory) -> list[tuple[str, str]]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise DataError(f"{path}: manifest not found")
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask'")
        pairs.append((fields[0], fields[1]))
    return pairs


def manifest_header(directory) -> dict | None:
    path = Path(directory) / MANIFEST
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith(HEADER_PREFIX):
        return None
    return json.loads(first[len(HEADER_PREFIX):])


def read_mask(path) -> np.ndarray:
    pixels = read_pgm(path)
    bad = ~np.isin(pixels, (0, 255))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"{path}: mask value {int(pixels[r, c])} at ({r}, {c}) is not 0 or 255")
    return pixels == 255


def read_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    samples = []
    for img, msk in manifest_pairs(directory):
        pixels = read_pgm(directory / img)
        if pixels.dtype != np.uint8:
            raise DataError(f"{directory / img}: expected 8-bit pixels")
        mask = read_mask(directory / msk)
        if mask.shape != pixels.shape:
            raise DataError(f"{img} is {pixels.shape} but {msk} is {mask.shape}")
        samples.append(Sample(from_uint8(pixels), mask))
    return samples


def replay(directory, out_directory) -> Path:
    """Regenerate a synthetic dataset from its manifest header into ``out_directory``."""
    header = manifest_header(directory)
    if header is None:
        raise DataError(f"{directory}: manifest has no generator header")
    spec = SynthSpec(**header["spec"])
    return write_dataset(out_directory, generate_dataset(spec, header["seed"]), header["seed"], spec)


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise DataError(f"{path} is not writable")
    return path
