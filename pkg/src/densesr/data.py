"""Patch extraction, LR synthesis, flip augmentation, batching and the on-disk cache."""

from __future__ import annotations

import queue
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .imgproc import BICUBIC_AA, GrayImage, ResampleMethod, downsample, quantize, read_pgm, write_pgm

PATCH = 64
LR_BIT_DEPTH = 16
MANIFEST = "manifest.txt"


@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray
    image_id: str = ""
    row: int = 0
    col: int = 0

    @property
    def scale(self) -> int:
        return self.hr.shape[0] // self.lr.shape[0]


@dataclass(frozen=True)
class DatasetConfig:
    scale: int = 2
    patch: int = PATCH
    augment: bool = True
    seed: int = 0
    train_ids: tuple[str, ...] = ()
    val_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.patch % self.scale:
            raise ConfigError(f"patch size {self.patch} is not divisible by scale {self.scale}")
        if set(self.train_ids) & set(self.val_ids):
            raise ConfigError("train and validation image ids overlap")


def extract_patches(img: GrayImage | np.ndarray, patch: int = PATCH) -> list[tuple[int, int, np.ndarray]]:
    """Non-overlapping ``patch x patch`` tiles in row-major grid order as ``(row, col, pixels)``.

    Pixels past the last full tile on the right and bottom are dropped.
    """
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    h, w = px.shape
    if h < patch or w < patch:
        raise ConfigError(f"image {w}x{h} is smaller than the {patch}x{patch} patch")
    return [
        (r, c, px[r * patch : (r + 1) * patch, c * patch : (c + 1) * patch].copy())
        for r in range(h // patch)
        for c in range(w // patch)
    ]


def make_pairs(
    patches: Iterable[tuple[int, int, np.ndarray]],
    scale: int,
    method: ResampleMethod = BICUBIC_AA,
    image_id: str = "",
) -> list[PatchPair]:
    pairs = []
    for row, col, hr in patches:
        if hr.shape[0] % scale or hr.shape[1] % scale:
            raise ConfigError(f"patch side {hr.shape[0]} is not divisible by scale {scale}")
        pairs.append(PatchPair(downsample(hr, scale, method), hr, image_id, row, col))
    return pairs


def pairs_from_image(img: GrayImage | np.ndarray, scale: int, image_id: str = "", patch: int = PATCH) -> list[PatchPair]:
    return make_pairs(extract_patches(img, patch), scale, image_id=image_id)


def flip_pair(pair: PatchPair, horizontal: bool, vertical: bool) -> PatchPair:
    lr, hr = pair.lr, pair.hr
    if horizontal:
        lr, hr = lr[:, ::-1], hr[:, ::-1]
    if vertical:
        lr, hr = lr[::-1, :], hr[::-1, :]
    return PatchPair(np.ascontiguousarray(lr), np.ascontiguousarray(hr), pair.image_id, pair.row, pair.col)


def augment_pair(pair: PatchPair, rng: np.random.Generator) -> PatchPair:
    """Independent coin flips for a horizontal and a vertical mirror, applied to both halves."""
    horizontal = rng.random() < 0.5
    vertical = rng.random() < 0.5
    return flip_pair(pair, horizontal, vertical)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def batches(
    pairs: Sequence[PatchPair],
    batch: int = 128,
    seed: int = 0,
    epoch: int = 0,
    augment: bool = False,
    dtype=np.float32,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(lr [b,1,s,s], hr [b,1,S,S])`` in a shuffled order fixed by ``(seed, epoch)``.

    The final batch is smaller when ``len(pairs)`` is not a multiple of ``batch``.
    """
    if not pairs:
        raise ConfigError("cannot batch an empty dataset")
    rng = epoch_rng(seed, epoch)
    order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch):
        members = [pairs[i] for i in order[start : start + batch]]
        if augment:
            members = [augment_pair(p, rng) for p in members]
        lr = np.stack([p.lr for p in members])[:, None].astype(dtype)
        hr = np.stack([p.hr for p in members])[:, None].astype(dtype)
        yield lr, hr


_DONE = object()


def prefetch(it: Iterable, capacity: int = 2) -> Iterator:
    """Run ``it`` on a worker thread, handing items over through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=capacity)
    stop = threading.Event()
    errors: list[BaseException] = []

    def put(item) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def worker():
        try:
            for item in it:
                if not put(item):
                    return
        except BaseException as exc:  # re-raised on the consumer side
            errors.append(exc)
        finally:
            put(_DONE)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            yield item
    finally:
        stop.set()
        thread.join()
    if errors:
        raise errors[0]


# -- cache ------------------------------------------------------------------
#
# <dir>/manifest.txt   one line per pair: image_id row col scale resampler_tag
# <dir>/hr/<id>_<row>_<col>.pgm   HR patch at source bit depth
# <dir>/lr/<id>_<row>_<col>.pgm   LR patch, 16-bit


def sanitize_id(name: str) -> str:
    return re.sub(r"\s+", "_", name.strip()) or "image"


def _patch_name(pair: PatchPair) -> str:
    return f"{pair.image_id}_{pair.row}_{pair.col}.pgm"


def write_cache(pairs: Sequence[PatchPair], out_dir, scale: int, method: ResampleMethod = BICUBIC_AA, hr_bit_depth: int = 8) -> Path:
    out = Path(out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    lines = []
    for pair in pairs:
        name = _patch_name(pair)
        write_pgm(GrayImage(pair.hr, hr_bit_depth), out / "hr" / name)
        write_pgm(GrayImage(pair.lr, LR_BIT_DEPTH), out / "lr" / name)
        lines.append(f"{pair.image_id} {pair.row} {pair.col} {scale} {method.tag}\n")
    (out / MANIFEST).write_text("".join(lines))
    return out


def read_manifest(cache_dir) -> list[tuple[str, int, int, int, str]]:
    path = Path(cache_dir) / MANIFEST
    if not path.is_file():
        raise ConfigError(f"no dataset manifest at {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ConfigError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        image_id, row, col, scale, tag = parts
        entries.append((image_id, int(row), int(col), int(scale), tag))
    return entries


def load_cache(cache_dir) -> tuple[list[PatchPair], int]:
    """Load every cached pair; returns ``(pairs, scale)``."""
    root = Path(cache_dir)
    entries = read_manifest(root)
    if not entries:
        raise ConfigError(f"dataset cache {root} is empty")
    scales = {e[3] for e in entries}
    if len(scales) != 1:
        raise ConfigError(f"dataset cache mixes scales {sorted(scales)}")
    pairs = []
    for image_id, row, col, _, _ in entries:
        name = f"{image_id}_{row}_{col}.pgm"
        hr = read_pgm(root / "hr" / name).pixels
        lr = read_pgm(root / "lr" / name).pixels
        pairs.append(PatchPair(lr, hr, image_id, row, col))
    return pairs, scales.pop()


def verify_pair(pair: PatchPair, scale: int, method: ResampleMethod = BICUBIC_AA, bit_depth: int = LR_BIT_DEPTH) -> float:
    """Max deviation between a stored LR patch and a fresh degradation of its HR patch, on the storage grid."""
    maxval = 255 if bit_depth == 8 else 65535
    fresh = quantize(downsample(pair.hr, scale, method), bit_depth).astype(np.float64) / maxval
    return float(np.abs(fresh - pair.lr).max())
