"""Grayscale PGM I/O, paired datasets, splits and synthetic pairs."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MIN_SIDE = 8


class PGMError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class GrayImage:
    """Single-band image with pixels in [0, 1], stored row-major as ``[H, W]``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError(f"expected a 2-D pixel array, got shape {px.shape}")
        if min(px.shape) < MIN_SIDE:
            raise ValueError(f"image is {px.shape[1]}x{px.shape[0]}, minimum side is {MIN_SIDE}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixels must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)


@dataclass(frozen=True)
class ImagePair:
    visible: GrayImage
    infrared: GrayImage
    id: str

    def __post_init__(self):
        if self.visible.pixels.shape != self.infrared.pixels.shape:
            raise ValueError(
                f"pair {self.id!r}: visible {self.visible.pixels.shape} and "
                f"infrared {self.infrared.pixels.shape} differ (pairs must be registered)"
            )


@dataclass(frozen=True)
class DatasetSplit:
    train: list[str]
    test: list[str]
    validation: list[str]
    seed: int


# ---------------------------------------------------------------- PGM


def _read_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise PGMError("truncated header")
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_pgm_pixels(buf: bytes) -> np.ndarray:
    """Decode P2/P5 bytes to a ``[H, W]`` array of ``value / maxval``, any size."""
    tokens, pos = _read_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise PGMError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PGMError("malformed header") from exc
    if width <= 0 or height <= 0:
        raise PGMError("non-positive dimensions")
    if maxval <= 0:
        raise PGMError("maxval must be positive")
    if maxval > 65535:
        raise PGMError("maxval exceeds 65535")
    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        pos += 1
        dtype = ">u1" if maxval < 256 else ">u2"
        nbytes = count * np.dtype(dtype).itemsize
        raw = buf[pos : pos + nbytes]
        if len(raw) < nbytes:
            raise PGMError(f"truncated payload: need {nbytes} bytes, found {len(raw)}")
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        body = _strip_comments(buf[pos:]).split()
        if len(body) < count:
            raise PGMError(f"truncated payload: need {count} samples, found {len(body)}")
        try:
            values = np.array([int(t) for t in body[:count]], dtype=np.float64)
        except ValueError as exc:
            raise PGMError("non-integer sample in P2 raster") from exc
    if values.max(initial=0) > maxval:
        raise PGMError("sample exceeds maxval")
    return values.reshape(height, width) / maxval


def decode_pgm(buf: bytes) -> GrayImage:
    return GrayImage(decode_pgm_pixels(buf))


def _strip_comments(body: bytes) -> bytes:
    return b"\n".join(line.split(b"#", 1)[0] for line in body.splitlines())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm_pixels(fh.read())


def load_pgm(path) -> GrayImage:
    return GrayImage(read_pgm(path))


def encode_pgm(img: GrayImage | np.ndarray, maxval: int = 255) -> bytes:
    """Binary P5 bytes; samples are ``round(p * maxval)``, 16-bit big-endian."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    px = np.asarray(img, dtype=np.float64)
    if px.ndim != 2:
        raise ValueError("expected a 2-D image")
    q = np.rint(np.clip(px, 0.0, 1.0) * maxval)
    raw = q.astype(">u1" if maxval == 255 else ">u2").tobytes()
    h, w = px.shape
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + raw


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename over ``path``.

    Missing parent directories are created.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_pgm(img: GrayImage | np.ndarray, path, maxval: int = 255) -> None:
    atomic_write(path, encode_pgm(img, maxval))


# ---------------------------------------------------------------- datasets


def read_manifest(path) -> list[tuple[str, Path, Path]]:
    """Parse ``id vis_path ir_path`` lines; paths are relative to the manifest."""
    path = Path(path)
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 'id vis ir', got {line!r}")
        pid, vis, ir = parts
        entries.append((pid, root / vis, root / ir))
    return entries


def load_manifest(path) -> list[ImagePair]:
    return [ImagePair(load_pgm(v), load_pgm(i), pid) for pid, v, i in read_manifest(path)]


def write_manifest(path, pairs: list[ImagePair], image_dir: str = "images") -> None:
    """Save ``pairs`` as PGMs under ``image_dir`` next to a manifest at ``path``."""
    path = Path(path)
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    lines = ["# id visible infrared"]
    for p in pairs:
        vis = f"{image_dir}/{p.id}_vis.pgm"
        ir = f"{image_dir}/{p.id}_ir.pgm"
        save_pgm(p.visible, path.parent / vis)
        save_pgm(p.infrared, path.parent / ir)
        lines.append(f"{p.id} {vis} {ir}")
    atomic_write(path, "\n".join(lines) + "\n")


def split_dataset(ids: list[str], seed: int) -> DatasetSplit:
    """Seeded shuffle, then floor(0.8n) train / floor(0.1n) test / rest validation."""
    n = len(ids)
    if n < 10:
        raise ValueError(f"need at least 10 ids to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train, n_test = (8 * n) // 10, n // 10
    return DatasetSplit(
        train=shuffled[:n_train],
        test=shuffled[n_train : n_train + n_test],
        validation=shuffled[n_train + n_test :],
        seed=seed,
    )


# ---------------------------------------------------------------- synthetic pairs


def _box_blur(img: np.ndarray, radius: int) -> np.ndarray:
    out = img
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        p = np.pad(out, pad, mode="edge")
        c = np.cumsum(p, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        w = 2 * radius + 1
        out = (np.take(c, range(w, c.shape[axis]), axis=axis)
               - np.take(c, range(0, c.shape[axis] - w), axis=axis)) / w
    return out


def synth_pairs(count: int, size: int, seed: int) -> list[ImagePair]:
    """Complementary visible/infrared pairs for desk-scale experiments.

    Both bands share a rectangle layout. The visible band adds fine texture
    and hard edges and stays at or below 0.6. The infrared band is a smooth,
    low-contrast version of the layout plus one or two hot blobs (core value
    0.95) that have no counterpart in the visible band.
    """
    if size < 16:
        raise ValueError("synthetic images need size >= 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # core radius so that the hot core covers >= 4% of the image
    core = int(np.ceil(np.sqrt(0.04 * size * size / np.pi))) + 1
    pairs = []
    for idx in range(count):
        vis = np.full((size, size), rng.uniform(0.15, 0.35))
        ir = np.full((size, size), rng.uniform(0.15, 0.25))
        vis += rng.uniform(-0.1, 0.1) * (xx / size) + rng.uniform(-0.1, 0.1) * (yy / size)
        for _ in range(rng.integers(3, 6)):
            h, w = rng.integers(size // 6, size // 2, size=2)
            y0, x0 = rng.integers(0, size - h), rng.integers(0, size - w)
            vis[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.05, 0.55)
            ir[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.15, 0.45)
        # fine texture, visible band only
        vis += rng.normal(0.0, 0.04, size=(size, size))
        stripes = rng.uniform(0.0, 0.04) * np.sign(np.sin(xx * rng.uniform(1.5, 3.0)))
        vis += stripes
        vis = np.clip(vis, 0.0, 0.6)
        ir = _box_blur(ir, max(1, size // 16))
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(core + 1, size - core - 1, size=2)
            d = np.hypot(yy - cy, xx - cx)
            halo = 1.8 * core
            bump = np.clip((halo - d) / (halo - core), 0.0, 1.0)
            bump = bump * bump * (3.0 - 2.0 * bump)
            ir = np.maximum(ir, 0.95 * bump)
        ir = np.clip(ir, 0.0, 1.0)
        pairs.append(ImagePair(GrayImage(vis), GrayImage(ir), f"synth{idx:04d}"))
    return pairs
