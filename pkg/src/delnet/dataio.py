"""Bayer RAW / sRGB pair loading, flip augmentation and a toy data synthesizer.

Raw frames are single-channel PNGs (8- or 16-bit) or DLT1 tensors; targets are
8-bit RGB PNGs. Everything is normalized to [0, 1] on load.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .tensor import ShapeError, Tensor, default_dtype
from .tensorio import TensorFormatError, load_tensor

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")


class DataError(ValueError):
    pass


def _flip_pattern(pattern: str, horizontal: bool, vertical: bool) -> str:
    # pattern is row-major over the 2x2 tile: [p00, p01, p10, p11]
    tile = [list(pattern[:2]), list(pattern[2:])]
    if horizontal:
        tile = [row[::-1] for row in tile]
    if vertical:
        tile = tile[::-1]
    return "".join(tile[0] + tile[1])


@dataclass(frozen=True, eq=False)
class RawImage:
    data: Tensor                # [1, 1, H, W]
    cfa_pattern: str = "RGGB"
    bit_depth: int = 16

    def __post_init__(self):
        if self.cfa_pattern not in CFA_PATTERNS:
            raise DataError(f"unknown CFA pattern {self.cfa_pattern!r}; expected one of {CFA_PATTERNS}")
        shape = self.data.shape
        if len(shape) != 4 or shape[:2] != (1, 1):
            raise ShapeError(f"raw image must be [1,1,H,W], got {shape}", shape)
        if shape[2] % 2 or shape[3] % 2:
            raise DataError(f"raw extents must be even, got {shape[2]}x{shape[3]}")
        _check_range(self.data.data, "raw")

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    def color_masks(self) -> dict[str, np.ndarray]:
        """Boolean [H, W] site masks for R, G and B."""
        masks = {c: np.zeros((self.height, self.width), bool) for c in "RGB"}
        for i, c in enumerate(self.cfa_pattern):
            masks[c][i // 2::2, i % 2::2] = True
        return masks


@dataclass(frozen=True, eq=False)
class TrainPair:
    raw: RawImage
    target: Tensor              # [1, 3, H, W]
    id: str = ""

    def __post_init__(self):
        t = self.target.shape
        if len(t) != 4 or t[:2] != (1, 3):
            raise ShapeError(f"target must be [1,3,H,W], got {t}", t)
        if t[2:] != self.raw.data.shape[2:]:
            raise ShapeError(
                f"pair {self.id!r}: raw extents {self.raw.data.shape} do not match target {t}",
                self.raw.data.shape, t)
        _check_range(self.target.data, "target")


def _check_range(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
        raise DataError(f"{what} values must lie in [0,1], got [{a.min()}, {a.max()}]")


def _read_png(path: Path) -> tuple[np.ndarray, int]:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if mode.startswith("I;16") or mode == "I" or arr.dtype == np.uint16:
        return arr.astype(np.int64), 16
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: unsupported pixel mode {mode}")
    return arr.astype(np.int64), 8


def load_raw(path: str | Path, bit_depth: int | None = None, cfa_pattern: str = "RGGB") -> RawImage:
    """Read a raw mosaic; ``bit_depth`` overrides the container's depth (e.g. 10-bit in 16-bit PNG)."""
    path = Path(path)
    if path.suffix.lower() == ".dlt":
        try:
            t = load_tensor(path)
        except (OSError, TensorFormatError) as exc:
            raise DataError(f"cannot read raw tensor {path}: {exc}") from exc
        if t.ndim < 2 or t.size != t.shape[-2] * t.shape[-1]:
            raise ShapeError(f"{path}: raw tensor must be single-channel, got {t.shape}", t.shape)
        data = t.data.reshape((1, 1) + t.shape[-2:])
        return RawImage(Tensor(data.astype(default_dtype())), cfa_pattern, bit_depth or 16)
    arr, container_bits = _read_png(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: raw PNG must be single-channel, got shape {arr.shape}")
    bits = bit_depth or container_bits
    peak = 2 ** bits - 1
    if arr.max() > peak:
        raise DataError(f"{path}: value {arr.max()} exceeds {bits}-bit range")
    data = (arr / peak).astype(default_dtype())[None, None]
    return RawImage(Tensor(data), cfa_pattern, bits)


def load_rgb(path: str | Path) -> Tensor:
    path = Path(path)
    arr, bits = _read_png(path)
    if bits != 8 or arr.ndim != 3 or arr.shape[2] < 3:
        raise DataError(f"{path}: target must be an 8-bit RGB PNG")
    return Tensor((arr[..., :3] / 255.0).astype(default_dtype()).transpose(2, 0, 1)[None])


def load_pair(raw_path: str | Path, rgb_path: str | Path, *, bit_depth: int | None = None,
              cfa_pattern: str = "RGGB", pair_id: str | None = None) -> TrainPair:
    raw = load_raw(raw_path, bit_depth, cfa_pattern)
    target = load_rgb(rgb_path)
    return TrainPair(raw, target, pair_id if pair_id is not None else Path(raw_path).stem)


def augment_flip(pair: TrainPair, horizontal: bool = False, vertical: bool = False) -> TrainPair:
    """Flip raw and target together and shift the CFA phase to match."""
    if not (horizontal or vertical):
        return pair
    axes = tuple(ax for ax, on in ((3, horizontal), (2, vertical)) if on)
    raw = np.ascontiguousarray(np.flip(pair.raw.data.data, axes))
    target = np.ascontiguousarray(np.flip(pair.target.data, axes))
    pattern = _flip_pattern(pair.raw.cfa_pattern, horizontal, vertical)
    return TrainPair(RawImage(Tensor(raw), pattern, pair.raw.bit_depth), Tensor(target), pair.id)


def align_phase(pair: TrainPair, pattern: str = "RGGB") -> TrainPair:
    """Shift a pair by one pixel per axis as needed so its mosaic reads ``pattern``.

    The leading row/column is dropped and a mirrored one appended at the far
    edge, keeping extents (and lattice parity) intact.
    """
    current = pair.raw.cfa_pattern
    if current == pattern:
        return pair
    shift = None
    for dy in (0, 1):
        for dx in (0, 1):
            tile = [current[2 * ((r + dy) % 2) + (c + dx) % 2] for r in (0, 1) for c in (0, 1)]
            if "".join(tile) == pattern:
                shift = (dy, dx)
    if shift is None:
        raise DataError(f"pattern {current} cannot be shifted to {pattern}")

    def move(a: np.ndarray) -> np.ndarray:
        dy, dx = shift
        a = a[:, :, dy:, dx:]
        return np.pad(a, ((0, 0), (0, 0), (0, dy), (0, dx)), mode="reflect")

    return TrainPair(RawImage(Tensor(move(pair.raw.data.data)), pattern, pair.raw.bit_depth),
                     Tensor(move(pair.target.data)), pair.id)


def mosaic(rgb: np.ndarray, pattern: str = "RGGB") -> np.ndarray:
    """Sample a [3,H,W] image onto a Bayer lattice, returning [H,W]."""
    _, h, w = rgb.shape
    out = np.empty((h, w), rgb.dtype)
    for i, c in enumerate(pattern):
        ch = "RGB".index(c)
        out[i // 2::2, i % 2::2] = rgb[ch, i // 2::2, i % 2::2]
    return out


def bilinear_demosaic(raw: RawImage) -> np.ndarray:
    """Reference bilinear demosaic of a mosaic, returning [3,H,W].

    Each channel is its sparse samples convolved with the usual bilinear
    kernels under mirror padding, which keeps the result equivariant under
    flips.
    """
    mos = raw.data.data[0, 0].astype(np.float64)
    k_rb = np.array([[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]])
    k_g = np.array([[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]])
    out = []
    for c, mask in raw.color_masks().items():
        sparse = np.where(mask, mos, 0.0)
        out.append(_filter3(sparse, k_g if c == "G" else k_rb))
    return np.stack(out)


def _filter3(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    # Mirror about the edge pixel (reflect, not symmetric) so the lattice
    # parity across the border is preserved.
    p = np.pad(a, 1, mode="reflect")
    h, w = a.shape
    out = np.zeros_like(a)
    for i in range(3):
        for j in range(3):
            if k[i, j]:
                out += k[i, j] * p[i:i + h, j:j + w]
    return out


def synth_target(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth colour gradients plus a few flat discs and boxes, [3,H,W] in [0,1]."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([max(height - 1, 1), max(width - 1, 1)])[:, None, None]
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, base = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.25, 0.75)
        img[c] = base + a * (xx - 0.5) + b * (yy - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        colour = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.1, 0.3) * min(height, width)
        if rng.random() < 0.5:
            mask = (yy * (height - 1) - cy) ** 2 + (xx * (width - 1) - cx) ** 2 < r * r
        else:
            mask = (np.abs(yy * (height - 1) - cy) < r) & (np.abs(xx * (width - 1) - cx) < r)
        img[:, mask] = colour[:, None]
    return np.clip(img, 0.0, 1.0)


def synth_pair(seed: int, height: int = 64, width: int = 64, *,
               gains: Sequence[float] = (0.5, 1.0, 0.7), noise: float = 0.01,
               pair_id: str | None = None) -> TrainPair:
    """Deterministic toy inverse-ISP pair.

    The target is quantized to 8 bits; the raw is its RGGB mosaic scaled by
    per-channel ``gains`` plus Gaussian noise of std ``noise``, clipped to [0,1].
    """
    if height % 2 or width % 2:
        raise DataError(f"synthetic extents must be even, got {height}x{width}")
    rng = np.random.default_rng(seed)
    target = np.floor(synth_target(rng, height, width) * 255 + 0.5) / 255
    scaled = target * np.asarray(gains, dtype=np.float64)[:, None, None]
    raw = mosaic(scaled)
    if noise:
        raw = raw + rng.normal(0.0, noise, raw.shape)
    raw = np.clip(raw, 0.0, 1.0)
    dt = default_dtype()
    return TrainPair(RawImage(Tensor(raw[None, None].astype(dt)), "RGGB", 16),
                     Tensor(target[None].astype(dt)),
                     pair_id if pair_id is not None else f"synth{seed:05d}")


def quantize8(values: np.ndarray) -> np.ndarray:
    """Round-half-up to 8 bits: 0.5 -> 128, 1.0 -> 255."""
    if values.size and (values.min() < 0 or values.max() > 1 or not np.all(np.isfinite(values))):
        raise DataError("image values must lie in [0,1] before quantization")
    return np.floor(values.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_image(tensor: Tensor | np.ndarray, path: str | Path) -> None:
    """Write [1,3,H,W], [3,H,W], [1,1,H,W] or [H,W] values in [0,1] as an 8-bit PNG."""
    a = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    while a.ndim > 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 3:
        if a.shape[0] != 3:
            raise ShapeError(f"write_image expects 1 or 3 channels, got {a.shape}", a.shape)
        a = a.transpose(1, 2, 0)
    elif a.ndim != 2:
        raise ShapeError(f"write_image cannot write shape {a.shape}", a.shape)
    q = quantize8(a)
    try:
        Image.fromarray(q).save(Path(path), format="PNG")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_raw16(raw: RawImage, path: str | Path) -> None:
    """Store a mosaic as a 16-bit single-channel PNG at ``raw.bit_depth`` scale."""
    peak = 2 ** raw.bit_depth - 1
    q = np.floor(raw.data.data[0, 0].astype(np.float64) * peak + 0.5).astype(np.uint16)
    Image.fromarray(q).save(Path(path), format="PNG")


class PairDataset(Sequence[TrainPair]):
    """Pairs under ``<root>/raw/<id>.png`` and ``<root>/rgb/<id>.png``.

    Ids come from ``index_file`` (one per line, ``#`` comments allowed) when
    given, otherwise from a sorted scan of ``raw/``. Pairs load lazily.
    """

    def __init__(self, root: str | Path, index_file: str | Path | None = None, *,
                 bit_depth: int | None = None, cfa_pattern: str = "RGGB"):
        self.root = Path(root)
        self.bit_depth = bit_depth
        self.cfa_pattern = cfa_pattern
        raw_dir, rgb_dir = self.root / "raw", self.root / "rgb"
        if not raw_dir.is_dir() or not rgb_dir.is_dir():
            raise DataError(f"dataset root {self.root} must contain raw/ and rgb/")
        if index_file is not None:
            lines = Path(index_file).read_text().splitlines()
            self.ids = [ln.split("#", 1)[0].strip() for ln in lines]
            self.ids = [i for i in self.ids if i]
        else:
            self.ids = sorted(p.stem for p in raw_dir.glob("*.png"))
        missing = [i for i in self.ids if not (rgb_dir / f"{i}.png").is_file()
                   or not (raw_dir / f"{i}.png").is_file()]
        if missing:
            raise DataError(f"dataset {self.root}: missing files for ids {missing[:5]}")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i):
        pid = self.ids[i]
        return load_pair(self.root / "raw" / f"{pid}.png", self.root / "rgb" / f"{pid}.png",
                         bit_depth=self.bit_depth, cfa_pattern=self.cfa_pattern, pair_id=pid)

    def __iter__(self) -> Iterator[TrainPair]:
        for i in range(len(self)):
            yield self[i]


def write_synthetic_dataset(root: str | Path, count: int, height: int = 64, width: int = 64,
                            seed: int = 0) -> list[str]:
    """Write ``count`` synthetic pairs in the dataset layout and return their ids."""
    root = Path(root)
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    ids = []
    for k in range(count):
        pair = synth_pair(seed + k, height, width, pair_id=f"{k:05d}")
        write_raw16(pair.raw, root / "raw" / f"{pair.id}.png")
        write_image(pair.target, root / "rgb" / f"{pair.id}.png")
        ids.append(pair.id)
    (root / "index.txt").write_text("\n".join(ids) + "\n")
    return ids
