"""Dense latent/image grids, binary masks, seeded Gaussian streams, and grid file I/O.

Grid file format (text, bit-exact):
  line 1:   ``GRID h w c``  (ASCII, space-separated positive integers)
  then:     exactly h*w*c whitespace-separated decimal floats, row-major
            (h outer, then w, then c).
Masks use ``MASK h w`` followed by h*w values, each exactly 0 or 1.

Floats are written with ``repr`` (shortest digits that round-trip float64,
up to 17 significant digits), so write->read is lossless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


class GridParseError(ValueError):
    """A grid/mask file does not follow the documented format."""


@dataclass(frozen=True)
class LatentGrid:
    """A dense h x w x c grid of finite float64 values with value semantics.

    The backing array is copied on construction and marked read-only, so a
    grid can be shared freely across threads and sessions.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"grid data must be 3-d (h, w, c), got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError(f"grid dimensions must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("grid contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        """Row-major flattened copy of the values."""
        return self.data.reshape(-1).copy()

    @staticmethod
    def constant(value: float, h: int, w: int, c: int) -> "LatentGrid":
        return LatentGrid(np.full((h, w, c), float(value)))

    @staticmethod
    def from_flat(values, h: int, w: int, c: int) -> "LatentGrid":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size != h * w * c:
            raise ValueError(f"expected {h * w * c} values for {h}x{w}x{c}, got {arr.size}")
        return LatentGrid(arr.reshape(h, w, c))


@dataclass(frozen=True)
class Mask:
    """A binary h x w mask, broadcast across channels wherever it is applied."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"mask data must be 2-d (h, w), got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("mask dimensions must be positive")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @staticmethod
    def ones(h: int, w: int) -> "Mask":
        return Mask(np.ones((h, w)))

    @staticmethod
    def zeros(h: int, w: int) -> "Mask":
        return Mask(np.zeros((h, w)))


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (pure 64-bit integer arithmetic)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class RngStream:
    """Deterministic random source: counter-based Philox uniforms + Box-Muller.

    The generator key is derived from ``(seed, derivation path)`` via
    splitmix64, so spawned streams are statistically independent and never
    consume state from their parent.  Normals come from the Box-Muller
    transform over Philox uniform doubles; both are fixed integer/float
    recipes, so the same seed yields bit-identical sequences on every
    platform.  Each ``normal`` call consumes ``2 * ceil(n / 2)`` uniforms.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self._path = tuple(int(p) & _MASK64 for p in _path)
        key = _splitmix64(self.seed)
        for part in self._path:
            key = _splitmix64(key ^ _splitmix64(part))
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.position = 0

    def spawn(self, *path: int | str) -> "RngStream":
        """Derive an independent stream; does not advance this stream."""
        parts = tuple(_fnv1a64(p) if isinstance(p, str) else int(p) for p in path)
        return RngStream(self.seed, self._path + parts)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 draws in [0, 1)."""
        out = self._gen.random(size=shape)
        self.position += int(np.size(out))
        return out

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller (log uses 1-u in (0, 1])."""
        n = int(np.prod(shape)) if shape != () else 1
        m = (n + 1) // 2
        u = self.uniform((2, m))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        angle = 2.0 * math.pi * u[1]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        if shape == ():
            return z[0]
        return z.reshape(shape)


def gaussian_grid(rng: RngStream, h: int, w: int, c: int) -> LatentGrid:
    """An h x w x c grid of i.i.d. standard normal entries drawn from ``rng``."""
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"grid dimensions must be positive, got {h}x{w}x{c}")
    return LatentGrid(rng.normal((h, w, c)))


def mean_stat(g: LatentGrid) -> float:
    """Arithmetic mean over all h*w*c entries."""
    return float(g.data.mean())


def rmse(a: LatentGrid, b: LatentGrid) -> float:
    """Root-mean-square difference between two same-shaped grids."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a.data - b.data) ** 2)))


def masked_combine(a: LatentGrid, b: LatentGrid, m: Mask) -> LatentGrid:
    """Elementwise m*a + (1-m)*b with the mask broadcast over channels."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if (m.h, m.w) != (a.h, a.w):
        raise ValueError(f"mask {m.h}x{m.w} does not match grid {a.h}x{a.w}")
    md = m.data[:, :, None]
    return LatentGrid(md * a.data + (1.0 - md) * b.data)


def _read_tokens(path: str):
    """Yield (line_number, token) pairs from a whitespace-separated text file."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            for lineno, line in enumerate(fh, start=1):
                for token in line.split():
                    yield lineno, token
    except UnicodeDecodeError as exc:
        raise GridParseError(f"{path}: not an ASCII grid file ({exc})") from None


def _parse_header(tokens, path: str, magic: str, n_dims: int) -> tuple[int, ...]:
    fields = []
    try:
        lineno, word = next(tokens)
    except StopIteration:
        raise GridParseError(f"{path}: line 1: empty file, expected '{magic}' header") from None
    if word != magic:
        raise GridParseError(f"{path}: line {lineno}: expected '{magic}' header, got {word!r}")
    for _ in range(n_dims):
        try:
            lineno, tok = next(tokens)
            fields.append(int(tok))
        except StopIteration:
            raise GridParseError(f"{path}: line {lineno}: truncated {magic} header") from None
        except ValueError:
            raise GridParseError(
                f"{path}: line {lineno}: bad {magic} dimension {tok!r}"
            ) from None
    if any(d < 1 for d in fields):
        raise GridParseError(f"{path}: line 1: dimensions must be positive, got {fields}")
    return tuple(fields)


def _parse_values(tokens, path: str, count: int) -> np.ndarray:
    values = np.empty(count)
    got = 0
    last_line = 1
    for lineno, tok in tokens:
        last_line = lineno
        if got >= count:
            raise GridParseError(f"{path}: line {lineno}: expected {count} values, found more")
        try:
            values[got] = float(tok)
        except ValueError:
            raise GridParseError(
                f"{path}: line {lineno}: value {got + 1}: bad float {tok!r}"
            ) from None
        got += 1
    if got != count:
        raise GridParseError(f"{path}: line {last_line}: expected {count} values, got {got}")
    return values


def read_grid(path: str) -> LatentGrid:
    """Parse a GRID file; raises GridParseError with line/position context."""
    tokens = _read_tokens(path)
    h, w, c = _parse_header(tokens, path, "GRID", 3)
    values = _parse_values(tokens, path, h * w * c)
    return LatentGrid(values.reshape(h, w, c))


def write_grid(g: LatentGrid, path: str) -> None:
    """Write a GRID file, one image row per line, lossless float formatting."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"GRID {g.h} {g.w} {g.c}\n")
        rows = g.data.reshape(g.h, g.w * g.c)
        for row in rows:
            fh.write(" ".join(repr(v) for v in row.tolist()))
            fh.write("\n")


def read_mask(path: str) -> Mask:
    tokens = _read_tokens(path)
    h, w = _parse_header(tokens, path, "MASK", 2)
    values = _parse_values(tokens, path, h * w)
    if not np.isin(values, (0.0, 1.0)).all():
        raise GridParseError(f"{path}: mask values must be exactly 0 or 1")
    return Mask(values.reshape(h, w))


def write_mask(m: Mask, path: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"MASK {m.h} {m.w}\n")
        for row in m.data:
            fh.write(" ".join(str(int(v)) for v in row.tolist()))
            fh.write("\n")
