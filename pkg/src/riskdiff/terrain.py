"""Synthetic 2.5-D elevation beliefs and the ``.grid`` file format.

Grids are stored as ``(height, width)`` arrays indexed ``[iy, ix]``; cell
``(ix, iy)`` covers ``[ox + ix*res, ox + (ix+1)*res) x [oy + iy*res, ...)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

HAZARD_KINDS = ("ramp", "step", "rock-field", "pit")
GRID_MAGIC = "RDGRID"
GRID_VERSION = 1


class GridFormatError(ValueError):
    """Raised when a ``.grid`` file is malformed or violates an invariant."""


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not self.resolution > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) in meters."""
        ox, oy = self.origin
        return (ox, ox + self.width * self.resolution, oy, oy + self.height * self.resolution)

    def world_to_cell(self, points):
        """Map world points ``(..., 2)`` to integer cells ``(..., 2)`` as (ix, iy)."""
        pts = np.asarray(points, dtype=float)
        return np.floor((pts - np.asarray(self.origin)) / self.resolution).astype(np.int64)

    def in_bounds(self, cells) -> np.ndarray:
        cells = np.asarray(cells)
        return (
            (cells[..., 0] >= 0)
            & (cells[..., 0] < self.width)
            & (cells[..., 1] >= 0)
            & (cells[..., 1] < self.height)
        )

    def cell_center(self, ix, iy) -> np.ndarray:
        ox, oy = self.origin
        return np.stack(
            [ox + (np.asarray(ix) + 0.5) * self.resolution, oy + (np.asarray(iy) + 0.5) * self.resolution],
            axis=-1,
        )


@dataclass(frozen=True)
class ElevationBelief:
    """Per-cell Gaussian belief over elevation. Arrays are float32 and read-only."""

    spec: GridSpec
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float32)
        std = np.array(self.std, dtype=np.float32)
        if mean.shape != self.spec.shape or std.shape != self.spec.shape:
            raise ValueError(f"belief arrays {mean.shape}/{std.shape} do not match grid {self.spec.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("belief contains non-finite values")
        if np.any(std < 0):
            raise ValueError("belief std must be non-negative")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


@dataclass(frozen=True)
class Hazard:
    """A terrain feature centred at ``(x, y)`` (meters).

    ``size`` is the half-width of the square footprint (radius for pits);
    ``height`` is the rise (ramp, step, rocks) or depth (pit), in meters.
    """

    kind: str
    x: float
    y: float
    size: float
    height: float
    count: int = 6  # rocks in a rock-field

    def __post_init__(self):
        if self.kind not in HAZARD_KINDS:
            raise ValueError(f"unknown hazard kind {self.kind!r}; expected one of {HAZARD_KINDS}")
        if self.size <= 0 or self.height < 0:
            raise ValueError(f"hazard size must be > 0 and height >= 0, got {self.size}, {self.height}")


@dataclass(frozen=True)
class TerrainRecipe:
    width: int = 64
    height: int = 64
    resolution: float = 0.1
    origin: tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    roughness: float = 0.03
    roughness_cells: int = 8  # lattice spacing of the value noise
    noise_floor: float = 0.01
    edge_uncertainty: float = 0.02  # std gain per unit elevation gradient
    hazards: tuple[Hazard, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "hazards", tuple(
            h if isinstance(h, Hazard) else Hazard(**h) for h in self.hazards
        ))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def spec(self) -> GridSpec:
        return GridSpec(self.width, self.height, self.resolution, self.origin)

    def validate(self) -> None:
        spec = self.spec
        if self.roughness < 0 or self.noise_floor < 0 or self.edge_uncertainty < 0:
            raise ValueError("roughness, noise_floor and edge_uncertainty must be >= 0")
        if self.roughness_cells < 1:
            raise ValueError("roughness_cells must be >= 1")
        xmin, xmax, ymin, ymax = spec.extent
        for h in self.hazards:
            if h.x - h.size < xmin or h.x + h.size > xmax or h.y - h.size < ymin or h.y + h.size > ymax:
                raise ValueError(f"hazard {h.kind} at ({h.x}, {h.y}) size {h.size} exceeds grid bounds")

    def without(self, kinds) -> "TerrainRecipe":
        """Copy of the recipe with every hazard of the given kinds removed."""
        kinds = set(kinds)
        return replace(self, hazards=tuple(h for h in self.hazards if h.kind not in kinds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        d["hazards"] = [asdict(h) for h in self.hazards]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainRecipe":
        if not isinstance(d, dict):
            raise ValueError(f"a terrain recipe must be a JSON object, got {type(d).__name__}")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown terrain recipe keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        d["hazards"] = tuple(Hazard(**h) for h in d.get("hazards", ()))
        if "origin" in d:
            d["origin"] = tuple(d["origin"])
        return cls(**d)


def _value_noise(rng, spec: GridSpec, amplitude: float, lattice: int) -> np.ndarray:
    ny = spec.height // lattice + 2
    nx = spec.width // lattice + 2
    knots = rng.uniform(-0.5, 0.5, size=(ny, nx)) * amplitude
    interp = RegularGridInterpolator((np.arange(ny), np.arange(nx)), knots, method="linear")
    gy, gx = np.meshgrid(np.arange(spec.height) / lattice, np.arange(spec.width) / lattice, indexing="ij")
    return interp(np.stack([gy, gx], axis=-1))


def _cell_centers(spec: GridSpec):
    ox, oy = spec.origin
    xs = ox + (np.arange(spec.width) + 0.5) * spec.resolution
    ys = oy + (np.arange(spec.height) + 0.5) * spec.resolution
    return np.meshgrid(xs, ys, indexing="xy")


def _apply_hazard(elev, X, Y, hazard: Hazard, rng) -> None:
    dx = X - hazard.x
    dy = Y - hazard.y
    box = (np.abs(dx) <= hazard.size) & (np.abs(dy) <= hazard.size)
    if hazard.kind == "step":
        elev[box] += hazard.height
    elif hazard.kind == "ramp":
        # rises along +x, drops off at the far edge
        frac = (dx + hazard.size) / (2.0 * hazard.size)
        elev[box] += hazard.height * frac[box]
    elif hazard.kind == "pit":
        elev[np.hypot(dx, dy) <= hazard.size] -= hazard.height
    elif hazard.kind == "rock-field":
        rock = min(0.1, hazard.size / 2)
        centers = rng.uniform(-hazard.size + rock, hazard.size - rock, size=(hazard.count, 2))
        rocks = np.zeros(elev.shape, dtype=bool)
        for cx, cy in centers:
            rocks |= (np.abs(dx - cx) <= rock) & (np.abs(dy - cy) <= rock)
        elev[rocks] += hazard.height


def generate_terrain(recipe: TerrainRecipe) -> ElevationBelief:
    """Build an elevation belief from a recipe. Deterministic in ``recipe.seed``."""
    recipe.validate()
    spec = recipe.spec
    noise_ss, rocks_ss = np.random.SeedSequence(recipe.seed).spawn(2)
    mean = _value_noise(np.random.default_rng(noise_ss), spec, recipe.roughness, recipe.roughness_cells)
    X, Y = _cell_centers(spec)
    rock_rng = np.random.default_rng(rocks_ss)
    for hazard in recipe.hazards:
        _apply_hazard(mean, X, Y, hazard, rock_rng)

    if spec.height > 1 and spec.width > 1:
        gy, gx = np.gradient(mean, spec.resolution)
        grad = np.hypot(gx, gy)
    else:
        grad = np.zeros_like(mean)
    std = recipe.noise_floor + recipe.edge_uncertainty * grad
    return ElevationBelief(spec, mean.astype(np.float32), std.astype(np.float32))


def load_recipe(path) -> TerrainRecipe:
    with open(path) as fh:
        return TerrainRecipe.from_dict(json.load(fh))


def save_recipe(recipe: TerrainRecipe, path) -> None:
    with open(path, "w") as fh:
        json.dump(recipe.to_dict(), fh, indent=2, sort_keys=True)


# --- .grid files ---------------------------------------------------------


def write_grid(path, spec: GridSpec, channels, extra: dict | None = None) -> None:
    """Write float32 channels with a one-line text header.

    Header: ``RDGRID <version> <channels> <width> <height> <res> <ox> <oy> [key=value ...]``.
    The payload is row-major little-endian float32, channel after channel.
    """
    channels = [np.asarray(c, dtype="<f4") for c in channels]
    for c in channels:
        if c.shape != spec.shape:
            raise ValueError(f"channel shape {c.shape} does not match grid {spec.shape}")
    fields = [
        GRID_MAGIC, str(GRID_VERSION), str(len(channels)), str(spec.width), str(spec.height),
        repr(float(spec.resolution)), repr(spec.origin[0]), repr(spec.origin[1]),
    ]
    for key, value in sorted((extra or {}).items()):
        fields.append(f"{key}={value!r}")
    with open(path, "wb") as fh:
        fh.write((" ".join(fields) + "\n").encode("ascii"))
        for c in channels:
            fh.write(np.ascontiguousarray(c).tobytes())


def read_grid(path) -> tuple[GridSpec, list[np.ndarray], dict]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise GridFormatError(f"{path}: missing header line")
    try:
        fields = data[:nl].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise GridFormatError(f"{path}: header is not ASCII") from exc
    if len(fields) < 8 or fields[0] != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic or short header")
    try:
        version, nch, width, height = (int(v) for v in fields[1:5])
        res, ox, oy = (float(v) for v in fields[5:8])
    except ValueError as exc:
        raise GridFormatError(f"{path}: unparseable header: {exc}") from exc
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported grid version {version}")
    extra = {}
    for tok in fields[8:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise GridFormatError(f"{path}: bad header token {tok!r}")
        extra[key] = float(value)
    try:
        spec = GridSpec(width, height, res, (ox, oy))
    except ValueError as exc:
        raise GridFormatError(f"{path}: {exc}") from exc
    if nch < 1:
        raise GridFormatError(f"{path}: channel count must be >= 1")
    payload = data[nl + 1:]
    expected = nch * width * height * 4
    if len(payload) != expected:
        raise GridFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype="<f4")
    if not np.all(np.isfinite(flat)):
        raise GridFormatError(f"{path}: payload contains non-finite values")
    n = width * height
    chans = [flat[i * n:(i + 1) * n].reshape(height, width).astype(np.float32) for i in range(nch)]
    return spec, chans, extra


def save_grid(belief: ElevationBelief, path) -> None:
    write_grid(path, belief.spec, [belief.mean, belief.std])


def load_grid(path) -> ElevationBelief:
    spec, chans, _ = read_grid(path)
    if len(chans) != 2:
        raise GridFormatError(f"{path}: elevation belief needs 2 channels, found {len(chans)}")
    if np.any(chans[1] < 0):
        raise GridFormatError(f"{path}: negative std in belief")
    return ElevationBelief(spec, chans[0], chans[1])


def load_terrain(path) -> ElevationBelief:
    """Load a belief from a ``.grid`` file, or generate one from a JSON recipe."""
    if str(path).endswith(".grid"):
        return load_grid(path)
    return generate_terrain(load_recipe(path))


def random_hazard(rng, kind: str, spec: GridSpec, size_range=(0.3, 0.7), height_range=(0.25, 0.5),
                  margin: float = 0.0) -> Hazard:
    """Uniformly placed hazard that fits inside the grid."""
    size = float(rng.uniform(*size_range))
    xmin, xmax, ymin, ymax = spec.extent
    lo = size + margin
    x = float(rng.uniform(xmin + lo, xmax - lo))
    y = float(rng.uniform(ymin + lo, ymax - lo))
    height = float(rng.uniform(*height_range))
    return Hazard(kind, x, y, size, height)


def grid_cells_within(radius: float, resolution: float) -> np.ndarray:
    """Integer (dx, dy) offsets of cells whose centres lie within ``radius``."""
    r = int(math.ceil(radius / resolution))
    d = np.arange(-r, r + 1)
    DX, DY = np.meshgrid(d, d, indexing="xy")
    keep = (DX * DX + DY * DY) * resolution**2 <= radius**2 + 1e-12
    return np.stack([DX[keep], DY[keep]], axis=-1)
