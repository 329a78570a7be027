"""Probe volumes, atlas geometry, octahedral mapping, and raw-size arithmetic.

A probe volume is a regular 3-D grid of irradiance probes. Each probe owns a
small square block of texels in one of two 2-D atlases:

* color atlas: 10x10 texel blocks, one 32-bit texel packing three 10-bit
  unsigned channels (two alpha bits unused),
* visibility atlas: 18x18 texel blocks, one texel holding a pair of 16-bit
  floats (mean distance, mean squared distance).

Block sides include a 1-texel guard band around an 8x8 (or 16x16) core; the
guard band is a deterministic function of the core (see `packing`).

Size units follow binary prefixes throughout: 1 kb = 1024 bits and
1 Mb = 1024 kb, which is what makes a 2048-probe color volume come out at
exactly 6.25 Mb and its 10 Hz stream at exactly 62.5 Mbps.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

KILOBIT = 1024
MEGABIT = 1024 * 1024

SNAPSHOT_MAGIC = b"PBV1"


class AtlasKind(enum.Enum):
    """The two streamed texture kinds and their per-probe geometry."""

    COLOR = "color"
    VISIBILITY = "visibility"

    @property
    def block_side(self) -> int:
        return 10 if self is AtlasKind.COLOR else 18

    @property
    def core_side(self) -> int:
        return self.block_side - 2

    @property
    def bits_per_texel(self) -> int:
        return 32

    @property
    def bits_per_probe(self) -> int:
        return self.block_side * self.block_side * self.bits_per_texel

    @property
    def channel_name(self) -> str:
        return self.value


def default_probes_per_row(probe_count: int) -> int:
    """Probe blocks per atlas row: 16 for small volumes, else near-square."""
    if probe_count <= 256:
        return 16
    return math.ceil(math.sqrt(probe_count))


@dataclass(frozen=True)
class ProbeVolume:
    """Immutable grid of probes with world-space placement and active flags.

    Grid index <-> (i, j, k) is the row-major bijection with i fastest:
    ``index = i + nx * (j + ny * k)``. Probe (i, j, k) sits at
    ``origin + spacing * (i, j, k)``.
    """

    dims: tuple[int, int, int]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    active: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < 1:
            raise ValueError(f"volume dims must be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.active is None:
            flags = np.ones(nx * ny * nz, dtype=bool)
        else:
            flags = np.asarray(self.active, dtype=bool)
            if flags.shape != (nx * ny * nz,):
                raise ValueError(
                    f"active flags shape {flags.shape} != ({nx * ny * nz},)"
                )
        flags = flags.copy()
        flags.setflags(write=False)
        object.__setattr__(self, "active", flags)

    @property
    def probe_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def active_count(self) -> int:
        return int(self.active.sum())

    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def grid_to_index(self, i: int, j: int, k: int) -> int:
        nx, ny, nz = self.dims
        if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
            raise IndexError(f"grid coords ({i},{j},{k}) outside dims {self.dims}")
        return i + nx * (j + ny * k)

    def index_to_grid(self, index: int) -> tuple[int, int, int]:
        nx, ny, _ = self.dims
        if not (0 <= index < self.probe_count):
            raise IndexError(f"probe index {index} outside [0, {self.probe_count})")
        i = index % nx
        j = (index // nx) % ny
        k = index // (nx * ny)
        return (i, j, k)

    def probe_position(self, index: int) -> np.ndarray:
        i, j, k = self.index_to_grid(index)
        return np.asarray(self.origin) + np.asarray(self.spacing) * (i, j, k)

    def probe_positions(self, indices: np.ndarray) -> np.ndarray:
        """World positions for an array of probe indices, shape (n, 3)."""
        indices = np.asarray(indices, dtype=np.int64)
        nx, ny, _ = self.dims
        ijk = np.stack(
            [indices % nx, (indices // nx) % ny, indices // (nx * ny)], axis=-1
        )
        return np.asarray(self.origin) + np.asarray(self.spacing) * ijk

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=np.float64)
        hi = lo + np.asarray(self.spacing) * (np.asarray(self.dims) - 1)
        return lo, hi


class ProbeAtlas:
    """2-D texel array holding one block per probe, row-major by probe index.

    Color atlases store one packed uint32 per texel (R in bits 0..9,
    G in 10..19, B in 20..29, alpha bits 30..31 unused and kept zero).
    Visibility atlases store raw float16 bit patterns as a (H, W, 2) uint16
    array so that NaN payloads and signed zeros survive round trips.
    """

    def __init__(
        self,
        kind: AtlasKind,
        probe_count: int,
        probes_per_row: int | None = None,
        texels: np.ndarray | None = None,
    ) -> None:
        if probe_count < 1:
            raise ValueError("probe_count must be >= 1")
        self.kind = kind
        self.probe_count = probe_count
        self.probes_per_row = probes_per_row or default_probes_per_row(probe_count)
        side = kind.block_side
        self.block_rows = math.ceil(probe_count / self.probes_per_row)
        shape: tuple[int, ...] = (self.block_rows * side, self.probes_per_row * side)
        dtype: type
        if kind is AtlasKind.COLOR:
            dtype = np.uint32
        else:
            shape = shape + (2,)
            dtype = np.uint16
        if texels is None:
            texels = np.zeros(shape, dtype=dtype)
        else:
            texels = np.asarray(texels, dtype=dtype)
            if texels.shape != shape:
                raise ValueError(f"texel shape {texels.shape} != expected {shape}")
        self.texels = texels

    @property
    def height(self) -> int:
        return self.texels.shape[0]

    @property
    def width(self) -> int:
        return self.texels.shape[1]

    def copy(self) -> "ProbeAtlas":
        return ProbeAtlas(
            self.kind, self.probe_count, self.probes_per_row, self.texels.copy()
        )

    def block_origin(self, probe: int) -> tuple[int, int]:
        if not (0 <= probe < self.probe_count):
            raise IndexError(f"probe {probe} outside [0, {self.probe_count})")
        side = self.kind.block_side
        row, col = divmod(probe, self.probes_per_row)
        return row * side, col * side

    def probe_block(self, probe: int) -> np.ndarray:
        """Writable view of a probe's full block (guard band included)."""
        y, x = self.block_origin(probe)
        side = self.kind.block_side
        return self.texels[y : y + side, x : x + side]

    def probe_core(self, probe: int) -> np.ndarray:
        """Writable view of a probe's core texels (guard band excluded)."""
        y, x = self.block_origin(probe)
        side = self.kind.block_side
        return self.texels[y + 1 : y + side - 1, x + 1 : x + side - 1]

    def blocks_equal(self, other: "ProbeAtlas", probe: int) -> bool:
        return bool(np.array_equal(self.probe_block(probe), other.probe_block(probe)))


def pack_color_texel(r: int, g: int, b: int) -> int:
    """Pack three 10-bit channels into one 32-bit texel (alpha bits zero)."""
    for name, v in (("r", r), ("g", g), ("b", b)):
        if not 0 <= v < 1024:
            raise ValueError(f"channel {name}={v} outside 10-bit range")
    return r | (g << 10) | (b << 20)


def color_channels(texels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split packed color texels into (R, G, B) uint16 arrays."""
    t = np.asarray(texels, dtype=np.uint32)
    r = (t & 0x3FF).astype(np.uint16)
    g = ((t >> 10) & 0x3FF).astype(np.uint16)
    b = ((t >> 20) & 0x3FF).astype(np.uint16)
    return r, g, b


def pack_color_channels(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inverse of `color_channels`; alpha bits come out zero."""
    for name, c in (("r", r), ("g", g), ("b", b)):
        if np.any(np.asarray(c) > 1023):
            raise ValueError(f"channel {name} exceeds 10-bit range")
    return (
        np.asarray(r, dtype=np.uint32)
        | (np.asarray(g, dtype=np.uint32) << 10)
        | (np.asarray(b, dtype=np.uint32) << 20)
    )


# --- octahedral direction mapping ------------------------------------------
#
# Equal-area octahedral map: the unit square's centre is +z, the corners meet
# at -z, and the diamond |f.x|+|f.y| = 1 (f = 2uv - 1) is the equator. The
# lower hemisphere is folded outward, with the sign convention that 0 folds
# like a positive coordinate.


def _sign_not_zero(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0.0, 1.0, -1.0)


def oct_encode(direction: np.ndarray, validate: bool = True) -> np.ndarray:
    """Map unit direction(s) to octahedral uv in the unit square.

    Accepts shape (3,) or (n, 3); returns matching (2,) or (n, 2).
    """
    d = np.asarray(direction, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norms = np.linalg.norm(d, axis=-1)
    if validate:
        if np.any(norms < 1e-12):
            raise ValueError("zero direction cannot be octahedrally encoded")
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("directions must be unit length within 1e-6")
    d = d / norms[..., None]
    denom = np.abs(d[..., 0]) + np.abs(d[..., 1]) + np.abs(d[..., 2])
    p = d[..., :2] / denom[..., None]
    lower = d[..., 2] < 0.0
    folded = (1.0 - np.abs(p[..., ::-1])) * _sign_not_zero(p)
    p = np.where(lower[..., None], folded, p)
    uv = p * 0.5 + 0.5
    return uv[0] if single else uv


def oct_decode(uv: np.ndarray) -> np.ndarray:
    """Inverse of `oct_encode`: octahedral uv back to a unit direction."""
    u = np.asarray(uv, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    f = u * 2.0 - 1.0
    z = 1.0 - np.abs(f[..., 0]) - np.abs(f[..., 1])
    xy = f
    folded = (1.0 - np.abs(f[..., ::-1])) * _sign_not_zero(f)
    xy = np.where((z < 0.0)[..., None], folded, xy)
    d = np.concatenate([xy, z[..., None]], axis=-1)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return d[0] if single else d


def texel_center_uv(core_side: int) -> np.ndarray:
    """uv at the centre of each core texel; shape (core_side, core_side, 2).

    Index order is (row, col) with u along columns and v along rows.
    """
    c = (np.arange(core_side) + 0.5) / core_side
    u, v = np.meshgrid(c, c, indexing="xy")
    return np.stack([u, v], axis=-1)


def texel_directions(core_side: int) -> np.ndarray:
    """Unit direction at each core texel centre; shape (side, side, 3)."""
    uv = texel_center_uv(core_side).reshape(-1, 2)
    return oct_decode(uv).reshape(core_side, core_side, 3)


def direction_to_core_texel(
    direction: np.ndarray, core_side: int, validate: bool = True
) -> np.ndarray:
    """Nearest core texel (row, col) for unit direction(s)."""
    uv = oct_encode(direction, validate=validate)
    uv = np.atleast_2d(uv)
    idx = np.clip((uv * core_side).astype(np.int64), 0, core_side - 1)
    rc = idx[..., ::-1]  # (v, u) -> (row, col)
    return rc[0] if np.asarray(direction).ndim == 1 else rc


# --- size and throughput arithmetic -----------------------------------------


def raw_bits(volume_or_count: "ProbeVolume | int", kind: AtlasKind) -> int:
    """Uncompressed texture size in bits for a full volume of probe blocks."""
    if isinstance(volume_or_count, ProbeVolume):
        count = volume_or_count.probe_count
    else:
        count = int(volume_or_count)
    if count < 0:
        raise ValueError("probe count must be >= 0")
    return count * kind.bits_per_probe


def throughput_bps(rate_hz: float, n_probes: int, kind: AtlasKind) -> float:
    """Required streaming throughput in bits/second at a given update rate."""
    if rate_hz < 0 or n_probes < 0:
        raise ValueError("rate and probe count must be >= 0")
    return rate_hz * n_probes * kind.bits_per_probe


def bits_to_mbps(bits_per_second: float) -> float:
    return bits_per_second / MEGABIT


def bits_to_megabytes(bits: float) -> float:
    return bits / 8 / (1024 * 1024)


# --- binary atlas snapshots --------------------------------------------------
#
# Golden-test snapshot layout (little-endian):
#   "PBV1" | u32 nx | u32 ny | u32 nz | u8 kind (0 color, 1 visibility)
#   | u16 probes_per_row | raw texel payload
# Color payload is H*W u32 texels; visibility payload is H*W*2 u16 halves.

_SNAPSHOT_HEADER = struct.Struct("<4sIIIBH")


def save_atlas_snapshot(atlas: ProbeAtlas, dims: tuple[int, int, int]) -> bytes:
    nx, ny, nz = dims
    if nx * ny * nz != atlas.probe_count:
        raise ValueError("dims do not match atlas probe count")
    kind_tag = 0 if atlas.kind is AtlasKind.COLOR else 1
    header = _SNAPSHOT_HEADER.pack(
        SNAPSHOT_MAGIC, nx, ny, nz, kind_tag, atlas.probes_per_row
    )
    payload = np.ascontiguousarray(atlas.texels).astype(
        atlas.texels.dtype.newbyteorder("<")
    )
    return header + payload.tobytes()


def load_atlas_snapshot(data: bytes) -> tuple[ProbeAtlas, tuple[int, int, int]]:
    if len(data) < _SNAPSHOT_HEADER.size:
        raise ValueError("snapshot truncated")
    magic, nx, ny, nz, kind_tag, ppr = _SNAPSHOT_HEADER.unpack_from(data, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    kind = AtlasKind.COLOR if kind_tag == 0 else AtlasKind.VISIBILITY
    atlas = ProbeAtlas(kind, nx * ny * nz, probes_per_row=ppr)
    raw = data[_SNAPSHOT_HEADER.size :]
    expect = atlas.texels.nbytes
    if len(raw) != expect:
        raise ValueError(f"snapshot payload {len(raw)} bytes, expected {expect}")
    texels = np.frombuffer(raw, dtype=atlas.texels.dtype.newbyteorder("<"))
    atlas.texels = texels.reshape(atlas.texels.shape).astype(atlas.texels.dtype)
    return atlas, (nx, ny, nz)
