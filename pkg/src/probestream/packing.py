"""Bit-exact layout transforms between probe atlases and codec plane sets.

Four families of transforms live here, all lossless by construction:

* color texels <-> three 16-bit YUV planes carrying 10-bit values,
* visibility texels (pairs of raw float16 halves) <-> three 8-bit YUV planes
  via byte distribution, with rows widened to ceil(4x/3) elements,
* probe block <-> core block (guard band strip / reconstruct by the
  octahedral wrap rule),
* probe-group texel interleaving (the atlas arrangement experiment).

Plus the update-atlas slot allocator with per-probe slot caching.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass

import numpy as np

from probestream.volume import AtlasKind, ProbeAtlas


class PlaneKind(enum.Enum):
    COLOR_10IN16 = "color-10in16"
    VISIBILITY_BYTES = "visibility-bytes"

    @property
    def dtype(self) -> type:
        return np.uint16 if self is PlaneKind.COLOR_10IN16 else np.uint8


@dataclass
class PlaneSet:
    """Three equally sized planes (Y, U, V) ready for frame encoding."""

    kind: PlaneKind
    data: np.ndarray  # shape (3, height, width)

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"plane data must be (3, h, w), got {self.data.shape}")
        if self.data.dtype != self.kind.dtype:
            raise ValueError(
                f"plane dtype {self.data.dtype} does not match {self.kind}"
            )

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def element_bits(self) -> int:
        return self.data.dtype.itemsize * 8

    def copy(self) -> "PlaneSet":
        return PlaneSet(self.kind, self.data.copy())

    def equals(self, other: "PlaneSet") -> bool:
        return self.kind == other.kind and np.array_equal(self.data, other.data)


# --- color packing -----------------------------------------------------------


def pack_color(texels: np.ndarray) -> PlaneSet:
    """Packed 32-bit color texels -> 16-bit YUV planes (R->Y, G->U, B->V).

    The two alpha bits are dropped; every plane element stays < 1024 with the
    upper six bits zero.
    """
    t = np.asarray(texels, dtype=np.uint32)
    if t.ndim != 2:
        raise ValueError("color texel region must be 2-D")
    planes = np.stack(
        [
            (t & 0x3FF).astype(np.uint16),
            ((t >> 10) & 0x3FF).astype(np.uint16),
            ((t >> 20) & 0x3FF).astype(np.uint16),
        ]
    )
    return PlaneSet(PlaneKind.COLOR_10IN16, planes)


def unpack_color(planes: PlaneSet) -> np.ndarray:
    """Inverse of `pack_color`; alpha bits come back zero."""
    if planes.kind is not PlaneKind.COLOR_10IN16:
        raise ValueError("expected color plane set")
    y, u, v = planes.data.astype(np.uint32)
    if np.any(planes.data > 1023):
        raise ValueError("color plane element exceeds 10-bit range")
    return y | (u << 10) | (v << 20)


# --- visibility packing ------------------------------------------------------


def widened_width(texel_width: int) -> int:
    """Plane width in elements for a visibility row of `texel_width` texels."""
    if texel_width < 0:
        raise ValueError("width must be >= 0")
    return math.ceil(4 * texel_width / 3)


def pack_visibility(texels: np.ndarray) -> PlaneSet:
    """Visibility texels -> 8-bit YUV planes by row-wise byte distribution.

    Each texel contributes four bytes (R-hi, R-lo, G-hi, G-lo; most
    significant byte first). Per row the byte stream s is laid out as
    Y[p] = s[3p], U[p] = s[3p+1], V[p] = s[3p+2]; trailing pad bytes are zero.
    """
    t = np.asarray(texels, dtype=np.uint16)
    if t.ndim != 3 or t.shape[2] != 2:
        raise ValueError("visibility texel region must be (h, w, 2)")
    h, w, _ = t.shape
    wide = widened_width(w)
    stream = np.zeros((h, 3 * wide), dtype=np.uint8)
    # byte stream per row: hi/lo of R then hi/lo of G, texel by texel
    interleaved = np.empty((h, w, 4), dtype=np.uint8)
    interleaved[..., 0] = t[..., 0] >> 8
    interleaved[..., 1] = t[..., 0] & 0xFF
    interleaved[..., 2] = t[..., 1] >> 8
    interleaved[..., 3] = t[..., 1] & 0xFF
    stream[:, : 4 * w] = interleaved.reshape(h, 4 * w)
    planes = stream.reshape(h, wide, 3).transpose(2, 0, 1)
    return PlaneSet(PlaneKind.VISIBILITY_BYTES, np.ascontiguousarray(planes))


def unpack_visibility(planes: PlaneSet, texel_width: int) -> np.ndarray:
    """Inverse of `pack_visibility` for rows of `texel_width` texels."""
    if planes.kind is not PlaneKind.VISIBILITY_BYTES:
        raise ValueError("expected visibility plane set")
    if widened_width(texel_width) != planes.width:
        raise ValueError(
            f"plane width {planes.width} does not match "
            f"{texel_width} texels per row"
        )
    h = planes.height
    stream = planes.data.transpose(1, 2, 0).reshape(h, 3 * planes.width)
    raw = stream[:, : 4 * texel_width].reshape(h, texel_width, 4)
    out = np.empty((h, texel_width, 2), dtype=np.uint16)
    out[..., 0] = (raw[..., 0].astype(np.uint16) << 8) | raw[..., 1]
    out[..., 1] = (raw[..., 2].astype(np.uint16) << 8) | raw[..., 3]
    return out


def pack_texels(texels: np.ndarray, kind: AtlasKind) -> PlaneSet:
    if kind is AtlasKind.COLOR:
        return pack_color(texels)
    return pack_visibility(texels)


def unpack_texels(planes: PlaneSet, kind: AtlasKind, texel_width: int) -> np.ndarray:
    if kind is AtlasKind.COLOR:
        return unpack_color(planes)
    return unpack_visibility(planes, texel_width)


# --- guard bands -------------------------------------------------------------
#
# A probe block is its core plus a 1-texel border. Crossing an edge of the
# octahedral square wraps to the same edge mirrored, so each border texel
# duplicates a core texel: edges copy the adjacent core row/column reversed,
# corners copy the diagonally opposite core corner.


def strip_guard_band(block: np.ndarray) -> np.ndarray:
    if block.shape[0] != block.shape[1] or block.shape[0] < 3:
        raise ValueError(f"probe block must be square with side >= 3, got {block.shape}")
    return block[1:-1, 1:-1].copy()


def reconstruct_guard_band(core: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Rebuild a full block from a core by the octahedral wrap rule."""
    n = core.shape[0]
    if core.shape[1] != n or n < 1:
        raise ValueError(f"core must be square, got {core.shape}")
    if out is None:
        out = np.empty((n + 2, n + 2) + core.shape[2:], dtype=core.dtype)
    out[1:-1, 1:-1] = core
    out[0, 1:-1] = core[0, ::-1]
    out[-1, 1:-1] = core[-1, ::-1]
    out[1:-1, 0] = core[::-1, 0]
    out[1:-1, -1] = core[::-1, -1]
    out[0, 0] = core[-1, -1]
    out[0, -1] = core[-1, 0]
    out[-1, 0] = core[0, -1]
    out[-1, -1] = core[0, 0]
    return out


def guard_band_valid(block: np.ndarray) -> bool:
    """True when the border equals the wrap-rule reconstruction of the core."""
    core = block[1:-1, 1:-1]
    return bool(np.array_equal(reconstruct_guard_band(core), block))


def guard_band_reduction(kind: AtlasKind) -> float:
    """Fractional size saved by stripping the guard band from one probe."""
    return 1.0 - (kind.core_side**2) / (kind.block_side**2)


def packed_reduction(kind: AtlasKind, active_fraction: float) -> float:
    """Reduction from dropping inactive probes and stripping guard bands."""
    return 1.0 - active_fraction * (kind.core_side**2) / (kind.block_side**2)


def overall_reduction(active_fraction: float) -> float:
    """Bit-weighted combined reduction across color and visibility textures."""
    before = AtlasKind.COLOR.bits_per_probe + AtlasKind.VISIBILITY.bits_per_probe
    after = active_fraction * 32 * (
        AtlasKind.COLOR.core_side**2 + AtlasKind.VISIBILITY.core_side**2
    )
    return 1.0 - after / before


# --- update atlas slots ------------------------------------------------------


class SlotOverflowError(RuntimeError):
    pass


class UpdateAtlasLayout:
    """Slot allocator for the per-client probe update texture.

    Slots hold stripped probe cores. A probe keeps its cached slot across
    updates so the temporal codec sees stable block positions; uncached
    probes take the lowest free slot in ascending probe-id order, and when no
    slot is free the least recently selected cached probe is evicted. The
    whole state machine is deterministic in the sequence of selected probe
    sets, so a receiver holding a twin layout reproduces identical
    assignments from probe ids alone.
    """

    def __init__(
        self, slot_count: int, core_side: int, slots_per_row: int | None = None
    ) -> None:
        if slot_count < 1:
            raise ValueError("slot_count must be >= 1")
        self.slot_count = slot_count
        self.core_side = core_side
        self.slots_per_row = slots_per_row or math.ceil(math.sqrt(slot_count))
        self.slot_rows = math.ceil(slot_count / self.slots_per_row)
        self.probe_slot: dict[int, int] = {}
        self.slot_probe: dict[int, int] = {}
        self.last_selected: dict[int, int] = {}
        self._free: list[int] = list(range(slot_count))
        heapq.heapify(self._free)
        self._tick = 0

    @property
    def width(self) -> int:
        return self.slots_per_row * self.core_side

    @property
    def height(self) -> int:
        return self.slot_rows * self.core_side

    def texel_shape(self, kind: AtlasKind) -> tuple[int, ...]:
        if kind is AtlasKind.COLOR:
            return (self.height, self.width)
        return (self.height, self.width, 2)

    def slot_origin(self, slot: int) -> tuple[int, int]:
        if not (0 <= slot < self.slot_count):
            raise IndexError(f"slot {slot} outside [0, {self.slot_count})")
        row, col = divmod(slot, self.slots_per_row)
        return row * self.core_side, col * self.core_side

    def slot_region(self, texels: np.ndarray, slot: int) -> np.ndarray:
        y, x = self.slot_origin(slot)
        s = self.core_side
        return texels[y : y + s, x : x + s]

    def assign(self, probes) -> list[tuple[int, int]]:
        """Assign slots for a selected probe set; returns (slot, probe) pairs
        sorted by slot. Mutates the cache."""
        selected = sorted(set(int(p) for p in probes))
        if len(selected) > self.slot_count:
            raise SlotOverflowError(
                f"{len(selected)} probes selected for {self.slot_count} slots; "
                "budget the selection upstream"
            )
        self._tick += 1
        selected_set = set(selected)
        for probe in selected:
            if probe in self.probe_slot:
                continue
            if self._free:
                slot = heapq.heappop(self._free)
            else:
                slot = self._evict(selected_set)
            self.probe_slot[probe] = slot
            self.slot_probe[slot] = probe
        for probe in selected:
            self.last_selected[probe] = self._tick
        return sorted((self.probe_slot[p], p) for p in selected)

    def _evict(self, keep: set[int]) -> int:
        victim = min(
            (p for p in self.probe_slot if p not in keep),
            key=lambda p: (self.last_selected.get(p, 0), self.probe_slot[p]),
            default=None,
        )
        if victim is None:
            raise SlotOverflowError("no evictable slot")
        slot = self.probe_slot.pop(victim)
        del self.slot_probe[slot]
        return slot


def build_update_atlas(
    selected,
    layout: UpdateAtlasLayout,
    source: ProbeAtlas,
    update_texels: np.ndarray | None = None,
) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Write selected probes' stripped cores into their slots.

    `update_texels` persists across calls; slots belonging to unselected
    cached probes keep their previous contents so the temporal codec sees a
    stable background. Returns the texel array and the (slot, probe) entries.
    """
    if update_texels is None:
        update_texels = np.zeros(layout.texel_shape(source.kind), source.texels.dtype)
    entries = layout.assign(selected)
    for slot, probe in entries:
        core = strip_guard_band(source.probe_block(probe))
        layout.slot_region(update_texels, slot)[:] = core
    return update_texels, entries


def apply_update_entries(
    entries: list[tuple[int, int]],
    update_texels: np.ndarray,
    layout: UpdateAtlasLayout,
    target: ProbeAtlas,
) -> None:
    """Copy slot cores into target probe blocks, rebuilding guard bands."""
    for slot, probe in entries:
        core = layout.slot_region(update_texels, slot)
        reconstruct_guard_band(core, out=target.probe_block(probe))


# --- atlas arrangement experiment --------------------------------------------


def interleave_layout(texels: np.ndarray, block_side: int, group: int) -> np.ndarray:
    """Interleave texels of `group` x `group` neighbouring probe blocks.

    With group k, the k*k blocks of a group are merged so that the k*k texels
    sharing one direction sit adjacently. k = 1 is the identity.
    """
    if group not in (1, 2, 4):
        raise ValueError("group must be 1, 2 or 4")
    if group == 1:
        return texels.copy()
    h, w = texels.shape[:2]
    if h % block_side or w % block_side:
        raise ValueError("texel dims must be a multiple of the block side")
    rows, cols = h // block_side, w // block_side
    if rows % group or cols % group:
        raise ValueError(
            f"probe grid {rows}x{cols} not divisible by group {group}"
        )
    rest = texels.shape[2:]
    a = texels.reshape(
        rows // group, group, block_side, cols // group, group, block_side, *rest
    )
    out = a.transpose(0, 2, 1, 3, 5, 4, *range(6, 6 + len(rest)))
    return np.ascontiguousarray(out).reshape(texels.shape)


def deinterleave_layout(texels: np.ndarray, block_side: int, group: int) -> np.ndarray:
    """Inverse of `interleave_layout`."""
    if group not in (1, 2, 4):
        raise ValueError("group must be 1, 2 or 4")
    if group == 1:
        return texels.copy()
    h, w = texels.shape[:2]
    if h % block_side or w % block_side:
        raise ValueError("texel dims must be a multiple of the block side")
    rows, cols = h // block_side, w // block_side
    if rows % group or cols % group:
        raise ValueError(
            f"probe grid {rows}x{cols} not divisible by group {group}"
        )
    rest = texels.shape[2:]
    a = texels.reshape(
        rows // group, block_side, group, cols // group, block_side, group, *rest
    )
    out = a.transpose(0, 2, 1, 3, 5, 4, *range(6, 6 + len(rest)))
    return np.ascontiguousarray(out).reshape(texels.shape)
