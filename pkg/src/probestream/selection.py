"""Per-client probe selection: change detection, view culling, budgeting.

A probe is worth sending when it is active, its texels changed since the
last transmission to that client, and it can contribute to shading a point
the client might see. The potentially-visible set is gathered by casting a
grid of primary-view rays plus a deterministic uniform sphere of rays from
the camera position and collecting the probe cages of every hit point; rays
that escape the scene contribute the cage at the point where they leave the
probe volume, and the camera's own cell is always included so open scenes
never produce an empty selection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from probestream.volume import ProbeAtlas, ProbeVolume

RAY_EPS = 1e-6


class LayoutMismatchError(ValueError):
    pass


# --- scene geometry -----------------------------------------------------------


class SceneGeometry:
    """Axis-aligned boxes plus triangles with a nearest-hit ray query."""

    def __init__(self, boxes=None, triangles=None) -> None:
        self.boxes = (
            np.asarray(boxes, dtype=np.float64).reshape(-1, 2, 3)
            if boxes is not None and len(boxes)
            else np.zeros((0, 2, 3))
        )
        if np.any(self.boxes[:, 0] > self.boxes[:, 1]):
            raise ValueError("box min must be <= box max componentwise")
        self.triangles = (
            np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
            if triangles is not None and len(triangles)
            else np.zeros((0, 3, 3))
        )

    @property
    def primitive_count(self) -> int:
        return len(self.boxes) + len(self.triangles)

    def translated(self, offset) -> "SceneGeometry":
        off = np.asarray(offset, dtype=np.float64)
        return SceneGeometry(
            self.boxes + off if len(self.boxes) else None,
            self.triangles + off if len(self.triangles) else None,
        )

    def merged(self, other: "SceneGeometry") -> "SceneGeometry":
        return SceneGeometry(
            np.concatenate([self.boxes, other.boxes]),
            np.concatenate([self.triangles, other.triangles]),
        )

    def raycast(
        self, origins: np.ndarray, directions: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Nearest hits for a batch of rays.

        Returns (hit mask, t, points, normals); t is inf where rays miss.
        Normals face against the incoming ray.
        """
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        if o.shape[0] == 1 and d.shape[0] > 1:
            o = np.broadcast_to(o, d.shape)
        n = d.shape[0]
        best_t = np.full(n, np.inf)
        best_normal = np.zeros((n, 3))
        if len(self.boxes):
            t, normal = self._raycast_boxes(o, d)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_normal[closer] = normal[closer]
        if len(self.triangles):
            t, normal = self._raycast_triangles(o, d)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_normal[closer] = normal[closer]
        hit = np.isfinite(best_t)
        points = o + d * np.where(hit, best_t, 0.0)[:, None]
        return hit, best_t, points, best_normal

    def _raycast_boxes(self, o, d):
        safe_d = np.where(np.abs(d) < RAY_EPS, RAY_EPS, d)
        inv = 1.0 / safe_d
        lo = self.boxes[None, :, 0, :]  # (1, m, 3)
        hi = self.boxes[None, :, 1, :]
        t1 = (lo - o[:, None, :]) * inv[:, None, :]
        t2 = (hi - o[:, None, :]) * inv[:, None, :]
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near_ax = np.argmax(tmin, axis=2)
        far_ax = np.argmin(tmax, axis=2)
        tnear = np.take_along_axis(tmin, near_ax[..., None], 2)[..., 0]
        tfar = np.take_along_axis(tmax, far_ax[..., None], 2)[..., 0]
        valid = tnear <= tfar + RAY_EPS
        # entering hit from outside, or interior hit on the exit wall
        t_entry = np.where(valid & (tnear > RAY_EPS), tnear, np.inf)
        t_exit = np.where(valid & (tnear <= RAY_EPS) & (tfar > RAY_EPS), tfar, np.inf)
        t = np.minimum(t_entry, t_exit)
        axis = np.where(np.isfinite(t_entry), near_ax, far_ax)
        best = np.argmin(t, axis=1)
        rows = np.arange(len(o))
        t_best = t[rows, best]
        ax_best = axis[rows, best]
        normal = np.zeros((len(o), 3))
        sign = -np.sign(np.take_along_axis(d, ax_best[:, None], 1))[:, 0]
        normal[rows, ax_best] = np.where(sign == 0.0, 1.0, sign)
        return t_best, normal

    def _raycast_triangles(self, o, d):
        v0 = self.triangles[None, :, 0, :]
        e1 = self.triangles[None, :, 1, :] - v0
        e2 = self.triangles[None, :, 2, :] - v0
        dv = d[:, None, :]
        ov = o[:, None, :]
        pvec = np.cross(dv, e2)
        det = np.sum(e1 * pvec, axis=2)
        ok = np.abs(det) > RAY_EPS
        inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = ov - v0
        u = np.sum(tvec * pvec, axis=2) * inv_det
        qvec = np.cross(tvec, e1)
        v = np.sum(dv * qvec, axis=2) * inv_det
        t = np.sum(e2 * qvec, axis=2) * inv_det
        ok &= (u >= -RAY_EPS) & (v >= -RAY_EPS) & (u + v <= 1.0 + RAY_EPS)
        ok &= t > RAY_EPS
        t = np.where(ok, t, np.inf)
        best = np.argmin(t, axis=1)
        rows = np.arange(len(o))
        t_best = t[rows, best]
        face_n = np.cross(e1[0], e2[0])
        face_n = face_n / np.maximum(np.linalg.norm(face_n, axis=1, keepdims=True), 1e-30)
        normal = face_n[best]
        flip = np.sum(normal * d, axis=1) > 0
        normal[flip] *= -1.0
        return t_best, normal

    def to_dict(self) -> dict:
        return {
            "boxes": [
                {"min": list(b[0]), "max": list(b[1])} for b in self.boxes.tolist()
            ],
            "triangles": [t for t in self.triangles.tolist()],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneGeometry":
        boxes = [(b["min"], b["max"]) for b in data.get("boxes", [])]
        return cls(boxes or None, data.get("triangles") or None)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "SceneGeometry":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# --- camera -------------------------------------------------------------------


@dataclass
class CameraPose:
    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fov_y_deg: float = 90.0
    aspect: float = 1.0

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64)
        f = np.asarray(self.forward, dtype=np.float64)
        norm = np.linalg.norm(f)
        if norm < 1e-9:
            raise ValueError("camera forward vector must be nonzero")
        self.forward = f / norm
        self.up = np.asarray(self.up, dtype=np.float64)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        f = self.forward
        r = np.cross(f, self.up)
        if np.linalg.norm(r) < 1e-9:  # up parallel to forward: pick another up
            r = np.cross(f, np.array([1.0, 0.0, 0.0]))
            if np.linalg.norm(r) < 1e-9:
                r = np.cross(f, np.array([0.0, 0.0, 1.0]))
        r = r / np.linalg.norm(r)
        u = np.cross(r, f)
        return f, r, u

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "forward": list(self.forward),
            "up": list(self.up),
            "fov_y_deg": self.fov_y_deg,
            "aspect": self.aspect,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraPose":
        return cls(
            position=data["position"],
            forward=data["forward"],
            up=data.get("up", [0.0, 1.0, 0.0]),
            fov_y_deg=data.get("fov_y_deg", 90.0),
            aspect=data.get("aspect", 1.0),
        )


def frustum_directions(pose: CameraPose, cols: int, rows: int) -> np.ndarray:
    """Unit ray directions through a cols x rows grid over the view frustum."""
    f, r, u = pose.basis()
    tan_y = np.tan(np.radians(pose.fov_y_deg) / 2.0)
    tan_x = tan_y * pose.aspect
    xs = (np.arange(cols) + 0.5) / cols * 2.0 - 1.0
    ys = (np.arange(rows) + 0.5) / rows * 2.0 - 1.0
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    dirs = (
        f[None, :]
        + (gx.reshape(-1, 1) * tan_x) * r[None, :]
        + (gy.reshape(-1, 1) * tan_y) * u[None, :]
    )
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def fibonacci_sphere(count: int) -> np.ndarray:
    """Deterministic, near-uniform unit directions on the sphere."""
    if count < 1:
        return np.zeros((0, 3))
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    radius = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


# --- selection parameters -----------------------------------------------------


@dataclass
class SelectionParams:
    change_threshold: float = 0.0  # 0 means exact texel comparison
    sphere_rays: int = 1024
    raster_cols: int = 64
    raster_rows: int = 64
    budget: int | None = None  # max probes per update; None = unbounded

    def __post_init__(self) -> None:
        if self.raster_cols * self.raster_rows < 1 and self.sphere_rays < 1:
            raise ValueError("at least one ray is required")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")


# --- change detection ---------------------------------------------------------


def _per_probe_blocks(atlas: ProbeAtlas) -> np.ndarray:
    """(probe, side, side, ...) view in probe-index order, padding included."""
    side = atlas.kind.block_side
    rows = atlas.block_rows
    cols = atlas.probes_per_row
    rest = atlas.texels.shape[2:]
    a = atlas.texels.reshape(rows, side, cols, side, *rest)
    order = (0, 2, 1, 3) + tuple(range(4, 4 + len(rest)))
    return a.transpose(order).reshape(rows * cols, side, side, *rest)


def detect_changed(
    rendered: ProbeAtlas,
    last_sent: ProbeAtlas,
    volume: ProbeVolume,
    threshold: float = 0.0,
) -> np.ndarray:
    """Probe ids whose blocks differ from their last transmitted state.

    Threshold 0 is an exact comparison: any bit difference marks the probe.
    Inactive probes are never reported.
    """
    if (
        rendered.kind != last_sent.kind
        or rendered.probe_count != last_sent.probe_count
        or rendered.probes_per_row != last_sent.probes_per_row
    ):
        raise LayoutMismatchError("atlases do not share a layout")
    if rendered.probe_count != volume.probe_count:
        raise LayoutMismatchError("atlas probe count does not match volume")
    a = _per_probe_blocks(rendered)[: volume.probe_count]
    b = _per_probe_blocks(last_sent)[: volume.probe_count]
    reduce_axes = tuple(range(1, a.ndim))
    if threshold <= 0.0:
        changed = (a != b).any(axis=reduce_axes)
    elif rendered.kind.value == "color":
        diff = np.zeros(a.shape, dtype=np.int64)
        for shift in (0, 10, 20):
            ac = (a >> shift) & 0x3FF
            bc = (b >> shift) & 0x3FF
            diff = np.maximum(diff, np.abs(ac.astype(np.int64) - bc.astype(np.int64)))
        changed = (diff > threshold).any(axis=reduce_axes)
    else:
        av = a.view(np.float16).astype(np.float32)
        bv = b.view(np.float16).astype(np.float32)
        delta = np.abs(av - bv)
        changed = ((delta > threshold) | np.isnan(delta) & (a != b)).any(
            axis=reduce_axes
        )
    changed &= volume.active
    return np.flatnonzero(changed)


# --- probe cages and the potentially visible set ------------------------------


def cage_probes(points: np.ndarray, volume: ProbeVolume) -> np.ndarray:
    """The 8 cell-corner probe ids enclosing each point; shape (n, 8).

    Points outside the volume are clamped, so border cells repeat corners.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    dims = np.asarray(volume.dims)
    rel = (p - np.asarray(volume.origin)) / np.asarray(volume.spacing)
    low = np.clip(
        np.floor(rel).astype(np.int64), 0, np.maximum(dims - 2, 0)
    )
    corners = np.empty((len(p), 8), dtype=np.int64)
    nx, ny, _ = volume.dims
    idx = 0
    for dk in (0, 1):
        for dj in (0, 1):
            for di in (0, 1):
                i = np.minimum(low[:, 0] + di, dims[0] - 1)
                j = np.minimum(low[:, 1] + dj, dims[1] - 1)
                k = np.minimum(low[:, 2] + dk, dims[2] - 1)
                corners[:, idx] = i + nx * (j + ny * k)
                idx += 1
    return corners


def probes_for_point(point, volume: ProbeVolume) -> set[int]:
    """Set form of `cage_probes` for a single point."""
    return set(int(p) for p in cage_probes(np.asarray(point), volume)[0])


def _volume_exit_points(
    origin: np.ndarray, dirs: np.ndarray, volume: ProbeVolume
) -> tuple[np.ndarray, np.ndarray]:
    """Where rays leave the probe volume's bounding box; (mask, points)."""
    lo, hi = volume.bounds
    safe = np.where(np.abs(dirs) < RAY_EPS, RAY_EPS, dirs)
    inv = 1.0 / safe
    t1 = (lo[None, :] - origin[None, :]) * inv
    t2 = (hi[None, :] - origin[None, :]) * inv
    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    ok = (tnear <= tfar) & (tfar > 0.0)
    pts = origin[None, :] + dirs * np.where(ok, tfar, 0.0)[:, None]
    return ok, pts


def pvs_rays(pose: CameraPose, params: SelectionParams) -> np.ndarray:
    parts = []
    if params.raster_cols > 0 and params.raster_rows > 0:
        parts.append(frustum_directions(pose, params.raster_cols, params.raster_rows))
    if params.sphere_rays > 0:
        parts.append(fibonacci_sphere(params.sphere_rays))
    return np.concatenate(parts) if parts else np.zeros((0, 3))


def pvs_probes(
    pose: CameraPose,
    scene: SceneGeometry,
    volume: ProbeVolume,
    params: SelectionParams,
    rays: np.ndarray | None = None,
) -> np.ndarray:
    """Active probes that could shade any point visible from the camera."""
    if rays is None:
        rays = pvs_rays(pose, params)
    mask = np.zeros(volume.probe_count, dtype=bool)
    if len(rays):
        hit, _, points, _ = scene.raycast(pose.position, rays)
        if hit.any():
            mask[np.unique(cage_probes(points[hit], volume))] = True
        misses = ~hit
        if misses.any():
            ok, exits = _volume_exit_points(pose.position, rays[misses], volume)
            if ok.any():
                mask[np.unique(cage_probes(exits[ok], volume))] = True
    # the camera's own cell always contributes, so open scenes stay covered
    mask[cage_probes(pose.position, volume)[0]] = True
    mask &= volume.active
    return np.flatnonzero(mask)


# --- budgeted selection ---------------------------------------------------------


def select_for_client(
    changed,
    pvs,
    volume: ProbeVolume,
    last_sent_seq: np.ndarray,
    current_seq: int,
    budget: int | None = None,
) -> list[int]:
    """Order the sendable set by staleness and truncate to the budget.

    Staleness is update sequences since last transmission (never-sent probes
    are the most stale); ties break on ascending probe id. Probes truncated
    away stay changed relative to their last transmitted state, so they are
    reconsidered on the next update.
    """
    pvs_set = set(int(p) for p in pvs)
    ids = [
        int(p)
        for p in sorted(set(int(p) for p in changed))
        if p in pvs_set and volume.active[p]
    ]
    ids.sort(key=lambda p: (-(current_seq - int(last_sent_seq[p])), p))
    if budget is not None:
        ids = ids[:budget]
    return ids
