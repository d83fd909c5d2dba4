"""Cone-beam forward projection of 3-D volumes into line-integral images.

Ray-driven with a fixed step and trilinear interpolation: each detector
pixel accumulates volume samples along the ray from the source through
the pixel center, midpoint rule, in units of (volume value) * mm. The MR
and X-ray volumes of a phantom are projected with identical geometries,
so every view yields a registered image pair by construction.

World coordinates are millimeters; the isocenter is the world origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ParameterError

MODALITIES = ("MR", "XRAY", "SYNTH")


@dataclass
class Volume3D:
    """Scalar 3-D field on a regular grid.

    ``data`` is indexed [ix, iy, iz]; ``origin`` is the world position of
    the center of voxel (0, 0, 0). Values are MR intensity (a.u.) or X-ray
    attenuation per mm depending on ``modality``.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    data: np.ndarray
    modality: str = "MR"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if any(d < 1 for d in self.dims):
            raise ParameterError(f"dims must be >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ParameterError(f"spacings must be > 0, got {self.spacing}")
        self.data = np.asarray(self.data, dtype=np.float32).reshape(self.dims)

    @property
    def extent(self):
        """Support box of the trilinearly interpolated field, one voxel
        beyond the outermost voxel centers (where the field reaches 0)."""
        o = np.asarray(self.origin)
        s = np.asarray(self.spacing)
        d = np.asarray(self.dims)
        return o - s, o + d * s

    @classmethod
    def centered(cls, dims, spacing, data, modality="MR"):
        """Volume whose voxel grid is centered on the world origin."""
        dims = tuple(int(d) for d in dims)
        spacing = tuple(float(s) for s in spacing)
        origin = tuple(-(d - 1) * s / 2.0 for d, s in zip(dims, spacing))
        return cls(dims=dims, spacing=spacing, origin=origin, data=data, modality=modality)


@dataclass
class ProjectionGeometry:
    """One cone-beam view: point source plus a flat 2-D detector.

    ``detector_axes`` are the orthonormal in-plane directions (u, v);
    pixel (iu, iv) is centered at
    detector_center + (iu - (nu-1)/2)*du*u + (iv - (nv-1)/2)*dv*v.
    """

    source_position: np.ndarray
    detector_center: np.ndarray
    detector_axes: tuple
    detector_dims: tuple
    detector_spacing: tuple
    sid: float = field(default=None)
    sdd: float = field(default=None)
    angle_deg: float = 0.0

    def __post_init__(self):
        self.source_position = np.asarray(self.source_position, dtype=np.float64)
        self.detector_center = np.asarray(self.detector_center, dtype=np.float64)
        u, v = (np.asarray(a, dtype=np.float64) for a in self.detector_axes)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise GeometryError("detector axes must be orthonormal (within 1e-9)")
        self.detector_axes = (u, v)
        self.detector_dims = tuple(int(d) for d in self.detector_dims)
        self.detector_spacing = tuple(float(s) for s in self.detector_spacing)
        if any(d < 1 for d in self.detector_dims) or any(s <= 0 for s in self.detector_spacing):
            raise ParameterError("detector dims must be >= 1 and spacings > 0")
        if self.sdd is None:
            self.sdd = float(np.linalg.norm(self.detector_center - self.source_position))
        if self.sid is None:
            self.sid = float(np.linalg.norm(self.source_position))
        if not self.sdd > self.sid > 0:
            raise GeometryError(f"need SDD > SID > 0, got SDD={self.sdd}, SID={self.sid}")

    def pixel_centers(self):
        """World positions of all pixel centers, shape (nv, nu, 3)."""
        nu, nv = self.detector_dims
        du, dv = self.detector_spacing
        u_axis, v_axis = self.detector_axes
        us = (np.arange(nu) - (nu - 1) / 2.0) * du
        vs = (np.arange(nv) - (nv - 1) / 2.0) * dv
        return (
            self.detector_center[None, None, :]
            + vs[:, None, None] * v_axis[None, None, :]
            + us[None, :, None] * u_axis[None, None, :]
        )


@dataclass
class ProjectionImage:
    """2-D line-integral image from one view.

    ``data`` is indexed [iv, iu] (v slow, u fast); dims are (nu, nv).
    """

    dims: tuple
    spacing: tuple
    data: np.ndarray
    modality: str = "MR"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.modality not in MODALITIES:
            raise ParameterError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        nu, nv = self.dims
        self.data = np.asarray(self.data, dtype=np.float32).reshape((nv, nu))
        if not np.isfinite(self.data).all():
            from .errors import NumericalError

            raise NumericalError("projection image holds non-finite values")

    @property
    def n_pixels(self):
        return self.dims[0] * self.dims[1]


# ---------------------------------------------------------------------------
# Sampling and projection
# ---------------------------------------------------------------------------

def _trilinear(volume, points):
    """Trilinear interpolation at world points (M, 3); 0 outside support."""
    f = (points - np.asarray(volume.origin)) / np.asarray(volume.spacing)
    i0 = np.floor(f).astype(np.int64)
    frac = f - i0
    dims = np.asarray(volume.dims)
    values = np.zeros(len(points), dtype=np.float64)
    arr = volume.data
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = i0[:, 0] + dx
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = i0[:, 1] + dy
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = i0[:, 2] + dz
                inside = (
                    (ix >= 0) & (ix < dims[0])
                    & (iy >= 0) & (iy < dims[1])
                    & (iz >= 0) & (iz < dims[2])
                )
                w = wx * wy * wz * inside
                values += w * arr[
                    np.clip(ix, 0, dims[0] - 1),
                    np.clip(iy, 0, dims[1] - 1),
                    np.clip(iz, 0, dims[2] - 1),
                ]
    return values


def sample_trilinear(volume, point_mm):
    """Trilinearly interpolated volume value at one world point (mm)."""
    return float(_trilinear(volume, np.asarray(point_mm, dtype=np.float64).reshape(1, 3))[0])


def _ray_box_intersections(origins, dirs, box_lo, box_hi):
    """Slab-method entry/exit parameters; t1 <= t0 means a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (box_lo[None, :] - origins) * inv
        t_b = (box_hi[None, :] - origins) * inv
    t_lo = np.minimum(t_a, t_b)
    t_hi = np.maximum(t_a, t_b)
    # Axis-parallel rays: ignore the degenerate axis unless outside the slab.
    parallel = dirs == 0
    outside = parallel & ((origins < box_lo[None, :]) | (origins > box_hi[None, :]))
    t_lo = np.where(parallel, -np.inf, t_lo)
    t_hi = np.where(parallel, np.inf, t_hi)
    t0 = np.maximum(t_lo.max(axis=1), 0.0)
    t1 = t_hi.min(axis=1)
    t1 = np.where(outside.any(axis=1), t0, t1)
    return t0, t1


def forward_project(volume, geometry, step_mm=None):
    """Project a volume into a line-integral image for one view.

    Midpoint-rule quadrature with at most ``step_mm`` between samples
    (default: half the smallest voxel spacing). Rays that miss the volume
    yield 0. Raises GeometryError when the source sits inside the volume
    support box.
    """
    if step_mm is None:
        step_mm = min(volume.spacing) / 2.0
    if step_mm <= 0:
        raise ParameterError(f"step_mm must be > 0, got {step_mm}")
    box_lo, box_hi = volume.extent
    src = geometry.source_position
    if np.all(src >= box_lo) and np.all(src <= box_hi):
        raise GeometryError("source position lies inside the volume support box")

    nu, nv = geometry.detector_dims
    pixels = geometry.pixel_centers().reshape(-1, 3)
    dirs = pixels - src[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    t0, t1 = _ray_box_intersections(np.broadcast_to(src, dirs.shape).copy(), dirs, box_lo, box_hi)
    length = np.maximum(t1 - t0, 0.0)
    n_steps = np.ceil(length / step_mm).astype(np.int64)
    hit = n_steps > 0
    dt = np.zeros_like(length)
    dt[hit] = length[hit] / n_steps[hit]

    acc = np.zeros(len(dirs), dtype=np.float64)
    active_idx = np.nonzero(hit)[0]
    for j in range(int(n_steps.max(initial=0))):
        active_idx = active_idx[n_steps[active_idx] > j]
        if active_idx.size == 0:
            break
        t = t0[active_idx] + (j + 0.5) * dt[active_idx]
        pts = src[None, :] + t[:, None] * dirs[active_idx]
        acc[active_idx] += _trilinear(volume, pts) * dt[active_idx]

    return ProjectionImage(
        dims=(nu, nv),
        spacing=geometry.detector_spacing,
        data=acc.reshape(nv, nu),
        modality=volume.modality,
    )


def make_circular_trajectory(n_views, angular_range_deg, sid, sdd, detector, start_deg=0.0):
    """Equally spaced views on a circle about the isocenter.

    The source rotates about the world z axis at radius SID; the detector
    sits SDD - SID beyond the isocenter, perpendicular to the central ray,
    with its v axis along z. ``detector`` is (nu, nv, du, dv). Angles are
    start + range*i/n for i in 0..n-1 (endpoint excluded, so a 360 degree
    sweep does not duplicate view 0).
    """
    if n_views < 1:
        raise ParameterError(f"n_views must be >= 1, got {n_views}")
    if not sdd > sid > 0:
        raise ParameterError(f"need sdd > sid > 0, got sid={sid}, sdd={sdd}")
    nu, nv, du, dv = detector
    views = []
    for i in range(n_views):
        ang = start_deg + angular_range_deg * i / n_views
        theta = np.deg2rad(ang)
        c, s = np.cos(theta), np.sin(theta)
        src = np.array([sid * c, sid * s, 0.0])
        central = -np.array([c, s, 0.0])
        views.append(
            ProjectionGeometry(
                source_position=src,
                detector_center=src + sdd * central,
                detector_axes=(np.array([-s, c, 0.0]), np.array([0.0, 0.0, 1.0])),
                detector_dims=(nu, nv),
                detector_spacing=(du, dv),
                sid=float(sid),
                sdd=float(sdd),
                angle_deg=float(ang),
            )
        )
    return views
