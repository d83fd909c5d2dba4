"""Procedural digital head phantom with paired MR / X-ray contrast.

The phantom is a prioritized composite of ellipsoids (3-D Shepp-Logan
style); a voxel belongs to the highest-priority ellipsoid containing it,
and both output volumes read their value from that voxel's material. MR
intensity and X-ray attenuation are assigned per material with
deliberately non-monotonic contrast (bone: bright X-ray, dark MR), so
translating between the modalities is more than an intensity remap.

Rasterization supersamples each voxel (default 2x2x2 sub-centers) to get
partial-volume boundary values, which both stabilizes projector accuracy
and makes total attenuation converge under grid refinement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .projector import Volume3D


@dataclass(frozen=True)
class Material:
    mr_intensity: float
    xray_mu: float  # attenuation per mm


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple  # mm
    semi_axes: tuple  # mm
    rotation_deg: tuple = (0.0, 0.0, 0.0)  # intrinsic z-y-x Euler angles
    material: str = "soft_tissue"
    priority: int = 0

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ParameterError(f"semi-axes must be > 0, got {self.semi_axes}")

    def rotation_matrix(self):
        az, ay, ax = (np.deg2rad(a) for a in self.rotation_deg)
        cz, sz = np.cos(az), np.sin(az)
        cy, sy = np.cos(ay), np.sin(ay)
        cx, sx = np.cos(ax), np.sin(ax)
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        return rz @ ry @ rx

    def contains(self, points):
        """Insideness test: normalized quadratic form <= 1. points: (M, 3)."""
        local = (points - np.asarray(self.center)) @ self.rotation_matrix()
        q = (local / np.asarray(self.semi_axes)) ** 2
        return q.sum(axis=1) <= 1.0

    def bounding_halfwidths(self):
        """Axis-aligned half-extents of the (possibly rotated) ellipsoid."""
        r = self.rotation_matrix()
        return np.sqrt(((r * np.asarray(self.semi_axes)) ** 2).sum(axis=1))


@dataclass
class PhantomSpec:
    ellipsoids: list
    materials: dict
    seed: int = 0

    def __post_init__(self):
        if not self.ellipsoids:
            raise ParameterError("phantom spec needs at least one ellipsoid")
        missing = {e.material for e in self.ellipsoids} - set(self.materials)
        if missing:
            raise ParameterError(f"ellipsoids reference unknown materials: {sorted(missing)}")

    def to_json(self):
        return json.dumps(
            {
                "seed": self.seed,
                "materials": {
                    k: {"mr_intensity": m.mr_intensity, "xray_mu": m.xray_mu}
                    for k, m in self.materials.items()
                },
                "ellipsoids": [
                    {
                        "center": list(e.center),
                        "semi_axes": list(e.semi_axes),
                        "rotation_deg": list(e.rotation_deg),
                        "material": e.material,
                        "priority": e.priority,
                    }
                    for e in self.ellipsoids
                ],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(
            ellipsoids=[
                Ellipsoid(
                    center=tuple(e["center"]),
                    semi_axes=tuple(e["semi_axes"]),
                    rotation_deg=tuple(e.get("rotation_deg", (0, 0, 0))),
                    material=e["material"],
                    priority=int(e.get("priority", 0)),
                )
                for e in raw["ellipsoids"]
            ],
            materials={
                k: Material(m["mr_intensity"], m["xray_mu"]) for k, m in raw["materials"].items()
            },
            seed=int(raw.get("seed", 0)),
        )


# Head geometry sized for a ~220 mm field of view, centered on the isocenter.
_HEAD_MATERIALS = {
    "soft_tissue": Material(mr_intensity=0.75, xray_mu=0.020),
    "bone": Material(mr_intensity=0.08, xray_mu=0.055),
    "brain": Material(mr_intensity=0.90, xray_mu=0.021),
    "csf": Material(mr_intensity=1.00, xray_mu=0.018),
    "calcification": Material(mr_intensity=0.15, xray_mu=0.065),
    "cyst": Material(mr_intensity=0.95, xray_mu=0.016),
}

DEFAULT_EXTENT_MM = 220.0


def default_head_spec(seed=0):
    """Outer head, skull shell (two concentric ellipsoids), brain, two
    ventricles, and ~10 seeded small inclusions alternating between
    calcification-like and cyst-like contrast."""
    ells = [
        Ellipsoid(center=(0, 0, 0), semi_axes=(80, 98, 88), material="soft_tissue", priority=1),
        Ellipsoid(center=(0, 0, 0), semi_axes=(72, 90, 80), material="bone", priority=2),
        Ellipsoid(center=(0, 0, -2), semi_axes=(65, 82, 72), material="brain", priority=3),
        Ellipsoid(
            center=(-16, 8, 8), semi_axes=(9, 26, 13), rotation_deg=(8, 0, 0),
            material="csf", priority=4,
        ),
        Ellipsoid(
            center=(16, 8, 8), semi_axes=(9, 26, 13), rotation_deg=(-8, 0, 0),
            material="csf", priority=4,
        ),
    ]
    rng = np.random.default_rng(seed)
    for k in range(10):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        radius = rng.uniform(0.2, 0.75)
        center = direction * radius * np.array([55, 70, 60])
        axes = rng.uniform(3.5, 8.0, size=3)
        ells.append(
            Ellipsoid(
                center=tuple(center),
                semi_axes=tuple(axes),
                rotation_deg=tuple(rng.uniform(0, 180, size=3)),
                material="calcification" if k % 2 == 0 else "cyst",
                priority=5,
            )
        )
    return PhantomSpec(ellipsoids=ells, materials=dict(_HEAD_MATERIALS), seed=seed)


def generate_head_phantom(dims, spacing, spec=None, supersample=2):
    """Rasterize a PhantomSpec into co-registered (mr, xray) volumes.

    Both volumes come from one material-id pass over the same grid, so
    their support masks are identical. ``supersample`` sub-centers per
    axis give fractional boundary voxels.
    """
    if spec is None:
        spec = default_head_spec()
    if supersample < 1:
        raise ParameterError(f"supersample must be >= 1, got {supersample}")
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    nx, ny, nz = dims
    sx, sy, sz = spacing
    origin = np.array([-(d - 1) * s / 2.0 for d, s in zip(dims, spacing)])

    ss = int(supersample)
    # Sub-center offsets within one voxel, symmetric about the center.
    off = (np.arange(ss) + 0.5) / ss - 0.5
    fx = (np.repeat(np.arange(nx), ss) + np.tile(off, nx)) * sx + origin[0]
    fy = (np.repeat(np.arange(ny), ss) + np.tile(off, ny)) * sy + origin[1]
    fz = (np.repeat(np.arange(nz), ss) + np.tile(off, nz)) * sz + origin[2]

    material_names = sorted(spec.materials)
    slot = {name: i + 1 for i, name in enumerate(material_names)}  # 0 = background
    mr_lut = np.zeros(len(material_names) + 1, dtype=np.float64)
    mu_lut = np.zeros(len(material_names) + 1, dtype=np.float64)
    for name, i in slot.items():
        mr_lut[i] = spec.materials[name].mr_intensity
        mu_lut[i] = spec.materials[name].xray_mu
    order = sorted(spec.ellipsoids, key=lambda e: e.priority)

    mr = np.empty(dims, dtype=np.float64)
    mu = np.empty(dims, dtype=np.float64)
    plane = len(fy) * len(fz)
    chunk_vox = max(1, (4 << 20) // (plane * ss))  # ~4M fine points per chunk
    for x0 in range(0, nx, chunk_vox):
        x1 = min(x0 + chunk_vox, nx)
        cx = fx[x0 * ss : x1 * ss]
        gx, gy, gz = np.meshgrid(cx, fy, fz, indexing="ij")
        points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        winner = np.zeros(len(points), dtype=np.uint8)
        best_priority = np.full(len(points), -np.inf)
        for e in order:
            # Cheap axis-aligned box prefilter before the quadratic form.
            hw = e.bounding_halfwidths()
            near = np.nonzero(
                (np.abs(points - np.asarray(e.center)) <= hw[None, :]).all(axis=1)
            )[0]
            if near.size == 0:
                continue
            take = near[e.contains(points[near]) & (e.priority >= best_priority[near])]
            winner[take] = slot[e.material]
            best_priority[take] = e.priority
        n_vox = x1 - x0
        winner = (
            winner.reshape(n_vox, ss, ny, ss, nz, ss)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(n_vox, ny, nz, ss**3)
        )
        mr[x0:x1] = mr_lut[winner].mean(axis=-1)
        mu[x0:x1] = mu_lut[winner].mean(axis=-1)

    mr_vol = Volume3D.centered(dims, spacing, mr.astype(np.float32), modality="MR")
    xray_vol = Volume3D.centered(dims, spacing, mu.astype(np.float32), modality="XRAY")
    return mr_vol, xray_vol
