"""Synthetic labeled scenes sampled by two virtual sensors.

Scenes are unions of labeled primitives (plane patches, axis-aligned boxes,
spheres, upright cylinders). The camera-style sampler draws near-uniform
surface points with colors and true normals; the lidar-style sampler casts
concentric scan rings from a fixed origin, so surface density falls off
with range. Colors and albedo are drawn per primitive *instance*, never per
class — labels must be recoverable from geometry, not from a color lookup.
"""

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, SensorId, SensorKind

_EPS = 1e-12
_POS_NOISE = 0.002
_NORMAL_NOISE = 0.01
_COLOR_JITTER = 0.05
_LIDAR_T_MIN = 0.05


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Plane:
    """Parallelogram patch spanned by u and v from origin."""

    origin: tuple
    u: tuple
    v: tuple
    class_id: int

    def __post_init__(self):
        if self.area() < _EPS:
            raise SceneSpecError(f"degenerate plane: |u x v| = {self.area()}")

    def _frame(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        n = np.cross(u, v)
        return np.asarray(self.origin, dtype=np.float64), u, v, n

    def area(self):
        _, _, _, n = self._frame()
        return float(np.linalg.norm(n))

    def sample_surface(self, rng, count):
        o, u, v, n = self._frame()
        a = rng.uniform(0, 1, size=(count, 1))
        b = rng.uniform(0, 1, size=(count, 1))
        pos = o + a * u + b * v
        normals = np.tile(n / np.linalg.norm(n), (count, 1))
        return pos, normals

    def ray_hits(self, origin, dirs):
        o, u, v, n = self._frame()
        nn = n / np.linalg.norm(n)
        denom = dirs @ nn
        safe = np.abs(denom) > 1e-9
        t = np.where(safe, ((o - origin) @ nn) / np.where(safe, denom, 1.0), np.inf)
        q = origin + t[:, None] * dirs
        rel = q - o
        uu, vv, uv = u @ u, v @ v, u @ v
        det = uu * vv - uv * uv
        a = (rel @ u * vv - rel @ v * uv) / det
        b = (rel @ v * uu - rel @ u * uv) / det
        valid = safe & (t > _LIDAR_T_MIN) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        normals = np.where(denom[:, None] < 0, nn, -nn)
        return t, normals, valid


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and full extents."""

    center: tuple
    size: tuple
    class_id: int

    def __post_init__(self):
        if min(self.size) <= 0:
            raise SceneSpecError(f"degenerate box size {self.size}")

    def area(self):
        sx, sy, sz = self.size
        return 2.0 * (sx * sy + sy * sz + sz * sx)

    def sample_surface(self, rng, count):
        c = np.asarray(self.center, dtype=np.float64)
        s = np.asarray(self.size, dtype=np.float64)
        sx, sy, sz = s
        face_areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        face = rng.choice(6, size=count, p=face_areas / face_areas.sum())
        ab = rng.uniform(-0.5, 0.5, size=(count, 2))
        pos = np.empty((count, 3))
        normals = np.zeros((count, 3))
        for f in range(6):
            m = face == f
            axis, sign = divmod(f, 2)
            sign = 1.0 if sign == 0 else -1.0
            others = [i for i in range(3) if i != axis]
            pos[m, axis] = c[axis] + sign * s[axis] / 2
            pos[m, others[0]] = c[others[0]] + ab[m, 0] * s[others[0]]
            pos[m, others[1]] = c[others[1]] + ab[m, 1] * s[others[1]]
            normals[m, axis] = sign
        return pos, normals

    def ray_hits(self, origin, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.size, dtype=np.float64) / 2
        lo, hi = c - half, c + half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin_ax = np.minimum(t1, t2)
        tmax_ax = np.maximum(t1, t2)
        # parallel rays: slab test passes only if origin inside that slab
        par = np.abs(dirs) < 1e-12
        inside = (origin >= lo) & (origin <= hi)
        tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), tmin_ax)
        tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), tmax_ax)
        tnear = tmin_ax.max(axis=1)
        tfar = tmax_ax.min(axis=1)
        valid = (tnear <= tfar) & (tnear > _LIDAR_T_MIN)
        axis = tmin_ax.argmax(axis=1)
        normals = np.zeros_like(dirs)
        rows = np.arange(dirs.shape[0])
        normals[rows, axis] = -np.sign(dirs[rows, axis])
        return np.where(valid, tnear, np.inf), normals, valid


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    class_id: int

    def __post_init__(self):
        if self.radius <= 0:
            raise SceneSpecError(f"degenerate sphere radius {self.radius}")

    def area(self):
        return 4.0 * np.pi * self.radius ** 2

    def sample_surface(self, rng, count):
        d = rng.standard_normal((count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        c = np.asarray(self.center, dtype=np.float64)
        return c + self.radius * d, d

    def ray_hits(self, origin, dirs):
        oc = origin - np.asarray(self.center, dtype=np.float64)
        b = dirs @ oc
        c0 = oc @ oc - self.radius ** 2
        disc = b * b - c0
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > _LIDAR_T_MIN, t_near, t_far)
        valid = ok & (t > _LIDAR_T_MIN)
        q = origin + t[:, None] * dirs
        normals = (q - np.asarray(self.center)) / self.radius
        return np.where(valid, t, np.inf), normals, valid


@dataclass(frozen=True)
class Cylinder:
    """Upright (z-axis) closed cylinder; center is the midpoint of the axis."""

    center: tuple
    radius: float
    height: float
    class_id: int

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise SceneSpecError(
                f"degenerate cylinder r={self.radius} h={self.height}")

    def area(self):
        return 2 * np.pi * self.radius * self.height + 2 * np.pi * self.radius ** 2

    def sample_surface(self, rng, count):
        c = np.asarray(self.center, dtype=np.float64)
        side = 2 * np.pi * self.radius * self.height
        cap = np.pi * self.radius ** 2
        which = rng.choice(3, size=count,
                           p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=count)
        pos = np.empty((count, 3))
        normals = np.zeros((count, 3))
        m = which == 0
        pos[m, 0] = c[0] + self.radius * np.cos(theta[m])
        pos[m, 1] = c[1] + self.radius * np.sin(theta[m])
        pos[m, 2] = c[2] + rng.uniform(-0.5, 0.5, size=m.sum()) * self.height
        normals[m, 0] = np.cos(theta[m])
        normals[m, 1] = np.sin(theta[m])
        for which_cap, sign in ((1, 1.0), (2, -1.0)):
            m = which == which_cap
            rr = self.radius * np.sqrt(rng.uniform(0, 1, size=m.sum()))
            pos[m, 0] = c[0] + rr * np.cos(theta[m])
            pos[m, 1] = c[1] + rr * np.sin(theta[m])
            pos[m, 2] = c[2] + sign * self.height / 2
            normals[m, 2] = sign
        return pos, normals

    def ray_hits(self, origin, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        z_lo, z_hi = c[2] - self.height / 2, c[2] + self.height / 2
        best_t = np.full(dirs.shape[0], np.inf)
        best_n = np.zeros_like(dirs)

        # curved side: quadratic in the xy-projection
        oc = origin[:2] - c[:2]
        dxy = dirs[:, :2]
        a = (dxy * dxy).sum(axis=1)
        b = dxy @ oc
        c0 = oc @ oc - self.radius ** 2
        disc = b * b - a * c0
        ok = (disc >= 0) & (a > 1e-12)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for t_cand in ((-b - sq) / np.where(ok, a, 1.0),
                       (-b + sq) / np.where(ok, a, 1.0)):
            z = origin[2] + t_cand * dirs[:, 2]
            good = ok & (t_cand > _LIDAR_T_MIN) & (z >= z_lo) & (z <= z_hi)
            better = good & (t_cand < best_t)
            if better.any():
                q = origin + t_cand[better, None] * dirs[better]
                n = np.zeros((int(better.sum()), 3))
                n[:, :2] = (q[:, :2] - c[:2]) / self.radius
                best_n[better] = n
                best_t[better] = t_cand[better]

        # caps
        dz = dirs[:, 2]
        okz = np.abs(dz) > 1e-12
        for z_plane, sign in ((z_hi, 1.0), (z_lo, -1.0)):
            t_cand = np.where(okz, (z_plane - origin[2]) / np.where(okz, dz, 1.0),
                              np.inf)
            q = origin + t_cand[:, None] * dirs
            rad2 = ((q[:, :2] - c[:2]) ** 2).sum(axis=1)
            good = okz & (t_cand > _LIDAR_T_MIN) & (rad2 <= self.radius ** 2)
            better = good & (t_cand < best_t)
            best_t[better] = t_cand[better]
            best_n[better] = np.array([0.0, 0.0, sign])

        valid = np.isfinite(best_t)
        return best_t, best_n, valid


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    density: float = 400.0          # camera samples per m^2
    num_classes: int = 4
    lidar_rings: int = 24
    lidar_azimuth: int = 700
    lidar_origin: tuple = (0.0, 0.0, 1.3)
    lidar_max_range: float = 14.0
    lidar_elev_deg: tuple = (-70.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise SceneSpecError("scene needs at least one primitive")
        for p in self.primitives:
            if not 0 <= p.class_id < self.num_classes:
                raise SceneSpecError(
                    f"class id {p.class_id} outside 0..{self.num_classes - 1}")
        if self.density <= 0:
            raise SceneSpecError(f"density must be positive, got {self.density}")


def _camera_cloud(spec, rng):
    pos_parts, feat_parts, label_parts = [], [], []
    for prim in spec.primitives:
        count = max(1, int(round(prim.area() * spec.density)))
        pos, normals = prim.sample_surface(rng, count)
        pos = pos + rng.normal(0, _POS_NOISE, size=pos.shape)
        normals = normals + rng.normal(0, _NORMAL_NOISE, size=normals.shape)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        base = rng.uniform(0.15, 0.85, size=3)
        colors = np.clip(base + rng.normal(0, _COLOR_JITTER, size=(count, 3)), 0, 1)
        pos_parts.append(pos)
        feat_parts.append(np.column_stack([colors, normals]))
        label_parts.append(np.full(count, prim.class_id, dtype=np.int64))
    pos = np.concatenate(pos_parts)
    feats = np.concatenate(feat_parts)
    labels = np.concatenate(label_parts)
    perm = rng.permutation(pos.shape[0])
    return pos[perm], feats[perm], labels[perm]


def _lidar_cloud(spec, rng):
    origin = np.asarray(spec.lidar_origin, dtype=np.float64)
    elev = np.deg2rad(np.linspace(spec.lidar_elev_deg[0], spec.lidar_elev_deg[1],
                                  spec.lidar_rings))
    step = 2 * np.pi / spec.lidar_azimuth
    az = np.arange(spec.lidar_azimuth) * step
    ee, aa = np.meshgrid(elev, az, indexing="ij")
    aa = aa + rng.uniform(-step / 2, step / 2, size=aa.shape)
    dirs = np.stack([np.cos(ee) * np.cos(aa),
                     np.cos(ee) * np.sin(aa),
                     np.sin(ee)], axis=-1).reshape(-1, 3)

    best_t = np.full(dirs.shape[0], np.inf)
    best_n = np.zeros_like(dirs)
    best_prim = np.full(dirs.shape[0], -1, dtype=np.int64)
    albedo = rng.uniform(0.2, 0.95, size=len(spec.primitives))
    for pi, prim in enumerate(spec.primitives):
        t, normals, valid = prim.ray_hits(origin, dirs)
        better = valid & (t < best_t)
        best_t[better] = t[better]
        best_n[better] = normals[better]
        best_prim[better] = pi

    hit = np.isfinite(best_t) & (best_t <= spec.lidar_max_range)
    t = best_t[hit]
    d = dirs[hit]
    n = best_n[hit]
    prim_idx = best_prim[hit]
    pos = origin + t[:, None] * d
    pos = pos + rng.normal(0, 1, size=pos.shape) * (0.002 + 0.001 * t)[:, None]
    cos_inc = np.abs((d * n).sum(axis=1))
    intensity = albedo[prim_idx] * cos_inc / (1.0 + 0.03 * t * t)
    intensity = np.clip(intensity + rng.normal(0, 0.01, size=t.shape), 0.01, 1.0)
    labels = np.array([spec.primitives[i].class_id for i in range(len(spec.primitives))],
                      dtype=np.int64)[prim_idx]
    perm = rng.permutation(pos.shape[0])
    return pos[perm], intensity[perm, None], labels[perm]


def synth_scene(sensor, spec, seed):
    """Sample one labeled cloud of the given sensor kind from a scene spec."""
    rng = np.random.default_rng(seed)
    if sensor.kind is SensorKind.CameraLike:
        pos, feats, labels = _camera_cloud(spec, rng)
    else:
        pos, feats, labels = _lidar_cloud(spec, rng)
    # quantize to f32 grid so file round-trips are bit-exact
    pos = pos.astype(np.float32).astype(np.float64)
    feats = feats.astype(np.float32).astype(np.float64)
    return PointCloud(positions=pos, features=feats, sensor=sensor, labels=labels)


def standard_scene(seed, num_classes=4, extent=4.0, n_objects=6, density=350.0):
    """A floor plus a seeded scatter of boxes, spheres, and cylinders.

    Classes: 0 = floor, 1 = box, 2 = sphere, 3 = cylinder (modulo num_classes).
    """
    rng = np.random.default_rng(seed)
    half = extent / 2
    prims = [Plane(origin=(-half, -half, 0.0), u=(extent, 0, 0), v=(0, extent, 0),
                   class_id=0)]
    makers = ("box", "sphere", "cylinder")
    for i in range(n_objects):
        kind = makers[i % len(makers)]
        x, y = rng.uniform(-half * 0.8, half * 0.8, size=2)
        if kind == "box":
            size = rng.uniform(0.25, 0.7, size=3)
            prims.append(Box(center=(x, y, size[2] / 2), size=tuple(size),
                             class_id=1 % num_classes))
        elif kind == "sphere":
            r = rng.uniform(0.15, 0.4)
            prims.append(Sphere(center=(x, y, r), radius=r,
                                class_id=2 % num_classes))
        else:
            r = rng.uniform(0.1, 0.3)
            h = rng.uniform(0.4, 1.0)
            prims.append(Cylinder(center=(x, y, h / 2), radius=r, height=h,
                                  class_id=3 % num_classes))
    return SceneSpec(primitives=tuple(prims), density=density,
                     num_classes=num_classes)
