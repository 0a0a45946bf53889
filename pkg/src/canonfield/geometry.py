"""Cameras, rays, Sim(3) alignment transforms and ray-point sampling.

Everything here is a pure function of its inputs.  Canonical-space
convention: the category template lives inside the origin-centered unit
sphere; per-ray near/far bounds come from intersecting a sphere of radius
``BOUND_RADIUS`` (margin over the unit sphere).  Pixel coordinates address
pixel centers, so integer pixel (i, j) maps to u = (i + 0.5, j + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, concat, cross3, norm

BOUND_RADIUS = 1.2


class GeometryError(ValueError):
    pass


# ----------------------------------------------------------------------
# domain types


@dataclass
class Camera:
    """Calibrated pinhole camera: camera-to-world pose E and intrinsics K."""

    e: np.ndarray  # (4, 4) SE(3), camera-to-world
    k: np.ndarray  # (3, 3) upper-triangular intrinsics
    width: int
    height: int

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.e.shape != (4, 4) or self.k.shape != (3, 3):
            raise GeometryError(f"bad camera shapes E{self.e.shape} K{self.k.shape}")
        r = self.e[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-6
        ):
            raise GeometryError("camera rotation block is not in SO(3)")
        fx, fy, cx, cy = self.k[0, 0], self.k[1, 1], self.k[0, 2], self.k[1, 2]
        if fx <= 0 or fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got {fx}, {fy}")
        if not (0 < cx < self.width and 0 < cy < self.height):
            raise GeometryError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return self.e[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.e[:3, :3]

    @property
    def optical_axis(self) -> np.ndarray:
        return self.e[:3, 2]


@dataclass(frozen=True)
class Ray:
    o: np.ndarray
    d: np.ndarray
    t_n: float
    t_f: float
    pixel: tuple = (0.0, 0.0)
    view_tag: str = ""
    empty: bool = False


@dataclass
class RaySampleSet:
    t: np.ndarray  # (n,) strictly increasing depths
    delta: np.ndarray  # (n,) inter-sample distances
    positions: np.ndarray  # (n, 3)


class Sim3Transform:
    """10-parameter similarity transform: 6D rotation, translation, log-scale.

    ``params`` is a length-10 tensor (r6[6], t[3], s_log[1]); scale is
    realized as exp(s_log) so it stays positive under unconstrained updates.
    Applies to points as x -> s * R @ x + t.
    """

    def __init__(self, params=None, requires_grad: bool = False, name: str | None = None):
        if params is None:
            params = self.identity_params()
        self.params = params if isinstance(params, Tensor) else Tensor(
            np.asarray(params, dtype=np.float64), requires_grad=requires_grad, name=name
        )
        if self.params.shape != (10,):
            raise GeometryError(f"Sim3 params must have shape (10,), got {self.params.shape}")

    @staticmethod
    def identity_params() -> np.ndarray:
        return np.array([1, 0, 0, 0, 1, 0, 0, 0, 0, 0], dtype=np.float64)

    @classmethod
    def from_parts(cls, rotation=None, translation=(0, 0, 0), scale=1.0, **kw) -> "Sim3Transform":
        p = cls.identity_params()
        if rotation is not None:
            rotation = np.asarray(rotation, dtype=np.float64)
            p[:3], p[3:6] = rotation[:3, 0], rotation[:3, 1]
        p[6:9] = translation
        p[9] = np.log(scale)
        return cls(p, **kw)

    def realize(self):
        """(R, s, t) as plain numpy values."""
        p = self.params.data
        return rotation_from_6d_np(p[:6]), float(np.exp(p[9])), p[6:9].copy()

    def matrix(self) -> np.ndarray:
        r, s, t = self.realize()
        m = np.eye(4)
        m[:3, :3] = s * r
        m[:3, 3] = t
        return m

    def apply(self, x: np.ndarray) -> np.ndarray:
        r, s, t = self.realize()
        return s * np.asarray(x) @ r.T + t

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        r, s, t = self.realize()
        return (np.asarray(x) - t) @ r / s


# ----------------------------------------------------------------------
# rotations


def rotation_from_6d_np(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into an orthonormal det-+1 matrix."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[:3], r6[3:6]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise GeometryError("degenerate 6D rotation: first column near zero")
    c1 = a1 / n1
    a2p = a2 - (c1 @ a2) * c1
    n2 = np.linalg.norm(a2p)
    if n2 < 1e-8:
        raise GeometryError("degenerate 6D rotation: columns are parallel")
    c2 = a2p / n2
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def rotation_from_6d(r6: Tensor) -> Tensor:
    """Differentiable version of :func:`rotation_from_6d_np`, (6,) -> (3, 3)."""
    a1, a2 = r6[0:3], r6[3:6]
    if np.linalg.norm(a1.data) < 1e-8:
        raise GeometryError("degenerate 6D rotation: first column near zero")
    c1 = a1 / norm(a1)
    a2p = a2 - (c1 * a2).sum() * c1
    if np.linalg.norm(a2p.data) < 1e-8:
        raise GeometryError("degenerate 6D rotation: columns are parallel")
    c2 = a2p / norm(a2p)
    c3 = cross3(c1, c2)
    return concat(
        [c1.reshape(3, 1), c2.reshape(3, 1), c3.reshape(3, 1)], axis=1
    )


def rotation_angle_deg(r: np.ndarray) -> float:
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform draw on SO(3) via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] *= -1
    return q


# ----------------------------------------------------------------------
# rays


def backproject(u, k: np.ndarray) -> np.ndarray:
    """Pixel -> unit camera-space direction, normalize(K^-1 [u, 1])."""
    k = np.asarray(k, dtype=np.float64)
    if abs(np.linalg.det(k)) < 1e-12:
        raise GeometryError("singular intrinsics matrix")
    v = np.linalg.solve(k, np.array([u[0], u[1], 1.0]))
    return v / np.linalg.norm(v)


def sphere_bounds(o: np.ndarray, d: np.ndarray, radius: float = BOUND_RADIUS):
    """Entry/exit depths of the canonical bounding sphere, or None on miss."""
    b = o @ d
    c = o @ o - radius * radius
    disc = b * b - c
    if disc <= 0.0:
        return None
    root = np.sqrt(disc)
    t0, t1 = -b - root, -b + root
    if t1 <= 0.0:
        return None
    return max(t0, 0.0), t1


def ray_infer(u, cam: Camera, view_tag: str = "") -> Ray:
    """Inference-path ray from an arbitrary camera, no alignment transform."""
    d_cam = backproject(u, cam.k)
    d = cam.rotation @ d_cam
    d = d / np.linalg.norm(d)
    o = cam.center.copy()
    bounds = sphere_bounds(o, d)
    if bounds is None:
        return Ray(o, d, 0.0, 0.0, tuple(u), view_tag, empty=True)
    return Ray(o, d, bounds[0], bounds[1], tuple(u), view_tag)


def ray_train(u, cam: Camera, w: Sim3Transform, view_tag: str = "") -> Ray:
    """Training-path ray: camera ray mapped into canonical space by W.

    Scale acts on the origin only; the direction is re-normalized.
    """
    r, s, t = w.realize()
    d_world = cam.rotation @ backproject(u, cam.k)
    o = s * (r @ cam.center) + t
    d = r @ d_world
    d = d / np.linalg.norm(d)
    bounds = sphere_bounds(o, d)
    if bounds is None:
        return Ray(o, d, 0.0, 0.0, tuple(u), view_tag, empty=True)
    return Ray(o, d, bounds[0], bounds[1], tuple(u), view_tag)


def sample_points(
    ray: Ray, n: int, stratified: bool = False, rng: np.random.Generator | None = None
) -> RaySampleSet:
    """n depth samples in [t_n, t_f]: bin midpoints, or one draw per bin."""
    if n < 2:
        raise GeometryError(f"need at least 2 samples, got {n}")
    if ray.empty:
        return RaySampleSet(np.zeros(0), np.zeros(0), np.zeros((0, 3)))
    edges = np.linspace(ray.t_n, ray.t_f, n + 1)
    if stratified:
        if rng is None:
            raise GeometryError("stratified sampling needs an rng")
        t = edges[:-1] + rng.random(n) * np.diff(edges)
    else:
        t = 0.5 * (edges[:-1] + edges[1:])
    delta = np.empty(n)
    delta[:-1] = np.diff(t)
    delta[-1] = (ray.t_f - ray.t_n) / n  # bounded fallback, no huge sentinel
    positions = ray.o[None, :] + t[:, None] * ray.d[None, :]
    return RaySampleSet(t, delta, positions)


# ----------------------------------------------------------------------
# batched ray generation (hot path used by the renderer and trainer)


def pixel_grid(width: int, height: int) -> np.ndarray:
    """(H*W, 2) pixel-center coordinates in row-major order."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    u = np.stack(np.meshgrid(xs, ys), axis=-1)  # (H, W, 2)
    return u.reshape(-1, 2)


def camera_rays(cam: Camera, pixels: np.ndarray | None = None):
    """World-space (origins, unit directions) for many pixels at once."""
    if pixels is None:
        pixels = pixel_grid(cam.width, cam.height)
    ones = np.ones((len(pixels), 1))
    v = np.linalg.solve(cam.k, np.concatenate([pixels, ones], axis=1).T).T
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    d = v @ cam.rotation.T
    o = np.broadcast_to(cam.center, d.shape)
    return o, d


def sphere_bounds_batch(o: np.ndarray, d: np.ndarray, radius: float = BOUND_RADIUS):
    """Vectorized sphere intersection: (t_n, t_f, hit_mask)."""
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - root, 0.0)
    t1 = -b + root
    hit &= t1 > 0.0
    return np.where(hit, t0, 0.0), np.where(hit, t1, 0.0), hit


def transform_rays(w: Sim3Transform, origins: np.ndarray, dirs: np.ndarray):
    """Differentiable batched version of :func:`ray_train` ray mapping.

    Returns canonical-frame origins and unit directions as tensors whose
    graph reaches ``w.params``.
    """
    r = rotation_from_6d(w.params[0:6])
    s = w.params[9].exp()
    t = w.params[6:9]
    o = Tensor(origins) @ r.T * s + t.reshape(1, 3)
    d = Tensor(dirs) @ r.T
    # rotation keeps unit norm analytically; renormalize to keep the
    # invariant bit-tight under float rounding
    d = d / (d.square().sum(axis=1, keepdims=True)).sqrt()
    return o, d


# ----------------------------------------------------------------------
# Sim(3) algebra on realized (R, s, t) triples — used for the gauge checks


def sim3_compose(a, b):
    """Composition (a then b applied after): x -> b(a(x))."""
    ra, sa, ta = a
    rb, sb, tb = b
    return rb @ ra, sb * sa, sb * rb @ ta + tb


def sim3_inverse(a):
    r, s, t = a
    return r.T, 1.0 / s, -(r.T @ t) / s


def sim3_apply(a, x):
    r, s, t = a
    return s * np.asarray(x) @ r.T + t


# ----------------------------------------------------------------------
# camera file format: one line per view, 16 floats of E row-major,
# fx fy cx cy, width, height


def save_cameras(path, cams: list) -> None:
    with open(path, "w") as fh:
        for c in cams:
            vals = list(c.e.reshape(-1)) + [c.k[0, 0], c.k[1, 1], c.k[0, 2], c.k[1, 2]]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + f" {c.width} {c.height}\n")


def load_cameras(path) -> list:
    cams = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 22:
                raise GeometryError(f"{path}: malformed camera line ({len(parts)} fields)")
            vals = [float(v) for v in parts[:20]]
            e = np.array(vals[:16]).reshape(4, 4)
            fx, fy, cx, cy = vals[16:20]
            k = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
            cams.append(Camera(e, k, int(parts[20]), int(parts[21])))
    return cams


def lookat_camera(center: np.ndarray, target, k: np.ndarray, width: int, height: int,
                  up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at ``center`` whose +z optical axis points at ``target``.

    Uses OpenCV-style axes: +x right, +y down, +z forward.
    """
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-8:  # looking straight along up: pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    e = np.eye(4)
    e[:3, 0], e[:3, 1], e[:3, 2], e[:3, 3] = right, down, fwd, center
    return Camera(e, k, width, height)


def intrinsics(focal: float, width: int, height: int) -> np.ndarray:
    return np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
