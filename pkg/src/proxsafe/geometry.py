"""Triangle meshes, exact signed-distance queries, dataset sampling and iso-surface export.

Signed distances follow the usual convention: negative strictly inside the
body, positive outside, zero on the surface.
"""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from proxsafe import _meshkernels as mk

log = logging.getLogger(__name__)

AREA_EPS = 1e-12
SURFACE_EPS = 1e-9
WINDING_BAND = 0.01
DATASET_MAGIC = b"SDFD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIQ")

# three non-axis-aligned directions for the parity vote
_PARITY_DIRS = np.array(
    [
        [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
        [-0.2672612419124244, 0.5345224838248488, 0.8017837257372732],
        [0.8017837257372732, -0.2672612419124244, -0.5345224838248488],
    ]
)


class MeshFormatError(ValueError):
    """Raised for malformed, empty or inconsistent mesh input."""


class SignAmbiguityError(RuntimeError):
    """Raised when inside/outside cannot be decided for a query point."""


@dataclass
class TriangleMesh:
    """Indexed triangle mesh in the target body frame (meters).

    Attributes:
        vertices: (n, 3) float64 vertex positions.
        triangles: (m, 3) int64 vertex indices, counter-clockwise seen from outside.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])

    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape (m, 3, 3)."""
        return np.ascontiguousarray(self.vertices[self.triangles])

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def normals(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def validate(self) -> None:
        """Check index range, triangle areas and bounding-box extent.

        Raises:
            MeshFormatError: on the first violated invariant.
        """
        if self.n_vertices == 0 or self.n_triangles == 0:
            raise MeshFormatError("mesh has no vertices or no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices:
            bad = int(np.argmax((self.triangles < 0).any(1) | (self.triangles >= self.n_vertices).any(1)))
            raise MeshFormatError(f"triangle {bad} references a vertex outside [0, {self.n_vertices})")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshFormatError("non-finite vertex coordinate")
        areas = self.areas()
        if np.any(areas <= AREA_EPS):
            bad = int(np.argmin(areas))
            raise MeshFormatError(f"degenerate triangle {bad} (area {areas[bad]:.3e} m^2)")
        lo, hi = self.bbox()
        if np.any(hi - lo <= 0.0):
            raise MeshFormatError("bounding box has zero extent along some axis")


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError as exc:
        raise MeshFormatError(f"line {lineno}: bad face index {token!r}") from exc
    if idx == 0:
        raise MeshFormatError(f"line {lineno}: face index 0 is not valid in OBJ")
    # negative indices count back from the most recent vertex
    return idx - 1 if idx > 0 else n_vertices + idx


def load_mesh(path: str | Path) -> TriangleMesh:
    """Read a Wavefront OBJ file; polygons are fan-triangulated.

    Only ``v`` and ``f`` records are interpreted, other record types are skipped.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        MeshFormatError: on malformed lines, bad indices, empty or degenerate meshes.
    """
    path = Path(path)
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    x, y, z = (float(t) for t in parts[1:4])
                except ValueError as exc:
                    raise MeshFormatError(f"line {lineno}: non-numeric coordinate") from exc
                verts.append((x, y, z))
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshFormatError(f"line {lineno}: face needs at least 3 vertices")
                idx = [_parse_index(t, len(verts), lineno) for t in parts[1:]]
                for k in idx:
                    if k < 0 or k >= len(verts):
                        raise MeshFormatError(
                            f"line {lineno}: face index {k + 1} out of range for {len(verts)} vertices"
                        )
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts or not faces:
        raise MeshFormatError(f"{path}: empty mesh")
    mesh = TriangleMesh(np.array(verts), np.array(faces))
    mesh.validate()
    return mesh


def save_obj(mesh: TriangleMesh, path: str | Path) -> None:
    """Write ``mesh`` as ASCII OBJ with 1-based indices."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def box_mesh(center: Sequence[float] = (0.0, 0.0, 0.0), half_extents: Sequence[float] = (1.0, 1.0, 1.0)) -> TriangleMesh:
    """Closed axis-aligned box with outward-facing triangles."""
    c = np.asarray(center, dtype=float)
    h = np.asarray(half_extents, dtype=float)
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    verts = c + signs * h
    # index = 4*(x>0) + 2*(y>0) + (z>0)
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    tris = []
    for a, b, cc, d in quads:
        tris += [(a, b, cc), (a, cc, d)]
    return TriangleMesh(verts, np.array(tris))


def icosphere(subdivisions: int = 4, radius: float = 1.0, center: Sequence[float] = (0.0, 0.0, 0.0)) -> TriangleMesh:
    """Geodesic sphere built by repeated midpoint subdivision of an icosahedron."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriangleMesh(np.asarray(center, dtype=float) + radius * np.array(v), np.array(faces))


class DistanceField(Protocol):
    """Anything that can answer exact signed-distance queries and sample its surface."""

    def signed_distance(self, points: np.ndarray) -> np.ndarray: ...

    def gradient(self, points: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]: ...

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def bounds(self) -> tuple[np.ndarray, np.ndarray]: ...


class SdfOracle:
    """Exact distance oracle over a triangle mesh.

    The oracle is immutable after construction; queries may run concurrently.

    Args:
        mesh: validated triangle mesh.
        sign_method: ``"winding"``, ``"parity"`` or ``"auto"`` (winding number
            when the mesh is watertight, 3-ray parity otherwise).
    """

    def __init__(self, mesh: TriangleMesh, sign_method: str = "auto") -> None:
        if sign_method not in ("auto", "winding", "parity"):
            raise ValueError(f"unknown sign method {sign_method!r}")
        mesh.validate()
        self.mesh = mesh
        self._tris = mesh.corners()
        self._normals = mesh.normals()
        self.watertight = is_watertight(mesh)
        if sign_method == "auto":
            sign_method = "winding" if self.watertight else "parity"
        self.sign_method = sign_method
        (self._bmin, self._bmax, self._left, self._right, self._start,
         self._count, self._order, n_nodes) = mk.build_bvh(self._tris)
        self._bmin = self._bmin[:n_nodes]
        self._bmax = self._bmax[:n_nodes]
        self._left = self._left[:n_nodes]
        self._right = self._right[:n_nodes]
        self._start = self._start[:n_nodes]
        self._count = self._count[:n_nodes]
        self._bmin.flags.writeable = False
        self._bmax.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return int(self._left.shape[0])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mesh.bbox()

    def unsigned_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distance to the closest surface point.

        Returns:
            (distance (n,), closest point (n, 3), triangle index (n,)).
        """
        pts = _as_points(points)
        return mk.bvh_closest(self._tris, self._bmin, self._bmax, self._left, self._right,
                              self._start, self._count, self._order, pts)

    def winding_number(self, points: np.ndarray) -> np.ndarray:
        return mk.winding_numbers(self._tris, _as_points(points))

    def inside(self, points: np.ndarray, dist: np.ndarray | None = None) -> np.ndarray:
        """Boolean inside test; raises SignAmbiguityError for undecidable points."""
        pts = _as_points(points)
        if self.sign_method == "parity":
            return mk.ray_parity_inside(self._tris, pts, _PARITY_DIRS)
        w = mk.winding_numbers(self._tris, pts)
        amb = np.abs(w - 0.5) <= WINDING_BAND
        if dist is not None:
            amb &= dist > SURFACE_EPS
        if np.any(amb):
            i = int(np.argmax(amb))
            raise SignAmbiguityError(
                f"winding number {w[i]:.4f} at point {pts[i].tolist()} is within the ambiguity band"
            )
        return w > 0.5

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points)
        d, _, _ = self.unsigned_distance(pts)
        on_surface = d <= SURFACE_EPS
        sign = np.ones_like(d)
        off = ~on_surface
        if np.any(off):
            ins = self.inside(pts[off], d[off])
            sign[off] = np.where(ins, -1.0, 1.0)
        out = sign * d
        out[on_surface] = 0.0
        return out

    def gradient(self, points: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
        """Unit gradient of the signed distance.

        Args:
            points: (n, 3) query points.
            tol: distance band within which a second, distinct closest feature
                makes the gradient ambiguous.

        Returns:
            (gradient (n, 3), valid (n,)). ``valid`` is False on the surface and
            where distinct features are equidistant within ``tol``; the vector
            returned there is one member of the subgradient set.
        """
        pts = _as_points(points)
        d, q, tri = self.unsigned_distance(pts)
        sd = self.signed_distance(pts)
        on_surface = d <= SURFACE_EPS
        safe_d = np.where(on_surface, 1.0, d)
        grad = (pts - q) / safe_d[:, None] * np.where(sd < 0.0, -1.0, 1.0)[:, None]
        grad[on_surface] = self._normals[tri[on_surface]]
        flags = on_surface.copy()
        flags |= mk.bvh_competing_feature(self._tris, self._bmin, self._bmax, self._left, self._right,
                                          self._start, self._count, self._order,
                                          pts, d, q, tol, 1e-6)
        return grad, ~flags

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the mesh surface."""
        areas = self.mesh.areas()
        tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
        u = rng.random((n, 2))
        flip = u.sum(axis=1) > 1.0
        u[flip] = 1.0 - u[flip]
        c = self._tris[tri]
        return c[:, 0] + u[:, :1] * (c[:, 1] - c[:, 0]) + u[:, 1:] * (c[:, 2] - c[:, 0])

    def brute_force_distance(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exhaustive per-triangle scan, used as a reference for the BVH."""
        return mk.brute_closest(self._tris, _as_points(points))


def _as_points(points: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two triangles with opposite orientation."""
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    _, counts = np.unique(undirected, axis=0, return_counts=True)
    if np.any(counts != 2):
        return False
    _, dcounts = np.unique(directed, axis=0, return_counts=True)
    return bool(np.all(dcounts == 1))


def unsigned_distance(oracle: SdfOracle, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance and closest surface point; scalar-shaped for a single 3-vector query."""
    d, q, _ = oracle.unsigned_distance(p)
    if np.ndim(p) == 1:
        return d[0], q[0]
    return d, q


def signed_distance(oracle: DistanceField, p: np.ndarray) -> np.ndarray | float:
    sd = oracle.signed_distance(_as_points(p))
    return float(sd[0]) if np.ndim(p) == 1 else sd


def oracle_gradient(oracle: SdfOracle, p: np.ndarray) -> tuple[np.ndarray, np.ndarray | bool]:
    """Unit gradient plus a flag for surface or non-unique closest-feature points."""
    g, valid = oracle.gradient(p)
    if np.ndim(p) == 1:
        return g[0], not bool(valid[0])
    return g, ~valid


@dataclass
class SdfDataset:
    """Point / signed-distance pairs used for training and evaluation."""

    points: np.ndarray
    distances: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.distances.shape[0]:
            raise ValueError("points and distances differ in length")

    def __len__(self) -> int:
        return int(self.distances.shape[0])

    def to_bytes(self) -> bytes:
        rec = np.empty((len(self), 4), dtype="<f8")
        rec[:, :3] = self.points
        rec[:, 3] = self.distances
        return _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(self)) + rec.tobytes()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SdfDataset":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise MeshFormatError(f"{path}: truncated dataset header")
        magic, version, count = _HEADER.unpack_from(raw)
        if magic != DATASET_MAGIC:
            raise MeshFormatError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION:
            raise MeshFormatError(f"{path}: unsupported dataset version {version}")
        body = raw[_HEADER.size:]
        if len(body) != count * 32:
            raise MeshFormatError(f"{path}: expected {count} records, got {len(body) / 32:g}")
        rec = np.frombuffer(body, dtype="<f8").reshape(count, 4)
        return cls(rec[:, :3].copy(), rec[:, 3].copy())

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["p_x", "p_y", "p_z", "d"])
            for (x, y, z), d in zip(self.points, self.distances):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), repr(float(d))])


def sample_dataset(
    oracle: DistanceField,
    n_total: int,
    mix: Sequence[float] = (0.2, 0.4, 0.4),
    seed: int = 0,
    near_sigma_frac: float = 0.025,
    uniform_scale: float = 1.5,
) -> SdfDataset:
    """Draw surface, near-surface and uniform points and label them with exact distances.

    Args:
        oracle: exact distance field (mesh oracle or analytic shape).
        n_total: total number of samples.
        mix: fractions (surface, near-surface, uniform); must sum to 1.
        seed: generator seed; the output is a pure function of the inputs.
        near_sigma_frac: Gaussian offset scale as a fraction of the bbox diagonal.
        uniform_scale: scale of the uniform-sampling box about the bbox center.
    """
    if n_total < 1:
        raise ValueError("n_total must be at least 1")
    mix = np.asarray(mix, dtype=float)
    if mix.shape != (3,) or np.any(mix < 0) or abs(mix.sum() - 1.0) > 1e-9:
        raise ValueError(f"mix must be three non-negative fractions summing to 1, got {mix.tolist()}")
    n_surf = int(round(mix[0] * n_total))
    n_near = int(round(mix[1] * n_total))
    n_near = min(n_near, n_total - n_surf)
    n_unif = n_total - n_surf - n_near
    rng = np.random.default_rng(seed)
    lo, hi = oracle.bounds()
    diag = float(np.linalg.norm(hi - lo))
    surf = oracle.sample_surface(n_surf + n_near, rng)
    near = surf[n_surf:] + rng.normal(scale=near_sigma_frac * diag, size=(n_near, 3))
    center, half = 0.5 * (lo + hi), 0.5 * uniform_scale * (hi - lo)
    unif = center + half * rng.uniform(-1.0, 1.0, size=(n_unif, 3))
    pts = np.concatenate([surf[:n_surf], near, unif])
    d = np.empty(len(pts))
    d[:n_surf] = 0.0
    if len(pts) > n_surf:
        d[n_surf:] = oracle.signed_distance(pts[n_surf:])
    meta = {"n_surface": n_surf, "n_near": n_near, "n_uniform": n_unif, "seed": int(seed),
            "near_sigma": near_sigma_frac * diag}
    return SdfDataset(pts, d, meta)


def evaluation_points(
    oracle: DistanceField,
    n_total: int,
    seed: int = 0,
    shell_share: float = 0.7,
    shell_width_frac: float = 0.1,
    uniform_scale: float = 1.5,
) -> SdfDataset:
    """Held-out points for error-bound estimation: a dense shell plus uniform fill.

    A ``shell_share`` fraction lies within ``shell_width_frac`` times the bbox
    diagonal of the surface (by exact distance, on both sides); the rest is
    uniform in the box used by :func:`sample_dataset`.
    """
    if n_total < 1:
        raise ValueError("n_total must be at least 1")
    if not 0.0 <= shell_share <= 1.0:
        raise ValueError("shell_share must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    lo, hi = oracle.bounds()
    width = shell_width_frac * float(np.linalg.norm(hi - lo))
    n_shell = int(round(shell_share * n_total))
    chunks: list[np.ndarray] = []
    dists: list[np.ndarray] = []
    have = 0
    while have < n_shell:
        m = max(2 * (n_shell - have), 256)
        base = oracle.sample_surface(m, rng)
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        cand = base + u * rng.uniform(-width, width, size=(m, 1))
        d = np.asarray(oracle.signed_distance(cand), dtype=float)
        keep = np.abs(d) <= width
        chunks.append(cand[keep])
        dists.append(d[keep])
        have += int(keep.sum())
    shell = np.concatenate(chunks)[:n_shell] if chunks else np.zeros((0, 3))
    d_shell = np.concatenate(dists)[:n_shell] if dists else np.zeros(0)
    n_unif = n_total - n_shell
    center, half = 0.5 * (lo + hi), 0.5 * uniform_scale * (hi - lo)
    unif = center + half * rng.uniform(-1.0, 1.0, size=(n_unif, 3))
    d_unif = np.asarray(oracle.signed_distance(unif), dtype=float) if n_unif else np.zeros(0)
    meta = {"n_shell": n_shell, "n_uniform": n_unif, "seed": int(seed), "shell_width": width}
    return SdfDataset(np.concatenate([shell, unif]), np.concatenate([d_shell, d_unif]), meta)


def marching_cubes(
    field_fn: Callable[[np.ndarray], np.ndarray],
    bbox: tuple[Sequence[float], Sequence[float]],
    resolution: int | Sequence[int],
    iso: float = 0.0,
    chunk: int = 65536,
) -> TriangleMesh:
    """Extract the ``iso`` level set of ``field_fn`` on a regular grid.

    Returns an empty mesh when the field never crosses ``iso``.
    """
    from skimage import measure

    lo = np.asarray(bbox[0], dtype=float)
    hi = np.asarray(bbox[1], dtype=float)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    axes = [np.linspace(lo[k], hi[k], res[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(field_fn(grid[i:i + chunk]), dtype=float).reshape(-1)
                           for i in range(0, len(grid), chunk)])
    vol = vals.reshape(tuple(res))
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not (vol.min() <= iso <= vol.max()) or vol.min() == vol.max():
        return empty
    spacing = tuple((hi - lo) / (res - 1))
    try:
        verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=spacing)
    except (ValueError, RuntimeError):
        return empty
    mesh = TriangleMesh(verts.astype(np.float64) + lo, faces.astype(np.int64))
    keep = mesh.areas() > AREA_EPS
    if not np.all(keep):
        mesh = _compact(TriangleMesh(mesh.vertices, mesh.triangles[keep]))
    return mesh


def _compact(mesh: TriangleMesh) -> TriangleMesh:
    used, inv = np.unique(mesh.triangles.reshape(-1), return_inverse=True)
    return TriangleMesh(mesh.vertices[used], inv.reshape(-1, 3))


def medial_mask(field: DistanceField | SdfOracle, points: np.ndarray, h: float = 1e-4, tol: float = 1e-3) -> np.ndarray:
    """Flag points where the distance field is not smooth (medial axis, creases).

    Uses the mismatch between one-sided finite-difference slopes along each axis.
    """
    pts = _as_points(points)
    f0 = field.signed_distance(pts)
    mask = np.zeros(len(pts), dtype=bool)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fp = field.signed_distance(pts + e)
        fm = field.signed_distance(pts - e)
        mask |= np.abs((fp - f0) - (f0 - fm)) / h > tol
    return mask
