"""Point-cloud ingestion, spatial indexing, 3D keypoints, and 3D descriptors.

3D keypoints are strict local maxima of a surface-variation curvature
estimate over a small set of support radii; descriptors are 4 radial x 8
intensity-gradient-orientation histograms (32 values) computed in the
keypoint's tangent plane, invariant to rotation about the surface normal.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientNeighborhood, MissingProperty, ParseError

DESCRIPTOR3D_DIM = 32  # 4 radial bins x 8 orientation bins
_N_RADIAL = 4
_N_ORIENT = 8


@dataclass
class PointCloud:
    positions: np.ndarray  # (n, 3) float64
    intensities: np.ndarray  # (n,) float64 in [0, 1]

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.intensities = np.ascontiguousarray(self.intensities, dtype=np.float64).reshape(-1)
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if self.positions.shape[0] != self.intensities.shape[0]:
            raise ValueError("positions/intensities length mismatch")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite point positions")
        if np.any(self.intensities < 0.0) or np.any(self.intensities > 1.0):
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def median_spacing(self) -> float:
        """Median nearest-neighbor distance, the cloud's resolution estimate."""
        if self.count < 2:
            return 0.0
        tree = cKDTree(self.positions)
        d, _ = tree.query(self.positions, k=2)
        return float(np.median(d[:, 1]))


class SpatialIndex:
    """k-NN and radius queries guaranteed to match a brute-force scan.

    Backed by a k-d tree; ties in k-NN queries are broken by ascending point
    index, and radius results are returned sorted by index.
    """

    def __init__(self, positions: np.ndarray):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        self._tree = cKDTree(self.positions)

    def radius(self, center, r: float) -> np.ndarray:
        """Indices of all points with distance <= r, sorted ascending."""
        idx = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), r)
        return np.sort(np.asarray(idx, dtype=np.int64))

    def radius_many(self, centers: np.ndarray, r: float) -> list:
        """Per-center index arrays for a batch of radius queries."""
        out = self._tree.query_ball_point(np.asarray(centers, dtype=np.float64), r)
        return [np.sort(np.asarray(ix, dtype=np.int64)) for ix in out]

    def knn(self, center, k: int) -> np.ndarray:
        """Indices of the k nearest points, ties broken by point index."""
        n = self.positions.shape[0]
        center = np.asarray(center, dtype=np.float64)
        k = min(int(k), n)
        if k <= 0:
            return np.empty(0, dtype=np.int64)
        d, _ = self._tree.query(center, k=k)
        dk = float(np.max(np.atleast_1d(d)))
        # inflate slightly so candidates cover any ulp difference, then
        # re-rank exactly with numpy arithmetic
        cand = np.asarray(
            self._tree.query_ball_point(center, dk * (1.0 + 1e-12) + 1e-300),
            dtype=np.int64,
        )
        dist = np.linalg.norm(self.positions[cand] - center, axis=1)
        order = np.lexsort((cand, dist))
        return cand[order[:k]]


@dataclass(frozen=True)
class Keypoint3D:
    position: np.ndarray  # coincides with a cloud point
    scale: float  # support radius, scene units
    response: float  # curvature at the detection scale
    point_id: int = -1  # index of the source cloud point


@dataclass
class Detector3DConfig:
    """Settings for curvature-based keypoint detection.

    scales: explicit support radii; when None they default to
    (2, 4, 8) x median nearest-neighbor spacing.
    """

    scales: tuple | None = None
    scale_multipliers: tuple = (2.0, 4.0, 8.0)
    response_threshold: float = 0.015
    min_neighbors: int = 5
    max_keypoints: int | None = None

    def resolve_scales(self, cloud: PointCloud) -> tuple:
        if self.scales is not None:
            scales = tuple(float(s) for s in self.scales)
        else:
            rho = cloud.median_spacing()
            if rho <= 0.0:
                raise ValueError("cannot derive scales for a degenerate cloud")
            scales = tuple(m * rho for m in self.scale_multipliers)
        if any(s <= 0 for s in scales) or list(scales) != sorted(scales):
            raise ValueError("scales must be positive and ascending")
        return scales


@dataclass
class Descriptor3DConfig:
    gradient_radius_factor: float = 1.0  # gradient LSQ radius = factor * kp.scale
    min_support: int = 5


# ---------------------------------------------------------------------------
# PLY reader / writer
# ---------------------------------------------------------------------------

_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_ply(path) -> PointCloud:
    """Read an ASCII or binary-little-endian PLY with x,y,z vertices.

    Intensity comes from an `intensity` property when present, else from
    r,g,b via ITU luma (0.299 r + 0.587 g + 0.114 b) scaled to [0,1], else
    it defaults to 0.5.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]

    fmt = None
    vertex_count = None
    props = []  # (dtype, name) for the vertex element
    in_vertex = False
    seen_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if tok[1] == "vertex":
                vertex_count = int(tok[2])
                in_vertex = True
                seen_vertex = True
            else:
                if not seen_vertex:
                    raise ParseError(f"{path}: non-vertex element before vertices unsupported")
                in_vertex = False
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ParseError(f"{path}: list property in vertex element unsupported")
            if tok[1] not in _PLY_DTYPES:
                raise ParseError(f"{path}: unknown property type {tok[1]!r}")
            props.append((_PLY_DTYPES[tok[1]], tok[2]))

    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    if vertex_count is None:
        raise ParseError(f"{path}: no vertex element")
    names = [name for _, name in props]
    if not {"x", "y", "z"}.issubset(names):
        raise MissingProperty(f"{path}: vertex element lacks x/y/z")

    if fmt == "ascii":
        rows = body.decode("ascii", errors="replace").split("\n")
        rows = [r for r in rows if r.strip()]
        if len(rows) < vertex_count:
            raise ParseError(f"{path}: header declares {vertex_count} vertices, body has {len(rows)}")
        try:
            table = np.array(
                [[float(t) for t in rows[i].split()[: len(props)]] for i in range(vertex_count)],
                dtype=np.float64,
            )
        except (ValueError, IndexError) as exc:
            raise ParseError(f"{path}: bad ASCII vertex data: {exc}") from exc
        if table.shape[1] != len(props):
            raise ParseError(f"{path}: vertex row has wrong field count")
        cols = {name: table[:, i] for i, (_, name) in enumerate(props)}
        dtypes = {name: dt for dt, name in props}
    else:
        rec = np.dtype([(name, "<" + dt) for dt, name in props])
        need = rec.itemsize * vertex_count
        if len(body) < need:
            raise ParseError(f"{path}: body truncated ({len(body)} < {need} bytes)")
        arr = np.frombuffer(body[:need], dtype=rec)
        cols = {name: arr[name].astype(np.float64) for _, name in props}
        dtypes = {name: dt for dt, name in props}

    positions = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    if "intensity" in cols:
        inten = cols["intensity"]
        if dtypes["intensity"] == "u1":
            inten = inten / 255.0
        inten = np.clip(inten, 0.0, 1.0)
    elif {"red", "green", "blue"}.issubset(cols):
        inten = 0.299 * cols["red"] + 0.587 * cols["green"] + 0.114 * cols["blue"]
        if dtypes["red"] == "u1":
            inten = inten / 255.0
        inten = np.clip(inten, 0.0, 1.0)
    else:
        inten = np.full(vertex_count, 0.5)
    return PointCloud(positions, inten)


def save_ply(cloud: PointCloud, path) -> None:
    """Write a binary-little-endian PLY with double xyz + double intensity."""
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {cloud.count}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "property double intensity\n"
        "end_header\n"
    )
    rec = np.empty(cloud.count, dtype=np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("i", "<f8")]))
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    rec["i"] = cloud.intensities
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# Curvature and keypoint detection
# ---------------------------------------------------------------------------


def principal_curvature(cloud: PointCloud, index: SpatialIndex, point_id: int, radius: float) -> float:
    """Surface-variation curvature lambda_min / (l1+l2+l3) of the
    radius-neighborhood covariance; lies in [0, 1/3]."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    nb = index.radius(cloud.positions[point_id], radius)
    if nb.size < 5:
        raise InsufficientNeighborhood(f"point {point_id}: {nb.size} neighbors < 5")
    pts = cloud.positions[nb]
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / nb.size
    eig = np.linalg.eigvalsh(cov)
    total = float(eig.sum())
    if total <= 0.0:
        return 0.0
    return float(max(eig[0], 0.0) / total)


def _curvature_all(cloud: PointCloud, index: SpatialIndex, radius: float, min_neighbors: int):
    """Curvature for every point at one radius; -inf where the neighborhood
    is too small. Also returns the neighbor lists for the local-max test."""
    n = cloud.count
    neighbor_lists = index._tree.query_ball_point(cloud.positions, radius)
    counts = np.fromiter((len(ix) for ix in neighbor_lists), dtype=np.int64, count=n)
    curv = np.full(n, -np.inf)

    valid = counts >= min_neighbors
    # chunked segment reductions keep the flattened neighbor table small
    chunk = 4096
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sel = np.nonzero(valid[start:stop])[0] + start
        if sel.size == 0:
            continue
        flat = np.concatenate([neighbor_lists[i] for i in sel]).astype(np.int64)
        seg_counts = counts[sel]
        offsets = np.concatenate(([0], np.cumsum(seg_counts)[:-1]))
        pts = cloud.positions[flat]
        s1 = np.add.reduceat(pts, offsets, axis=0)
        prods = pts[:, :, None] * pts[:, None, :]
        s2 = np.add.reduceat(prods.reshape(-1, 9), offsets, axis=0)
        m = seg_counts[:, None].astype(np.float64)
        mean = s1 / m
        cov = s2.reshape(-1, 3, 3) / m[:, :, None] - mean[:, :, None] * mean[:, None, :]
        eig = np.linalg.eigvalsh(cov)
        total = eig.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(total > 0.0, np.maximum(eig[:, 0], 0.0) / total, 0.0)
        curv[sel] = c
    return curv, neighbor_lists, counts


def detect_keypoints_3d(cloud: PointCloud, cfg: Detector3DConfig | None = None,
                        index: SpatialIndex | None = None) -> list[Keypoint3D]:
    """Strict local maxima of curvature over the r-neighborhood at any of the
    configured scales. Deterministic; sorted by response descending, then by
    position lexicographic."""
    cfg = cfg or Detector3DConfig()
    index = index or SpatialIndex(cloud.positions)
    scales = cfg.resolve_scales(cloud)

    n = cloud.count
    best_response = np.full(n, -np.inf)
    best_scale = np.zeros(n)
    for radius in scales:
        curv, neighbor_lists, counts = _curvature_all(cloud, index, radius, cfg.min_neighbors)
        flat = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in neighbor_lists])
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        owner = np.repeat(np.arange(n), counts)
        vals = curv[flat]
        vals[flat == owner] = -np.inf  # exclude self from the neighbor max
        nbmax = np.maximum.reduceat(vals, offsets)
        is_max = (curv > nbmax) & (curv >= cfg.response_threshold) & np.isfinite(curv)
        take = is_max & (curv > best_response)
        best_response[take] = curv[take]
        best_scale[take] = radius

    ids = np.nonzero(best_response > -np.inf)[0]
    kps = [
        Keypoint3D(
            position=cloud.positions[i].copy(),
            scale=float(best_scale[i]),
            response=float(best_response[i]),
            point_id=int(i),
        )
        for i in ids
    ]
    kps.sort(key=lambda k: (-k.response, k.position[0], k.position[1], k.position[2]))
    if cfg.max_keypoints is not None:
        kps = kps[: cfg.max_keypoints]
    return kps


# ---------------------------------------------------------------------------
# RIFT-style 3D descriptor
# ---------------------------------------------------------------------------


def _tangent_basis(normal: np.ndarray):
    """Deterministic tangent basis orthogonal to `normal`; stable under any
    rotation about the normal because it depends on the normal alone."""
    a = np.zeros(3)
    a[int(np.argmin(np.abs(normal)))] = 1.0
    e1 = np.cross(normal, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2


def compute_descriptor_3d(cloud: PointCloud, index: SpatialIndex, kp: Keypoint3D,
                          cfg: Descriptor3DConfig | None = None) -> np.ndarray:
    """32-dim rotation-invariant descriptor: 4 radial x 8 orientation bins of
    tangent-plane intensity gradients, orientation measured against the radial
    direction. All-zero when the support carries no intensity gradient."""
    cfg = cfg or Descriptor3DConfig()
    support_radius = 2.0 * kp.scale
    nb = index.radius(kp.position, support_radius)
    if nb.size < cfg.min_support:
        raise InsufficientNeighborhood(f"support has {nb.size} points < {cfg.min_support}")

    pts = cloud.positions[nb]
    inten = cloud.intensities[nb]
    rel = pts - kp.position

    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / nb.size
    eigval, eigvec = np.linalg.eigh(cov)
    normal = eigvec[:, 0]
    # canonical sign: largest-magnitude component positive
    j = int(np.argmax(np.abs(normal)))
    if normal[j] < 0:
        normal = -normal
    e1, e2 = _tangent_basis(normal)

    t = np.stack([rel @ e1, rel @ e2], axis=1)  # tangent coordinates
    r3 = np.linalg.norm(rel, axis=1)

    # per-point tangent gradient of intensity via local least squares
    grad_radius = cfg.gradient_radius_factor * kp.scale
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    within = d2 <= grad_radius * grad_radius
    np.fill_diagonal(within, False)

    grads = np.zeros((nb.size, 2))
    for i in range(nb.size):
        sel = np.nonzero(within[i])[0]
        if sel.size < 3:
            continue
        a = t[sel] - t[i]
        y = inten[sel] - inten[i]
        ata = a.T @ a + 1e-12 * np.eye(2)
        grads[i] = np.linalg.solve(ata, a.T @ y)

    mag = np.linalg.norm(grads, axis=1)
    rt = np.linalg.norm(t, axis=1)
    use = (mag > 1e-12) & (rt > 1e-9) & (r3 > 1e-9)
    if not np.any(use):
        return np.zeros(DESCRIPTOR3D_DIM, dtype=np.float64)

    d = t[use] / rt[use, None]  # radial direction in the tangent plane
    g = grads[use]
    sin_t = d[:, 0] * g[:, 1] - d[:, 1] * g[:, 0]
    cos_t = np.sum(d * g, axis=1)
    theta = np.arctan2(sin_t, cos_t)  # [-pi, pi)

    hist = np.zeros((_N_RADIAL, _N_ORIENT))
    rpos = np.clip(r3[use] / support_radius, 0.0, 1.0) * _N_RADIAL - 0.5
    opos = (theta + np.pi) / (2.0 * np.pi) * _N_ORIENT - 0.5
    r0 = np.floor(rpos).astype(np.int64)
    o0 = np.floor(opos).astype(np.int64)
    fr = rpos - r0
    fo = opos - o0
    w = mag[use]
    for dr in (0, 1):
        rb = np.clip(r0 + dr, 0, _N_RADIAL - 1)
        wr = w * np.where(dr == 0, 1.0 - fr, fr)
        for do in (0, 1):
            ob = np.mod(o0 + do, _N_ORIENT)
            np.add.at(hist, (rb, ob), wr * np.where(do == 0, 1.0 - fo, fo))

    vec = hist.reshape(-1)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return np.zeros(DESCRIPTOR3D_DIM, dtype=np.float64)
    return vec / norm


def describe_keypoints_3d(cloud: PointCloud, kps: list[Keypoint3D],
                          cfg: Descriptor3DConfig | None = None,
                          index: SpatialIndex | None = None) -> np.ndarray:
    """(n, 32) descriptor matrix; rows with too-small support come back zero."""
    cfg = cfg or Descriptor3DConfig()
    index = index or SpatialIndex(cloud.positions)
    out = np.zeros((len(kps), DESCRIPTOR3D_DIM), dtype=np.float64)
    for i, kp in enumerate(kps):
        try:
            out[i] = compute_descriptor_3d(cloud, index, kp, cfg)
        except InsufficientNeighborhood:
            pass  # stays the all-zero sentinel, filtered downstream
    return out


# ---------------------------------------------------------------------------
# FeatureSet3D container and the C3DF binary format
# ---------------------------------------------------------------------------

_C3DF_MAGIC = b"C3DF"
_C3DF_VERSION = 1


@dataclass
class FeatureSet3D:
    positions: np.ndarray  # (n, 3) float64
    scales: np.ndarray  # (n,) float64
    responses: np.ndarray  # (n,) float64
    descriptors: np.ndarray  # (n, p) float32
    metadata: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @staticmethod
    def from_keypoints(kps: list[Keypoint3D], descriptors: np.ndarray) -> "FeatureSet3D":
        return FeatureSet3D(
            positions=np.array([k.position for k in kps], dtype=np.float64).reshape(-1, 3),
            scales=np.array([k.scale for k in kps], dtype=np.float64),
            responses=np.array([k.response for k in kps], dtype=np.float64),
            descriptors=np.asarray(descriptors, dtype=np.float32).reshape(len(kps), -1),
        )

    def nonzero_subset(self) -> "FeatureSet3D":
        """Drop all-zero sentinel descriptors (degenerate supports)."""
        keep = np.any(self.descriptors != 0.0, axis=1)
        return FeatureSet3D(
            self.positions[keep], self.scales[keep], self.responses[keep],
            self.descriptors[keep], dict(self.metadata),
        )


def save_features_3d(feats: FeatureSet3D, path, trailer: dict | None = None) -> None:
    n, p = feats.count, feats.dim
    rec = np.empty(n, dtype=np.dtype(
        [("xyz", "<f8", (3,)), ("scale", "<f8"), ("response", "<f8"), ("desc", "<f4", (p,))]
    ))
    rec["xyz"] = feats.positions
    rec["scale"] = feats.scales
    rec["response"] = feats.responses
    rec["desc"] = feats.descriptors
    with open(path, "wb") as fh:
        fh.write(_C3DF_MAGIC)
        fh.write(struct.pack("<III", _C3DF_VERSION, n, p))
        fh.write(rec.tobytes())
        if trailer is not None:
            fh.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def load_features_3d(path) -> FeatureSet3D:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _C3DF_MAGIC:
        raise ParseError(f"{path}: bad magic, expected C3DF")
    version, n, p = struct.unpack_from("<III", data, 4)
    if version != _C3DF_VERSION:
        raise ParseError(f"{path}: unsupported C3DF version {version}")
    rec = np.dtype([("xyz", "<f8", (3,)), ("scale", "<f8"), ("response", "<f8"), ("desc", "<f4", (p,))])
    need = 16 + rec.itemsize * n
    if len(data) < need:
        raise ParseError(f"{path}: truncated C3DF ({len(data)} < {need} bytes)")
    arr = np.frombuffer(data[16:need], dtype=rec)
    metadata = {}
    if len(data) > need:
        try:
            metadata = json.loads(data[need:].decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            metadata = {}
    return FeatureSet3D(
        positions=arr["xyz"].astype(np.float64),
        scales=arr["scale"].astype(np.float64),
        responses=arr["response"].astype(np.float64),
        descriptors=arr["desc"].astype(np.float32),
        metadata=metadata,
    )


def extract_features_3d(cloud: PointCloud,
                        detector: Detector3DConfig | None = None,
                        descriptor: Descriptor3DConfig | None = None) -> FeatureSet3D:
    """Detection + description on one cloud; keeps the all-zero sentinels
    (callers filter with nonzero_subset where required)."""
    index = SpatialIndex(cloud.positions)
    kps = detect_keypoints_3d(cloud, detector, index=index)
    descs = describe_keypoints_3d(cloud, kps, descriptor, index=index)
    return FeatureSet3D.from_keypoints(kps, descs)
