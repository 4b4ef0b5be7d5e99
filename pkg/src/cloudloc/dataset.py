"""Training-corpus generation: depth maps, occlusion filtering, 2D-3D
keypoint matching, and negative sampling.

Per training image the pipeline is: project every cloud point into a
min-depth map, project the 3D keypoints, drop the ones occluded per the
depth-block test, then greedily match the surviving projections against the
image's 2D keypoints one-to-one within a pixel threshold.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial import cKDTree

from .errors import EmptyDataset, ParseError, PoolExhausted
from .geometry import CameraView, in_frustum_mask, project_points
from .image import FeatureSet2D
from .pointcloud import FeatureSet3D, PointCloud


@dataclass
class DepthMap:
    depth: np.ndarray  # (h, w) float64, +inf where no point landed

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass
class ProjectedKeypointSet:
    """Frustum-passing projections of 3D keypoints; ids index the source set."""

    ids: np.ndarray  # (n,) int64
    u: np.ndarray  # (n,) float64
    v: np.ndarray  # (n,) float64
    depth: np.ndarray  # (n,) float64

    @property
    def count(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class CorrespondencePair:
    keypoint3d_id: int
    keypoint2d_id: int
    image_id: int
    pixel_distance: float


@dataclass
class CorrespondenceDataset:
    """Labeled descriptor pairs. Rows carry (kp3d_id, kp2d_id, image_id)
    provenance; positives and negatives never share a triple."""

    p: int
    q: int
    pos3d: np.ndarray  # (n_pos, p) float32
    pos2d: np.ndarray  # (n_pos, q) float32
    pos_ids: np.ndarray  # (n_pos, 3) uint32
    neg3d: np.ndarray
    neg2d: np.ndarray
    neg_ids: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_pos(self) -> int:
        return self.pos3d.shape[0]

    @property
    def n_neg(self) -> int:
        return self.neg3d.shape[0]

    def training_matrix(self):
        """(rows, labels) with rows = concatenated (desc3d | desc2d)."""
        x = np.concatenate(
            [
                np.concatenate([self.pos3d, self.pos2d], axis=1),
                np.concatenate([self.neg3d, self.neg2d], axis=1),
            ],
            axis=0,
        ).astype(np.float64)
        y = np.concatenate([np.ones(self.n_pos, dtype=np.int64), np.zeros(self.n_neg, dtype=np.int64)])
        return x, y


# ---------------------------------------------------------------------------
# Pipeline operations
# ---------------------------------------------------------------------------


def build_depth_map(cloud: PointCloud, view: CameraView) -> DepthMap:
    """Min-depth per pixel over all frustum-passing cloud points; projected
    pixel coordinates are truncated (floor) to whole numbers."""
    u, v, depth = project_points(cloud.positions, view.pose, view.intrinsics)
    ok = in_frustum_mask(u, v, depth, view.width, view.height)
    dmap = np.full((view.height, view.width), np.inf)
    if np.any(ok):
        px = np.floor(u[ok]).astype(np.int64)
        py = np.floor(v[ok]).astype(np.int64)
        np.minimum.at(dmap, (py, px), depth[ok])
    return DepthMap(dmap)


def project_keypoints(keys3d, view: CameraView) -> ProjectedKeypointSet:
    """Project 3D keypoints and keep the frustum-passing ones, ids preserved.

    `keys3d` is an (n, 3) position array or anything with a `.positions`
    attribute (e.g. FeatureSet3D).
    """
    positions = getattr(keys3d, "positions", keys3d)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    u, v, depth = project_points(positions, view.pose, view.intrinsics)
    ok = in_frustum_mask(u, v, depth, view.width, view.height)
    ids = np.nonzero(ok)[0].astype(np.int64)
    return ProjectedKeypointSet(ids=ids, u=u[ok], v=v[ok], depth=depth[ok])


def depth_block_filter(projected: ProjectedKeypointSet, dmap: DepthMap,
                       tau: int, depth_slack: float) -> ProjectedKeypointSet:
    """Keep a projected keypoint iff its depth is within `depth_slack` of the
    minimum finite depth in the tau x tau block around its pixel. Keypoints
    over all-empty blocks are dropped."""
    if tau < 1 or tau % 2 == 0:
        raise ValueError("tau must be odd and >= 1")
    if depth_slack <= 0:
        raise ValueError("depth_slack must be positive")
    if projected.count == 0:
        return projected
    blockmin = minimum_filter(dmap.depth, size=tau, mode="constant", cval=np.inf)
    px = np.floor(projected.u).astype(np.int64)
    py = np.floor(projected.v).astype(np.int64)
    bm = blockmin[py, px]
    keep = np.isfinite(bm) & (projected.depth <= bm + depth_slack)
    return ProjectedKeypointSet(
        ids=projected.ids[keep], u=projected.u[keep],
        v=projected.v[keep], depth=projected.depth[keep],
    )


def match_keypoints(filtered: ProjectedKeypointSet, keys2d, alpha: float,
                    image_id: int = 0) -> list[CorrespondencePair]:
    """Greedy one-to-one matching of projections against 2D keypoints.

    Candidates are pairs with pixel distance < alpha; they are consumed in
    ascending (distance, 3D id, 2D id) order, each keypoint used at most once.
    `keys2d` is an (m, 2) pixel array or anything with a `.uv` attribute.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    uv = getattr(keys2d, "uv", keys2d)
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if filtered.count == 0 or uv.shape[0] == 0:
        return []

    tree = cKDTree(uv)
    proj_uv = np.stack([filtered.u, filtered.v], axis=1)
    neighbor_lists = tree.query_ball_point(proj_uv, alpha)

    candidates = []
    for row, nbs in enumerate(neighbor_lists):
        id3 = int(filtered.ids[row])
        for k in nbs:
            dist = float(np.linalg.norm(proj_uv[row] - uv[k]))
            if dist < alpha:
                candidates.append((dist, id3, int(k)))
    candidates.sort()

    used3 = set()
    used2 = set()
    pairs = []
    for dist, id3, id2 in candidates:
        if id3 in used3 or id2 in used2:
            continue
        used3.add(id3)
        used2.add(id2)
        pairs.append(CorrespondencePair(keypoint3d_id=id3, keypoint2d_id=id2,
                                        image_id=image_id, pixel_distance=dist))
    return pairs


def sample_negatives(pos_ids: np.ndarray, pos2d: np.ndarray, feats3d: FeatureSet3D,
                     count: int, beta: float, gamma: float, rng_seed: int):
    """Rejection-sample non-matching (3D, 2D) pairs.

    A candidate pairs a random 3D keypoint j with the 2D keypoint of a random
    positive row; it is valid when j's position is >= beta from the 3D point
    truly matched to that 2D keypoint AND the L2 distance between j's
    descriptor and the true match's 3D descriptor is >= gamma.

    Returns (neg3d, neg2d, neg_ids) arrays.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    n_pos = pos_ids.shape[0]
    n3 = feats3d.count
    if n_pos == 0 or n3 == 0:
        raise PoolExhausted("no positives or no 3D keypoints to sample from")

    rng = np.random.default_rng(rng_seed)
    descs = feats3d.descriptors.astype(np.float64)
    positions = feats3d.positions

    taken = set()
    pos_triples = {tuple(int(x) for x in row) for row in pos_ids}
    out3d = []
    out2d = []
    out_ids = []
    max_attempts = 100 * count
    attempts = 0
    while len(out_ids) < count and attempts < max_attempts:
        attempts += 1
        row = int(rng.integers(0, n_pos))
        j = int(rng.integers(0, n3))
        true3 = int(pos_ids[row, 0])
        if j == true3:
            continue
        if np.linalg.norm(positions[j] - positions[true3]) < beta:
            continue
        if np.linalg.norm(descs[j] - descs[true3]) < gamma:
            continue
        triple = (j, int(pos_ids[row, 1]), int(pos_ids[row, 2]))
        if triple in pos_triples or triple in taken:
            continue
        taken.add(triple)
        out3d.append(feats3d.descriptors[j])
        out2d.append(pos2d[row])
        out_ids.append(triple)
    if len(out_ids) < count:
        raise PoolExhausted(
            f"only {len(out_ids)}/{count} valid negatives after {attempts} attempts"
        )
    return (
        np.array(out3d, dtype=np.float32),
        np.array(out2d, dtype=np.float32),
        np.array(out_ids, dtype=np.uint32),
    )


def assemble_dataset(images, cloud: PointCloud, cfg, feats3d: FeatureSet3D | None = None,
                     feats2d_per_image=None) -> CorrespondenceDataset:
    """Run the per-image pipeline over posed training images and attach
    sampled negatives.

    `images` is a list of (Image, CameraView). `cfg` must provide alpha, tau,
    depth_slack, beta, gamma, negative_ratio, seed, and the two detector
    configs (see config.RunConfig). Pre-extracted features can be supplied to
    skip detection.
    """
    from .image import extract_features_2d  # local import to avoid cycles
    from .pointcloud import extract_features_3d

    if len(images) == 0:
        raise ValueError("need at least one posed image")

    if feats3d is None:
        feats3d = extract_features_3d(cloud, cfg.detector3d, cfg.descriptor3d)
    feats3d = feats3d.nonzero_subset()

    pos3d = []
    pos2d = []
    pos_ids = []
    for i, (img, view) in enumerate(images):
        if feats2d_per_image is not None:
            feats2d = feats2d_per_image[i]
        else:
            feats2d = extract_features_2d(img, cfg.detector2d)
        feats2d = feats2d.nonzero_subset()
        if feats2d.count == 0:
            continue
        dmap = build_depth_map(cloud, view)
        projected = project_keypoints(feats3d, view)
        filtered = depth_block_filter(projected, dmap, cfg.tau, cfg.depth_slack)
        pairs = match_keypoints(filtered, feats2d, cfg.alpha, image_id=view.image_id)
        for pair in pairs:
            pos3d.append(feats3d.descriptors[pair.keypoint3d_id])
            pos2d.append(feats2d.descriptors[pair.keypoint2d_id])
            pos_ids.append((pair.keypoint3d_id, pair.keypoint2d_id, pair.image_id))

    if not pos_ids:
        raise EmptyDataset("no positive pairs were generated")

    pos3d = np.array(pos3d, dtype=np.float32)
    pos2d = np.array(pos2d, dtype=np.float32)
    pos_ids = np.array(pos_ids, dtype=np.uint32)

    n_neg = int(cfg.negative_ratio * pos_ids.shape[0])
    neg3d, neg2d, neg_ids = sample_negatives(
        pos_ids, pos2d, feats3d, n_neg, cfg.beta, cfg.gamma, cfg.seed
    )

    return CorrespondenceDataset(
        p=feats3d.dim, q=pos2d.shape[1],
        pos3d=pos3d, pos2d=pos2d, pos_ids=pos_ids,
        neg3d=neg3d, neg2d=neg2d, neg_ids=neg_ids,
    )


# ---------------------------------------------------------------------------
# CDS1 binary format
# ---------------------------------------------------------------------------

_CDS_MAGIC = b"CDS1"


def save_dataset(ds: CorrespondenceDataset, path, trailer: dict | None = None) -> None:
    rec = np.dtype([
        ("d3", "<f4", (ds.p,)), ("d2", "<f4", (ds.q,)), ("label", "u1"),
        ("kp3", "<u4"), ("kp2", "<u4"), ("img", "<u4"),
    ])
    rows = np.empty(ds.n_pos + ds.n_neg, dtype=rec)
    rows["d3"][: ds.n_pos] = ds.pos3d
    rows["d2"][: ds.n_pos] = ds.pos2d
    rows["label"][: ds.n_pos] = 1
    rows["kp3"][: ds.n_pos], rows["kp2"][: ds.n_pos], rows["img"][: ds.n_pos] = ds.pos_ids.T
    rows["d3"][ds.n_pos:] = ds.neg3d
    rows["d2"][ds.n_pos:] = ds.neg2d
    rows["label"][ds.n_pos:] = 0
    if ds.n_neg:
        rows["kp3"][ds.n_pos:], rows["kp2"][ds.n_pos:], rows["img"][ds.n_pos:] = ds.neg_ids.T
    with open(path, "wb") as fh:
        fh.write(_CDS_MAGIC)
        fh.write(struct.pack("<IIII", ds.p, ds.q, ds.n_pos, ds.n_neg))
        fh.write(rows.tobytes())
        if trailer is not None:
            fh.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def load_dataset(path) -> CorrespondenceDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CDS_MAGIC:
        raise ParseError(f"{path}: bad magic, expected CDS1")
    p, q, n_pos, n_neg = struct.unpack_from("<IIII", data, 4)
    rec = np.dtype([
        ("d3", "<f4", (p,)), ("d2", "<f4", (q,)), ("label", "u1"),
        ("kp3", "<u4"), ("kp2", "<u4"), ("img", "<u4"),
    ])
    need = 20 + rec.itemsize * (n_pos + n_neg)
    if len(data) < need:
        raise ParseError(f"{path}: truncated CDS1 ({len(data)} < {need} bytes)")
    rows = np.frombuffer(data[20:need], dtype=rec)
    if not (np.all(rows["label"][:n_pos] == 1) and np.all(rows["label"][n_pos:] == 0)):
        raise ParseError(f"{path}: label column inconsistent with header counts")
    metadata = {}
    if len(data) > need:
        try:
            metadata = json.loads(data[need:].decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            metadata = {}
    ids = np.stack([rows["kp3"], rows["kp2"], rows["img"]], axis=1).astype(np.uint32)
    return CorrespondenceDataset(
        p=p, q=q,
        pos3d=rows["d3"][:n_pos].astype(np.float32), pos2d=rows["d2"][:n_pos].astype(np.float32),
        pos_ids=ids[:n_pos],
        neg3d=rows["d3"][n_pos:].astype(np.float32), neg2d=rows["d2"][n_pos:].astype(np.float32),
        neg_ids=ids[n_pos:],
        metadata=metadata,
    )
