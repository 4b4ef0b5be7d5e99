"""Image ingestion, scale-space keypoint detection, and 2D descriptors.

The detector is a difference-of-Gaussians extremum finder with contrast and
edge-response rejection; the descriptor is a 4x4x8 oriented gradient
histogram (128 values) with the standard 0.2 clipping. Both are plain-numpy
and fully deterministic.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ImageTooSmall, ParseError, SupportOutOfBounds, UnsupportedFormat

DESCRIPTOR2D_DIM = 128  # 4x4 spatial cells x 8 orientation bins


@dataclass
class Image:
    pixels: np.ndarray  # (h, w) float64 luminance in [0, 1], row-major

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        if np.any(self.pixels < 0.0) or np.any(self.pixels > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Keypoint2D:
    u: float  # column, pixels
    v: float  # row, pixels
    scale: float  # pixels
    orientation: float  # radians in [-pi, pi)
    response: float = 0.0  # |DoG| value, detector-internal


@dataclass
class Detector2DConfig:
    scales_per_octave: int = 3
    sigma0: float = 1.6
    assumed_blur: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 5
    max_keypoints: int | None = None


# ---------------------------------------------------------------------------
# PGM / PPM reading and PGM writing
# ---------------------------------------------------------------------------


def _read_pnm_tokens(data: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping comments.
    Returns (tokens, offset_past_single_whitespace)."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ParseError("truncated PNM header")
        tokens.append(data[i:j])
        i = j
    if i >= n:
        raise ParseError("missing pixel data")
    return tokens, i + 1  # single whitespace byte after the header


def load_image(path) -> Image:
    """Read a binary 8-bit PGM (P5) or PPM (P6); PPM converts to luminance
    by ITU luma 0.299 r + 0.587 g + 0.114 b."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise ParseError(f"{path}: empty file")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"{path}: magic {magic!r} not P5/P6")
    try:
        tokens, offset = _read_pnm_tokens(data[2:], 3)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    offset += 2
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ParseError(f"{path}: non-integer header field") from exc
    if w <= 0 or h <= 0:
        raise ParseError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: only 8-bit (maxval 255) supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = data[offset:]
    if len(body) < need:
        raise ParseError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    raw = np.frombuffer(body[:need], dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        pixels = raw.reshape(h, w)
    else:
        rgb = raw.reshape(h, w, 3)
        pixels = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
        pixels = np.clip(pixels, 0.0, 1.0)
    return Image(pixels)


def save_pgm(img: Image, path) -> None:
    quant = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(quant.tobytes())


# ---------------------------------------------------------------------------
# Scale-space detector
# ---------------------------------------------------------------------------


def _build_pyramid(img: Image, cfg: Detector2DConfig):
    """Gaussian and DoG pyramids. Returns (gaussians, dogs, sigmas) per
    octave, where sigmas are the within-octave absolute blur levels."""
    s = cfg.scales_per_octave
    n_levels = s + 3
    k = 2.0 ** (1.0 / s)
    sigmas = [cfg.sigma0 * k ** i for i in range(n_levels)]

    n_octaves = max(1, int(math.floor(math.log2(min(img.width, img.height)))) - 3)

    base_blur = math.sqrt(max(cfg.sigma0 ** 2 - cfg.assumed_blur ** 2, 0.01))
    current = gaussian_filter(img.pixels, base_blur, mode="reflect")

    gaussians = []
    dogs = []
    for _ in range(n_octaves):
        levels = [current]
        for i in range(1, n_levels):
            inc = math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
            levels.append(gaussian_filter(levels[-1], inc, mode="reflect"))
        gaussians.append(levels)
        dogs.append([levels[i + 1] - levels[i] for i in range(n_levels - 1)])
        # level s has blur 2*sigma0: the next octave's base after decimation
        current = levels[s][::2, ::2]
        if min(current.shape) < 8:
            break
    return gaussians, dogs, sigmas


def _local_extrema(d0, d1, d2, border):
    """Boolean mask of strict 3x3x3 extrema of d1 (interior pixels only)."""
    c = d1[1:-1, 1:-1]
    is_max = np.ones_like(c, dtype=bool)
    is_min = np.ones_like(c, dtype=bool)
    for layer in (d0, d1, d2):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if layer is d1 and dy == 0 and dx == 0:
                    continue
                nb = layer[1 + dy:layer.shape[0] - 1 + dy, 1 + dx:layer.shape[1] - 1 + dx]
                is_max &= c > nb
                is_min &= c < nb
    mask = np.zeros_like(d1, dtype=bool)
    mask[1:-1, 1:-1] = is_max | is_min
    if border > 1:
        mask[:border, :] = False
        mask[-border:, :] = False
        mask[:, :border] = False
        mask[:, -border:] = False
    return mask


def _fit_quadratic(dogs, lvl, y, x):
    """One 3-D quadratic fit at a discrete extremum. Returns
    (offset_x, offset_y, offset_s, interpolated_value)."""
    prev_, cur, nxt = dogs[lvl - 1], dogs[lvl], dogs[lvl + 1]
    dx = 0.5 * (cur[y, x + 1] - cur[y, x - 1])
    dy = 0.5 * (cur[y + 1, x] - cur[y - 1, x])
    ds = 0.5 * (nxt[y, x] - prev_[y, x])
    dxx = cur[y, x + 1] + cur[y, x - 1] - 2 * cur[y, x]
    dyy = cur[y + 1, x] + cur[y - 1, x] - 2 * cur[y, x]
    dss = nxt[y, x] + prev_[y, x] - 2 * cur[y, x]
    dxy = 0.25 * (cur[y + 1, x + 1] - cur[y + 1, x - 1] - cur[y - 1, x + 1] + cur[y - 1, x - 1])
    dxs = 0.25 * (nxt[y, x + 1] - nxt[y, x - 1] - prev_[y, x + 1] + prev_[y, x - 1])
    dys = 0.25 * (nxt[y + 1, x] - nxt[y - 1, x] - prev_[y + 1, x] + prev_[y - 1, x])
    h = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    g = np.array([dx, dy, ds])
    try:
        off = -np.linalg.solve(h, g)
    except np.linalg.LinAlgError:
        off = np.zeros(3)
    off = np.clip(off, -0.5, 0.5)  # single fit, no re-localization
    val = cur[y, x] + 0.5 * float(g @ off)
    return off[0], off[1], off[2], val


def _edge_like(cur, y, x, edge_ratio):
    dxx = cur[y, x + 1] + cur[y, x - 1] - 2 * cur[y, x]
    dyy = cur[y + 1, x] + cur[y - 1, x] - 2 * cur[y, x]
    dxy = 0.25 * (cur[y + 1, x + 1] - cur[y + 1, x - 1] - cur[y - 1, x + 1] + cur[y - 1, x - 1])
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    if det <= 0:
        return True
    return tr * tr * edge_ratio >= (edge_ratio + 1.0) ** 2 * det


def _dominant_orientation(gauss, y, x, sigma):
    """Peak of the 36-bin gradient-orientation histogram around (y, x)."""
    h, w = gauss.shape
    win_sigma = 1.5 * sigma
    radius = max(1, int(round(3.0 * win_sigma)))
    y0, y1 = max(1, y - radius), min(h - 1, y + radius + 1)
    x0, x1 = max(1, x - radius), min(w - 1, x + radius + 1)
    if y1 - y0 < 1 or x1 - x0 < 1:
        return 0.0
    region = gauss[y0 - 1:y1 + 1, x0 - 1:x1 + 1]
    gx = 0.5 * (region[1:-1, 2:] - region[1:-1, :-2])
    gy = 0.5 * (region[2:, 1:-1] - region[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    wgt = np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * win_sigma ** 2))
    bins = np.floor((ang + np.pi) / (2 * np.pi) * 36).astype(np.int64) % 36
    hist = np.bincount(bins.ravel(), weights=(mag * wgt).ravel(), minlength=36)
    for _ in range(2):  # circular smoothing
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    peak = int(np.argmax(hist))
    left = hist[(peak - 1) % 36]
    right = hist[(peak + 1) % 36]
    denom = left - 2 * hist[peak] + right
    shift = 0.0 if abs(denom) < 1e-12 else 0.5 * (left - right) / denom
    theta = (peak + 0.5 + shift) / 36.0 * 2 * np.pi - np.pi
    # wrap into [-pi, pi)
    return float((theta + np.pi) % (2 * np.pi) - np.pi)


def detect_keypoints_2d(img: Image, cfg: Detector2DConfig | None = None) -> list[Keypoint2D]:
    """DoG extrema with contrast and edge rejection, one dominant orientation
    per keypoint. Deterministic; sorted by |response| descending."""
    cfg = cfg or Detector2DConfig()
    if min(img.width, img.height) < 32:
        raise ImageTooSmall(f"{img.width}x{img.height} below 32-pixel minimum")

    gaussians, dogs, sigmas = _build_pyramid(img, cfg)
    s = cfg.scales_per_octave
    found = []
    for octave, dog_levels in enumerate(dogs):
        scale_factor = 2.0 ** octave
        prefilter = 0.5 * cfg.contrast_threshold / s
        for lvl in range(1, len(dog_levels) - 1):
            mask = _local_extrema(dog_levels[lvl - 1], dog_levels[lvl], dog_levels[lvl + 1], cfg.border)
            mask &= np.abs(dog_levels[lvl]) > prefilter
            ys, xs = np.nonzero(mask)
            cur = dog_levels[lvl]
            for y, x in zip(ys.tolist(), xs.tolist()):
                if _edge_like(cur, y, x, cfg.edge_ratio):
                    continue
                ox, oy, osc, val = _fit_quadratic(dog_levels, lvl, y, x)
                if abs(val) < cfg.contrast_threshold:
                    continue
                u = (x + ox) * scale_factor
                v = (y + oy) * scale_factor
                if not (0.0 <= u < img.width and 0.0 <= v < img.height):
                    continue
                sigma_level = cfg.sigma0 * 2.0 ** ((lvl + osc) / s)
                scale = sigma_level * scale_factor
                theta = _dominant_orientation(gaussians[octave][lvl], y, x, sigmas[lvl])
                found.append(Keypoint2D(u=float(u), v=float(v), scale=float(scale),
                                        orientation=theta, response=float(val)))
    found.sort(key=lambda kp: (-abs(kp.response), kp.u, kp.v, kp.scale))
    if cfg.max_keypoints is not None:
        found = found[: cfg.max_keypoints]
    return found


# ---------------------------------------------------------------------------
# 4x4x8 gradient-histogram descriptor
# ---------------------------------------------------------------------------

_CLIP = 0.2


def _reflect_idx(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric reflection of integer indices into [0, n)."""
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def _bilinear(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    h, w = arr.shape
    y0r = _reflect_idx(y0, h)
    y1r = _reflect_idx(y0 + 1, h)
    x0r = _reflect_idx(x0, w)
    x1r = _reflect_idx(x0 + 1, w)
    return (
        arr[y0r, x0r] * (1 - fy) * (1 - fx)
        + arr[y0r, x1r] * (1 - fy) * fx
        + arr[y1r, x0r] * fy * (1 - fx)
        + arr[y1r, x1r] * fy * fx
    )


def _image_gradients(pixels: np.ndarray):
    gy, gx = np.gradient(pixels)
    return gx, gy


class GradientPyramid:
    """Gradient fields of progressively blurred copies of one image.

    Descriptor gradients are sampled from the level whose blur matches the
    keypoint scale (standard scale-space practice); sampling raw-resolution
    gradients instead would fold pixel-level noise into every descriptor.
    """

    _LEVELS = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)

    def __init__(self, pixels: np.ndarray):
        self._grads = []
        for sigma in self._LEVELS:
            blurred = pixels if sigma == 0.0 else gaussian_filter(pixels, sigma, mode="reflect")
            self._grads.append(_image_gradients(blurred))

    def at_scale(self, scale: float):
        """Gradient pair for the level with blur closest to scale / 2."""
        target = scale / 2.0
        best = int(np.argmin([abs(s - target) for s in self._LEVELS]))
        return self._grads[best]


def raw_descriptor_histogram(img: Image, kp: Keypoint2D,
                             gradients=None) -> np.ndarray:
    """Unnormalized 4x4x8 histogram for one keypoint (before normalization
    and clipping). Raises SupportOutOfBounds when more than half of the
    sample grid falls outside the image."""
    if gradients is None:
        gradients = GradientPyramid(img.pixels)
    if isinstance(gradients, GradientPyramid):
        gx, gy = gradients.at_scale(kp.scale)
    else:
        gx, gy = gradients
    n_grid = 16
    spacing = 12.0 * kp.scale / n_grid
    coords = (np.arange(n_grid) + 0.5 - n_grid / 2) * spacing
    oxs, oys = np.meshgrid(coords, coords)
    oxs = oxs.ravel()
    oys = oys.ravel()

    ct, st = math.cos(kp.orientation), math.sin(kp.orientation)
    us = kp.u + ct * oxs - st * oys
    vs = kp.v + st * oxs + ct * oys

    inside = (us >= 0) & (us < img.width) & (vs >= 0) & (vs < img.height)
    if np.count_nonzero(inside) < 0.5 * us.size:
        raise SupportOutOfBounds(
            f"{us.size - int(np.count_nonzero(inside))}/{us.size} samples outside image"
        )

    gxs = _bilinear(gx, vs, us)
    gys = _bilinear(gy, vs, us)
    # rotate gradients into the keypoint frame
    gl_x = ct * gxs + st * gys
    gl_y = -st * gxs + ct * gys
    mag = np.hypot(gl_x, gl_y)
    ang = np.arctan2(gl_y, gl_x)

    sigma_w = 6.0 * kp.scale
    wgt = np.exp(-(oxs ** 2 + oys ** 2) / (2.0 * sigma_w ** 2)) * mag
    wgt[~inside] = 0.0

    cell = 3.0 * kp.scale
    cx = oxs / cell + 1.5
    cy = oys / cell + 1.5
    ob = (ang + np.pi) / (2 * np.pi) * 8 - 0.5

    hist = np.zeros((4, 4, 8))
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    o0 = np.floor(ob).astype(np.int64)
    fx = cx - x0
    fy = cy - y0
    fo = ob - o0
    for dy_ in (0, 1):
        yb = y0 + dy_
        wy = np.where(dy_ == 0, 1 - fy, fy)
        vy = (yb >= 0) & (yb < 4)
        for dx_ in (0, 1):
            xb = x0 + dx_
            wx = np.where(dx_ == 0, 1 - fx, fx)
            vx = vy & (xb >= 0) & (xb < 4)
            for do_ in (0, 1):
                obn = np.mod(o0 + do_, 8)
                wo = np.where(do_ == 0, 1 - fo, fo)
                wtot = wgt * wy * wx * wo
                sel = vx & (wtot > 0)
                np.add.at(hist, (yb[sel], xb[sel], obn[sel]), wtot[sel])
    return hist.reshape(-1)


def compute_descriptor_2d(img: Image, kp: Keypoint2D, gradients=None) -> np.ndarray:
    """128-dim descriptor: normalize, clip at 0.2, renormalize. All-zero
    sentinel for gradient-free supports."""
    vec = raw_descriptor_histogram(img, kp, gradients)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return np.zeros(DESCRIPTOR2D_DIM, dtype=np.float64)
    vec = np.minimum(vec / norm, _CLIP)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        return np.zeros(DESCRIPTOR2D_DIM, dtype=np.float64)
    return vec / norm


# ---------------------------------------------------------------------------
# FeatureSet2D container and the C2DF binary format
# ---------------------------------------------------------------------------

_C2DF_MAGIC = b"C2DF"
_C2DF_VERSION = 1


@dataclass
class FeatureSet2D:
    uv: np.ndarray  # (n, 2) float64
    scales: np.ndarray  # (n,) float64
    orientations: np.ndarray  # (n,) float64
    descriptors: np.ndarray  # (n, q) float32
    metadata: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.uv.shape[0]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def nonzero_subset(self) -> "FeatureSet2D":
        keep = np.any(self.descriptors != 0.0, axis=1)
        return FeatureSet2D(
            self.uv[keep], self.scales[keep], self.orientations[keep],
            self.descriptors[keep], dict(self.metadata),
        )


def extract_features_2d(img: Image, cfg: Detector2DConfig | None = None) -> FeatureSet2D:
    kps = detect_keypoints_2d(img, cfg)
    gradients = GradientPyramid(img.pixels)
    descs = np.zeros((len(kps), DESCRIPTOR2D_DIM), dtype=np.float32)
    kept = []
    for kp in kps:
        try:
            d = compute_descriptor_2d(img, kp, gradients)
        except SupportOutOfBounds:
            continue
        kept.append((kp, d))
    descs = np.array([d for _, d in kept], dtype=np.float32).reshape(len(kept), -1)
    if len(kept) == 0:
        descs = np.zeros((0, DESCRIPTOR2D_DIM), dtype=np.float32)
    return FeatureSet2D(
        uv=np.array([[kp.u, kp.v] for kp, _ in kept], dtype=np.float64).reshape(-1, 2),
        scales=np.array([kp.scale for kp, _ in kept], dtype=np.float64),
        orientations=np.array([kp.orientation for kp, _ in kept], dtype=np.float64),
        descriptors=descs,
    )


def save_features_2d(feats: FeatureSet2D, path, trailer: dict | None = None) -> None:
    n, q = feats.count, feats.dim
    rec = np.empty(n, dtype=np.dtype(
        [("u", "<f8"), ("v", "<f8"), ("scale", "<f8"), ("orientation", "<f8"), ("desc", "<f4", (q,))]
    ))
    rec["u"], rec["v"] = feats.uv.T if n else (np.empty(0), np.empty(0))
    rec["scale"] = feats.scales
    rec["orientation"] = feats.orientations
    rec["desc"] = feats.descriptors
    with open(path, "wb") as fh:
        fh.write(_C2DF_MAGIC)
        fh.write(struct.pack("<III", _C2DF_VERSION, n, q))
        fh.write(rec.tobytes())
        if trailer is not None:
            fh.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def load_features_2d(path) -> FeatureSet2D:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _C2DF_MAGIC:
        raise ParseError(f"{path}: bad magic, expected C2DF")
    version, n, q = struct.unpack_from("<III", data, 4)
    if version != _C2DF_VERSION:
        raise ParseError(f"{path}: unsupported C2DF version {version}")
    rec = np.dtype([("u", "<f8"), ("v", "<f8"), ("scale", "<f8"), ("orientation", "<f8"), ("desc", "<f4", (q,))])
    need = 16 + rec.itemsize * n
    if len(data) < need:
        raise ParseError(f"{path}: truncated C2DF ({len(data)} < {need} bytes)")
    arr = np.frombuffer(data[16:need], dtype=rec)
    metadata = {}
    if len(data) > need:
        try:
            metadata = json.loads(data[need:].decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            metadata = {}
    return FeatureSet2D(
        uv=np.stack([arr["u"], arr["v"]], axis=1).astype(np.float64),
        scales=arr["scale"].astype(np.float64),
        orientations=arr["orientation"].astype(np.float64),
        descriptors=arr["desc"].astype(np.float32),
        metadata=metadata,
    )
