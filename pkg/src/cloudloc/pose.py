"""6-DOF pose recovery from 2D-3D correspondences.

P3P follows Grunert's classical formulation: the three camera-to-point
distances satisfy a quartic in one distance ratio; each admissible root is
back-substituted and turned into a rigid transform by aligning the world
triangle with its camera-frame reconstruction. MLESAC scores hypotheses by
a Gaussian-inlier / uniform-outlier mixture likelihood, and the winner is
polished by Levenberg-Marquardt on the inlier set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InsufficientCorrespondences,
    LocalizationFailed,
    NoHypothesisFound,
    NoRealSolution,
    RefinementDiverged,
)
from .geometry import Intrinsics, Pose, project_points


@dataclass(frozen=True)
class Correspondence:
    world: np.ndarray  # (3,) scene units
    pixel: np.ndarray  # (u, v)
    confidence: float = 1.0


@dataclass
class PoseEstimate:
    pose: Pose
    inlier_ids: np.ndarray
    mean_reprojection_error: float
    iterations_used: int


def _bearings(pixels: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Unit rays through pixels in the camera frame."""
    y = (pixels[:, 1] - k.cy) / k.fy
    x = (pixels[:, 0] - k.cx - k.skew * y) / k.fx
    rays = np.stack([x, y, np.ones(len(pixels))], axis=1)
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _align_rigid(src: np.ndarray, dst: np.ndarray, refine: bool = True) -> Pose:
    """Proper rigid transform mapping src points onto dst.

    Kabsch/SVD seeds the estimate; a short extended-precision Gauss-Newton
    on the point-alignment residuals then removes the ~sqrt(eps) rotation
    noise SVD leaves on sliver configurations.
    """
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # guard against numerical drift before Pose's orthonormality check
    uu, _, vv = np.linalg.svd(r)
    r = uu @ vv
    if np.linalg.det(r) < 0:
        uu[:, 2] = -uu[:, 2]
        r = uu @ vv
    if not refine:
        return Pose(r, cd - r @ cs)

    ld = np.longdouble
    rl = r.astype(ld)
    tl = (cd - r @ cs).astype(ld)
    srcl = src.astype(ld)
    dstl = dst.astype(ld)
    n = src.shape[0]
    for _ in range(3):
        pred = srcl @ rl.T + tl
        res = (dstl - pred).reshape(-1)
        jac = np.zeros((3 * n, 6), dtype=ld)
        for i in range(n):
            q = rl @ srcl[i]
            jac[3 * i:3 * i + 3, :3] = np.array([
                [ld(0), -q[2], q[1]],
                [q[2], ld(0), -q[0]],
                [-q[1], q[0], ld(0)],
            ])  # d(res)/d(dw) = [q]x (res = dst - (exp(dw) q + t))
            jac[3 * i:3 * i + 3, 3:] = -np.eye(3, dtype=ld)
        try:
            delta = _solve_longdouble(jac.T @ jac, -(jac.T @ res))
        except np.linalg.LinAlgError:
            break
        theta = np.sqrt(np.sum(delta[:3] ** 2))
        if theta < ld(1e-25):
            break
        ax = delta[:3] / theta
        sx = np.array([
            [ld(0), -ax[2], ax[1]],
            [ax[2], ld(0), -ax[0]],
            [-ax[1], ax[0], ld(0)],
        ])
        rot_inc = np.eye(3, dtype=ld) + np.sin(theta) * sx + (1 - np.cos(theta)) * (sx @ sx)
        rl = _orthonormalize_longdouble(rot_inc @ rl)
        tl = tl + delta[3:]
    r64 = _orthonormalize(rl.astype(np.float64))
    return Pose(r64, tl.astype(np.float64))


def _reprojection_errors(pose: Pose, worlds: np.ndarray, pixels: np.ndarray,
                         k: Intrinsics) -> np.ndarray:
    """Pixel errors; points behind the camera (or on the principal plane)
    get +inf."""
    u, v, depth = project_points(worlds, pose, k)
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    err[~np.isfinite(err)] = np.inf
    err[depth <= 0] = np.inf
    return err


def _triangle_area(p1, p2, p3) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(p2 - p1, p3 - p1)))


def p3p_solve(c1: Correspondence, c2: Correspondence, c3: Correspondence,
              k: Intrinsics, reproj_tol: float = 1e-6, precise: bool = True) -> list[Pose]:
    """All camera poses exactly consistent with three correspondences.

    Up to four candidates; each returned pose reprojects the three points
    with error below `reproj_tol` pixels (self-check executed in-solver).
    `precise=False` skips the extended-precision root and alignment
    refinements (used for bulk hypothesis generation, ~6x faster).
    """
    worlds = np.stack([np.asarray(c.world, dtype=np.float64) for c in (c1, c2, c3)])
    pixels = np.stack([np.asarray(c.pixel, dtype=np.float64) for c in (c1, c2, c3)])
    if _triangle_area(*worlds) < 1e-9:
        raise DegenerateConfiguration("world points are collinear")

    # the quartic is ill-conditioned near double roots, so the whole
    # distance system is assembled in extended precision
    ld = np.longdouble
    worlds_l = worlds.astype(ld)
    pixels_l = pixels.astype(ld)
    yl = (pixels_l[:, 1] - ld(k.cy)) / ld(k.fy)
    xl = (pixels_l[:, 0] - ld(k.cx) - ld(k.skew) * yl) / ld(k.fx)
    j_l = np.stack([xl, yl, np.ones(3, dtype=ld)], axis=1)
    j_l = j_l / np.sqrt(np.sum(j_l * j_l, axis=1))[:, None]
    j = j_l.astype(np.float64)

    # side lengths opposite each vertex and the inter-ray cosines
    a_l = np.sqrt(np.sum((worlds_l[1] - worlds_l[2]) ** 2))
    b_l = np.sqrt(np.sum((worlds_l[0] - worlds_l[2]) ** 2))
    c_l = np.sqrt(np.sum((worlds_l[0] - worlds_l[1]) ** 2))
    cos_alpha_l = j_l[1] @ j_l[2]
    cos_beta_l = j_l[0] @ j_l[2]
    cos_gamma_l = j_l[0] @ j_l[1]

    a2b2_l = (a_l * a_l) / (b_l * b_l)
    c2b2_l = (c_l * c_l) / (b_l * b_l)
    m_l = a2b2_l - c2b2_l  # (a^2 - c^2) / b^2
    s_l = a2b2_l + c2b2_l  # (a^2 + c^2) / b^2

    a4 = (m_l - 1.0) ** 2 - 4.0 * c2b2_l * cos_alpha_l ** 2
    a3 = 4.0 * (m_l * (1.0 - m_l) * cos_beta_l
                - (1.0 - s_l) * cos_alpha_l * cos_gamma_l
                + 2.0 * c2b2_l * cos_alpha_l ** 2 * cos_beta_l)
    a2 = 2.0 * (m_l * m_l - 1.0
                + 2.0 * m_l * m_l * cos_beta_l ** 2
                + 2.0 * (1.0 - c2b2_l) * cos_alpha_l ** 2
                - 4.0 * s_l * cos_alpha_l * cos_beta_l * cos_gamma_l
                + 2.0 * (1.0 - a2b2_l) * cos_gamma_l ** 2)
    a1 = 4.0 * (-m_l * (1.0 + m_l) * cos_beta_l
                + 2.0 * a2b2_l * cos_gamma_l ** 2 * cos_beta_l
                - (1.0 - s_l) * cos_alpha_l * cos_gamma_l)
    a0 = (1.0 + m_l) ** 2 - 4.0 * a2b2_l * cos_gamma_l ** 2

    coeffs = np.array([a4, a3, a2, a1, a0], dtype=ld)
    if np.max(np.abs(coeffs.astype(np.float64))) < 1e-18:
        raise DegenerateConfiguration("vanishing quartic")
    if precise:
        roots = _refined_roots(coeffs)
    else:
        roots = np.roots(coeffs.astype(np.float64)).astype(np.clongdouble)

    poses = []
    pose_errs = []
    for root in roots:
        if abs(float(root.imag)) > 1e-8 * max(1.0, abs(float(root.real))):
            continue
        v = root.real  # longdouble; float64 rounding here would be amplified
        if v <= 0:     # by du/dv near tangent (double-root) configurations
            continue
        s1_denom = 1.0 + v * v - 2.0 * v * cos_beta_l
        if s1_denom <= 0:
            continue
        s1 = b_l / np.sqrt(s1_denom)
        # u candidates: the rational elimination formula plus both branches
        # of the quadratic it came from (robust when its denominator ~ 0);
        # the fast path keeps only the cheapest adequate candidate
        u_candidates = []
        denom = 2.0 * (cos_gamma_l - v * cos_alpha_l)
        if abs(float(denom)) > 1e-12:
            u_candidates.append(((m_l - 1.0) * v * v - 2.0 * m_l * cos_beta_l * v + 1.0 + m_l) / denom)
        if precise or not u_candidates:
            disc = cos_gamma_l ** 2 - 1.0 + c2b2_l * s1_denom
            if disc >= 0:
                sq = np.sqrt(disc)
                u_candidates.extend([cos_gamma_l + sq, cos_gamma_l - sq])

        # group u candidates for this root: values within 1e-6 relative are
        # the same physical solution computed two ways; keep the variant
        # with the smallest reprojection error
        groups = []  # (u_ref, pose, max_err)
        for u in u_candidates:
            if u <= 0:
                continue
            scales = np.array([float(s1), float(u * s1), float(v * s1)])
            cam_pts = scales[:, None] * j
            try:
                pose = _align_rigid(worlds, cam_pts, refine=precise)
            except ValueError:
                continue
            err = _reprojection_errors(pose, worlds, pixels, k)
            max_err = float(np.max(err))
            if max_err > 1e-8:
                # far from a solution: polish, then re-check
                pose = _polish_pose(pose, worlds, pixels, k, extended=precise)
                max_err = float(np.max(_reprojection_errors(pose, worlds, pixels, k)))
            if max_err >= reproj_tol:
                continue
            uf = float(u)
            for g in groups:
                if abs(uf - g[0]) <= 1e-6 * max(1.0, abs(uf)):
                    if max_err < g[2]:
                        g[1], g[2] = pose, max_err
                    break
            else:
                groups.append([uf, pose, max_err])
        for _, pose, max_err in groups:
            # across roots dedupe only bit-level-identical solutions;
            # near-double roots are distinct poses and both must survive
            dup = None
            for i, p in enumerate(poses):
                if (np.allclose(pose.rotation, p.rotation, rtol=0.0, atol=1e-12)
                        and np.allclose(pose.translation, p.translation, rtol=0.0, atol=1e-12)):
                    dup = i
                    break
            if dup is None:
                poses.append(pose)
                pose_errs.append(max_err)
            elif max_err < pose_errs[dup]:
                poses[dup] = pose
                pose_errs[dup] = max_err
    if not poses:
        raise NoRealSolution("no admissible real root reprojects the points")
    return poses


def _refined_roots(coeffs: np.ndarray, iterations: int = 40) -> np.ndarray:
    """Quartic roots: eigenvalue-based estimates refined by Durand-Kerner
    iteration in extended precision. Simultaneous iteration keeps members of
    near-double pairs distinct, which float64 alone cannot guarantee."""
    raw = np.roots(coeffs.astype(np.float64))
    mono = (coeffs / coeffs[0]).astype(np.clongdouble)
    z = raw.astype(np.clongdouble)
    # perturb exactly-coincident starting points so denominators are nonzero
    for i in range(len(z)):
        for jx in range(i):
            if z[i] == z[jx]:
                z[i] = z[i] + np.clongdouble(1e-8 + 1e-8j)

    def poly(x):
        acc = np.full_like(x, mono[0])
        for c in mono[1:]:
            acc = acc * x + c
        return acc

    for _ in range(iterations):
        pz = poly(z)
        step = np.zeros_like(z)
        for i in range(len(z)):
            denom = np.clongdouble(1.0)
            for jx in range(len(z)):
                if jx != i:
                    denom = denom * (z[i] - z[jx])
            if denom == 0:
                continue
            step[i] = pz[i] / denom
        z = z - step
        if np.max(np.abs(step)) < 1e-30:
            break
    return z  # clongdouble: callers must not round before back-substituting


def _polish_pose(pose: Pose, worlds: np.ndarray, pixels: np.ndarray,
                 k: Intrinsics, iterations: int = 12, extended: bool = True) -> Pose:
    """Gauss-Newton on the 3-point reprojection (6 residuals, 6 dof); drives
    an approximate root to machine precision within its own basin.

    Near-double quartic roots leave the system ill-conditioned enough that
    float64 stalls around 1e-8 rotation radians, so a few extended-precision
    iterations finish the job when `extended` is set.
    """
    best = pose
    best_cost = float(np.sum(reprojection_residuals(pose, worlds, pixels, k) ** 2))
    for _ in range(iterations):
        res = reprojection_residuals(best, worlds, pixels, k)
        jac = reprojection_jacobian(best, worlds, k)
        try:
            delta = np.linalg.solve(jac.T @ jac + 1e-14 * np.eye(6), -jac.T @ res)
        except np.linalg.LinAlgError:
            break
        r_new = _orthonormalize(_rodrigues(delta[:3]) @ best.rotation)
        trial = Pose(r_new, best.translation + delta[3:])
        cost = float(np.sum(reprojection_residuals(trial, worlds, pixels, k) ** 2))
        if cost >= best_cost:
            break
        best = trial
        best_cost = cost
        if best_cost < 1e-24:
            break
    if extended:
        best = _polish_pose_extended(best, worlds, pixels, k)
    return best


def _solve_longdouble(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting (numpy.linalg lacks
    longdouble support)."""
    n = a.shape[0]
    m = np.concatenate([a.copy(), b.reshape(n, 1)], axis=1)
    for col in range(n):
        piv = col + int(np.argmax(np.abs(m[col:, col])))
        if np.abs(m[piv, col]) < np.longdouble(1e-300):
            raise np.linalg.LinAlgError("singular system")
        if piv != col:
            m[[col, piv]] = m[[piv, col]]
        m[col] = m[col] / m[col, col]
        for row in range(n):
            if row != col and m[row, col] != 0:
                m[row] = m[row] - m[row, col] * m[col]
    return m[:, n]


def _orthonormalize_longdouble(r: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on rows, keeping longdouble precision."""
    out = r.copy()
    for i in range(3):
        for j in range(i):
            out[i] = out[i] - (out[i] @ out[j]) * out[j]
        out[i] = out[i] / np.sqrt(out[i] @ out[i])
    return out


def _polish_pose_extended(pose: Pose, worlds: np.ndarray, pixels: np.ndarray,
                          k: Intrinsics, iterations: int = 4) -> Pose:
    ld = np.longdouble
    r = pose.rotation.astype(ld)
    t = pose.translation.astype(ld)
    w = worlds.astype(ld)
    px = pixels.astype(ld)
    fx, fy, cx, cy, sk = (ld(k.fx), ld(k.fy), ld(k.cx), ld(k.cy), ld(k.skew))
    n = len(w)

    def residuals(r, t):
        pc = w @ r.T + t
        z = pc[:, 2]
        u = (fx * pc[:, 0] + sk * pc[:, 1]) / z + cx
        v = fy * pc[:, 1] / z + cy
        res = np.empty(2 * n, dtype=ld)
        res[0::2] = px[:, 0] - u
        res[1::2] = px[:, 1] - v
        return res

    cost = float(np.sum(residuals(r, t) ** 2))
    for _ in range(iterations):
        q = w @ r.T
        pc = q + t
        jac = np.zeros((2 * n, 6), dtype=ld)
        for i in range(n):
            x, y, z = pc[i]
            du = np.array([fx / z, sk / z, -(fx * x + sk * y) / (z * z)], dtype=ld)
            dv = np.array([ld(0), fy / z, -fy * y / (z * z)], dtype=ld)
            s = np.array([
                [ld(0), -q[i, 2], q[i, 1]],
                [q[i, 2], ld(0), -q[i, 0]],
                [-q[i, 1], q[i, 0], ld(0)],
            ])
            jac[2 * i, :3] = du @ s
            jac[2 * i, 3:] = -du
            jac[2 * i + 1, :3] = dv @ s
            jac[2 * i + 1, 3:] = -dv
        res = residuals(r, t)
        try:
            delta = _solve_longdouble(jac.T @ jac, -(jac.T @ res))
        except np.linalg.LinAlgError:
            break
        theta = np.sqrt(np.sum(delta[:3] ** 2))
        if theta < ld(1e-30):
            break
        ax = delta[:3] / theta if theta > 0 else delta[:3]
        sx = np.array([
            [ld(0), -ax[2], ax[1]],
            [ax[2], ld(0), -ax[0]],
            [-ax[1], ax[0], ld(0)],
        ])
        rot_inc = np.eye(3, dtype=ld) + np.sin(theta) * sx + (1 - np.cos(theta)) * (sx @ sx)
        r_trial = _orthonormalize_longdouble(rot_inc @ r)
        t_trial = t + delta[3:]
        cost_trial = float(np.sum(residuals(r_trial, t_trial) ** 2))
        if cost_trial > cost:
            break
        r, t, cost = r_trial, t_trial, cost_trial
    r64 = _orthonormalize(r.astype(np.float64))
    return Pose(r64, t.astype(np.float64))


# ---------------------------------------------------------------------------
# MLESAC
# ---------------------------------------------------------------------------


@dataclass
class MlesacSettings:
    iterations: int = 2000
    inlier_threshold_px: float = 4.0
    sigma_px: float = 1.0
    seed: int = 0
    min_pixel_separation: float = 5.0  # minimal-sample degeneracy guard


def _mixture_cost(errors: np.ndarray, sigma: float, image_area: float,
                  mix: float = 0.5) -> float:
    """Negative log-likelihood of the Gaussian-inlier/uniform-outlier mix."""
    gauss = (mix / (2.0 * math.pi * sigma * sigma)) * np.exp(
        -np.minimum(errors, 1e6) ** 2 / (2.0 * sigma * sigma)
    )
    uniform = (1.0 - mix) / image_area
    return float(-np.sum(np.log(gauss + uniform)))


def mlesac(correspondences, k: Intrinsics, cfg: MlesacSettings | None = None,
           image_size=None) -> PoseEstimate:
    """Robust pose from >= 4 correspondences.

    Each iteration samples three correspondences for P3P plus a fourth to
    disambiguate the candidate roots; hypotheses are scored by the mixture
    negative log-likelihood over all correspondences. Deterministic per
    seed (per-iteration derived RNG streams).
    """
    cfg = cfg or MlesacSettings()
    n = len(correspondences)
    if n < 4:
        raise InsufficientCorrespondences(f"{n} correspondences < 4")
    worlds = np.stack([np.asarray(c.world, dtype=np.float64) for c in correspondences])
    pixels = np.stack([np.asarray(c.pixel, dtype=np.float64) for c in correspondences])
    if image_size is not None:
        image_area = float(image_size[0]) * float(image_size[1])
    else:
        span = pixels.max(axis=0) - pixels.min(axis=0)
        image_area = max(float(span[0] * span[1]), 1.0)

    best_cost = np.inf
    best_pose = None
    iterations_run = 0
    for it in range(cfg.iterations):
        iterations_run = it + 1
        rng = np.random.default_rng([cfg.seed, it])
        sample = rng.choice(n, size=4, replace=False)
        tri = sample[:3]
        probe = sample[3]
        px3 = pixels[tri]
        sep = min(
            np.linalg.norm(px3[0] - px3[1]),
            np.linalg.norm(px3[0] - px3[2]),
            np.linalg.norm(px3[1] - px3[2]),
        )
        if sep < cfg.min_pixel_separation:
            continue
        try:
            candidates = p3p_solve(
                Correspondence(worlds[tri[0]], pixels[tri[0]]),
                Correspondence(worlds[tri[1]], pixels[tri[1]]),
                Correspondence(worlds[tri[2]], pixels[tri[2]]),
                k,
                precise=False,
            )
        except (DegenerateConfiguration, NoRealSolution):
            continue
        if len(candidates) > 1:
            probe_err = [
                _reprojection_errors(p, worlds[probe:probe + 1], pixels[probe:probe + 1], k)[0]
                for p in candidates
            ]
            pose = candidates[int(np.argmin(probe_err))]
        else:
            pose = candidates[0]
        errors = _reprojection_errors(pose, worlds, pixels, k)
        cost = _mixture_cost(errors, cfg.sigma_px, image_area)
        if cost < best_cost:
            best_cost = cost
            best_pose = pose
    if best_pose is None:
        raise NoHypothesisFound("all samples degenerate or unsolvable")

    errors = _reprojection_errors(best_pose, worlds, pixels, k)
    inliers = np.nonzero(errors <= cfg.inlier_threshold_px)[0]
    mean_err = float(np.mean(errors[inliers])) if inliers.size else float("inf")
    return PoseEstimate(pose=best_pose, inlier_ids=inliers,
                        mean_reprojection_error=mean_err, iterations_used=iterations_run)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt refinement on the inlier set
# ---------------------------------------------------------------------------


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        wx = _skew(w)
        return np.eye(3) + wx  # first-order; re-orthonormalized by caller
    ax = w / theta
    wx = _skew(ax)
    return np.eye(3) + math.sin(theta) * wx + (1.0 - math.cos(theta)) * (wx @ wx)


def _skew(w) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, 2] = -u[:, 2]
        out = u @ vt
    return out


def reprojection_residuals(pose: Pose, worlds: np.ndarray, pixels: np.ndarray,
                           k: Intrinsics) -> np.ndarray:
    """Stacked (2n,) residuals observed - predicted."""
    p_cam = worlds @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    u = (k.fx * p_cam[:, 0] + k.skew * p_cam[:, 1]) / z + k.cx
    v = k.fy * p_cam[:, 1] / z + k.cy
    res = np.empty(2 * len(worlds))
    res[0::2] = pixels[:, 0] - u
    res[1::2] = pixels[:, 1] - v
    return res


def reprojection_jacobian(pose: Pose, worlds: np.ndarray, k: Intrinsics) -> np.ndarray:
    """(2n, 6) Jacobian of the residuals w.r.t. (delta_rotation, delta_T).

    The rotation increment is a left-multiplied axis-angle perturbation:
    R(delta) = exp([delta]x) R. d(exp([d]x) q)/dd at 0 equals -[q]x with
    q = R p, and residual = observed - predicted flips the sign once more.
    """
    n = len(worlds)
    q = worlds @ pose.rotation.T  # R p (camera frame before translation)
    p_cam = q + pose.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    # du/dp_cam and dv/dp_cam rows
    du = np.stack([k.fx / z, np.full(n, k.skew) / z, -(k.fx * x + k.skew * y) / (z * z)], axis=1)
    dv = np.stack([np.zeros(n), k.fy / z, -k.fy * y / (z * z)], axis=1)

    jac = np.zeros((2 * n, 6))
    # dp_cam/d(delta_w) = -[q]x ; dp_cam/dT = I
    for i in range(n):
        dq = -_skew(q[i])
        jac[2 * i, :3] = -(du[i] @ dq)
        jac[2 * i, 3:] = -du[i]
        jac[2 * i + 1, :3] = -(dv[i] @ dq)
        jac[2 * i + 1, 3:] = -dv[i]
    return jac


def refine_pose(initial: PoseEstimate, correspondences, k: Intrinsics,
                max_iterations: int = 100, step_tol: float = 1e-10) -> PoseEstimate:
    """LM minimization of summed squared reprojection error over the inliers.

    Cost never increases (steps are only accepted on decrease); raises
    RefinementDiverged after 10 consecutive failed damping escalations.
    """
    inliers = np.asarray(initial.inlier_ids, dtype=np.int64)
    if inliers.size < 4:
        raise InsufficientCorrespondences(f"{inliers.size} inliers < 4")
    worlds = np.stack([np.asarray(correspondences[i].world, dtype=np.float64) for i in inliers])
    pixels = np.stack([np.asarray(correspondences[i].pixel, dtype=np.float64) for i in inliers])

    pose = initial.pose
    res = reprojection_residuals(pose, worlds, pixels, k)
    cost = float(res @ res)
    lam = 1e-6
    iterations = 0
    converged = False
    for _ in range(max_iterations):
        if converged:
            break
        iterations += 1
        jac = reprojection_jacobian(pose, worlds, k)
        jtj = jac.T @ jac
        g = jac.T @ res
        accepted = False
        best_trial_cost = np.inf
        for _escalation in range(10):
            try:
                delta = np.linalg.solve(jtj + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if np.linalg.norm(delta) < step_tol:
                accepted = True
                converged = True
                break
            r_new = _orthonormalize(_rodrigues(delta[:3]) @ pose.rotation)
            trial = Pose(r_new, pose.translation + delta[3:])
            res_trial = reprojection_residuals(trial, worlds, pixels, k)
            cost_trial = float(res_trial @ res_trial)
            best_trial_cost = min(best_trial_cost, cost_trial)
            if cost_trial <= cost:
                pose = trial
                res = res_trial
                cost = cost_trial
                lam = max(lam / 10.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # stagnation at a noisy minimum is convergence, not divergence
            if best_trial_cost - cost <= 1e-12 * max(cost, 1e-300):
                converged = True
                break
            raise RefinementDiverged("cost would not decrease after 10 damping escalations")

    mean_err = float(np.mean(np.hypot(res[0::2], res[1::2])))
    return PoseEstimate(pose=pose, inlier_ids=inliers,
                        mean_reprojection_error=mean_err, iterations_used=iterations)


# ---------------------------------------------------------------------------
# Full test-time pipeline: cascade -> two-way match -> MLESAC -> refinement
# ---------------------------------------------------------------------------


@dataclass
class LocalizationResult:
    estimate: PoseEstimate
    n_matches: int
    n_inliers: int
    matches: list = field(default_factory=list)


def localize(feats2d, feats3d, model, k: Intrinsics, mlesac_cfg: MlesacSettings | None = None,
             image_size=None) -> LocalizationResult:
    """Localize one image's features in a cloud's features.

    Raises LocalizationFailed wrapping the failing stage when any stage
    cannot proceed (the caller records it as an unlocalized image).
    """
    from .matcher import cascade_match, two_way_match

    try:
        table = cascade_match(model, feats2d.descriptors, feats3d.descriptors)
        matches = two_way_match(table)
    except Exception as exc:  # noqa: BLE001 - rewrapped with stage info
        raise LocalizationFailed("matching", exc) from exc

    correspondences = [
        Correspondence(world=feats3d.positions[i3], pixel=feats2d.uv[i2], confidence=conf)
        for (i2, i3, conf) in matches
    ]
    try:
        estimate = mlesac(correspondences, k, mlesac_cfg, image_size=image_size)
    except (InsufficientCorrespondences, NoHypothesisFound) as exc:
        raise LocalizationFailed("mlesac", exc) from exc
    try:
        if estimate.inlier_ids.size >= 4:
            estimate = refine_pose(estimate, correspondences, k)
    except RefinementDiverged as exc:
        raise LocalizationFailed("refinement", exc) from exc

    return LocalizationResult(
        estimate=estimate,
        n_matches=len(matches),
        n_inliers=int(estimate.inlier_ids.size),
        matches=matches,
    )
