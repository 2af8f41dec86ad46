"""Evaluation metrics: depth L1, PSNR, SSIM, ATE RMSE, rank correlation.

All functions are pure and deterministic.  Depth errors are reported in
centimeters; PSNR assumes values in [0, 1] and is capped at 99 dB for
near-identical images; SSIM uses the standard 11x11 Gaussian window
(sigma 1.5, K1=0.01, K2=0.03).  ATE aligns the estimate to the ground
truth with the closed-form rigid (SE(3)) fit before computing the RMSE.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Pose

PSNR_CAP_DB = 99.0


def depth_l1(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray) -> float:
    """Mean absolute depth difference over valid pixels, in centimeters."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("depth image shapes differ")
    mask = np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        raise ValueError("no valid pixels in mask")
    return float(np.mean(np.abs(pred[mask] - gt[mask])) * 100.0)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean(np.square(pred - gt)))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_single(a: np.ndarray, b: np.ndarray, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """SSIM of one grayscale image pair with a Gaussian window."""
    # truncate at radius 5 -> 11-tap kernel, the standard window
    trunc = 5.0 / sigma
    blur = lambda x: gaussian_filter(x, sigma, truncate=trunc, mode="reflect")
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = blur(a), blur(b)
    va = blur(a * a) - mu_a * mu_a
    vb = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (va + vb + c2)
    # crop the window radius to avoid boundary effects
    r = 5
    return float(np.mean((num / den)[r:-r, r:-r]))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM; RGB images average the per-channel scores."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    if pred.ndim == 2:
        return _ssim_single(pred, gt)
    return float(np.mean([_ssim_single(pred[..., c], gt[..., c]) for c in range(pred.shape[-1])]))


def align_rigid(source: np.ndarray, target: np.ndarray) -> Pose:
    """Closed-form SE(3) minimizing sum ||R s + t - q||^2 (no scale)."""
    s = np.atleast_2d(source)
    q = np.atleast_2d(target)
    mu_s, mu_q = s.mean(axis=0), q.mean(axis=0)
    h = (s - mu_s).T @ (q - mu_q)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, mu_q - r @ mu_s)


def ate_rmse(est_positions: np.ndarray, gt_positions: np.ndarray) -> float:
    """ATE RMSE in centimeters after rigid alignment of the estimate."""
    est = np.atleast_2d(np.asarray(est_positions, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt_positions, dtype=np.float64))
    if est.shape != gt.shape:
        raise ValueError("trajectory lengths differ")
    if est.shape[0] < 3:
        raise ValueError("need at least 3 poses for alignment")
    aligned = align_rigid(est, gt).apply(est)
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))) * 100.0)


def _ranks(values: np.ndarray) -> np.ndarray:
    """Average ranks with tie handling."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation (Pearson on average ranks)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    ra, rb = _ranks(a), _ranks(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0.0 or sb == 0.0:
        raise ValueError("rank correlation undefined for constant input")
    return float(np.mean((ra - ra.mean()) * (rb - rb.mean())) / (sa * sb))


def uncertainty_correlation(view_records: list[dict]) -> dict:
    """Spearman correlations of per-view mean variance vs quality.

    Each record carries 'variance' (mean sigma^2), 'depth_l1_cm' and
    'psnr_db'.  Needs at least 4 views.
    """
    if len(view_records) < 4:
        raise ValueError("need at least 4 views")
    var = np.array([r["variance"] for r in view_records])
    dl1 = np.array([r["depth_l1_cm"] for r in view_records])
    ps = np.array([r["psnr_db"] for r in view_records])
    return {
        "rho_variance_depth_l1": spearman(var, dl1),
        "rho_variance_psnr": spearman(var, ps),
    }
