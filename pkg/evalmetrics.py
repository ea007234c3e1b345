"""Image quality (PSNR, SSIM) and depth error statistics."""

import math
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from errors import EvaluationError, ShapeError

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class DepthErrors(NamedTuple):
    mae: float
    rmse: float
    abs_rel: float
    inlier_fraction: Optional[float]


def _pair(pred, ref):
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 1.0)
    ref = np.clip(np.asarray(ref, dtype=np.float64), 0.0, 1.0)
    if pred.shape != ref.shape:
        raise ShapeError(f"image shapes differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def psnr(pred, ref) -> float:
    ''' 10·log10(1/MSE) in dB, capped at 99 '''
    pred, ref = _pair(pred, ref)
    mse = float(np.mean((pred - ref) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian(window_size:int = SSIM_WINDOW, sigma:float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(window_size, dtype=torch.float64) - window_size // 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def create_window(window_size:int, channel:int) -> torch.Tensor:
    g = gaussian(window_size).unsqueeze(1)
    return g.mm(g.t()).expand(channel, 1, window_size, window_size).contiguous()


def ssim_map(img1:torch.Tensor, img2:torch.Tensor, window_size:int = SSIM_WINDOW) -> torch.Tensor:
    ''' (1, C, H, W) images to the SSIM map over valid window positions '''
    channel = img1.shape[1]
    window = create_window(window_size, channel).to(img1.dtype)
    conv = lambda x: F.conv2d(x, window, groups=channel)
    mu1, mu2 = conv(img1), conv(img2)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = conv(img1 * img1) - mu1_sq
    sigma2_sq = conv(img2 * img2) - mu2_sq
    sigma12 = conv(img1 * img2) - mu1_mu2
    C1, C2 = K1 ** 2, K2 ** 2
    return ((2 * mu1_mu2 + C1) * (2 * sigma12 + C2)) / ((mu1_sq + mu2_sq + C1) * (sigma1_sq + sigma2_sq + C2))


def ssim(pred, ref) -> float:
    ''' Mean SSIM over valid 11x11 Gaussian windows and channels; (H, W, 3) inputs in [0, 1] '''
    pred, ref = _pair(pred, ref)
    if pred.ndim != 3 or min(pred.shape[:2]) < SSIM_WINDOW:
        raise EvaluationError(f"SSIM needs (H, W, C) images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape}")
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]
    return float(ssim_map(to_t(pred), to_t(ref)).mean())


def depth_errors(pred, gt, mask, tolerance:Optional[float] = None) -> DepthErrors:
    ''' MAE, RMSE, mean |err|/gt and the fraction with |err| <= tolerance, over the mask '''
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise ShapeError(f"depth shapes differ: {pred.shape}, {gt.shape}, mask {mask.shape}")
    if not mask.any():
        raise EvaluationError("depth error over an empty mask")
    err = pred[mask] - gt[mask]
    if not np.isfinite(err).all():
        raise EvaluationError("non-finite depth inside the mask")
    abs_err = np.abs(err)
    inliers = float(np.mean(abs_err <= tolerance)) if tolerance is not None else None
    return DepthErrors(float(abs_err.mean()), float(np.sqrt(np.mean(err ** 2))),
                       float(np.mean(abs_err / np.abs(gt[mask]))), inliers)


def nvs_report(pred_image, ref_image, pred_depth=None, gt_depth=None, mask=None,
               tolerance:Optional[float] = None) -> dict:
    report = {"psnr_db": psnr(pred_image, ref_image), "ssim": ssim(pred_image, ref_image),
              "lpips": "not supported"}
    if pred_depth is not None and gt_depth is not None:
        m = (np.asarray(gt_depth) > 0) if mask is None else mask
        d = depth_errors(pred_depth, gt_depth, m, tolerance)
        report.update(depth_mae=d.mae, depth_rmse=d.rmse, abs_rel=d.abs_rel, inlier_fraction=d.inlier_fraction)
    return report
