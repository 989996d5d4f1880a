"""Training objectives built on the tape.

Image arguments may be ``[H, W]``, ``[1, H, W]`` or a batch ``[N, 1, H, W]``.
For a batch, every loss is evaluated per image and averaged over ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .metrics import DEFAULT_SSIM, SsimParams, gaussian_window


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    omega_m: tuple[float, ...] = (1.0, 1.0, 1.0)
    omega_vi: float = 0.6
    omega_ir: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "omega_m", tuple(float(w) for w in self.omega_m))
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if any(w < 0 for w in self.omega_m) or self.omega_vi < 0 or self.omega_ir < 0:
            raise ValueError("omega weights must be non-negative")
        if self.omega_vi + self.omega_ir <= 0:
            raise ValueError("omega_vi + omega_ir must be positive")


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, 1, *x.shape), False
    if x.ndim == 3:
        return x.reshape(1, *x.shape), False
    if x.ndim == 4:
        return x, True
    raise ad.DimensionError(f"unsupported image shape {x.shape}")


def _check_same(*xs: Tensor) -> None:
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ad.DimensionError(f"shape mismatch: {sorted(shapes)}")


def _per_image_sum(d: Tensor) -> Tensor:
    return ad.sum_(ad.square(d).reshape(d.shape[0], -1), axis=1)


def ssim_per_image(x, y, p: SsimParams = DEFAULT_SSIM) -> Tensor:
    """Differentiable SSIM, one value per image in a ``[N, 1, H, W]`` batch."""
    n = p.window_size
    if x.shape[-1] < n or x.shape[-2] < n:
        raise ValueError(f"image {x.shape[-2:]} is smaller than the {n}x{n} SSIM window")
    window = gaussian_window(n, p.window_sigma)[None, None]

    def filt(t):
        return ad.conv2d(t, window)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(y * y) - mu_yy
    cov = filt(x * y) - mu_xy
    num = (2.0 * mu_xy + p.c1) * (2.0 * cov + p.c2)
    den = (mu_xx + mu_yy + p.c1) * (var_x + var_y + p.c2)
    smap = num / den
    return ad.mean(smap.reshape(smap.shape[0], -1), axis=1)


def ssim_tensor(x, y, p: SsimParams = DEFAULT_SSIM) -> Tensor:
    xb, batched = _batched(x)
    yb, _ = _batched(y)
    _check_same(xb, yb)
    s = ssim_per_image(xb, yb, p)
    return s if batched else s.reshape(())


def l_pixel(output, target) -> Tensor:
    """Squared Frobenius norm of ``output - target``."""
    o, batched = _batched(output)
    t, _ = _batched(target)
    _check_same(o, t)
    per = _per_image_sum(o - t)
    return ad.mean(per) if batched else per.reshape(())


def l_ssim(output, target, p: SsimParams = DEFAULT_SSIM) -> Tensor:
    o, batched = _batched(output)
    t, _ = _batched(target)
    _check_same(o, t)
    per = 1.0 - ssim_per_image(o, t, p)
    return ad.mean(per) if batched else per.reshape(())


def l_ae(output, target, w: LossWeights = LossWeights(), p: SsimParams = DEFAULT_SSIM) -> Tensor:
    return l_pixel(output, target) + w.alpha * l_ssim(output, target, p)


def l_ssim_bar(fused, vis, ir, p: SsimParams = DEFAULT_SSIM) -> Tensor:
    """``(1 - SSIM(f, v))^2 + (1 - SSIM(f, i))^2``."""
    f, batched = _batched(fused)
    v, _ = _batched(vis)
    i, _ = _batched(ir)
    _check_same(f, v, i)
    dv = 1.0 - ssim_per_image(f, v, p)
    di = 1.0 - ssim_per_image(f, i, p)
    per = dv * dv + di * di
    return ad.mean(per) if batched else per.reshape(())


def l_feature(fused_pyr: Sequence, vis_pyr: Sequence, ir_pyr: Sequence, w: LossWeights) -> Tensor:
    """Scale-weighted squared distance from fused features to the modality blend.

    Pyramids hold ``[C, H, W]`` maps, or ``[N, C, H, W]`` maps for a batch.
    """
    m = len(fused_pyr)
    if not (m == len(vis_pyr) == len(ir_pyr)):
        raise ad.DimensionError("pyramid depth mismatch")
    if len(w.omega_m) != m:
        raise ad.DimensionError(f"{len(w.omega_m)} scale weights for {m} scales")
    total = None
    for wm, f, v, i in zip(w.omega_m, fused_pyr, vis_pyr, ir_pyr):
        f, v, i = as_tensor(f), as_tensor(v), as_tensor(i)
        _check_same(f, v, i)
        target = w.omega_vi * v + w.omega_ir * i
        d = f - target
        if d.ndim == 4:
            term = ad.mean(_per_image_sum(d))
        else:
            term = ad.sum_(ad.square(d))
        term = wm * term
        total = term if total is None else total + term
    return total


def l_fuse(fused_img, vis_img, ir_img, fused_pyr, vis_pyr, ir_pyr,
           w: LossWeights, p: SsimParams = DEFAULT_SSIM) -> Tensor:
    return l_feature(fused_pyr, vis_pyr, ir_pyr, w) + w.alpha * l_ssim_bar(fused_img, vis_img, ir_img, p)


def l_single_input(fused_img, vis_img, w: LossWeights, p: SsimParams = DEFAULT_SSIM) -> Tensor:
    """Reconstruction-style loss against the visible band only (the biased baseline)."""
    return l_ae(fused_img, vis_img, w, p)
