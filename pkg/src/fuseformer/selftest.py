"""Fast self-verification: gradient checks and oracle comparisons.

Checks run in a fixed order and stop at the first failure, whose name is
reported. The whole suite runs in a few seconds on one core.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from . import reference as ref
from .autodiff import Tensor, grad_check
from .model import ModelConfig, ModelWeights, axial_attention, forward_fusion

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _probe(rng, shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape))


def _conv2d() -> str:
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 7, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    err = np.abs(ad.conv2d(x, w, padding=1).data - ref.conv2d_loops(x, w, padding=1)).max()
    if err > ORACLE_TOL:
        return f"forward differs from loop oracle by {err:.3g}"
    r = _probe(rng, (3, 4, 4))
    g = grad_check(lambda x, w, b: (ad.conv2d(x, w, b, stride=2, padding=1) * r).sum(), [x, w, b])
    if g > GRAD_TOL:
        return f"gradient relative error {g:.3g}"
    return ""


def _matmul() -> str:
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    err = np.abs((Tensor(a) @ Tensor(b)).data - ref.matmul_loops(a, b)).max()
    if err > ORACLE_TOL:
        return f"forward differs from loop oracle by {err:.3g}"
    r = _probe(rng, (2, 4, 3))
    a3 = rng.normal(size=(2, 4, 5))
    g = grad_check(lambda a, b: ((a @ b) * r).sum(), [a3, b])
    return f"gradient relative error {g:.3g}" if g > GRAD_TOL else ""


def _softmax() -> str:
    rng = np.random.default_rng(2)
    x = rng.normal(scale=3.0, size=(3, 5))
    s = ad.softmax(x).data
    if np.abs(s.sum(axis=-1) - 1.0).max() > 1e-12:
        return "rows do not sum to 1"
    r = _probe(rng, (3, 5))
    g = grad_check(lambda x: (ad.softmax(x) * r).sum(), [x])
    return f"gradient relative error {g:.3g}" if g > GRAD_TOL else ""


def _elementwise() -> str:
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 4))
    r = _probe(rng, (2, 4, 4))
    checks = {
        "sigmoid": lambda x: (ad.sigmoid(x) * r).sum(),
        "relu": lambda x: (ad.relu(x) * r).sum(),
        "div": lambda x: (x / (x * x + 1.5) * r).sum(),
        "max_pool2d": lambda x: ad.max_pool2d(x, 2).sum() * 0.5 + (x * r).sum(),
        "upsample_nearest": lambda x: (ad.upsample_nearest(x, 2) * _probe(np.random.default_rng(4), (2, 8, 8))).sum(),
        "concat": lambda x: (ad.concat([x, x * x], axis=0) * _probe(np.random.default_rng(5), (4, 4, 4))).sum(),
    }
    for name, fn in checks.items():
        g = grad_check(fn, [x])
        if g > GRAD_TOL:
            return f"{name}: gradient relative error {g:.3g}"
    return ""


def _metric_oracles() -> str:
    rng = np.random.default_rng(6)
    for _ in range(5):
        f, v, i = rng.uniform(size=(3, 12, 12))
        pairs = {
            "ssim": (metrics.ssim(f, v), ref.ssim_loops(f, v)),
            "entropy": (metrics.entropy(f), ref.entropy_loops(f)),
            "mutual_information": (metrics.mutual_information(f, v), ref.mi_loops(f, v)),
            "scd": (metrics.scd(f, v, i), ref.scd_loops(f, v, i)),
        }
        for name, (got, want) in pairs.items():
            if abs(got - want) > ORACLE_TOL:
                return f"{name}: {got!r} vs oracle {want!r}"
    return ""


def _loss_gradients() -> str:
    rng = np.random.default_rng(7)
    f, v, i = rng.uniform(size=(3, 1, 12, 12))
    pyr = [rng.uniform(size=(2, 6, 6)) * 0.3 for _ in range(3)]
    w = losses.LossWeights(omega_m=(1.0,))
    checks = {
        "l_pixel": (lambda a, b: losses.l_pixel(a, b), [f, v]),
        "l_ssim": (lambda a, b: losses.l_ssim(a, b), [f, v]),
        "l_ae": (lambda a, b: losses.l_ae(a, b), [f, v]),
        "l_ssim_bar": (lambda a, b, c: losses.l_ssim_bar(a, b, c), [f, v, i]),
        "l_feature": (lambda a, b, c: losses.l_feature([a], [b], [c], w), pyr),
        "l_fuse": (lambda a, b, c, d, e, g: losses.l_fuse(a, b, c, [d], [e], [g], w), [f, v, i, *pyr]),
    }
    for name, (fn, args) in checks.items():
        g = grad_check(fn, args)
        if g > GRAD_TOL:
            return f"{name}: gradient relative error {g:.3g}"
    return ""


def _attention_oracle() -> str:
    rng = np.random.default_rng(8)
    c, n = 4, 6
    w = {f"a.{s}": Tensor(rng.normal(size=(c, 4) if s != "o" else (4, c))) for s in "qkvo"}
    mats = [w[f"a.{s}"].data for s in "qkvo"]
    x = rng.normal(size=(c, 1, n))
    out, attn = axial_attention(x, "width", w, "a", 2, return_weights=True)
    want, _ = ref.full_attention_loops(x[:, 0, :].T, *mats, 2)
    if np.abs(out.data[:, 0, :].T - want).max() > ORACLE_TOL:
        return "width axis on a 1xN input differs from full attention"
    if np.abs(attn.data.sum(axis=-1) - 1.0).max() > 1e-12:
        return "attention rows do not sum to 1"
    y = rng.normal(size=(c, n, 1))
    out = axial_attention(y, "height", w, "a", 2)
    want, _ = ref.full_attention_loops(y[:, :, 0].T, *mats, 2)
    if np.abs(out.data[:, :, 0].T - want).max() > ORACLE_TOL:
        return "height axis on an Nx1 input differs from full attention"
    return ""


def _model_gradient() -> str:
    cfg = ModelConfig(num_scales=2, channels=(2, 4), heads=2, layers=1, height=16, width=16)
    params = ModelWeights.init(cfg, 0).tensors()
    rng = np.random.default_rng(9)
    vis, ir = rng.uniform(size=(2, 1, 16, 16))
    r = rng.normal(size=(1, 16, 16))
    g = grad_check(lambda a, b: (forward_fusion(a, b, params, cfg).fused * r).sum(), [vis, ir])
    return f"input gradient relative error {g:.3g}" if g > GRAD_TOL else ""


CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("conv2d", _conv2d),
    ("matmul", _matmul),
    ("softmax", _softmax),
    ("elementwise ops", _elementwise),
    ("metric oracles", _metric_oracles),
    ("loss gradients", _loss_gradients),
    ("axial attention oracle", _attention_oracle),
    ("model gradient", _model_gradient),
]


def run_selftest(report: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run checks in order until one fails; return the results so far."""
    results = []
    for name, fn in CHECKS:
        started = time.perf_counter()
        try:
            detail = fn()
        except Exception as exc:  # a crash is a failed property too
            detail = f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, not detail, detail, time.perf_counter() - started)
        results.append(res)
        if report is not None:
            status = "ok" if res.ok else "FAIL"
            report(f"{status:4s} {name} ({res.seconds:.2f}s){': ' + detail if detail else ''}")
        if not res.ok:
            break
    return results
