"""Built-in verification: gradient checks, curve properties, metric identities."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

import numpy as np

from . import grad_engine as ge
from .image_core import hist_equalize
from .metrics import color_entropy, gray_entropy, psnr, ssim
from .nism import apply_gamma, apply_nism, eta_from_threshold
from .sid_net import Maps, SidConfig, frozen_weights, total_loss

OP_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool


def _rng(seed=0):
    return np.random.default_rng(seed)


def op_gradient_cases(seed: int = 0):
    """(name, f, x) triples covering every differentiable op, with inputs in [0, 1]
    kept clear of kinks."""
    rng = _rng(seed)
    u = lambda *shape: rng.uniform(0.0, 1.0, size=shape)
    away = lambda *shape: rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    other = u(2, 4, 5)
    chan = u(1, 4, 5)
    img = u(3, 6, 7)
    kernel = rng.uniform(-1, 1, size=(2, 3, 3, 3))
    bias = rng.uniform(-1, 1, size=2)
    weights = rng.uniform(-1, 1, size=(2, 6, 7))
    cases = [
        ("add", lambda x: ge.sum_(ge.mul(ge.add(x, other), other)), u(2, 4, 5)),
        ("sub", lambda x: ge.sum_(ge.mul(ge.sub(other, x), other)), u(2, 4, 5)),
        ("mul", lambda x: ge.sum_(ge.mul(x, other)), u(2, 4, 5)),
        ("mul_bcast", lambda x: ge.sum_(ge.mul(ge.mul(x, chan), other)), u(2, 4, 5)),
        ("mul_bcast_rhs", lambda x: ge.sum_(ge.mul(other, x)), u(1, 4, 5)),
        ("div", lambda x: ge.sum_(ge.div(other, ge.add(x, 0.5))), u(2, 4, 5)),
        ("atan2", lambda x: ge.sum_(ge.atan2(ge.sub(x, 0.5), ge.add(other, 0.1))), u(2, 4, 5)),
        ("abs", lambda x: ge.sum_(ge.mul(ge.abs_(x), other)), away(2, 4, 5)),
        ("exp", lambda x: ge.sum_(ge.exp(x)), u(2, 4, 5)),
        ("pow", lambda x: ge.sum_(ge.power(ge.add(x, 0.1), 1 / 2.2)), u(2, 4, 5)),
        ("sigmoid", lambda x: ge.sum_(ge.mul(ge.sigmoid(x), other)), u(2, 4, 5)),
        ("tanh", lambda x: ge.sum_(ge.mul(ge.tanh(x), other)), u(2, 4, 5)),
        ("relu", lambda x: ge.sum_(ge.mul(ge.relu(x), other)), away(2, 4, 5)),
        ("clamp", lambda x: ge.sum_(ge.mul(ge.clamp(x, -0.1, 0.5), other)), away(2, 4, 5) * 0.3),
        ("negate", lambda x: ge.sum_(ge.mul(ge.negate(x), other)), u(2, 4, 5)),
        ("wrap_angle", lambda x: ge.sum_(ge.mul(ge.wrap_angle(ge.mul(x, 3.0)), other)), u(2, 4, 5)),
        ("take", lambda x: ge.sum_(ge.mul(x[1], other[0])), u(2, 4, 5)),
        ("sum", lambda x: ge.sum_(x), u(2, 4, 5)),
        ("mean", lambda x: ge.mean(ge.mul(x, x)), u(2, 4, 5)),
        ("l1", lambda x: ge.l1(x), away(2, 4, 5)),
        ("fro", lambda x: ge.fro(x), u(2, 4, 5)),
        ("fro_sq", lambda x: ge.fro_sq(x), u(2, 4, 5)),
        ("diff_h", lambda x: ge.sum_(ge.mul(ge.spatial_diff(x, "h"), other)), u(2, 4, 5)),
        ("diff_v", lambda x: ge.sum_(ge.mul(ge.spatial_diff(x, "v"), other)), u(2, 4, 5)),
        ("conv2d_input", lambda x: ge.sum_(ge.mul(ge.conv2d(x, kernel, bias), weights)), img),
        ("conv2d_kernel", lambda k: ge.sum_(ge.mul(ge.conv2d(img, k, bias), weights)), kernel),
        ("conv2d_bias", lambda b: ge.sum_(ge.mul(ge.conv2d(img, kernel, b), weights)), bias),
    ]
    return cases


def _direct_maps(x):
    maps = []
    for i in range(2):
        side = x[i]
        maps.append(Maps(ge.sigmoid(side[0:3]), ge.sigmoid(side[3:4]), ge.tanh(side[4:7])))
    return maps


def direct_total_loss_fn(S_low, cfg: SidConfig, x0):
    """Total loss as a function of one stacked (2, 7, H, W) logit tensor.

    Channels 0-2 are reflectance logits, 3 illumination, 4-6 noise; index 0 of
    the leading axis is the low-light input, 1 the equalized one. The
    illumination weights are gradient-detached in the loss, so they are frozen
    at ``x0`` here too; otherwise finite differences would see them move.
    """
    s_low = np.transpose(S_low, (2, 0, 1))
    s_he = np.transpose(hist_equalize(S_low), (2, 0, 1))
    weights = frozen_weights(*_direct_maps(ge.Tensor(x0)), cfg.alpha)

    def f(x):
        low, he = _direct_maps(x)
        total, _ = total_loss(low, he, s_low, s_he, cfg, weights=weights)
        return total

    return f


def total_loss_gradient_error(seed: int = 0, size: int = 8) -> float:
    rng = _rng(seed)
    S = rng.uniform(0.0, 1.0, size=(size, size, 3))
    x = rng.uniform(-1.0, 1.0, size=(2, 7, size, size))
    cfg = SidConfig(eps=0.0)
    return ge.grad_check(direct_total_loss_fn(S, cfg, x), x)


def gradient_checks(seed: int = 0):
    checks = []
    for name, f, x in op_gradient_cases(seed):
        err = ge.grad_check(f, x)
        checks.append(Check(f"grad:{name}", err, OP_TOL, err < OP_TOL))
    err = total_loss_gradient_error(seed)
    checks.append(Check("grad:total_loss", err, LOSS_TOL, err < LOSS_TOL))
    return checks


def nism_checks():
    checks = []
    g02, g08 = float(apply_gamma(0.2, 2.2)), float(apply_gamma(0.8, 2.2))
    checks.append(Check("gamma(0.2,2.2) in [0.47,0.49]", g02, 0.0, 0.47 <= g02 <= 0.49))
    checks.append(Check("gamma(0.8,2.2) in [0.89,0.92]", g08, 0.0, 0.89 <= g08 <= 0.92))

    Ts = _rng(1).uniform(0.21, 0.99, size=200)
    err = max(abs(float(apply_nism(T, eta_from_threshold(T, clamp=False))) - 0.8) for T in Ts)
    checks.append(Check("nism(T, eta(T)) = 0.8", err, 1e-9, err < 1e-9))

    a = np.linspace(0.0, 1.0, 1000)
    err = float(np.max(np.abs(apply_nism(1.0 - apply_gamma(a, 2.2), 2.2) - (1.0 - a))))
    checks.append(Check("nism/gamma mirror symmetry", err, 1e-12, err < 1e-12))

    # the curves cross near L = 0.366; the slopes only compare this way close to 0
    nism = lambda x: float(apply_nism(x, 2.2))
    gamma = lambda x: float(apply_gamma(x, 2.2))
    dark = nism(0.1) - gamma(0.1)
    bright = nism(0.9) - gamma(0.9)
    checks.append(Check("nism below gamma at 0.1", dark, 0.0, dark < 0))
    checks.append(Check("nism above gamma at 0.9", bright, 0.0, bright > 0))
    h = 1e-6
    slope = lambda f, x: (f(x + h) - f(x - h)) / (2 * h)
    near_zero = slope(nism, 0.05) - slope(gamma, 0.05)
    checks.append(Check("slope nism < gamma at 0.05", near_zero, 0.0, near_zero < 0))

    grid = np.linspace(0.0, 1.0, 501)
    worst = min(float(np.min(apply_nism(grid, eta) - grid)) for eta in (1.0, 1.5, 2.2, 5.0, 20.0))
    checks.append(Check("nism never darkens", worst, 0.0, worst >= -1e-15))
    return checks


def metrics_checks():
    rng = _rng(2)
    img = rng.uniform(0.0, 1.0, size=(32, 32, 3))
    checks = []
    v = ssim(img, img)
    checks.append(Check("ssim(x,x) = 1", abs(v - 1.0), 0.0, v == 1.0))
    v = psnr(np.clip(img * 0.8, 0, 1) + 0.1, np.clip(img * 0.8, 0, 1))
    checks.append(Check("psnr offset 0.1 = 20 dB", abs(v - 20.0), 1e-9, abs(v - 20.0) < 1e-9))
    v = gray_entropy(np.full((16, 16, 3), 0.3))
    checks.append(Check("gray_entropy(constant) = 0", v, 0.0, v == 0.0))
    uniform = (np.arange(256 * 4) % 256 / 255.0).reshape(32, 32, 1)
    v = gray_entropy(uniform)
    checks.append(Check("gray_entropy(uniform) = 8", abs(v - 8.0), 1e-9, abs(v - 8.0) < 1e-9))
    gray_rgb = np.repeat(img[:, :, :1], 3, axis=2)
    diff = abs(color_entropy(gray_rgb) - 3 * gray_entropy(gray_rgb))
    checks.append(Check("color_entropy = 3 gray_entropy", diff, 1e-9, diff < 1e-9))
    return checks


def run_selftest(stream=None) -> int:
    """Run all checks, print a table to ``stream`` and return the exit code."""
    stream = stream or sys.stdout
    checks = gradient_checks() + nism_checks() + metrics_checks()
    width = max(len(c.name) for c in checks)
    print(f"{'check'.ljust(width)}  {'value':>12}  {'tol':>8}  result", file=stream)
    for c in checks:
        value = f"{c.value:.3e}" if math.isfinite(c.value) else str(c.value)
        print(f"{c.name.ljust(width)}  {value:>12}  {c.tol:>8.1e}  {'PASS' if c.passed else 'FAIL'}",
              file=stream)
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed", file=stream)
    return 0 if failed == 0 else 1
