"""Self-supervised Retinex decomposition of a single image.

The input ``S_low`` and its histogram-equalized twin ``S_he`` are each split
into reflectance ``R`` (3 ch, sigmoid), illumination ``L`` (1 ch, sigmoid)
and noise ``N`` (3 ch, tanh) by minimizing a five-part loss with Adam. Maps
inside this module use the channel-first (C, H, W) layout of the autodiff
engine; :func:`decompose` converts back to (H, W, C) images on the way out.

Every norm is divided by its element count (or the square root of it for
Frobenius/L2 norms) so the default weights do not depend on image size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from . import grad_engine as ge
from .grad_engine import Tensor
from .image_core import hist_equalize, hue_from_rgb, to_chw, to_hwc, validate_image

log = logging.getLogger(__name__)

LOSS_COLUMNS = (
    "total",
    "rec_low",
    "rec_he",
    "rc",
    "illum_low",
    "illum_he",
    "reflect_low",
    "reflect_he",
    "noise_low",
    "noise_he",
)

ACHROMATIC_TOL = 1e-12
# per-pixel logits need a larger step than network weights to cross the
# sigmoid range within a few hundred iterations
DEFAULT_LR = {"direct": 1e-2, "cnn": 1e-3}
# direct mode: N stays at zero this long so R and L take up the brightness first
DEFAULT_NOISE_WARMUP = {"direct": 100, "cnn": 0}
INIT_L_RANGE = (0.01, 0.99)


@dataclass(frozen=True)
class SidConfig:
    lambda_rc: float = 0.01
    lambda_L: float = 0.1
    lambda_R: float = 0.001
    lambda_N: float = 0.01
    alpha: float = 10.0
    beta: float = 10.0
    eps: float = 0.01
    iterations: int = 500
    lr: Optional[float] = None
    mode: str = "direct"
    seed: int = 0
    channels: int = 32
    depth: int = 5
    init: str = "mean"
    noise_warmup: Optional[int] = None

    def __post_init__(self):
        for name in ("lambda_rc", "lambda_L", "lambda_R", "lambda_N"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not 0.0 <= self.eps < 1.0:
            raise ValueError(f"eps must lie in [0, 1), got {self.eps}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.init not in ("mean", "zero"):
            raise ValueError(f"init must be 'mean' or 'zero', got {self.init!r}")
        if self.noise_warmup is not None and self.noise_warmup < 0:
            raise ValueError("noise_warmup must be >= 0")
        if self.mode not in ("cnn", "direct"):
            raise ValueError(f"mode must be 'cnn' or 'direct', got {self.mode!r}")
        if self.channels < 1 or self.depth < 1:
            raise ValueError("channels and depth must be >= 1")

    @property
    def learning_rate(self) -> float:
        """``lr`` if set, else the mode default (1e-2 direct, 1e-3 cnn)."""
        if self.lr is not None:
            return self.lr
        return DEFAULT_LR[self.mode]

    @property
    def warmup(self) -> int:
        if self.noise_warmup is not None:
            return self.noise_warmup
        return DEFAULT_NOISE_WARMUP[self.mode]

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


class Maps(NamedTuple):
    R: Tensor
    L: Tensor
    N: Tensor


@dataclass
class DecompositionResult:
    R_low: np.ndarray
    L_low: np.ndarray
    N_low: np.ndarray
    R_he: np.ndarray
    L_he: np.ndarray
    N_he: np.ndarray
    loss_history: np.ndarray
    columns: tuple = LOSS_COLUMNS
    warnings: list = field(default_factory=list)
    aborted: bool = False

    @property
    def iterations_run(self) -> int:
        return len(self.loss_history)

    @property
    def final_loss(self) -> float:
        return float(self.loss_history[-1, 0]) if len(self.loss_history) else math.nan

    def history_csv(self) -> str:
        lines = ["iteration," + ",".join(self.columns)]
        for i, row in enumerate(self.loss_history):
            lines.append(f"{i}," + ",".join(f"{v:.10g}" for v in row))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# loss terms


def _same_spatial(*tensors):
    shapes = {t.shape[-2:] for t in tensors}
    if len(shapes) != 1:
        raise ge.ShapeError(f"spatial sizes differ: {sorted(shapes)}")


def loss_rec(R, L, N, S) -> Tensor:
    """Mean absolute residual of ``R * L + N`` against ``S``."""
    R, L, N, S = (ge.as_tensor(t) for t in (R, L, N, S))
    _same_spatial(R, L, N, S)
    if R.shape != N.shape or R.shape != S.shape or L.shape[0] != 1:
        raise ge.ShapeError(f"bad shapes R{R.shape} L{L.shape} N{N.shape} S{S.shape}")
    return ge.mean(ge.abs_(R * L + N - S))


def loss_rc(R_low, R_he) -> Tensor:
    R_low, R_he = ge.as_tensor(R_low), ge.as_tensor(R_he)
    if R_low.shape != R_he.shape:
        raise ge.ShapeError(f"reflectance shapes differ: {R_low.shape} vs {R_he.shape}")
    return ge.mean(ge.abs_(R_low - R_he))


def _abs_grads(arr):
    """Absolute forward differences (h, v) of a channel-first array."""
    gh = np.zeros_like(arr)
    gv = np.zeros_like(arr)
    gh[..., :-1] = np.abs(arr[..., 1:] - arr[..., :-1])
    gv[..., :-1, :] = np.abs(arr[..., 1:, :] - arr[..., :-1, :])
    return gh, gv


def illum_weights(R_self, L_low, L_he, alpha: float = 10.0) -> dict:
    """Constant edge-aware weights for :func:`loss_illum`, per direction.

    ``struct`` comes from the channel mean of ``|grad R_self|``, ``mutual``
    from ``|grad L_low| + |grad L_he|``.
    """
    R_self, L_low, L_he = (ge.as_tensor(t).data for t in (R_self, L_low, L_he))
    rh, rv = _abs_grads(R_self)
    lh_low, lv_low = _abs_grads(L_low)
    lh_he, lv_he = _abs_grads(L_he)
    return {
        "struct": {"h": np.exp(-alpha * rh.mean(axis=0, keepdims=True)),
                   "v": np.exp(-alpha * rv.mean(axis=0, keepdims=True))},
        "mutual": {"h": np.exp(-alpha * (lh_low + lh_he)), "v": np.exp(-alpha * (lv_low + lv_he))},
    }


def loss_illum(L_self, R_self, L_low, L_he, alpha: float = 10.0, weights=None) -> Tensor:
    """Structure-aware smoothness plus mutual-edge consistency of ``L_self``.

    Gradients flow only through ``L_self``; the exponential weights are
    constants (see :func:`illum_weights`).
    """
    L_self = ge.as_tensor(L_self)
    R_shape = ge.as_tensor(R_self).shape
    if L_self.shape[0] != 1 or R_shape[0] != 3:
        raise ge.ShapeError(f"expected 1-channel L and 3-channel R, got {L_self.shape}, {R_shape}")
    shapes = {t.shape[-2:] for t in map(ge.as_tensor, (L_self, R_self, L_low, L_he))}
    if len(shapes) != 1:
        raise ge.ShapeError("illumination loss inputs differ in spatial size")
    if weights is None:
        weights = illum_weights(R_self, L_low, L_he, alpha)

    total = None
    for axis in ("h", "v"):
        grad = ge.abs_(ge.spatial_diff(L_self, axis))
        term = ge.mean(grad * weights["struct"][axis]) + ge.mean(grad * weights["mutual"][axis])
        total = term if total is None else total + term
    return total


def suppress_small_gradients(gS, eps: float) -> np.ndarray:
    """Zero every gradient sample whose magnitude is below ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    g = np.asarray(gS, dtype=np.float64)
    return np.where(np.abs(g) < eps, 0.0, g)


def source_targets(S, eps: float):
    """Constant targets derived from the source: thresholded gradients, hue and a chroma mask."""
    S = ge.as_tensor(S).data
    targets = {}
    for axis in ("h", "v"):
        targets[axis] = suppress_small_gradients(ge.spatial_diff(S, axis).data, eps)
    y = np.sqrt(3.0) * (S[1] - S[2])
    x = 2.0 * S[0] - S[1] - S[2]
    targets["hue"] = hue_from_rgb(S[0], S[1], S[2])
    targets["chromatic"] = ((np.abs(x) > ACHROMATIC_TOL) | (np.abs(y) > ACHROMATIC_TOL)).astype(np.float64)
    return targets


def hue(R) -> Tensor:
    """Differentiable hue angle of a (3, H, W) tensor."""
    R = ge.as_tensor(R)
    r, g, b = R[0], R[1], R[2]
    return ge.atan2((g - b) * math.sqrt(3.0), r * 2.0 - g - b)


def loss_reflect(R, S, beta: float = 10.0, eps: float = 0.01, targets=None) -> Tensor:
    """Gradient-amplification contrast term plus circular hue-matching term.

    Achromatic source pixels have no defined hue and are masked out of the
    hue term.
    """
    R = ge.as_tensor(R)
    S = ge.as_tensor(S)
    if R.shape != S.shape or R.shape[0] != 3:
        raise ge.ShapeError(f"R {R.shape} and S {S.shape} must both be (3, H, W)")
    if targets is None:
        targets = source_targets(S, eps)
    n_pix = R.shape[-1] * R.shape[-2]
    root = math.sqrt(n_pix)

    contrast = None
    for ch in range(3):
        for axis in ("h", "v"):
            resid = ge.spatial_diff(R[ch], axis) - beta * targets[axis][ch]
            term = ge.fro(resid)
            contrast = term if contrast is None else contrast + term
    contrast = contrast * (1.0 / (3.0 * root))

    dh = ge.wrap_angle(hue(R) - targets["hue"]) * targets["chromatic"]
    color = ge.fro(dh) * (1.0 / root)
    return contrast + color


def loss_noise(S, N) -> Tensor:
    """Intensity-weighted noise energy: normalized ``||S * N||_F``."""
    S, N = ge.as_tensor(S), ge.as_tensor(N)
    if S.shape != N.shape and not (S.shape[0] == 1 and S.shape[1:] == N.shape[1:]):
        raise ge.ShapeError(f"S {S.shape} and N {N.shape} are incompatible")
    return ge.fro(S * N) * (1.0 / math.sqrt(N.data.size))


def frozen_weights(low: Maps, he: Maps, alpha: float) -> dict:
    """Illumination weights for both sides, computed from the current maps."""
    return {tag: illum_weights(maps.R, low.L, he.L, alpha) for tag, maps in (("low", low), ("he", he))}


def loss_terms(low: Maps, he: Maps, S_low, S_he, cfg: SidConfig, targets=None, weights=None) -> dict:
    """Every unweighted loss term, keyed as in :data:`LOSS_COLUMNS`.

    ``weights`` (from :func:`frozen_weights`) pins the illumination weights;
    by default they are taken from the maps being evaluated.
    """
    if targets is None:
        targets = {"low": source_targets(S_low, cfg.eps), "he": source_targets(S_he, cfg.eps)}
    if weights is None:
        weights = frozen_weights(low, he, cfg.alpha)
    terms = {"rc": loss_rc(low.R, he.R)}
    for tag, maps, S in (("low", low, S_low), ("he", he, S_he)):
        terms[f"rec_{tag}"] = loss_rec(maps.R, maps.L, maps.N, S)
        terms[f"illum_{tag}"] = loss_illum(maps.L, maps.R, low.L, he.L, cfg.alpha, weights[tag])
        terms[f"reflect_{tag}"] = loss_reflect(maps.R, S, cfg.beta, cfg.eps, targets[tag])
        terms[f"noise_{tag}"] = loss_noise(S, maps.N)
    return terms


def combine_terms(terms: dict, cfg: SidConfig) -> Tensor:
    total = terms["rc"] * cfg.lambda_rc
    for tag in ("low", "he"):
        total = (
            total
            + terms[f"rec_{tag}"]
            + terms[f"illum_{tag}"] * cfg.lambda_L
            + terms[f"reflect_{tag}"] * cfg.lambda_R
            + terms[f"noise_{tag}"] * cfg.lambda_N
        )
    return total


def total_loss(low: Maps, he: Maps, S_low, S_he, cfg: SidConfig, targets=None, weights=None):
    """Weighted sum of all terms; returns ``(total, terms)``."""
    terms = loss_terms(low, he, S_low, S_he, cfg, targets, weights)
    return combine_terms(terms, cfg), terms


# ---------------------------------------------------------------------------
# parameterizations


class DirectParams:
    """Free per-pixel logit maps, one independent set per input image."""

    mode = "direct"

    def __init__(self, height: int, width: int, L0=None):
        """``L0`` maps "low"/"he" to a starting illumination level (default 0.5)."""
        self.logits = {
            tag: {
                "R": np.zeros((3, height, width)),
                "L": np.zeros((1, height, width)),
                "N": np.zeros((3, height, width)),
            }
            for tag in ("low", "he")
        }
        for tag, level in (L0 or {}).items():
            self.logits[tag]["L"][...] = _logit(level)

    def arrays(self):
        return [self.logits[t][k] for t in ("low", "he") for k in ("R", "L", "N")]

    def noise_mask(self):
        return [k == "N" for t in ("low", "he") for k in ("R", "L", "N")]

    def forward(self, inputs: dict, leaves=None) -> dict:
        if leaves is None:
            leaves = [Tensor(a) for a in self.arrays()]
        out, it = {}, iter(leaves)
        for tag in ("low", "he"):
            r, l, n = next(it), next(it), next(it)
            out[tag] = Maps(ge.sigmoid(r), ge.sigmoid(l), ge.tanh(n))
        return out


class CnnParams:
    """Plain conv/relu feature stack with three 3x3 heads, shared by both inputs."""

    mode = "cnn"

    def __init__(self, channels: int = 32, depth: int = 5, seed: int = 0, in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.layers = []
        c_prev = in_channels
        for _ in range(depth):
            self.layers.append(self._init(rng, channels, c_prev))
            c_prev = channels
        self.heads = [self._init(rng, c, c_prev) for c in (3, 1, 3)]

    @staticmethod
    def _init(rng, c_out, c_in):
        bound = math.sqrt(6.0 / (c_in * 9))
        return [rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)), np.zeros(c_out)]

    def arrays(self):
        return [a for layer in self.layers + self.heads for a in layer]

    def noise_mask(self):
        return [False] * (2 * len(self.layers) + 4) + [True, True]

    def forward(self, inputs: dict, leaves=None) -> dict:
        if leaves is None:
            leaves = [Tensor(a) for a in self.arrays()]
        it = iter(leaves)
        x = Tensor(np.stack([ge.as_tensor(inputs["low"]).data, ge.as_tensor(inputs["he"]).data]))
        for _ in self.layers:
            x = ge.relu(ge.conv2d(x, next(it), next(it)))
        r = ge.sigmoid(ge.conv2d(x, next(it), next(it)))
        l = ge.sigmoid(ge.conv2d(x, next(it), next(it)))
        n = ge.tanh(ge.conv2d(x, next(it), next(it)))
        return {tag: Maps(r[i], l[i], n[i]) for i, tag in enumerate(("low", "he"))}


def _logit(p):
    return math.log(p / (1.0 - p))


def initial_illumination(S) -> float:
    """Constant L that makes R * L match the mean of ``S`` when R starts at 0.5."""
    lo, hi = INIT_L_RANGE
    return float(np.clip(2.0 * np.mean(ge.as_tensor(S).data), lo, hi))


def init_params(cfg: SidConfig, height: int, width: int, inputs=None):
    if cfg.mode == "direct":
        L0 = None
        if cfg.init == "mean" and inputs is not None:
            L0 = {tag: initial_illumination(s) for tag, s in inputs.items()}
        return DirectParams(height, width, L0)
    params = CnnParams(cfg.channels, cfg.depth, cfg.seed)
    if cfg.init == "mean" and inputs is not None:
        # one network serves both inputs; its L bias follows the low-light one
        params.heads[1][1][...] = _logit(initial_illumination(inputs["low"]))
    return params


def forward(params, S_low, S_he=None) -> dict:
    """Evaluate (R, L, N) for both inputs without recording gradients."""
    if params is None:
        raise ValueError("parameters are not initialized")
    S_low = ge.as_tensor(S_low)
    S_he = S_low if S_he is None else ge.as_tensor(S_he)
    return params.forward({"low": S_low, "he": S_he})


# ---------------------------------------------------------------------------
# optimization


def decompose(S_low, cfg: SidConfig | None = None) -> DecompositionResult:
    """Optimize a fresh decomposition of ``S_low`` (an (H, W, 3) image)."""
    cfg = cfg or SidConfig()
    img = validate_image(S_low)
    if img.shape[2] != 3:
        raise ValueError("decompose needs a 3-channel image")
    height, width = img.shape[:2]
    if min(height, width) < 8:
        raise ValueError(f"image must be at least 8x8, got {height}x{width}")

    warnings = []
    if img.max() <= 0.0:
        warnings.append("input is entirely black; decomposition is degenerate")
        log.warning(warnings[-1])

    s_low = to_chw(img)
    s_he = to_chw(hist_equalize(img))
    inputs = {"low": Tensor(s_low), "he": Tensor(s_he)}
    targets = {"low": source_targets(s_low, cfg.eps), "he": source_targets(s_he, cfg.eps)}

    params = init_params(cfg, height, width, inputs)
    arrays = params.arrays()
    # noise parameters get their own optimizer so that their moments and bias
    # correction start when the warm-up ends
    is_noise = params.noise_mask()
    groups = {
        False: [i for i, n in enumerate(is_noise) if not n],
        True: [i for i, n in enumerate(is_noise) if n],
    }
    states = {k: ge.AdamState(lr=cfg.learning_rate) for k in groups}
    history = []
    aborted = False
    last_good = [a.copy() for a in arrays]

    for it in range(cfg.iterations):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        maps = params.forward(inputs, leaves)
        total, terms = total_loss(maps["low"], maps["he"], inputs["low"], inputs["he"], cfg, targets)
        row = [float(total.data)] + [float(terms[k].data) for k in LOSS_COLUMNS[1:]]
        if not np.all(np.isfinite(row)):
            msg = f"non-finite loss at iteration {it}; stopping early"
            warnings.append(msg)
            log.error(msg)
            aborted = True
            break
        history.append(row)
        last_good = [a.copy() for a in arrays]
        ge.backward(total)
        grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
        for noise, idx in groups.items():
            if noise and it < cfg.warmup:
                continue
            ge.adam_step([arrays[i] for i in idx], [grads[i] for i in idx], states[noise])

    if aborted:
        for a, good in zip(arrays, last_good):
            a[...] = good
    maps = params.forward(inputs)
    return DecompositionResult(
        R_low=to_hwc(maps["low"].R.data),
        L_low=to_hwc(maps["low"].L.data),
        N_low=to_hwc(maps["low"].N.data),
        R_he=to_hwc(maps["he"].R.data),
        L_he=to_hwc(maps["he"].L.data),
        N_he=to_hwc(maps["he"].N.data),
        loss_history=np.array(history, dtype=np.float64).reshape(-1, len(LOSS_COLUMNS)),
        warnings=warnings,
        aborted=aborted,
    )
