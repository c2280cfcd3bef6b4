"""Row-wise scheme assignment (SPoT-4 / Fixed-4 / Fixed-8) and one-shot quantization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import NetworkIR, reshape_to_gemm
from .errors import InvalidRatioError, ValidationError
from .qmodel import (
    EIGHT_TAG,
    FIXED_TAG,
    SPOT_TAG,
    TAGS,
    ActQuant,
    QuantizedLayer,
    QuantizedModel,
    SchemeConfig,
    SchemeRatio,
)
from .quantizers import LevelSet, QuantScheme, build_levels, fit_alpha, project_indices

FIXED4 = QuantScheme.fixed(4)


@dataclass(frozen=True, eq=False)
class RowStats:
    variance: np.ndarray
    error: np.ndarray


@dataclass(frozen=True, eq=False)
class SchemeMap:
    tags: np.ndarray
    theta: float | None
    ratio: SchemeRatio

    def counts(self):
        return tuple(int(np.sum(self.tags == t)) for t in (SPOT_TAG, FIXED_TAG, EIGHT_TAG))


def _max_abs_rows(W):
    a = np.max(np.abs(W), axis=1)
    return np.where(a > 0, a, 1.0)


def row_stats(W, fixed4_levels: LevelSet | None = None) -> RowStats:
    """Population variance and mean absolute 4-bit fixed-point error of each row."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ValidationError("row_stats needs a non-empty 2-D weight matrix")
    levels = fixed4_levels or build_levels(FIXED4)
    alpha = _max_abs_rows(W)[:, None]
    q = alpha * levels.levels[project_indices(levels, alpha, W)]
    return RowStats(W.var(axis=1), np.mean(np.abs(W - q), axis=1))


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def target_counts(R, ratio: SchemeRatio):
    """(n_spot, n_fixed, n_eight) for ``R`` rows.

    8-bit count first (round half up, at least one row when its share is
    nonzero), then the SPoT count (same rule, clamped to what is left), Fixed-4
    takes the remainder. If a nonzero group ends up empty and ``R`` has room for
    every nonzero group, one row moves to it from the largest group.
    """
    if R < 1:
        raise ValidationError("cannot assign schemes to zero rows")
    s, f, e = ratio.spot_frac, ratio.fixed_frac, ratio.eight_frac
    n8 = min(R, max(_round_half_up(e * R), 1 if e > 0 else 0))
    ns = min(R - n8, max(_round_half_up(s * R), 1 if s > 0 else 0))
    nf = R - n8 - ns
    counts = [ns, nf, n8]
    fracs = [s, f, e]
    if R >= sum(1 for x in fracs if x > 0):
        for g in range(3):
            if fracs[g] > 0 and counts[g] == 0:
                donor = max(range(3), key=lambda j: (counts[j], -j))
                counts[donor] -= 1
                counts[g] += 1
    return tuple(counts)


def assign(W, ratio: SchemeRatio, stats: RowStats | None = None) -> SchemeMap:
    """Tag every row: the highest-error rows become Fixed-8, then the lowest-variance
    rows among the rest become SPoT-4, the others Fixed-4. Ties go to the lower index."""
    if not isinstance(ratio, SchemeRatio):
        raise InvalidRatioError(f"expected SchemeRatio, got {type(ratio).__name__}")
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] == 0:
        raise ValidationError("assign needs at least one row")
    stats = stats or row_stats(W)
    R = W.shape[0]
    ns, nf, n8 = target_counts(R, ratio)
    idx = np.arange(R)
    by_error = np.lexsort((idx, -stats.error))
    eight = by_error[:n8]
    rest = np.setdiff1d(idx, eight)
    by_var = rest[np.lexsort((rest, stats.variance[rest]))]
    spot = by_var[:ns]
    tags = np.full(R, FIXED_TAG, dtype="<U1")
    tags[eight] = EIGHT_TAG
    tags[spot] = SPOT_TAG
    theta = float(np.max(stats.variance[spot])) if ns else None
    return SchemeMap(tags, theta, ratio)


def fit_row_alphas(W, tags, config: SchemeConfig):
    W = np.asarray(W, dtype=np.float64)
    alpha = np.empty(W.shape[0])
    for tag in np.unique(tags):
        rows = np.flatnonzero(tags == tag)
        levels = config.levels(tag)
        if config.alpha.granularity == "per_layer":
            alpha[rows] = fit_alpha(W[rows], levels, config.alpha)
        else:
            for r in rows:
                alpha[r] = fit_alpha(W[r], levels, config.alpha)
    return alpha


def project_rows(W, tags, alpha, config: SchemeConfig):
    """Codes of the row-wise nearest-level projection under each row's scheme."""
    W = np.asarray(W, dtype=np.float64)
    codes = np.empty(W.shape, dtype=np.int64)
    for tag in np.unique(tags):
        rows = tags == tag
        levels = config.levels(tag)
        codes[rows] = levels.level_codes[project_indices(levels, alpha[rows][:, None], W[rows])]
    return codes


def quantize_matrix(W, smap_or_tags, config: SchemeConfig, alpha=None, theta=None) -> QuantizedLayer:
    if isinstance(smap_or_tags, SchemeMap):
        tags, theta = smap_or_tags.tags, smap_or_tags.theta
    else:
        tags = np.asarray(smap_or_tags, dtype="<U1")
    if alpha is None:
        alpha = fit_row_alphas(W, tags, config)
    return QuantizedLayer(tags, alpha, project_rows(W, tags, alpha, config), theta, config)


def quantize_model(
    net: NetworkIR,
    ratio: SchemeRatio,
    config: SchemeConfig | None = None,
    uniform_tag: str | None = None,
    act: ActQuant | None = None,
) -> QuantizedModel:
    """Post-training quantization of every dense/conv layer, first and last included.

    ``uniform_tag`` forces one scheme on every row (e.g. ``"p"`` for PoT-only).
    """
    config = config or SchemeConfig()
    idxs = net.quantizable_indices()
    if not idxs:
        raise ValidationError("network has no quantizable layer")
    if uniform_tag is not None and uniform_tag not in TAGS:
        raise ValidationError(f"unknown row tag {uniform_tag!r}")
    qlayers = {}
    for i in idxs:
        W = reshape_to_gemm(net.layers[i])
        if uniform_tag is None:
            qlayers[i] = quantize_matrix(W, assign(W, ratio), config)
        else:
            qlayers[i] = quantize_matrix(W, np.full(W.shape[0], uniform_tag), config)
    return QuantizedModel.from_layers(net, qlayers, config, ratio, act, finalized=True)
