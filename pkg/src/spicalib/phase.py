"""Fringe analysis: wrapped phase, marker-anchored fringe orders, absolute phase.

This is the deterministic replacement for a learned single-shot fringe
analyser.  Wrapped phase comes from N-step phase shifting; the fringe order
is found by integrating wrapped-phase differences and anchoring the result on
the bright marker bar, which always covers the dark fringe between the peaks
of orders 0 and 1 (absolute phase ``pi/2 .. 3pi/2``).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InsufficientFrames, MarkerNotFound, MismatchedDimensions

TWO_PI = 2.0 * np.pi
MODULATION_THRESHOLD = 0.05
MARKER_PHASE_CENTER = np.pi
MARKER_VOTE_AGREEMENT = 0.75
# smoothing kicks in when the median predicted phase noise exceeds this
REGULARIZE_MIN_NOISE = 0.01
REGULARIZE_RADIUS = 3
REGULARIZE_DEGREE = (1, 2)

# marker detection tuning (fractions are of the image size)
_SMOOTH = 3
_REFERENCE_SIGMA = 6.0
_CONTRAST = 1.08
_STATIC_CONTRAST = 1.02
_MIN_AREA = 6
_MAX_WIDTH_FRACTION = 0.2
_MAX_HEIGHT_FRACTION = 0.25
_MIN_FILL = 0.5


@dataclass(frozen=True)
class FringeImage:
    pixels: np.ndarray
    period_T: float
    direction: str = "horizontal"

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise MismatchedDimensions(f"fringe image must be 2-D, got shape {px.shape}")
        if np.any(px < 0) or np.any(px > 1):
            raise ValueError("fringe image values must lie in [0, 1]")
        if not self.period_T > 0:
            raise ValueError("period_T must be positive")
        object.__setattr__(self, "pixels", px)


@dataclass
class Marker:
    region: np.ndarray  # bool (H, W)
    rows: tuple[int, int]  # inclusive
    cols: tuple[int, int]

    @property
    def columns(self) -> np.ndarray:
        return np.nonzero(self.region.any(axis=0))[0]


@dataclass
class PhaseMaps:
    wrapped: np.ndarray
    order_k: np.ndarray
    absolute: np.ndarray
    modulation_mask: np.ndarray
    marker: Marker | None = None
    unreachable: int = 0
    frames_used: int = 0
    noise_rad: float = 0.0
    regularized: bool = False


def _stack(images) -> np.ndarray:
    arrs = [np.asarray(im.pixels if isinstance(im, FringeImage) else im, dtype=np.float64)
            for im in images]
    if len(arrs) < 3:
        raise InsufficientFrames(f"phase shifting needs at least 3 frames, got {len(arrs)}")
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise MismatchedDimensions(f"frame shapes differ: {shape} vs {a.shape}")
    return np.stack(arrs)


def phase_shift_wrapped(images, threshold: float = MODULATION_THRESHOLD):
    """N-step phase shifting for frames shifted by ``2 pi n / N``.

    Returns ``(wrapped, modulation_mask)``; the mask keeps pixels whose fringe
    amplitude exceeds ``threshold`` (in units of full scale).
    """
    stack = _stack(images)
    n = stack.shape[0]
    delta = TWO_PI * np.arange(n) / n
    num = np.tensordot(np.sin(delta), stack, axes=1)
    den = np.tensordot(np.cos(delta), stack, axes=1)
    wrapped = np.arctan2(num, den)
    amplitude = 2.0 / n * np.hypot(num, den)
    return wrapped, amplitude > threshold


def mean_image(images) -> np.ndarray:
    return _stack(images).mean(axis=0)


def _normalized_filter(img, weight, fn):
    num = fn(img * weight)
    den = fn(weight.astype(np.float64))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 1e-9, num / den, 0.0)


def fringe_modulation(images) -> np.ndarray:
    """Fringe amplitude after 3x3 averaging of the complex phasor.

    Averaging before taking the magnitude suppresses the amplitude that pure
    noise produces on static (unmodulated) pixels.
    """
    stack = _stack(images)
    n = stack.shape[0]
    delta = TWO_PI * np.arange(n) / n
    c = np.tensordot(np.cos(delta), stack, axes=1)
    s = np.tensordot(np.sin(delta), stack, axes=1)
    fg = stack.mean(axis=0) > 0
    box = lambda a: ndimage.uniform_filter(a, _SMOOTH, mode="constant")  # noqa: E731
    c = _normalized_filter(c, fg, box)
    s = _normalized_filter(s, fg, box)
    return np.where(fg, 2.0 / n * np.hypot(c, s), 0.0)


def detect_marker(image, modulation=None) -> Marker:
    """Find the bright bar that bridges the dark fringe next to the 0th order.

    ``image`` should have little fringe contrast, e.g. the mean of a
    phase-shifted stack.  The bar shows up as a compact region brighter than
    the local fringe average by a fixed contrast ratio.  When the stack's
    ``modulation`` (see :func:`fringe_modulation`) is given, the bar must
    also be static: its modulation stays under half the local level, which
    separates it from brightly lit but fringed surface nearby.
    """
    img = np.asarray(image.pixels if isinstance(image, FringeImage) else image, dtype=np.float64)
    h, w = img.shape
    fg = img > 0
    if not fg.any():
        raise MarkerNotFound("image is empty")
    smooth = _normalized_filter(img, fg, lambda a: ndimage.uniform_filter(a, _SMOOTH, mode="constant"))
    ref = _normalized_filter(img, fg, lambda a: ndimage.gaussian_filter(a, _REFERENCE_SIGMA, mode="constant"))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(ref > 0, smooth / ref, 0.0)
    if modulation is None:
        candidates = fg & (ratio > _CONTRAST)
    else:
        mod = np.asarray(modulation, dtype=np.float64)
        if mod.shape != img.shape:
            raise MismatchedDimensions("modulation and image shapes differ")
        local = _normalized_filter(mod, fg, lambda a: ndimage.gaussian_filter(a, _REFERENCE_SIGMA, mode="constant"))
        candidates = fg & (ratio > _STATIC_CONTRAST) & (mod < 0.5 * local)
    labels, count = ndimage.label(candidates)
    best, best_score = None, 0.0
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == idx
        area = int(comp.sum())
        height = sl[0].stop - sl[0].start
        width = sl[1].stop - sl[1].start
        if area < _MIN_AREA or width < 2 or height < 2:
            continue
        if width > _MAX_WIDTH_FRACTION * w or height > _MAX_HEIGHT_FRACTION * h:
            continue
        if area < _MIN_FILL * width * height:
            continue
        if width < 0.5 * height:
            continue
        score = area * float(ratio[sl][comp].mean())
        if score > best_score:
            best, best_score = idx, score
    if best is None:
        raise MarkerNotFound(f"no marker-like region among {count} candidate(s)")
    region = labels == best
    # the smoothing blurs the outline by a pixel; redraw it from the raw
    # ratio within one pixel of the component unless that would break it up
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = np.where(ref > 0, img / ref, 0.0)
    trimmed = ndimage.binary_dilation(region) & fg & (raw > _CONTRAST)
    if trimmed.sum() >= _MIN_AREA and ndimage.label(trimmed)[1] == 1:
        region = trimmed
    rows = np.nonzero(region.any(axis=1))[0]
    cols = np.nonzero(region.any(axis=0))[0]
    return Marker(region, (int(rows[0]), int(rows[-1])), (int(cols[0]), int(cols[-1])))


def _wrap(x):
    return (x + np.pi) % TWO_PI - np.pi


def _column_runs(col_mask: np.ndarray) -> list[tuple[int, int]]:
    """Contiguous True segments as half-open ``(start, stop)`` pairs."""
    padded = np.concatenate([[False], col_mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[::2], edges[1::2]))


def _integrate(wrapped_col: np.ndarray) -> np.ndarray:
    """Unwrap a 1-D run starting from its first sample."""
    d = _wrap(np.diff(wrapped_col))
    return wrapped_col[0] + np.concatenate([[0.0], np.cumsum(d)])


def _relative_unwrap(wrapped, mask, start):
    """Column-first unwrapping of the mask component that contains ``start``.

    Each column run is integrated vertically; runs are tied to already
    labelled neighbours in adjacent columns by a majority vote on the 2pi
    offset.  Sweeps alternate left-to-right and right-to-left until nothing
    changes.
    """
    h, w = wrapped.shape
    absr = np.full((h, w), np.nan)
    labelled = np.zeros((h, w), dtype=bool)
    runs = [_column_runs(mask[:, j]) for j in range(w)]

    r_start, j_start = start
    for a, b in runs[j_start]:
        if a <= r_start < b:
            rel = _integrate(wrapped[a:b, j_start])
            absr[a:b, j_start] = rel - rel[r_start - a] + wrapped[r_start, j_start]
            labelled[a:b, j_start] = True

    def attach(j):
        changed = False
        for a, b in runs[j]:
            if labelled[a, j]:
                continue
            votes = Counter()
            rel = None
            for nb in (j - 1, j + 1):
                if nb < 0 or nb >= w:
                    continue
                rows = np.nonzero(labelled[a:b, nb])[0]
                if rows.size == 0:
                    continue
                if rel is None:
                    rel = _integrate(wrapped[a:b, j])
                r = rows + a
                target = absr[r, nb] + _wrap(wrapped[r, j] - wrapped[r, nb])
                votes.update(np.rint((target - rel[rows]) / TWO_PI).astype(int).tolist())
            if votes:
                k = max(sorted(votes), key=votes.__getitem__)
                absr[a:b, j] = rel + TWO_PI * k
                labelled[a:b, j] = True
                changed = True
        return changed

    changed = True
    while changed:
        changed = False
        for j in range(w):
            changed |= attach(j)
        for j in range(w - 1, -1, -1):
            changed |= attach(j)
    return absr, labelled


def _marker_flanks(marker: Marker, mask: np.ndarray, reach: int = 3):
    """Nearest usable pixels above (side -1) and below (side +1) the marker, per column."""
    h = mask.shape[0]
    flanks = []
    for j in marker.columns:
        rows = np.nonzero(marker.region[:, j])[0]
        top, bottom = rows[0], rows[-1]
        above = next((r for r in range(top - 1, max(top - 1 - reach, -1), -1) if mask[r, j]), None)
        below = next((r for r in range(bottom + 1, min(bottom + 1 + reach, h)) if mask[r, j]), None)
        if above is not None:
            flanks.append(((above, j), -1))
        if below is not None:
            flanks.append(((below, j), 1))
    return flanks


def _vertical_slope(absr, labelled, pixel, side, span: int = 6):
    """Phase change per row downward near a flank pixel (line fit), or None."""
    r, j = pixel
    rows = [r]
    for k in range(1, span):
        rr = r + side * k
        if not (0 <= rr < absr.shape[0] and labelled[rr, j]):
            break
        rows.append(rr)
    if len(rows) < 2:
        return None
    x = np.arange(len(rows), dtype=np.float64)
    return side * float(np.polyfit(x, absr[rows, j], 1)[0])


@dataclass
class UnwrapResult:
    order_k: np.ndarray
    mask: np.ndarray
    unreachable: int


def unwrap_orders(wrapped, modulation_mask, marker: Marker) -> UnwrapResult:
    """Assign integer fringe orders with ``k = 0`` on the marker's fringe.

    Pixels under (or touching) the marker and pixels not connected to it
    within the mask get no order; they are dropped from the returned mask and
    counted in ``unreachable``.
    """
    wrapped = np.asarray(wrapped, dtype=np.float64)
    mask = np.asarray(modulation_mask, dtype=bool)
    if wrapped.shape != mask.shape or marker.region.shape != mask.shape:
        raise MismatchedDimensions("wrapped phase, mask and marker shapes differ")
    covered = ndimage.binary_dilation(marker.region)
    work = mask & ~covered
    flanks = _marker_flanks(marker, work)
    if not flanks:
        raise MarkerNotFound("marker has no usable neighbouring pixels")
    # start in the mask component that touches the most flank pixels
    comp, _ = ndimage.label(work)
    ids = Counter(int(comp[p]) for p, _ in flanks)
    best = max(sorted(ids), key=ids.__getitem__)
    inside = [p for p, _ in flanks if comp[p] == best]
    start = inside[len(inside) // 2]
    absr, labelled = _relative_unwrap(wrapped, work, start)

    # the marker covers absolute phase pi/2 .. 3pi/2: the flank on the side
    # where phase decreases sits just below pi/2, the other just above 3pi/2
    usable = [(p, side) for p, side in flanks if labelled[p]]
    slopes = [_vertical_slope(absr, labelled, p, side) for p, side in usable]
    slopes = [x for x in slopes if x is not None]
    if not slopes:
        raise MarkerNotFound("cannot tell the phase direction around the marker")
    increasing_down = float(np.median(slopes)) > 0
    votes = Counter()
    for p, side in usable:
        low_side = (side < 0) == increasing_down
        target = MARKER_PHASE_CENTER + (-np.pi / 2 if low_side else np.pi / 2)
        votes[int(np.rint((target - absr[p]) / TWO_PI))] += 1
    offset = max(sorted(votes), key=votes.__getitem__)
    # a real marker sits on one dark fringe, so its flanks agree on the order
    if votes[offset] < MARKER_VOTE_AGREEMENT * sum(votes.values()):
        raise MarkerNotFound("fringe orders around the marker disagree")

    order = np.zeros(wrapped.shape, dtype=np.int64)
    rel_k = np.rint((absr[labelled] - wrapped[labelled]) / TWO_PI).astype(np.int64)
    order[labelled] = rel_k + offset
    unreachable = int(np.sum(mask & ~labelled))
    return UnwrapResult(order, labelled, unreachable)


def fringe_amplitude(images) -> np.ndarray:
    """Per-pixel sinusoid amplitude ``(2/N) |sum I exp(i delta)|``."""
    stack = _stack(images)
    n = stack.shape[0]
    delta = TWO_PI * np.arange(n) / n
    c = np.tensordot(np.cos(delta), stack, axes=1)
    s = np.tensordot(np.sin(delta), stack, axes=1)
    return 2.0 / n * np.hypot(c, s)


def phase_noise(images, wrapped_amplitude=None) -> np.ndarray:
    """Per-pixel phase noise (radians) predicted from the sinusoid fit residual.

    Needs at least 4 frames; with 3 frames the fit is exact and the estimate
    is zero.
    """
    stack = _stack(images)
    n = stack.shape[0]
    delta = TWO_PI * np.arange(n) / n
    a = stack.mean(axis=0)
    c = 2.0 / n * np.tensordot(np.cos(delta), stack, axes=1)
    s = 2.0 / n * np.tensordot(np.sin(delta), stack, axes=1)
    model = a + c * np.cos(delta)[:, None, None] + s * np.sin(delta)[:, None, None]
    dof = max(n - 3, 1)
    sigma_i = np.sqrt(np.sum((stack - model) ** 2, axis=0) / dof) if n > 3 else np.zeros_like(a)
    amp = np.hypot(c, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(amp > 0, np.sqrt(2.0 / n) * sigma_i / amp, np.inf)


def _poly_basis(radius: int, degree: int):
    oy, ox = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    # scaled offsets keep the normal matrices well conditioned
    ox, oy = ox / max(radius, 1), oy / max(radius, 1)
    if degree == 1:
        return [np.ones_like(ox), ox, oy]
    if degree == 2:
        return [np.ones_like(ox), ox, oy, ox * ox, ox * oy, oy * oy]
    raise ValueError("degree must be 1 or 2")


def _window_candidates(phi, mask, w, radius: int, degree: int, min_fill: float):
    """Yield ``(score, prediction)`` maps, one per pixel offset inside the window."""
    basis = _poly_basis(radius, degree)
    nb = len(basis)
    size = 2 * radius + 1

    def corr(img, kernel):
        return ndimage.correlate(img, kernel, mode="constant")

    n0 = corr(mask.astype(np.float64), np.ones((size, size)))
    normal = np.empty(phi.shape + (nb, nb))
    for i in range(nb):
        for j in range(i, nb):
            normal[..., i, j] = normal[..., j, i] = corr(w, basis[i] * basis[j])
    wp = w * phi
    rhs = np.stack([corr(wp, b) for b in basis], -1)
    spp = corr(wp * phi, np.ones((size, size)))

    ok = n0 >= max(min_fill * size * size, nb + 1)
    ok &= np.linalg.cond(np.where(ok[..., None, None], normal, np.eye(nb))) < 1e8
    normal[~ok] = np.eye(nb)
    rhs[~ok] = 0.0
    coef = np.linalg.solve(normal, rhs[..., None])[..., 0]
    sse = spp - np.einsum("...i,...i->...", coef, rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(ok, np.maximum(sse, 0.0) / (n0 - nb), np.inf)
    inv = np.linalg.inv(normal)

    h, wd = phi.shape
    pad = radius
    var_p = np.pad(var, pad, constant_values=np.inf)
    coef_p = np.pad(coef, ((pad, pad), (pad, pad), (0, 0)))
    inv_p = np.pad(inv, ((pad, pad), (pad, pad), (0, 0), (0, 0)))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            # window centred at (i - dy, j - dx) sees this pixel at offset (dy, dx)
            sl = (slice(pad - dy, pad - dy + h), slice(pad - dx, pad - dx + wd))
            x = np.array([b[dy + radius, dx + radius] for b in basis])
            # expected squared error of the prediction: residual variance
            # times the leverage of this offset within its window
            with np.errstate(invalid="ignore"):
                score = var_p[sl] * np.einsum("i,...ij,j->...", x, inv_p[sl], x)
            yield score, coef_p[sl] @ x


def regularize_phase(absolute, mask, radius=REGULARIZE_RADIUS, min_fill: float = 0.6,
                     weights=None, degree=REGULARIZE_DEGREE):
    """Local-polynomial smoothing of an unwrapped phase map.

    Every pixel takes the value of a weighted least-squares polynomial
    (``degree`` 1 = plane, 2 = quadric) fitted over one of the
    ``(2r+1)^2`` windows that contain it, choosing the window with the
    smallest expected prediction error (residual variance times leverage).
    Windows that straddle a face edge or a silhouette fit badly, so pixels
    there are predicted from one side only.  ``radius`` and ``degree`` may be
    sequences, in which case every combination competes.

    ``weights`` are optional per-pixel inverse variances (e.g. squared fringe
    amplitude); uniform when omitted.
    """
    mask = np.asarray(mask, dtype=bool)
    phi = np.where(mask, np.asarray(absolute, dtype=np.float64), 0.0)
    if weights is None:
        w = mask.astype(np.float64)
    else:
        w = np.where(mask, np.asarray(weights, dtype=np.float64), 0.0)
        w = w / max(float(w.max()), 1e-300)
    best = np.full(phi.shape, np.inf)
    out = phi.copy()
    for r in np.atleast_1d(radius):
        for deg in np.atleast_1d(degree):
            for score, pred in _window_candidates(phi, mask, w, int(r), int(deg), min_fill):
                better = mask & (score < best)
                best = np.where(better, score, best)
                out = np.where(better, pred, out)
    return np.where(mask, out, 0.0)


def absolute_phase(wrapped, order_k):
    wrapped = np.asarray(wrapped, dtype=np.float64)
    order_k = np.asarray(order_k)
    if wrapped.shape != order_k.shape:
        raise MismatchedDimensions("wrapped phase and order map shapes differ")
    return TWO_PI * order_k + wrapped


def phase_to_vs(absolute, period_T: float):
    """Grating coordinate from absolute phase: ``vs = phi * T / (2 pi)``."""
    if not period_T > 0:
        raise ValueError("period_T must be positive")
    return np.asarray(absolute, dtype=np.float64) * period_T / TWO_PI


def recover_phase(frames, threshold: float = MODULATION_THRESHOLD,
                  regularize: bool | None = None) -> PhaseMaps:
    """Full fringe analysis of a phase-shifted stack.

    ``regularize=None`` smooths the unwrapped phase only when the frames
    carry measurable noise (see :func:`phase_noise`).
    """
    stack = _stack(frames)
    wrapped, mod_mask = phase_shift_wrapped(stack, threshold)
    marker = detect_marker(stack.mean(axis=0), fringe_modulation(stack) if stack.shape[0] >= 3 else None)
    res = unwrap_orders(wrapped, mod_mask, marker)
    absolute = np.where(res.mask, absolute_phase(wrapped, res.order_k), 0.0)
    noise = float(np.median(phase_noise(stack)[res.mask])) if res.mask.any() else 0.0
    if regularize is None:
        regularize = noise > REGULARIZE_MIN_NOISE
    order = res.order_k
    if regularize:
        absolute = regularize_phase(absolute, res.mask, weights=fringe_amplitude(stack) ** 2)
        wrapped = np.where(res.mask, _wrap(absolute), wrapped)
        order = np.where(res.mask, np.rint((absolute - wrapped) / TWO_PI).astype(np.int64), order)
    return PhaseMaps(wrapped, order, absolute, res.mask, marker, res.unreachable,
                     frames_used=stack.shape[0], noise_rad=noise, regularized=bool(regularize))


def analytic_phase(scene) -> np.ndarray:
    """Renderer ground-truth absolute phase (stands in for a perfect analyser)."""
    from .twin import analytic_phase as _analytic

    return _analytic(scene)
