"""HEVC-style directional intra predictor used as the comparison anchor.

Works on normalized luma in [0, 1] with float arithmetic: angular modes use
the standard 33-entry displacement table with 1/32-sample linear
interpolation, but without the integer rounding offsets of a bit-exact
encoder, so every DC/angular prediction is a convex combination of reference
samples. Mode indices: 0 planar, 1 DC, 2..34 angular (10 pure horizontal,
26 pure vertical).

References are the single line above (2N+1 samples including the corner)
and to the left (2N samples). Unavailable segments are substituted by
scanning from the bottom-left sample up the left column, through the corner
and across the top, propagating the nearest available value; when nothing
is available at all, mid-gray 0.5 is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModeError, ShapeError, SizeError
from .hadamard import SatdConfig, satd

N_MODES = 35
MODE_PLANAR = 0
MODE_DC = 1
MODE_HORIZONTAL = 10
MODE_VERTICAL = 26
NETWORK = "network"

# Displacement parameters for modes 2..34, in 1/32-sample units.
INTRA_PRED_ANGLE = (
    32, 26, 21, 17, 13, 9, 5, 2, 0,          # 2..10 (horizontal group)
    -2, -5, -9, -13, -17, -21, -26, -32,      # 11..18
    -26, -21, -17, -13, -9, -5, -2, 0,        # 19..26 (vertical group)
    2, 5, 9, 13, 17, 21, 26, 32,              # 27..34
)

# round(8192 / angle) for the negative angles, used to extend references.
INV_ANGLE = {-2: -4096, -5: -1638, -9: -910, -13: -630,
             -17: -482, -21: -390, -26: -315, -32: -256}

SEGMENTS = ("below-left", "left", "corner", "above", "above-right")

DEFAULT_MODE_BITS = 6.0  # flat proxy per directional mode, no MPM modelling
NETWORK_FLAG_BITS = 1.0  # selecting the network costs its flag bit only
PIXEL_SCALE = 255.0      # rate-distortion costs are charged on the 8-bit scale


def hm_lambda(qp: int) -> float:
    """Intra-search lambda for a quantization parameter, HM convention."""
    return 0.57 * 2.0 ** ((qp - 12) / 3.0)


@dataclass
class ReferenceSamples:
    top: np.ndarray   # (2N+1,), top[0] is the corner above-left
    left: np.ndarray  # (2N,)
    available: dict[str, bool]
    fill_value: float = 0.5
    n: int = field(default=0)

    def all_samples(self) -> np.ndarray:
        return np.concatenate([self.top, self.left])


def build_reference_samples(image: np.ndarray, block_origin: tuple[int, int],
                            n: int, availability: dict[str, bool] | None = None,
                            fill_value: float = 0.5) -> ReferenceSamples:
    """Extract and substitute the reference line for a block at block_origin.

    `availability` may force segments unavailable; segments reaching outside
    the image are unavailable regardless. The block itself must fit inside.
    """
    h, w = image.shape
    y, x = block_origin
    if not (0 <= y and 0 <= x and y + n <= h and x + n <= w):
        raise SizeError(f"block {n}x{n} at {block_origin} outside image {image.shape}")

    img = image.astype(np.float64)
    avail = {
        "corner": y > 0 and x > 0,
        "above": y > 0,
        "above-right": y > 0 and x + 2 * n <= w,
        "left": x > 0,
        "below-left": x > 0 and y + 2 * n <= h,
    }
    if availability is not None:
        for k, v in availability.items():
            if k not in avail:
                raise ShapeError(f"unknown reference segment {k!r}")
            avail[k] = avail[k] and bool(v)

    top = np.full(2 * n + 1, fill_value, dtype=np.float64)
    left = np.full(2 * n, fill_value, dtype=np.float64)
    if avail["corner"]:
        top[0] = img[y - 1, x - 1]
    if avail["above"]:
        top[1 : n + 1] = img[y - 1, x : x + n]
    if avail["above-right"]:
        top[n + 1 :] = img[y - 1, x + n : x + 2 * n]
    if avail["left"]:
        left[:n] = img[y : y + n, x - 1]
    if avail["below-left"]:
        left[n:] = img[y + n : y + 2 * n, x - 1]

    _substitute(top, left, avail, n, fill_value)
    return ReferenceSamples(top=top, left=left, available=avail,
                            fill_value=fill_value, n=n)


def _substitute(top: np.ndarray, left: np.ndarray, avail: dict[str, bool],
                n: int, fill_value: float) -> None:
    """Fill unavailable segments by propagating the nearest available sample.

    Scan order: bottom of the left column upward, corner, then the top row
    rightward. Mutates top/left in place.
    """
    if all(avail.values()):
        return
    # (array, index, segment) triplets in scan order
    scan = []
    for j in range(2 * n - 1, -1, -1):
        scan.append((left, j, "left" if j < n else "below-left"))
    scan.append((top, 0, "corner"))
    for i in range(1, 2 * n + 1):
        scan.append((top, i, "above" if i <= n else "above-right"))

    flags = [avail[seg] for _, _, seg in scan]
    if not any(flags):
        for arr, idx, _ in scan:
            arr[idx] = fill_value
        return
    first = flags.index(True)
    prev = scan[first][0][scan[first][1]]
    for (arr, idx, _), ok in zip(scan, flags):
        if ok:
            prev = arr[idx]
        else:
            arr[idx] = prev


def smooth_references(refs: ReferenceSamples) -> ReferenceSamples:
    """[1 2 1]/4 filtering along the reference line; endpoints unchanged."""
    n = refs.n
    line = np.concatenate([refs.left[::-1], refs.top])  # bottom-left .. top-right
    sm = line.copy()
    sm[1:-1] = (line[:-2] + 2.0 * line[1:-1] + line[2:]) / 4.0
    return ReferenceSamples(top=sm[2 * n :], left=sm[: 2 * n][::-1].copy(),
                            available=dict(refs.available),
                            fill_value=refs.fill_value, n=n)


def _predict_planar(refs: ReferenceSamples, n: int) -> np.ndarray:
    top = refs.top[1 : n + 1]
    left = refs.left[:n]
    tr = refs.top[n + 1]
    bl = refs.left[n]
    xs = np.arange(n, dtype=np.float64)
    ys = np.arange(n, dtype=np.float64)
    horiz = (n - 1 - xs)[None, :] * left[:, None] + (xs + 1)[None, :] * tr
    vert = (n - 1 - ys)[:, None] * top[None, :] + (ys + 1)[:, None] * bl
    return (horiz + vert) / (2.0 * n)


def _predict_dc(refs: ReferenceSamples, n: int) -> np.ndarray:
    dc = (refs.top[1:].sum() + refs.left.sum()) / (4.0 * n)
    return np.full((n, n), dc, dtype=np.float64)


def _angular_ref_array(primary_full: np.ndarray, secondary: np.ndarray,
                       angle: int, n: int) -> tuple[np.ndarray, int]:
    """Projection reference with offset indexing; ref[off + k] = logical k.

    primary_full holds the corner at index 0 followed by 2n samples;
    secondary is the 2n samples of the other direction (used to extend the
    negative side when the displacement is negative).
    """
    off = n
    ref = np.zeros(3 * n + 2, dtype=np.float64)
    ref[off : off + 2 * n + 1] = primary_full
    ref[-1] = primary_full[-1]  # weight-0 slot for the fractional gather
    if angle < 0:
        inv = INV_ANGLE[angle]
        lo = (n * angle) >> 5
        for k in range(-1, lo - 1, -1):
            j = -1 + ((k * inv + 128) >> 8)
            ref[off + k] = primary_full[0] if j < 0 else secondary[min(j, 2 * n - 1)]
    return ref, off


def _predict_angular(refs: ReferenceSamples, mode: int, n: int) -> np.ndarray:
    angle = INTRA_PRED_ANGLE[mode - 2]
    vertical = mode >= 18
    if vertical:
        ref, off = _angular_ref_array(refs.top, refs.left, angle, n)
    else:
        ref, off = _angular_ref_array(
            np.concatenate([[refs.top[0]], refs.left]), refs.top[1:], angle, n)
    steps = np.arange(1, n + 1) * angle
    idx = steps >> 5
    fact = steps & 31
    base = np.arange(n)
    gather = off + base[None, :] + idx[:, None] + 1
    w = fact[:, None] / 32.0
    pred = (1.0 - w) * ref[gather] + w * ref[gather + 1]
    # rows of `pred` follow the scan axis: y for vertical modes, x for horizontal
    return pred if vertical else pred.T


def predict_mode(refs: ReferenceSamples, mode: int, n: int) -> np.ndarray:
    """N x N prediction for one mode from complete (post-fill) references."""
    if not 0 <= mode < N_MODES:
        raise ModeError(f"mode index must be 0..34, got {mode}")
    if refs.top.shape != (2 * n + 1,) or refs.left.shape != (2 * n,):
        raise ShapeError(
            f"references sized for n={refs.n}, requested n={n}")
    if mode == MODE_PLANAR:
        return _predict_planar(refs, n)
    if mode == MODE_DC:
        return _predict_dc(refs, n)
    return _predict_angular(refs, mode, n)


def predict_all_modes(refs: ReferenceSamples, n: int) -> np.ndarray:
    """(35, n, n) stack of all mode predictions."""
    return np.stack([predict_mode(refs, m, n) for m in range(N_MODES)])


@dataclass(frozen=True)
class ModeCost:
    mode: int | str          # 0..34, or NETWORK for the learned predictor
    satd: float              # 8-bit-scale SATD of the residue
    bits_proxy: float
    lam: float

    @property
    def total(self) -> float:
        return self.satd + self.lam * self.bits_proxy


def network_mode_cost(satd_norm: float, lam: float,
                      flag_bits: float = NETWORK_FLAG_BITS) -> ModeCost:
    """Cost entry for the learned predictor: one flag bit, no mode bits."""
    return ModeCost(mode=NETWORK, satd=satd_norm * PIXEL_SCALE,
                    bits_proxy=flag_bits, lam=lam)


def best_mode_search(refs: ReferenceSamples, target_block: np.ndarray, n: int,
                     lam: float, satd_cfg: SatdConfig = SatdConfig(),
                     mode_bits: float = DEFAULT_MODE_BITS) -> ModeCost:
    """Exhaustive 35-mode search under SATD + lambda * bits.

    Ties break toward the lowest mode index. SATD is charged on the 8-bit
    pixel scale so the HM lambda convention operates in its usual regime.
    Costs come from the scalar satd() path, so an independent per-mode
    re-evaluation reproduces the winner's cost bit for bit.
    """
    if target_block.shape != (n, n):
        raise ShapeError(f"target block must be ({n}, {n}), got {target_block.shape}")
    preds = predict_all_modes(refs, n)
    target = target_block.astype(np.float64)
    best_mode = 0
    best_satd = best_total = np.inf
    for mode in range(N_MODES):
        s = satd(preds[mode] - target, satd_cfg) * PIXEL_SCALE
        total = s + lam * mode_bits
        if total < best_total:
            best_mode, best_satd, best_total = mode, s, total
    return ModeCost(mode=best_mode, satd=best_satd, bits_proxy=mode_bits, lam=lam)
