"""Image-quality and categorical verification metrics with per-lead-time reports.

All metric inputs are in pixel space [0, 255]. Thresholds ``tau`` are given in
dBZ and mapped to pixel thresholds through :func:`tempee.data.dbz_to_pixel`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import dbz_to_pixel
from .errors import ConfigError, ContractError

UNDEFINED = math.nan
DEFAULT_TAUS = (5.0, 10.0, 20.0, 30.0, 40.0)
IMAGE_METRICS = ("mse", "psnr", "ssim", "lpips")
CATEGORICAL = ("pod", "far", "csi", "ets")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"prediction shape {a.shape} differs from truth shape {b.shape}")
    return a, b


def mse(pred, truth) -> float:
    a, b = _pair(pred, truth)
    return float(np.mean((a - b) ** 2))


def psnr(pred, truth, max_i: float = 255.0) -> float:
    err = mse(pred, truth)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(max_i * max_i / err))


def ssim(x, y, c1: float | None = None, c2: float | None = None, window: int | None = 8) -> float:
    """Mean structural similarity over all ``window x window`` patches (stride 1).

    ``window=None`` evaluates the formula once over the whole frame. Variances
    are population (divide by the patch size) statistics.
    """
    a, b = _pair(x, y)
    if a.ndim != 2:
        raise ContractError(f"ssim expects 2-d frames, got {a.shape}")
    c1 = (0.01 * 255) ** 2 if c1 is None else c1
    c2 = (0.03 * 255) ** 2 if c2 is None else c2
    if window is None:
        pa, pb = a[None], b[None]
    else:
        if window < 1 or window > min(a.shape):
            raise ConfigError(f"ssim window {window} does not fit a {a.shape[0]}x{a.shape[1]} frame")
        pa = sliding_window_view(a, (window, window)).reshape(-1, window * window)
        pb = sliding_window_view(b, (window, window)).reshape(-1, window * window)
    pa = pa.reshape(len(pa), -1)
    pb = pb.reshape(len(pb), -1)
    mu_a, mu_b = pa.mean(1), pb.mean(1)
    da, db = pa - mu_a[:, None], pb - mu_b[:, None]
    var_a, var_b = (da * da).mean(1), (db * db).mean(1)
    cov = (da * db).mean(1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- perceptual distance


@dataclass
class ConvPyramid:
    """Fixed random convolution pyramid standing in for a pretrained feature network.

    Each level applies a 3x3 valid convolution, ReLU and 2x2 average pooling.
    Feature vectors are normalised to unit length at every spatial position.
    """

    channels: tuple[int, ...] = (8, 16, 32)
    weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    seed: int = 1234
    kernels: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.weights) != len(self.channels):
            raise ContractError(f"{len(self.weights)} weights for {len(self.channels)} feature levels")
        rng = np.random.default_rng(self.seed)
        c_in = 1
        self.kernels = []
        for c_out in self.channels:
            self.kernels.append(rng.normal(0.0, 1.0 / math.sqrt(9 * c_in), size=(c_out, c_in, 3, 3)))
            c_in = c_out

    def features(self, frame) -> list[np.ndarray]:
        x = np.asarray(frame, dtype=np.float64)[None] / 255.0
        out = []
        for kern in self.kernels:
            if x.shape[1] < 3 or x.shape[2] < 3:
                raise ContractError(f"frame too small for {len(self.kernels)} pyramid levels")
            patches = sliding_window_view(x, (3, 3), axis=(1, 2))  # (cin, h', w', 3, 3)
            x = np.maximum(np.einsum("chwij,ocij->ohw", patches, kern), 0.0)
            norm = np.sqrt((x * x).sum(0, keepdims=True)) + 1e-10
            out.append(x / norm)
            h2, w2 = x.shape[1] // 2 * 2, x.shape[2] // 2 * 2
            x = x[:, :h2, :w2].reshape(x.shape[0], h2 // 2, 2, w2 // 2, 2).mean(axis=(2, 4))
        return out


_DEFAULT_EXTRACTOR: ConvPyramid | None = None


def default_extractor() -> ConvPyramid:
    global _DEFAULT_EXTRACTOR
    if _DEFAULT_EXTRACTOR is None:
        _DEFAULT_EXTRACTOR = ConvPyramid()
    return _DEFAULT_EXTRACTOR


def perceptual_distance(x, y, extractor: ConvPyramid | None = None) -> float:
    """Weighted sum over levels of the L2 distance between normalised feature maps."""
    a, b = _pair(x, y)
    ext = extractor or default_extractor()
    fa, fb = ext.features(a), ext.features(b)
    total = 0.0
    for w, ua, ub in zip(ext.weights, fa, fb):
        if ua.shape != ub.shape:
            raise ContractError(f"feature shapes differ: {ua.shape} vs {ub.shape}")
        total += w * float(np.sqrt(((ua - ub) ** 2).sum()))
    return total


# ---------------------------------------------------------------- categorical scores


@dataclass(frozen=True)
class ContingencyTable:
    tp: int
    fn: int
    fp: int
    tn: int
    tau: float
    lead_index: int = 1

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn


def pixel_threshold(tau: float) -> int:
    return dbz_to_pixel(tau)


def contingency(pred, truth, tau: float, lead_index: int = 1) -> ContingencyTable:
    a, b = _pair(pred, truth)
    thr = pixel_threshold(tau)
    p, t = a >= thr, b >= thr
    tp = int(np.count_nonzero(p & t))
    fn = int(np.count_nonzero(~p & t))
    fp = int(np.count_nonzero(p & ~t))
    tn = int(p.size - tp - fn - fp)
    return ContingencyTable(tp, fn, fp, tn, float(tau), lead_index)


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0 else UNDEFINED


def categorical_scores(t: ContingencyTable, far_mode: str = "standard", ets_mode: str = "printed") -> dict[str, float]:
    """POD, FAR, CSI and ETS; undefined values are NaN.

    ``far_mode="printed"`` gives ``tp/(tp+fp)``; ``ets_mode="standard"`` gives
    the random-hit corrected score instead of ``tp/(tp+fn+fp-tn)``.
    """
    if far_mode not in ("standard", "printed"):
        raise ConfigError(f"far_mode must be 'standard' or 'printed', got {far_mode!r}")
    if ets_mode not in ("printed", "standard"):
        raise ConfigError(f"ets_mode must be 'printed' or 'standard', got {ets_mode!r}")
    tp, fn, fp, tn = t.tp, t.fn, t.fp, t.tn
    pod = _ratio(tp, tp + fn)
    csi = _ratio(tp, tp + fn + fp)
    far = _ratio(fp if far_mode == "standard" else tp, tp + fp)
    if ets_mode == "printed":
        ets = _ratio(tp, tp + fn + fp - tn)
    else:
        n = t.total
        hits_random = (tp + fn) * (tp + fp) / n if n else 0.0
        ets = _ratio(tp - hits_random, tp + fn + fp - hits_random)
    return {"pod": pod, "far": far, "csi": csi, "ets": ets}


# ---------------------------------------------------------------- reports


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    finite_or_inf = arr[~np.isnan(arr)]
    return float(finite_or_inf.mean()) if finite_or_inf.size else UNDEFINED


@dataclass
class MetricReport:
    """Per-lead metric arrays. ``image[name]`` and ``categorical[(tau, name)]`` have length k."""

    k: int
    dt_minutes: int
    taus: tuple[float, ...]
    image: dict[str, np.ndarray]
    categorical: dict[tuple[float, str], np.ndarray]
    label: str = "lead-time mean"

    @property
    def lead_minutes(self) -> list[int]:
        return [self.dt_minutes * (i + 1) for i in range(self.k)]

    def average(self, name: str, tau: float | None = None) -> float:
        arr = self.image[name] if tau is None else self.categorical[(float(tau), name)]
        return _nanmean(arr)

    def rows(self):
        """(lead_index, lead_minutes, tau, metric, value); lead_index ``"avg"`` marks averages."""
        for name, arr in self.image.items():
            for i, v in enumerate(arr):
                yield (i + 1, self.lead_minutes[i], "", name, float(v))
            yield ("avg", "", "", name, self.average(name))
        for (tau, name), arr in self.categorical.items():
            for i, v in enumerate(arr):
                yield (i + 1, self.lead_minutes[i], tau, name, float(v))
            yield ("avg", "", tau, name, self.average(name, tau))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lead_index", "lead_minutes", "tau_dbz", "metric", "value"])
        for row in self.rows():
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def plot_csv(self) -> str:
        """One row per lead time with every metric as a column (x = lead minutes)."""
        cols = list(self.image) + [f"{name}@{tau:g}" for tau, name in self.categorical]
        arrays = list(self.image.values()) + list(self.categorical.values())
        lines = [",".join(["lead_minutes"] + cols)]
        for i, minutes in enumerate(self.lead_minutes):
            lines.append(",".join([str(minutes)] + [f"{float(a[i]):.6g}" for a in arrays]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Threshold-by-score table of averages, followed by the image metrics."""
        lines = [f"averages: {self.label}", f"{'tau':>6} " + " ".join(f"{m.upper():>8}" for m in CATEGORICAL)]
        for tau in self.taus:
            cells = " ".join(f"{self.average(m, tau):8.4f}" for m in CATEGORICAL)
            lines.append(f"{tau:6g} {cells}")
        lines.append(" ".join(f"{m.upper()}={self.average(m):.4f}" for m in self.image))
        return "\n".join(lines) + "\n"


def timewise_report(
    preds,
    truths,
    taus: Sequence[float] = DEFAULT_TAUS,
    dt_minutes: int = 6,
    far_mode: str = "standard",
    ets_mode: str = "printed",
    perceptual: bool = True,
    ssim_window: int | None = 8,
) -> MetricReport:
    """Every metric at every lead time (pixel-space ``(k, H, W)`` stacks)."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if len(p) != len(t):
        raise ContractError(f"{len(p)} predicted frames for {len(t)} truth frames")
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    k = len(p)
    taus = tuple(float(x) for x in taus)
    names = IMAGE_METRICS if perceptual else IMAGE_METRICS[:3]
    image = {name: np.empty(k) for name in names}
    cat = {(tau, name): np.empty(k) for tau in taus for name in CATEGORICAL}
    window = ssim_window if ssim_window is None or ssim_window <= min(p.shape[1:]) else None
    for i in range(k):
        image["mse"][i] = mse(p[i], t[i])
        image["psnr"][i] = psnr(p[i], t[i])
        image["ssim"][i] = ssim(p[i], t[i], window=window)
        if perceptual:
            image["lpips"][i] = perceptual_distance(p[i], t[i])
        for tau in taus:
            scores = categorical_scores(contingency(p[i], t[i], tau, i + 1), far_mode, ets_mode)
            for name, v in scores.items():
                cat[(tau, name)][i] = v
    return MetricReport(k, dt_minutes, taus, image, cat)


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-lead mean across sequences (NaN entries ignored)."""
    if not reports:
        raise ContractError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.k != first.k or r.taus != first.taus or set(r.image) != set(first.image):
            raise ContractError("reports disagree on lead count, thresholds or metrics")

    def stack(get):
        arr = np.stack([get(r) for r in reports])
        with np.errstate(invalid="ignore"):
            mask = ~np.isnan(arr)
            counts = mask.sum(0)
            sums = np.where(mask, arr, 0.0).sum(0)
            return np.where(counts > 0, sums / np.maximum(counts, 1), UNDEFINED)

    image = {n: stack(lambda r, n=n: r.image[n]) for n in first.image}
    cat = {key: stack(lambda r, key=key: r.categorical[key]) for key in first.categorical}
    return MetricReport(first.k, first.dt_minutes, first.taus, image, cat, label=f"mean over {len(reports)} sequences, then lead times")
