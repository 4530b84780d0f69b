"""Accuracy and distribution metrics for estimated traffic matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import ValidationError

__all__ = [
    "MetricReport",
    "nmae",
    "nrmse",
    "tre",
    "mmd2",
    "median_bandwidth",
    "mmd2_permutation_std",
    "export_flat_samples",
    "read_flat_samples",
    "evaluate",
]


def _evaluated(X, Xhat, M):
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise ValidationError(f"shape mismatch: truth {X.shape} vs estimate {Xhat.shape}")
    if M is None:
        return X.ravel(), Xhat.ravel()
    M = np.asarray(M)
    if M.shape != X.shape:
        raise ValidationError("mask shape differs from the traffic shape")
    sel = M == 0
    return X[sel], Xhat[sel]


def nmae(X, Xhat, M=None) -> float:
    """Normalized MAE over entries with ``M == 0`` (all entries if ``M`` is None)."""
    x, xh = _evaluated(X, Xhat, M)
    den = np.abs(x).sum()
    if den == 0:
        raise ValidationError("NMAE undefined: evaluated entries sum to zero")
    return float(np.abs(x - xh).sum() / den)


def nrmse(X, Xhat, M=None) -> float:
    x, xh = _evaluated(X, Xhat, M)
    den = math.sqrt(float((x * x).sum()))
    if den == 0:
        raise ValidationError("NRMSE undefined: evaluated entries are all zero")
    return math.sqrt(float(((x - xh) ** 2).sum())) / den


def tre(X, Xhat, group: int | None = None) -> np.ndarray:
    """Per-slot relative error ``sum_i |X - Xhat| / sum_i X``.

    Slots with a zero column sum are NaN. With ``group`` consecutive slots are
    averaged (ignoring NaN), e.g. 672 slots with ``group=8`` give 84 records.
    """
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.shape != Xhat.shape:
        raise ValidationError("shape mismatch")
    num = np.abs(X - Xhat).sum(axis=0)
    den = X.sum(axis=0)
    out = np.full(X.shape[1], np.nan)
    np.divide(num, den, out=out, where=den > 0)
    if group is None or group == 1:
        return out
    n = len(out) // group
    blocks = out[: n * group].reshape(n, group)
    with np.errstate(all="ignore"):
        counts = np.sum(~np.isnan(blocks), axis=1)
        sums = np.nansum(blocks, axis=1)
    return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _flatten(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    return a.reshape(a.shape[0], -1)


def median_bandwidth(X, Y) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    Z = np.concatenate([_flatten(X), _flatten(Y)])
    sq = np.einsum("ij,ij->i", Z, Z)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0)
    iu = np.triu_indices(len(Z), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    if med == 0:
        return 1.0
    return med


def mmd2(X, Y, bandwidth: float | str = "median", use_numba=None) -> float:
    """Unbiased squared MMD with kernel ``exp(-|x - y|^2 / (2 sigma^2))``.

    Samples are flattened to vectors. Within-sample sums exclude ``i == j``.
    """
    Xf, Yf = _flatten(X), _flatten(Y)
    n, m = len(Xf), len(Yf)
    if n < 2 or m < 2:
        raise ValidationError("MMD needs at least two samples per set")
    if Xf.shape[1] != Yf.shape[1]:
        raise ValidationError("sample sets differ in dimension")
    sigma = median_bandwidth(Xf, Yf) if bandwidth == "median" else float(bandwidth)
    if not sigma > 0:
        raise ValidationError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = _accel.gaussian_kernel_sum(Xf, Xf, gamma, True, use_numba)
    kyy = _accel.gaussian_kernel_sum(Yf, Yf, gamma, True, use_numba)
    kxy = _accel.gaussian_kernel_sum(Xf, Yf, gamma, False, use_numba)
    return kxx / (n * (n - 1)) - 2.0 * kxy / (n * m) + kyy / (m * (m - 1))


def mmd2_permutation_std(X, Y, bandwidth: float | str = "median", n_perm: int = 50,
                         seed: int = 0) -> float:
    """Standard deviation of the MMD statistic under random relabelling."""
    Xf, Yf = _flatten(X), _flatten(Y)
    sigma = median_bandwidth(Xf, Yf) if bandwidth == "median" else float(bandwidth)
    Z = np.concatenate([Xf, Yf])
    n = len(Xf)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_perm):
        p = rng.permutation(len(Z))
        vals.append(mmd2(Z[p[:n]], Z[p[n:]], sigma))
    return float(np.std(vals))


@dataclass
class MetricReport:
    nmae: float
    nrmse: float
    tre: np.ndarray
    mmd2: float = math.nan
    observed: int = 0
    unobserved: int = 0
    extra: dict = field(default_factory=dict)

    def items(self):
        rows = [
            ("nmae", self.nmae),
            ("nrmse", self.nrmse),
            ("tre_mean", float(np.nanmean(self.tre)) if np.any(~np.isnan(self.tre)) else math.nan),
            ("mmd2", self.mmd2),
            ("observed", self.observed),
            ("unobserved", self.unobserved),
        ]
        rows += sorted(self.extra.items())
        return rows

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.items())

    def write(self, text_path, csv_path=None) -> None:
        with open(text_path, "w") as fh:
            fh.write(self.to_text())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                keys, vals = zip(*self.items())
                w.writerow(keys)
                w.writerow([_fmt(v) for v in vals])


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "NA"
        return repr(v)
    return str(v)


def evaluate(X, Xhat, M=None, tre_group: int | None = None) -> MetricReport:
    """NMAE/NRMSE on entries with ``M == 0`` (everything when ``M`` is None).

    Metrics that are undefined (no evaluated entries) are reported as NaN.
    """
    X = np.asarray(X, dtype=np.float64)
    observed = int(np.sum(np.asarray(M) != 0)) if M is not None else 0
    unobserved = X.size - observed
    try:
        a, b = nmae(X, Xhat, M), nrmse(X, Xhat, M)
    except ValidationError:
        a = b = math.nan
    return MetricReport(nmae=a, nrmse=b, tre=tre(X, Xhat, tre_group),
                        observed=observed, unobserved=unobserved)


def export_flat_samples(real, synth, path) -> None:
    """CSV with a ``label`` column (real/synth) and one flattened window per row."""
    R, S = _flatten(real), _flatten(synth)
    if R.shape[1] != S.shape[1]:
        raise ValidationError(
            f"real windows have {R.shape[1]} features, synthetic have {S.shape[1]}"
        )
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(R.shape[1])])
        for label, block in (("real", R), ("synth", S)):
            for row in block:
                w.writerow([label] + [repr(float(v)) for v in row])


def read_flat_samples(path) -> tuple[np.ndarray, np.ndarray]:
    real, synth = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            (real if row[0] == "real" else synth).append([float(v) for v in row[1:]])
    return np.array(real), np.array(synth)
