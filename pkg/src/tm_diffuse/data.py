"""Traffic-matrix datasets: ingestion, normalization, masking, windowing and
measurement operators.

Conventions used throughout the package:

* a traffic tensor is a float64 array of shape ``(n_flows, n_times)`` with
  flows ordered row-major over (origin, destination);
* an observation mask has the same shape with entries in ``{0, 1}``;
* a routing matrix has shape ``(n_links, n_flows)`` with entries in [0, 1].
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

__all__ = [
    "NormalizationParams",
    "WindowBatch",
    "LinkLoads",
    "ingest_csv",
    "write_trace_csv",
    "read_matrix_csv",
    "write_matrix_csv",
    "clip_and_normalize",
    "apply_normalization",
    "denormalize",
    "make_windows",
    "build_random_mask",
    "link_loads",
    "baseline_interpolate",
    "shortest_path_routing",
    "all_pairs_flows",
    "train_test_split",
]


@dataclass(frozen=True)
class NormalizationParams:
    """Clip threshold and divisor fitted on a training tensor."""

    clip_value: float
    scale: float

    def __post_init__(self):
        if not (self.clip_value > 0 and self.scale > 0):
            raise ValidationError(
                f"normalization params must be positive, got {self}"
            )
        if self.scale > self.clip_value:
            raise ValidationError("scale cannot exceed clip_value")

    def to_dict(self) -> dict:
        return {"clip_value": self.clip_value, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(float(d["clip_value"]), float(d["scale"]))


@dataclass(frozen=True)
class WindowBatch:
    """Stack of ``(n_flows, window_len)`` slices cut from one tensor."""

    windows: np.ndarray  # (K, N, w)
    window_len: int
    origin_times: np.ndarray  # (K,)

    def __len__(self) -> int:
        return self.windows.shape[0]


@dataclass(frozen=True)
class LinkLoads:
    values: np.ndarray  # (n_links, n_times)
    noise_sigma: float = 0.0


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_cell(cell: str, lineno: int, path) -> float:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("nan", "na"):
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: cannot parse {cell!r} as a number") from None


def _is_numeric_row(row) -> bool:
    for cell in row:
        cell = cell.strip()
        if cell == "" or cell.lower() in ("nan", "na"):
            continue
        try:
            float(cell)
        except ValueError:
            return False
    return True


def _read_rows(path):
    """Yield ``(lineno, row, meta)`` skipping comment lines.

    Comment lines of the form ``# key: value`` / ``# key=value`` are collected
    into ``meta``.
    """
    meta = {}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped.lstrip("#").strip()
                for sep in (":", "="):
                    if sep in body:
                        k, v = body.split(sep, 1)
                        meta[k.strip().lower()] = v.strip()
                        break
                continue
            rows.append((lineno, next(csv.reader([line]))))
    return rows, meta


def ingest_csv(path, layout: str = "rows=time") -> tuple[np.ndarray, np.ndarray]:
    """Read a trace CSV into ``(X, M)``.

    Empty or NaN cells become 0 in ``X`` and 0 in the companion mask ``M``.
    A leading non-numeric row is treated as a header. A comment line
    ``# nodes: V`` asserts that the trace has ``V*V`` flows.
    """
    if layout not in ("rows=time", "rows=flows"):
        raise ValidationError(f"unknown layout {layout!r}")
    rows, meta = _read_rows(path)
    if rows and not _is_numeric_row(rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise ParseError(f"{path}: no data rows")

    width = len(rows[0][1])
    data = np.empty((len(rows), width), dtype=np.float64)
    for r, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(
                f"{path}:{lineno}: ragged row with {len(row)} cells, expected {width}"
            )
        data[r] = [_parse_cell(c, lineno, path) for c in row]

    if np.any(np.isinf(data)):
        raise ValidationError(f"{path}: infinite values are not allowed")
    if np.any(data[~np.isnan(data)] < 0):
        r = int(np.argwhere(np.nan_to_num(data, nan=0.0) < 0)[0, 0])
        raise ValidationError(f"{path}:{rows[r][0]}: negative traffic value")

    if layout == "rows=time":
        data = data.T
    mask = (~np.isnan(data)).astype(np.float64)
    X = np.nan_to_num(data, nan=0.0)

    if "nodes" in meta:
        nodes = int(meta["nodes"])
        if X.shape[0] != nodes * nodes:
            raise ValidationError(
                f"{path}: {nodes} nodes imply {nodes * nodes} flows, found {X.shape[0]}"
            )
    return X, mask


def write_trace_csv(path, X: np.ndarray, header: bool = False) -> None:
    """Write ``X`` (flows x time) with one time slot per row."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"flow{j}" for j in range(X.shape[0])])
        for row in X.T:
            w.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    """Read a dense numeric matrix (routing or mask file)."""
    rows, _ = _read_rows(path)
    if not rows:
        raise ParseError(f"{path}: empty matrix file")
    width = len(rows[0][1])
    out = np.empty((len(rows), width))
    for r, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"{path}:{lineno}: ragged row")
        vals = [_parse_cell(c, lineno, path) for c in row]
        if any(math.isnan(v) for v in vals):
            raise ParseError(f"{path}:{lineno}: empty cell in dense matrix")
        out[r] = vals
    return out


def write_matrix_csv(path, A: np.ndarray, fmt=None) -> None:
    A = np.atleast_2d(np.asarray(A))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in A:
            if fmt is None:
                w.writerow([repr(float(v)) for v in row])
            else:
                w.writerow([fmt % v for v in row])


# ---------------------------------------------------------------------------
# normalization


def clip_and_normalize(
    X: np.ndarray, M: np.ndarray | None = None
) -> tuple[np.ndarray, NormalizationParams]:
    """Clip at the 99th percentile (linear interpolation) and scale to [0, 1].

    With a mask, the percentile is taken over observed entries only.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValidationError("traffic tensor contains non-finite values")
    if X.size == 0 or X.max() <= 0:
        raise ValidationError("cannot normalize a tensor without positive entries")
    values = X if M is None else X[np.asarray(M) > 0]
    if values.size == 0:
        raise ValidationError("mask selects no entries")
    clip = float(np.percentile(values, 99))
    if clip <= 0:
        # more than 99% zeros: fall back to the maximum so scale stays defined
        clip = float(X.max())
    Xc = np.minimum(X, clip)
    params = NormalizationParams(clip_value=clip, scale=float(Xc.max()))
    return Xc / params.scale, params


def apply_normalization(X: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Normalize new data (e.g. the test split) with previously fitted params."""
    return np.minimum(np.asarray(X, dtype=np.float64), params.clip_value) / params.scale


def denormalize(Xn: np.ndarray, params: NormalizationParams) -> np.ndarray:
    return np.asarray(Xn, dtype=np.float64) * params.scale


# ---------------------------------------------------------------------------
# windows, masks, measurements


def make_windows(X: np.ndarray, w: int, stride: int | None = None) -> WindowBatch:
    X = np.asarray(X)
    stride = w if stride is None else stride
    if w <= 0 or stride <= 0:
        raise ValidationError("window length and stride must be positive")
    T = X.shape[-1]
    if w > T:
        raise ValidationError(f"window length {w} exceeds series length {T}")
    count = (T - w) // stride + 1
    origins = np.arange(count) * stride
    windows = np.stack([X[..., o:o + w] for o in origins])
    return WindowBatch(windows=windows, window_len=w, origin_times=origins)


def build_random_mask(shape, rate: float, seed: int) -> np.ndarray:
    """Mask with exactly ``round(rate * size)`` ones at uniform positions."""
    if not (0 < rate <= 1):
        raise ValidationError(f"sampling rate must lie in (0, 1], got {rate}")
    size = int(np.prod(shape))
    count = int(round(rate * size))
    rng = np.random.default_rng(seed)
    flat = np.zeros(size)
    flat[rng.permutation(size)[:count]] = 1.0
    return flat.reshape(shape)


def link_loads(A: np.ndarray, X: np.ndarray, sigma_z: float = 0.0, seed: int = 0) -> LinkLoads:
    """``Y = A X + z`` with i.i.d. Gaussian noise of std ``sigma_z``."""
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != X.shape[0]:
        raise ValidationError(
            f"routing matrix has {A.shape[-1]} flow columns but traffic has {X.shape[0]} flows"
        )
    if sigma_z < 0:
        raise ValidationError("noise sigma must be nonnegative")
    Y = A @ X
    if sigma_z > 0:
        Y = Y + np.random.default_rng(seed).normal(0.0, sigma_z, size=Y.shape)
    return LinkLoads(values=Y, noise_sigma=float(sigma_z))


def baseline_interpolate(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Mean + flow-deviation + time-deviation interpolation of missing entries.

    Rows or columns without observations get a zero deviation term.
    """
    X = np.asarray(X, dtype=np.float64)
    obs = np.asarray(M) > 0
    if not obs.any():
        raise ValidationError("baseline interpolation needs at least one observed entry")
    mean = X[obs].mean()
    dev = np.where(obs, X - mean, 0.0)
    row_n = obs.sum(axis=1)
    col_n = obs.sum(axis=0)
    flow_dev = np.divide(dev.sum(axis=1), row_n, out=np.zeros(X.shape[0]), where=row_n > 0)
    time_dev = np.divide(dev.sum(axis=0), col_n, out=np.zeros(X.shape[1]), where=col_n > 0)
    base = mean + flow_dev[:, None] + time_dev[None, :]
    return np.where(obs, X, base)


# ---------------------------------------------------------------------------
# routing


def all_pairs_flows(n_nodes: int, include_self: bool = False) -> list[tuple[int, int]]:
    """OD pairs in row-major order (origin-major)."""
    return [
        (o, d)
        for o in range(n_nodes)
        for d in range(n_nodes)
        if include_self or o != d
    ]


def _bfs_dist(adj: np.ndarray, src: int) -> np.ndarray:
    n = adj.shape[0]
    dist = np.full(n, -1, dtype=np.int64)
    dist[src] = 0
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in np.flatnonzero(adj[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def shortest_path_routing(
    adjacency,
    flows: list[tuple[int, int]] | None = None,
    access_links: bool = False,
) -> tuple[np.ndarray, list[tuple[str, int, int]]]:
    """Binary routing matrix for hop-count shortest paths.

    ``adjacency[u, v] != 0`` declares a directed link u -> v. Links are indexed
    in row-major order of the adjacency matrix; with ``access_links`` each node
    additionally gets an ingress and an egress link (all ingress links first),
    which lets self-flows traverse the network too. Ties between equal-length
    paths are broken by the lowest next-hop index.

    Returns ``(A, links)`` where ``links[i]`` describes row i as
    ``(kind, u, v)`` with kind in {"core", "in", "out"}.
    """
    adj = np.asarray(adjacency) != 0
    n = adj.shape[0]
    if adj.shape != (n, n):
        raise ValidationError("adjacency must be square")
    np.fill_diagonal(adj, False)
    if np.any(_bfs_dist(adj, 0) < 0) or np.any(_bfs_dist(adj.T, 0) < 0):
        raise ValidationError("graph is not strongly connected")
    if flows is None:
        flows = all_pairs_flows(n, include_self=access_links)

    links = [("core", int(u), int(v)) for u, v in zip(*np.nonzero(adj))]
    index = {(u, v): i for i, (_, u, v) in enumerate(links)}
    if access_links:
        links += [("in", k, k) for k in range(n)]
        links += [("out", k, k) for k in range(n)]

    dists = {}
    A = np.zeros((len(links), len(flows)))
    for j, (o, d) in enumerate(flows):
        if o == d and not access_links:
            raise ValidationError(
                f"self-flow ({o},{d}) traverses no link; enable access_links"
            )
        if d not in dists:
            # distances to d on the reversed graph give predecessor choices directly
            dists[d] = _bfs_dist(adj.T, d)
        dist_to_d = dists[d]
        u = o
        while u != d:
            # next hop: lowest-index neighbour one step closer to d
            nxt = min(
                v for v in np.flatnonzero(adj[u]) if dist_to_d[v] == dist_to_d[u] - 1
            )
            A[index[(u, int(nxt))], j] = 1.0
            u = int(nxt)
        if access_links:
            A[len(index) + o, j] = 1.0
            A[len(index) + n + d, j] = 1.0

    return A, links


def train_test_split(
    X: np.ndarray,
    train_len: int = 3000,
    test_len: int = 672,
    test_start: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous split: ``[0, train_len)`` and ``[test_start, test_start + test_len)``."""
    X = np.asarray(X)
    T = X.shape[-1]
    test_start = train_len if test_start is None else test_start
    if train_len <= 0 or test_len <= 0:
        raise ValidationError("split lengths must be positive")
    if test_start < train_len:
        raise ValidationError("test segment overlaps the training segment")
    if test_start + test_len > T:
        raise ValidationError(
            f"series has {T} slots, split needs {test_start + test_len}"
        )
    return X[..., :train_len].copy(), X[..., test_start:test_start + test_len].copy()


def save_normalization(path, params: NormalizationParams) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=2))


def load_normalization(path) -> NormalizationParams:
    return NormalizationParams.from_dict(json.loads(Path(path).read_text()))
