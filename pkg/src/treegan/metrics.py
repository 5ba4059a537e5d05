"""Evaluation metrics for sets of point clouds.

Point-set distances (Chamfer, approximate EMD), set-level matching metrics
(JSD on an occupancy grid, MMD, coverage), a small permutation-invariant
classifier used as feature extractor, Gaussian feature statistics and the
Frechet point-cloud distance between them.
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core_math import Adam, Tensor, backward, default_dtype, log_softmax, no_grad
from .critic import PointSetNet
from .data import Dataset, FormatError

METRICS = ("jsd", "mmd-cd", "mmd-emd", "cov-cd", "cov-emd", "fpd")


def _pts(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("point cloud must be a non-empty n x 3 array")
    return pts


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def chamfer(X, Y) -> float:
    """Symmetric Chamfer distance with squared nearest-neighbor distances, averaged per point."""
    d = squared_distances(_pts(X), _pts(Y))
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def sinkhorn_plan(C: np.ndarray, iterations: int = 200, reg_start: float = 0.1,
                  reg_end: float = 0.005) -> np.ndarray:
    """Entropic transport plan between uniform marginals, log domain.

    The regularization is annealed geometrically from ``reg_start`` to
    ``reg_end`` (relative to the largest cost).
    """
    n, m = C.shape
    scale = C.max()
    Cs = C / scale if scale > 0 else C
    log_a, log_b = -math.log(n), -math.log(m)
    f, g = np.zeros(n), np.zeros(m)
    regs = np.geomspace(reg_start, reg_end, max(iterations, 1))
    for eps in regs:
        f = eps * log_a - eps * logsumexp((g[None, :] - Cs) / eps, axis=1)
        g = eps * log_b - eps * logsumexp((f[:, None] - Cs) / eps, axis=0)
    return np.exp((f[:, None] + g[None, :] - Cs) / regs[-1])


def _greedy_permutation(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    perm = np.full(n, -1)
    col_used = np.zeros(n, dtype=bool)
    assigned = 0
    for flat in np.argsort(-P, axis=None, kind="stable"):
        i, j = divmod(int(flat), n)
        if perm[i] < 0 and not col_used[j]:
            perm[i] = j
            col_used[j] = True
            assigned += 1
            if assigned == n:
                break
    return perm


def _two_opt(C: np.ndarray, perm: np.ndarray, sweeps: int = 20) -> np.ndarray:
    perm = perm.copy()
    n = len(perm)
    rows = np.arange(n)
    for _ in range(sweeps):
        improved = False
        for i in range(n):
            cur = C[i, perm[i]] + C[rows, perm]
            swapped = C[i, perm] + C[rows, perm[i]]
            delta = swapped - cur
            j = int(np.argmin(delta))
            if delta[j] < -1e-12:
                perm[i], perm[j] = perm[j], perm[i]
                improved = True
        if not improved:
            break
    return perm


def emd_approx(X, Y, iterations: int = 200, reg_start: float = 0.1, reg_end: float = 0.005) -> float:
    """Approximate Earth Mover's distance per point between equal-size clouds.

    A Sinkhorn plan is rounded to a one-to-one assignment (greedy on the plan,
    then pairwise-swap improvement), so the value is the cost of a feasible
    matching and never falls below the exact EMD.
    """
    a, b = _pts(X), _pts(Y)
    if len(a) != len(b):
        raise ValueError(f"emd_approx needs equal sizes, got {len(a)} and {len(b)}")
    C = np.sqrt(squared_distances(a, b))
    if len(a) == 1:
        return float(C[0, 0])
    perm = _two_opt(C, _greedy_permutation(sinkhorn_plan(C, iterations, reg_start, reg_end)))
    return float(C[np.arange(len(a)), perm].mean())


def occupancy_histogram(clouds: Sequence, resolution: int = 28) -> np.ndarray:
    """Point counts per voxel of a resolution^3 grid over [-1, 1]^3, all clouds pooled."""
    counts = np.zeros(resolution ** 3)
    for c in clouds:
        idx = np.floor((_pts(c) + 1.0) * 0.5 * resolution).astype(np.int64)
        idx = np.clip(idx, 0, resolution - 1)
        flat = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
        counts += np.bincount(flat, minlength=resolution ** 3)
    return counts


def jsd_grid(set_a: Sequence, set_b: Sequence, resolution: int = 28, smoothing: float = 1e-12) -> float:
    """Jensen-Shannon divergence (nats) between pooled occupancy distributions."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("jsd_grid needs non-empty sets")
    P = occupancy_histogram(set_a, resolution) + smoothing
    Q = occupancy_histogram(set_b, resolution) + smoothing
    P /= P.sum()
    Q /= Q.sum()
    M = 0.5 * (P + Q)
    val = 0.5 * np.sum(P * np.log(P / M)) + 0.5 * np.sum(Q * np.log(Q / M))
    return float(min(max(val, 0.0), math.log(2.0)))


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("TREEGAN_THREADS", "1")))
    except ValueError:
        return 1


def _distance_fn(distance) -> Callable:
    if callable(distance):
        return distance
    key = str(distance).lower()
    if key == "cd":
        return chamfer
    if key == "emd":
        return emd_approx
    raise ValueError(f"unknown distance {distance!r}; expected 'cd' or 'emd'")


def pairwise_matrix(set_ref: Sequence, set_gen: Sequence, distance="cd") -> np.ndarray:
    """D[r, g] = distance(ref[r], gen[g]); threaded up to TREEGAN_THREADS workers."""
    if len(set_ref) == 0 or len(set_gen) == 0:
        raise ValueError("set metrics need non-empty sets")
    fn = _distance_fn(distance)
    pairs = [(r, g) for r in range(len(set_ref)) for g in range(len(set_gen))]
    work = lambda rg: fn(set_ref[rg[0]], set_gen[rg[1]])  # noqa: E731
    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            vals = list(pool.map(work, pairs))
    else:
        vals = [work(p) for p in pairs]
    return np.array(vals, dtype=np.float64).reshape(len(set_ref), len(set_gen))


def mmd(set_ref: Sequence, set_gen: Sequence, distance="cd", matrix: np.ndarray | None = None) -> float:
    """Mean over reference clouds of the distance to the closest generated cloud."""
    D = pairwise_matrix(set_ref, set_gen, distance) if matrix is None else matrix
    return float(D.min(axis=1).mean())


def coverage(set_ref: Sequence, set_gen: Sequence, distance="cd", matrix: np.ndarray | None = None) -> float:
    """Fraction of reference clouds that are the nearest reference of some generated cloud."""
    D = pairwise_matrix(set_ref, set_gen, distance) if matrix is None else matrix
    nearest = np.argmin(D, axis=0)  # lowest index on ties
    return len(np.unique(nearest)) / D.shape[0]


# ---------------------------------------------------------------- features

class FeatureExtractor:
    """Point classifier whose pooled (or hidden head) activations serve as features."""

    def __init__(self, n_classes: int, point_widths=(3, 32, 64, 64), head_widths=None,
                 feature_layer: int = 0, slope: float = 0.2, seed: int = 0, dtype=np.float32):
        head_widths = list(head_widths or (point_widths[-1], 64, n_classes))
        if head_widths[-1] != n_classes or head_widths[0] != point_widths[-1]:
            raise ValueError("head widths must run from the pooled width to the class count")
        self.n_classes = n_classes
        self.point_widths, self.head_widths = list(point_widths), head_widths
        self.feature_layer = feature_layer
        self.slope = slope
        self.dtype = np.dtype(dtype)
        self.accuracy: float | None = None
        self.classes: list[str] = []
        with default_dtype(self.dtype):
            self.net = PointSetNet(self.point_widths, self.head_widths, slope,
                                   np.random.default_rng(seed), "extractor")

    @property
    def feature_dim(self) -> int:
        if self.feature_layer == 0:
            return self.point_widths[-1]
        return self.head_widths[self.feature_layer]

    def parameters(self):
        return self.net.parameters()

    def logits(self, x) -> Tensor:
        return self.net(Tensor(np.asarray(x, dtype=self.dtype)))

    def features(self, clouds, batch: int = 64) -> np.ndarray:
        """(N, F) features; deterministic and invariant to point order."""
        arr = _stack(clouds)
        out = []
        with no_grad():
            for i in range(0, len(arr), batch):
                h = self.net.pooled(Tensor(arr[i:i + batch].astype(self.dtype)))
                if self.feature_layer:
                    h = self.net.head(h, upto=self.feature_layer)
                out.append(h.data.astype(np.float64))
        return np.concatenate(out, axis=0)

    def predict(self, clouds) -> np.ndarray:
        arr = _stack(clouds)
        with no_grad():
            return np.argmax(self.logits(arr).data, axis=1)

    def meta(self) -> dict:
        return {"kind": "feature_extractor", "n_classes": self.n_classes,
                "point_widths": self.point_widths, "head_widths": self.head_widths,
                "feature_layer": self.feature_layer, "slope": self.slope,
                "dtype": self.dtype.name, "accuracy": self.accuracy, "classes": self.classes}

    def save(self, path) -> None:
        from .training import save_params
        save_params(path, self.parameters(), self.meta())

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        from .training import CheckpointError, load_checkpoint
        ck = load_checkpoint(path)
        m = ck.meta
        if m.get("kind") != "feature_extractor":
            raise CheckpointError(f"{path} does not hold a feature extractor")
        fx = cls(m["n_classes"], m["point_widths"], m["head_widths"], m["feature_layer"],
                 m["slope"], 0, m["dtype"])
        for p in fx.parameters():
            p.data = ck.tensors[p.name].copy()
        fx.accuracy, fx.classes = m.get("accuracy"), m.get("classes", [])
        return fx


def _stack(clouds) -> np.ndarray:
    if isinstance(clouds, np.ndarray):
        return clouds if clouds.ndim == 3 else clouds[None]
    return np.stack([np.asarray(getattr(c, "points", c)) for c in clouds])


def train_feature_extractor(dataset: Dataset, epochs: int = 15, seed: int = 0, lr: float = 1e-3,
                            batch_size: int = 32, train_fraction: float = 0.8,
                            labels: np.ndarray | None = None, **kwargs) -> FeatureExtractor:
    """Cross-entropy training of the point classifier on a seeded split.

    The held-out accuracy is stored on the returned extractor. ``labels``
    overrides the dataset's class ids.
    """
    y_all = dataset.class_ids() if labels is None else np.asarray(labels)
    n_classes = int(y_all.max()) + 1 if len(y_all) else 0
    if len(np.unique(y_all)) < 2:
        raise ValueError("feature extractor training needs at least 2 classes")
    x_all = dataset.points()
    perm = np.random.default_rng(seed).permutation(len(x_all))
    cut = int(round(train_fraction * len(x_all)))
    tr_idx, te_idx = perm[:cut], perm[cut:]
    fx = FeatureExtractor(n_classes, seed=seed, **kwargs)
    fx.classes = list(dataset.classes)
    opt = Adam(fx.parameters(), lr=lr, betas=(0.9, 0.999))
    rng = np.random.default_rng([seed, 1])
    for _ in range(epochs):
        order = rng.permutation(tr_idx)
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            logp = log_softmax(fx.logits(x_all[idx]))
            onehot = np.zeros(logp.shape, dtype=fx.dtype)
            onehot[np.arange(len(idx)), y_all[idx]] = 1.0
            loss = -(logp * onehot).sum() * (1.0 / len(idx))
            opt.zero_grad()
            backward(loss, fx.parameters())
            opt.step()
    if len(te_idx):
        fx.accuracy = float(np.mean(fx.predict(x_all[te_idx]) == y_all[te_idx]))
    return fx


# ---------------------------------------------------------------- Gaussian statistics and FPD

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        F = self.mean.shape[0]
        if self.cov.shape != (F, F):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean of length {F}")
        if self.sample_count < 2:
            raise ValueError("Gaussian statistics need at least 2 samples")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def stats_from_features(features: np.ndarray) -> GaussianStats:
    """Mean and unbiased covariance of an (N, F) feature matrix."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {X.shape}")
    mean = X.mean(axis=0)
    D = X - mean
    cov = D.T @ D / (X.shape[0] - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T), X.shape[0])


def extract_stats(clouds, extractor: FeatureExtractor) -> GaussianStats:
    if len(clouds) < 2:
        raise ValueError("extract_stats needs at least 2 clouds")
    return stats_from_features(extractor.features(clouds))


def psd_sqrt(M: np.ndarray, clamp: float = 1e-8, sym_tol: float = 1e-8) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition.

    Eigenvalues down to ``-clamp`` (relative to the largest magnitude) are
    treated as 0; anything more negative, or asymmetry beyond ``sym_tol``, is
    an error.
    """
    M = np.asarray(M, dtype=np.float64)
    scale = max(1.0, float(np.abs(M).max())) if M.size else 1.0
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"psd_sqrt needs a square matrix, got {M.shape}")
    if np.abs(M - M.T).max() > sym_tol * scale:
        raise ValueError("psd_sqrt input is not symmetric")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.min() < -clamp * scale:
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    w = np.maximum(w, 0.0)
    R = (V * np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def fpd(P: GaussianStats, Q: GaussianStats) -> float:
    """Frechet distance between two Gaussians fitted to features.

    The cross term uses ``sqrt(sqrt(S_P) S_Q sqrt(S_P))``, which has the same
    trace as ``sqrt(S_P S_Q)`` but stays symmetric PSD.
    """
    if P.dim != Q.dim:
        raise ValueError(f"feature dimensions differ: {P.dim} vs {Q.dim}")
    sP = psd_sqrt(P.cov)
    inner = sP @ Q.cov @ sP
    try:
        cross = psd_sqrt(0.5 * (inner + inner.T))
    except ValueError as exc:
        raise ArithmeticError(f"FPD cross term failed: {exc}") from exc
    diff = P.mean - Q.mean
    val = float(diff @ diff + np.trace(P.cov) + np.trace(Q.cov) - 2.0 * np.trace(cross))
    if val < 0.0:
        if val < -1e-6:
            raise ArithmeticError(f"FPD evaluated to {val}")
        val = 0.0
    return val


FPDS_MAGIC = b"FPDS"


def write_fpds(path, stats: GaussianStats) -> None:
    """Binary stats file: magic, u32 dim, u64 count, mean, covariance (f8 LE), CRC32."""
    F = stats.dim
    payload = (FPDS_MAGIC + struct.pack("<IQ", F, stats.sample_count)
               + stats.mean.astype("<f8").tobytes() + stats.cov.astype("<f8").tobytes())
    Path(path).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def read_fpds(path) -> GaussianStats:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != FPDS_MAGIC:
        raise FormatError(f"{path}: not an FPDS file")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    F, count = struct.unpack_from("<IQ", payload, 4)
    if len(payload) != 16 + 8 * (F + F * F):
        raise FormatError(f"{path}: truncated FPDS payload")
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: CRC32 mismatch")
    mean = np.frombuffer(payload, "<f8", F, 16).astype(np.float64)
    cov = np.frombuffer(payload, "<f8", F * F, 16 + 8 * F).reshape(F, F).astype(np.float64)
    return GaussianStats(mean, cov, count)


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    values: dict[str, float]
    ref_id: str = "ref"
    gen_id: str = "gen"
    config: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "ref", "gen"])
        for k, v in self.values.items():
            w.writerow([k, repr(float(v)), self.ref_id, self.gen_id])
        for k, v in sorted(self.config.items()):
            w.writerow([f"config:{k}", v, self.ref_id, self.gen_id])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.csv_text(), encoding="utf-8")

    def table(self) -> str:
        width = max(len(k) for k in self.values) if self.values else 6
        lines = [f"{self.ref_id} vs {self.gen_id}"]
        lines += [f"  {k:<{width}}  {v:.6g}" for k, v in self.values.items()]
        return "\n".join(lines)


def evaluate(ref: Sequence, gen: Sequence, metrics: Sequence[str] = METRICS,
             extractor: FeatureExtractor | None = None, ref_stats: GaussianStats | None = None,
             gen_stats: GaussianStats | None = None, resolution: int = 28,
             emd_iterations: int = 200, ref_id: str = "ref", gen_id: str = "gen") -> MetricReport:
    """Compute the requested metrics; FPD may come from cached statistics alone."""
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {METRICS}")
    values: dict[str, float] = {}
    cd = emd = None
    emd_fn = lambda a, b: emd_approx(a, b, iterations=emd_iterations)  # noqa: E731
    for m in metrics:
        if m == "jsd":
            values[m] = jsd_grid(ref, gen, resolution)
        elif m in ("mmd-cd", "cov-cd"):
            cd = pairwise_matrix(ref, gen, "cd") if cd is None else cd
            values[m] = mmd(ref, gen, matrix=cd) if m == "mmd-cd" else coverage(ref, gen, matrix=cd)
        elif m in ("mmd-emd", "cov-emd"):
            emd = pairwise_matrix(ref, gen, emd_fn) if emd is None else emd
            values[m] = mmd(ref, gen, matrix=emd) if m == "mmd-emd" else coverage(ref, gen, matrix=emd)
        elif m == "fpd":
            if ref_stats is None or gen_stats is None:
                if extractor is None:
                    raise ValueError("FPD requested but neither an extractor nor cached statistics were given")
                ref_stats = ref_stats or extract_stats(ref, extractor)
                gen_stats = gen_stats or extract_stats(gen, extractor)
            values[m] = fpd(ref_stats, gen_stats)
    cfg = {"resolution": resolution, "emd_iterations": emd_iterations}
    return MetricReport(values, ref_id, gen_id, cfg)
