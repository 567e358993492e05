"""Correspondence accuracy metrics, tolerance curves, pseudo-clustering for
dense clouds, and the normalizer timing benchmark.

A prediction is correct at tolerance eps when the predicted target point lies
within eps * dist_max of the true one, dist_max being the target cloud's
diameter; tolerance 0 is the strict per-index match.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .indicator import SharpenConfig, sharpen, sinkhorn
from .pointcloud import ContractError, PointCloud, fps_sample, is_bijection

DEFAULT_TOLERANCES = tuple(round(0.01 * i, 2) for i in range(21))  # 0.00 .. 0.20


@dataclass
class CorrReport:
    strict: float
    curve: list[tuple[float, float]]
    n: int
    dist_max: float


def corr_strict(pred, gt) -> float:
    """Fraction of points whose predicted index equals the true one."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction and ground truth differ in size: {pred.shape} vs {gt.shape}")
    return float((pred == gt).mean())


def cloud_diameter(cloud: PointCloud) -> float:
    pts = cloud.points
    d2 = ((pts * pts).sum(1)[:, None] + (pts * pts).sum(1)[None, :] - 2.0 * pts @ pts.T)
    return float(np.sqrt(max(d2.max(), 0.0)))


def corr_tolerant(pred, gt, target: PointCloud, tolerances) -> list[tuple[float, float]]:
    """Correct-match fraction per tolerance, each a fraction of the target diameter."""
    tolerances = [float(t) for t in tolerances]
    if not tolerances:
        raise ContractError("need at least one tolerance")
    if any(t < 0 or t > 1 for t in tolerances) or sorted(tolerances) != tolerances:
        raise ContractError("tolerances must be ascending within [0, 1]")
    pred = np.asarray(pred, dtype=np.intp)
    gt = np.asarray(gt, dtype=np.intp)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction and ground truth differ in size: {pred.shape} vs {gt.shape}")
    dist_max = cloud_diameter(target)
    err = np.linalg.norm(target.points[pred] - target.points[gt], axis=1)
    return [(t, float((err <= t * dist_max).mean())) for t in tolerances]


def corr_report(pred, gt, target: PointCloud, tolerances=DEFAULT_TOLERANCES) -> CorrReport:
    curve = corr_tolerant(pred, gt, target, tolerances)
    return CorrReport(
        strict=corr_strict(pred, gt),
        curve=curve,
        n=len(np.asarray(pred)),
        dist_max=cloud_diameter(target),
    )


# ---------------------------------------------------------------------------
# pseudo clustering


@dataclass
class ClusterMap:
    """Partition of a cloud around its key points.

    Each cluster's member list is sorted by distance to the key point
    (ascending, ties by index); the key point itself holds rank 0.
    """

    key_indices: np.ndarray
    assignment: np.ndarray
    clusters: list[np.ndarray]


def build_cluster_map(cloud: PointCloud, key_indices) -> ClusterMap:
    keys = np.asarray(key_indices, dtype=np.intp)
    pts = cloud.points
    centers = pts[keys]
    d2 = ((pts * pts).sum(1)[:, None] + (centers * centers).sum(1)[None, :] - 2.0 * pts @ centers.T)
    assignment = d2.argmin(axis=1)  # ties to the lower cluster index
    assignment[keys] = np.arange(len(keys))  # a key point always owns its own cluster
    clusters = []
    for c, key in enumerate(keys):
        members = np.flatnonzero(assignment == c)
        dist = np.linalg.norm(pts[members] - pts[key], axis=1)
        members = members[np.lexsort((members, dist))]
        # the key point sits at distance 0; force rank 0 even against a coincident twin
        pos = int(np.flatnonzero(members == key)[0])
        if pos != 0:
            members = np.concatenate(([key], members[:pos], members[pos + 1 :]))
        clusters.append(members)
    return ClusterMap(key_indices=keys, assignment=assignment, clusters=clusters)


def pseudo_cluster_correspond(dense_a: PointCloud, dense_b: PointCloud, m: int, model) -> np.ndarray:
    """Extend key-point correspondence to dense clouds by rank matching.

    ``model(key_cloud_a, key_cloud_b)`` must return hard indices matching the
    m key points. Every dense point of A is assigned to its nearest key
    point's cluster and mapped to the equally-ranked member of the matched B
    cluster; ranks beyond the matched cluster's size fall back to its key point.
    """
    ka = fps_sample(dense_a, m)
    kb = fps_sample(dense_b, m)
    key_corr = np.asarray(
        model(PointCloud(dense_a.points[ka]), PointCloud(dense_b.points[kb])), dtype=np.intp
    )
    if key_corr.shape != (m,):
        raise ContractError(f"model returned {key_corr.shape}, expected ({m},)")
    map_a = build_cluster_map(dense_a, ka)
    map_b = build_cluster_map(dense_b, kb)
    result = np.empty(dense_a.n, dtype=np.intp)
    for c in range(m):
        members_a = map_a.clusters[c]
        members_b = map_b.clusters[key_corr[c]]
        hits = min(len(members_a), len(members_b))
        result[members_a[:hits]] = members_b[:hits]
        result[members_a[hits:]] = kb[key_corr[c]]
    return result


# ---------------------------------------------------------------------------
# normalizer benchmark


def bench_normalizers(sizes, sinkhorn_iterations: int = 30, repeats: int = 5, seed: int = 0):
    """Median forward wall-time per call of both normalizers for each size.

    Returns rows of (method, n, median_seconds).
    """
    rng = np.random.default_rng(seed)
    cfg = SharpenConfig()
    rows = []
    for n in sizes:
        if n < 2:
            raise ContractError(f"benchmark sizes must be >= 2, got {n}")
        scores = rng.random((int(n), int(n))) + 0.01
        for method, fn in (
            ("sharpen", lambda s: sharpen(s, cfg)),
            ("sinkhorn", lambda s: sinkhorn(s, sinkhorn_iterations)),
        ):
            times = []
            for _ in range(repeats):
                arg = Tensor(scores)
                start = time.perf_counter()
                fn(arg)
                times.append(time.perf_counter() - start)
            rows.append((method, int(n), float(np.median(times))))
    return rows


# ---------------------------------------------------------------------------
# CSV formats


def write_corr_csv(indices) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source_index", "target_index"])
    for i, j in enumerate(np.asarray(indices)):
        writer.writerow([i, int(j)])
    return buf.getvalue()


def read_corr_csv(text: str) -> np.ndarray:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["source_index", "target_index"]:
        raise ContractError(f"bad correspondence CSV header: {header}")
    pairs = [(int(row[0]), int(row[1])) for row in reader if row]
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise ContractError("correspondence CSV source indices are not 0..n-1")
    return np.array([j for _, j in pairs], dtype=np.intp)


def write_curve_csv(curve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tolerance", "corr"])
    for tol, frac in curve:
        writer.writerow([f"{tol:.4f}", f"{frac:.6f}"])
    return buf.getvalue()


def read_curve_csv(text: str) -> list[tuple[float, float]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ["tolerance", "corr"]:
        raise ContractError(f"bad curve CSV header: {header}")
    return [(float(row[0]), float(row[1])) for row in reader if row]


def write_bench_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "n", "median_seconds"])
    for method, n, seconds in rows:
        writer.writerow([method, n, f"{seconds:.6f}"])
    return buf.getvalue()
