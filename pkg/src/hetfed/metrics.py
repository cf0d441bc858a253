"""Within-domain / cross-domain / all-domain accuracy, checkpoint choice, PCA."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import ModelParams, forward

METRICS_COLUMNS = ["method", "seed", "config_hash", "node", "round", "wdp", "cdp", "acc"]
PCA_COLUMNS = ["node", "sample_id", "domain", "label", "pc1", "pc2"]


def predict(model: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)  # first maximum wins ties


def n_correct(model: ModelParams, data) -> int:
    return int(np.sum(predict(model, data.x) == data.y))


def evaluate(model: ModelParams, data) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(data.y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    return n_correct(model, data) / len(data.y)


@dataclass
class MetricsRecord:
    wdp: list[float]
    cdp: list[float | None]
    acc: list[float]
    rounds: list[int] = field(default_factory=list)
    method: str = ""
    seed: int = 0

    @property
    def avg(self) -> dict:
        cdp = [c for c in self.cdp if c is not None]
        return {
            "wdp": float(np.mean(self.wdp)),
            "cdp": float(np.mean(cdp)) if cdp else None,
            "acc": float(np.mean(self.acc)),
        }

    def to_dict(self) -> dict:
        return {"wdp": self.wdp, "cdp": self.cdp, "acc": self.acc, "rounds": self.rounds,
                "method": self.method, "seed": self.seed, "avg": self.avg}


def correct_matrix(models: Sequence[ModelParams], sets: Sequence) -> np.ndarray:
    """counts[i, n] = samples of set n that model i classifies correctly."""
    return np.array([[n_correct(m, s) for s in sets] for m in models], dtype=np.int64)


def metrics_record(models: Sequence[ModelParams], test_sets: Sequence, rounds=None,
                   method: str = "", seed: int = 0) -> MetricsRecord:
    sizes = np.array([len(t.y) for t in test_sets], dtype=np.int64)
    if np.any(sizes == 0):
        raise ValueError("all test sets must be nonempty")
    counts = correct_matrix(models, test_sets)
    wdp, cdp, acc = [], [], []
    for i in range(len(models)):
        wdp.append(counts[i, i] / sizes[i])
        other = np.arange(len(test_sets)) != i
        cdp.append(counts[i, other].sum() / sizes[other].sum() if other.any() else None)
        acc.append(counts[i].sum() / sizes.sum())
    return MetricsRecord([float(v) for v in wdp], [None if v is None else float(v) for v in cdp],
                         [float(v) for v in acc], list(rounds or []), method, seed)


def checkpoint_select(history: Sequence[tuple]):
    """Entry with the highest validation accuracy; earliest round on ties."""
    if not history:
        raise ValueError("empty checkpoint history")
    best = None
    for entry in sorted(history, key=lambda e: e[0]):
        if best is None or entry[1] > best[1]:
            best = entry
    return best


def _leading_eigvec(cov, start, tol, max_iter, scale, against=None):
    v = start / np.linalg.norm(start)
    for _ in range(max_iter):
        if against is not None:
            v = v - (v @ against) * against
            v /= np.linalg.norm(v)
        w = cov @ v
        lam = float(v @ w)
        if np.linalg.norm(w - lam * v) <= tol * scale:
            break
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        v = w / norm
    return v, float(v @ cov @ v)


def pca2d(features: np.ndarray, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Project mean-centered rows onto the top two principal directions.

    Directions come from power iteration with deflation on the covariance;
    each direction's first nonzero loading is made positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca2d needs at least two rows")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    if not np.any(cov):
        return np.zeros((len(x), 2))
    scale = np.abs(cov).max()
    start = np.random.default_rng(0).standard_normal(cov.shape[0])
    v1, lam1 = _leading_eigvec(cov, start, tol, max_iter, scale)
    dirs = [v1]
    if cov.shape[0] > 1:
        deflated = cov - lam1 * np.outer(v1, v1)
        v2, _ = _leading_eigvec(deflated, start[::-1].copy(), tol, max_iter, scale, against=v1)
        dirs.append(v2)
    else:
        dirs.append(np.zeros_like(v1))
    coords = []
    for v in dirs:
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        coords.append(xc @ v)
    return np.stack(coords, axis=1)


def write_metrics_csv(path, record: MetricsRecord, config_hash: str) -> None:
    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for i in range(len(record.wdp)):
            rnd = record.rounds[i] if record.rounds else ""
            w.writerow([record.method, record.seed, config_hash, i, rnd,
                        fmt(record.wdp[i]), fmt(record.cdp[i]), fmt(record.acc[i])])
        avg = record.avg
        w.writerow([record.method, record.seed, config_hash, "avg", "",
                    fmt(avg["wdp"]), fmt(avg["cdp"]), fmt(avg["acc"])])


def write_pca_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PCA_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(float(r[4])), repr(float(r[5]))])
