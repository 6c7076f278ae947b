"""Object-level codebook, pixel-to-object probabilities and per-view ID mapping.

The mapping from view-local segment ids to codebook rows is a maximum-weight
injective assignment.  :func:`solve_mapping` runs a rectangular Hungarian
solver and then walks the tight edges of its dual to return the
lexicographically smallest optimal assignment, so ties resolve the same way as
in :func:`brute_force_mapping`.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

CODEBOOK_MAGIC = b"ULCB"

BRUTE_FORCE_MAX_ROWS = 7
BRUTE_FORCE_MAX_COLS = 9


class CapacityError(ValueError):
    """More segments than codebook rows."""


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (J, L)
    segment_ids: np.ndarray  # (J,) view-local id of each row

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


IdMapping = dict  # view-local id -> codebook row


def init_codebook(rng: np.random.Generator, L: int, d: int) -> np.ndarray:
    """Rows drawn uniformly on the unit sphere."""
    rows = rng.normal(size=(L, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def association_logits(features: np.ndarray, codebook: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    bad = ~np.all(np.isfinite(features), axis=1)
    if bad.any():
        raise ValueError(f"non-finite feature at pixel {int(np.flatnonzero(bad)[0])}")
    if features.shape[1] != codebook.shape[1]:
        raise ValueError(f"feature dim {features.shape[1]} != codebook dim {codebook.shape[1]}")
    return features @ codebook.T / temperature


def softmax_and_log(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax and log-softmax from a single exp pass."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    return e / total, shifted - np.log(total)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    return softmax_and_log(logits)[1]


def softmax(logits: np.ndarray) -> np.ndarray:
    return softmax_and_log(logits)[0]


def association_probs(features: np.ndarray, codebook: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over codebook rows of the dot product with each pixel feature, shape (M, L)."""
    return softmax(association_logits(features, codebook, temperature))


def build_score_matrix(probs: np.ndarray, labels: np.ndarray, mode: str = "area_aware") -> ScoreMatrix:
    """Summed (``area_aware``) or mean (``normalized``) probability per segment and row.

    ``labels`` holds the view-local segment id of each sampled pixel; rows of
    the result follow the sorted unique ids.
    """
    if mode not in ("normalized", "area_aware"):
        raise ValueError(f"unknown mapping mode {mode!r}")
    labels = np.asarray(labels)
    if labels.shape[0] != probs.shape[0]:
        raise ValueError("labels and probabilities disagree on pixel count")
    if labels.size == 0:
        return ScoreMatrix(np.zeros((0, probs.shape[1])), np.zeros(0, dtype=np.int64))
    segment_ids, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    m = labels.shape[0]
    member = sp.csr_matrix((np.ones(m), (inverse, np.arange(m))), shape=(len(segment_ids), m))
    scores = np.asarray(member @ probs)
    if mode == "normalized":
        scores = scores / counts[:, None]
    return ScoreMatrix(scores, segment_ids.astype(np.int64))


# ---------------------------------------------------------------------------
# assignment


def _hungarian_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost assignment of every row of an (n, m) matrix, n <= m.

    Shortest augmenting path form of Kuhn-Munkres with row/column potentials.
    Returns ``(col_of_row, u, v)``; the potentials satisfy
    ``u[i] + v[j] <= cost[i, j]`` with equality on assigned pairs and
    ``v[j] = 0`` on unassigned columns.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.int64)  # row (1-based) sitting on column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            visited = np.flatnonzero(used)
            u[match[visited]] += delta
            v[visited] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, m + 1):
        if match[j]:
            col_of_row[match[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _best_total(scores: np.ndarray) -> float:
    if scores.shape[0] == 0:
        return 0.0
    cols, _, _ = _hungarian_min(-scores)
    return float(scores[np.arange(scores.shape[0]), cols].sum())


def _tolerance(scores: np.ndarray) -> float:
    scale = float(np.abs(scores).max()) if scores.size else 0.0
    return 1e-9 * (1.0 + scale) * max(scores.shape[0], 1)


def linear_assignment(scores: np.ndarray) -> np.ndarray:
    """Column per row maximizing the total score; lexicographically smallest among ties."""
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    if n > m:
        raise CapacityError(f"{n} segments cannot be mapped injectively into {m} rows")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("score matrix has non-finite entries")
    cols, u, v = _hungarian_min(-scores)
    best = float(scores[np.arange(n), cols].sum())
    tol = _tolerance(scores)
    # Any optimal assignment uses only edges that are tight under the duals.
    tight = (-scores - u[:, None] - v[None, :]) <= tol

    chosen = np.zeros(n, dtype=np.int64)
    free_cols = np.ones(m, dtype=bool)
    fixed_total = 0.0
    for row in range(n):
        cands = np.flatnonzero(tight[row] & free_cols)
        pick = int(cands[0]) if cands.size else int(cols[row])
        if cands.size > 1:
            rest = scores[row + 1 :]
            for col in cands:
                free_cols[col] = False
                total = fixed_total + scores[row, col] + _best_total(rest[:, free_cols])
                free_cols[col] = True
                if total >= best - tol:
                    pick = int(col)
                    break
        chosen[row] = pick
        free_cols[pick] = False
        fixed_total += scores[row, pick]
    return chosen


def _as_scores(scores: ScoreMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, ScoreMatrix):
        return scores.scores, scores.segment_ids
    arr = np.asarray(scores, dtype=np.float64)
    return arr, np.arange(arr.shape[0])


def solve_mapping(scores: ScoreMatrix | np.ndarray) -> IdMapping:
    """Injective segment -> codebook-row map maximizing the summed score."""
    mat, ids = _as_scores(scores)
    cols = linear_assignment(mat)
    return {int(j): int(c) for j, c in zip(ids, cols)}


@lru_cache(maxsize=64)
def _injections(n: int, m: int) -> np.ndarray:
    perms = list(itertools.permutations(range(m), n))
    return np.array(perms, dtype=np.int64).reshape(len(perms), n)


def brute_force_mapping(scores: ScoreMatrix | np.ndarray) -> IdMapping:
    """Exhaustive search over all injections (small matrices only)."""
    mat, ids = _as_scores(scores)
    n, m = mat.shape
    if n > BRUTE_FORCE_MAX_ROWS or m > BRUTE_FORCE_MAX_COLS:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_ROWS}x{BRUTE_FORCE_MAX_COLS}, got {n}x{m}")
    if n > m:
        raise CapacityError(f"{n} segments cannot be mapped injectively into {m} rows")
    if n == 0:
        return {}
    perms = _injections(n, m)
    totals = mat[np.arange(n), perms].sum(axis=1)
    # itertools.permutations yields lexicographic order, so the first hit wins ties
    k = int(np.flatnonzero(totals >= totals.max() - _tolerance(mat))[0])
    return {int(j): int(c) for j, c in zip(ids, perms[k])}


def mapping_total(scores: ScoreMatrix | np.ndarray, mapping: IdMapping) -> float:
    mat, ids = _as_scores(scores)
    row_of = {int(j): r for r, j in enumerate(ids)}
    return float(sum(mat[row_of[j], c] for j, c in mapping.items()))


# ---------------------------------------------------------------------------
# codebook checkpoint


def write_codebook(codebook: np.ndarray, path: str | Path) -> None:
    codebook = np.asarray(codebook)
    L, d = codebook.shape
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<II", L, d))
        fh.write(np.ascontiguousarray(codebook, dtype="<f4").tobytes())


def read_codebook(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CODEBOOK_MAGIC or len(raw) < 12:
        raise ValueError(f"{path}: not a codebook file")
    L, d = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * L * d:
        raise ValueError(f"{path}: truncated codebook")
    return np.frombuffer(body, dtype="<f4").reshape(L, d).astype(np.float64)
