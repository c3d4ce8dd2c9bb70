"""Offline K-means over clean features, nearest-centroid assignment, and
deduplication into discrete unit sequences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path

import numpy as np


class QuantizerError(Exception):
    pass


@dataclass
class KMeansMeta:
    seed: int
    iterations: int
    inertia_trace: list[float]


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)
    layer_index: int
    meta: KMeansMeta | None = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise QuantizerError("codebook needs a (K>=2, D) centroid matrix")
        # duplicate centroids make assignment ambiguous
        k = self.centroids.shape[0]
        d2 = _sq_dists(self.centroids, self.centroids)
        d2[np.arange(k), np.arange(k)] = np.inf
        if np.min(d2) <= 0.0:
            raise QuantizerError("codebook contains duplicate centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class UnitSequence:
    units: list[int]
    utt_id: str = ""
    deduplicated: bool = False

    def __post_init__(self):
        self.units = [int(u) for u in self.units]
        if self.deduplicated:
            for a, b in zip(self.units, self.units[1:]):
                if a == b:
                    raise QuantizerError("deduplicated sequence has adjacent repeats")

    def __len__(self):
        return len(self.units)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d2 = (
        (x * x).sum(axis=1)[:, None]
        + (c * c).sum(axis=1)[None, :]
        - 2.0 * (x @ c.T)
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: sample a few D^2-weighted candidates per step and
    keep the one that shrinks the potential most."""
    n = x.shape[0]
    n_candidates = 2 + int(np.log(k))
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(0, n)]
    closest = _sq_dists(x, centroids[:1]).ravel()
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = [int(rng.integers(0, n))]
        else:
            idx = rng.choice(n, size=n_candidates, p=closest / total).tolist()
        options = [np.minimum(closest, _sq_dists(x, x[j:j + 1]).ravel()) for j in idx]
        best = int(np.argmin([o.sum() for o in options]))
        centroids[i] = x[idx[best]]
        closest = options[best]
    return centroids


def train_kmeans(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
                 layer_index: int = 0, shift_tol: float = 1e-6) -> Codebook:
    """k-means++ init, Lloyd iterations until the mean centroid shift drops
    below the tolerance; empty clusters are re-seeded from the farthest point.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise QuantizerError(f"expected a pooled (N, D) frame matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise QuantizerError("non-finite entries in the training features")
    n = x.shape[0]
    if n < k:
        raise QuantizerError(f"{n} frames cannot support {k} clusters")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    trace: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(n), labels]
        trace.append(float(point_cost.sum()))
        iterations += 1

        new_centroids = centroids.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centroids[j] = x[mask].mean(axis=0)
        # re-seed empties from the points worst served by their centroid
        empty = [j for j in range(k) if not (labels == j).any()]
        if empty:
            order = np.argsort(point_cost)[::-1]
            for j, idx in zip(empty, order):
                new_centroids[j] = x[idx]

        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).mean())
        centroids = new_centroids
        if shift < shift_tol:
            break

    # final assignment so the recorded inertia matches assign() on this set
    d2 = _sq_dists(x, centroids)
    trace.append(float(d2[np.arange(n), d2.argmin(axis=1)].sum()))

    return Codebook(
        centroids=centroids,
        layer_index=layer_index,
        meta=KMeansMeta(seed=seed, iterations=iterations, inertia_trace=trace),
    )


def assign(features: np.ndarray, codebook: Codebook, utt_id: str = "") -> UnitSequence:
    """Nearest centroid per frame; ties break toward the smaller index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.dim:
        raise QuantizerError(
            f"feature dim {x.shape} does not match codebook dim {codebook.dim}"
        )
    labels = _sq_dists(x, codebook.centroids).argmin(axis=1)
    return UnitSequence(units=labels.tolist(), utt_id=utt_id, deduplicated=False)


def deduplicate(seq: UnitSequence) -> UnitSequence:
    collapsed = [u for u, _ in groupby(seq.units)]
    return UnitSequence(units=collapsed, utt_id=seq.utt_id, deduplicated=True)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_KMNS_HEADER = b"KMNS v1\n"


def save_codebook(codebook: Codebook, path) -> None:
    arr = np.ascontiguousarray(codebook.centroids, dtype="<f4")
    blob = _KMNS_HEADER + struct.pack("<III", codebook.k, codebook.dim,
                                      codebook.layer_index)
    Path(path).write_bytes(blob + arr.tobytes())


def load_codebook(path) -> Codebook:
    raw = Path(path).read_bytes()
    if not raw.startswith(_KMNS_HEADER):
        raise QuantizerError(f"{path}: bad codebook header")
    k, d, layer_index = struct.unpack_from("<III", raw, len(_KMNS_HEADER))
    offset = len(_KMNS_HEADER) + 12
    if len(raw) != offset + 4 * k * d:
        raise QuantizerError(f"{path}: truncated codebook payload")
    centroids = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(k, d)
    return Codebook(centroids=centroids.astype(np.float64), layer_index=layer_index)


def write_units(seqs: list[UnitSequence], path) -> None:
    path = Path(path)
    dedup = [s.deduplicated for s in seqs]
    if any(dedup) and not all(dedup):
        raise QuantizerError("cannot mix deduplicated and raw sequences in one file")
    if dedup and dedup[0] and not path.name.endswith(".dedup.units"):
        raise QuantizerError("deduplicated unit files must end in .dedup.units")
    lines = [f"{s.utt_id}\t{' '.join(str(u) for u in s.units)}" for s in seqs]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_units(path) -> list[UnitSequence]:
    path = Path(path)
    dedup = path.name.endswith(".dedup.units")
    seqs = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        utt_id, _, rest = line.partition("\t")
        units = [int(tok) for tok in rest.split()] if rest else []
        seqs.append(UnitSequence(units=units, utt_id=utt_id, deduplicated=dedup))
    return seqs
