"""Item tokenization into n-digit semantic IDs.

Three tokenizers share one output type (a mapping item -> digit tuple):

* ``fit_pse``: rotate, split into ``n`` equal subvectors and quantize each
  subspace independently (OPQ, learned by alternating k-means/Procrustes).
* ``fit_rq_kmeans``: residual k-means, each level quantizes what the earlier
  levels left over.
* ``random_tokenize``: hash-seeded uniform digits, no semantics at all.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from sidiff.dataset import ItemEmbeddingTable, SemanticId
from sidiff.errors import ConfigError, DataError, FormatError
from sidiff.fileio import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

PSE_MAGIC = b"SIDC"
RQ_MAGIC = b"SIDR"
LLOYD_ITERS = 25
_CHUNK = 256


def sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (len(x), len(c)).

    Computed from explicit differences rather than the expanded
    ``|x|^2 - 2x.c + |c|^2`` form so exact ties stay exact.
    """
    out = np.empty((x.shape[0], c.shape[0]), dtype=np.float64)
    for lo in range(0, x.shape[0], _CHUNK):
        diff = x[lo:lo + _CHUNK, None, :] - c[None, :, :]
        out[lo:lo + _CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid (lowest index on ties) and its distance."""
    d = sq_distances(x, c)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(x)), idx]


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = sq_distances(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            # fewer distinct points than clusters
            pick = rng.integers(n)
        centers[j] = x[pick]
        closest = np.minimum(closest, sq_distances(x, centers[j:j + 1])[:, 0])
    return centers


def kmeans(
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    iters: int = LLOYD_ITERS,
    init: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm; returns (centroids, labels).

    Empty clusters are moved onto the point currently farthest from its
    centroid, so the objective never increases.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < k:
        raise ConfigError(f"need at least {k} points for {k} clusters, got {x.shape[0]}")
    centers = kmeans_plusplus(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    labels, dist = nearest(x, centers)
    for _ in range(iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            order = np.argsort(-dist, kind="stable")
            for j, row in zip(empty, order):
                centers[j] = x[row]
        new_labels, dist = nearest(x, centers)
        if np.array_equal(new_labels, labels) and not len(empty):
            break
        labels = new_labels
    return centers, labels


def procrustes_rotation(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Orthogonal R minimizing ||x R^T - y||_F."""
    u, _, vt = np.linalg.svd(x.T @ y)
    return (u @ vt).T


@dataclass
class CodebookSet:
    """Fitted quantizer.

    For PSE, ``codebooks[k]`` is M x (d/n) and acts on the k-th slice of the
    rotated vector.  For residual quantization (``residual=True``) every
    codebook is M x d and ``rotation`` is the identity.
    """

    rotation: np.ndarray
    codebooks: list[np.ndarray]
    residual: bool = False
    history: list[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.codebooks)

    @property
    def M(self) -> int:
        return int(self.codebooks[0].shape[0])

    @property
    def dim(self) -> int:
        return int(self.rotation.shape[0])

    @property
    def sub_dim(self) -> int:
        return self.dim if self.residual else self.dim // self.n

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        """Digit codes, shape (N, n)."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise DataError(
                f"embedding dim {vectors.shape[-1]} does not match codebook dim {self.dim}"
            )
        codes = np.empty((vectors.shape[0], self.n), dtype=np.int64)
        if self.residual:
            resid = vectors.copy()
            for k, cb in enumerate(self.codebooks):
                codes[:, k], _ = nearest(resid, cb)
                resid -= cb[codes[:, k]]
            return codes
        z = vectors @ self.rotation.T
        s = self.sub_dim
        for k, cb in enumerate(self.codebooks):
            codes[:, k], _ = nearest(z[:, k * s:(k + 1) * s], cb)
        return codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        """Reconstruction in the original (unrotated) embedding space."""
        codes = np.asarray(codes)
        if self.residual:
            return sum(cb[codes[:, k]] for k, cb in enumerate(self.codebooks))
        z = np.concatenate([cb[codes[:, k]] for k, cb in enumerate(self.codebooks)], axis=1)
        return z @ self.rotation

    def subspace_distortions(self, vectors: np.ndarray) -> np.ndarray:
        """Per-item, per-subspace squared error, shape (N, n). PSE only."""
        if self.residual:
            raise ConfigError("subspace distortions are defined for PSE codebooks only")
        vectors = np.asarray(vectors, dtype=np.float64)
        z = vectors @ self.rotation.T
        s = self.sub_dim
        out = np.empty((vectors.shape[0], self.n))
        for k, cb in enumerate(self.codebooks):
            _, out[:, k] = nearest(z[:, k * s:(k + 1) * s], cb)
        return out

    def item_distortion(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        recon = self.decode(self.encode(vectors))
        return np.sum((vectors - recon) ** 2, axis=1)

    def distortion(self, vectors: np.ndarray) -> float:
        return float(np.mean(self.item_distortion(vectors)))


def _check_fit_args(table: ItemEmbeddingTable, n: int, M: int, iters: int) -> np.ndarray:
    if n < 1 or M < 1:
        raise ConfigError(f"n and M must be positive (n={n}, M={M})")
    if iters < 1:
        raise ConfigError(f"iters must be >= 1, got {iters}")
    if len(table) < M:
        raise ConfigError(f"need at least M={M} items to fit codebooks, got {len(table)}")
    x = np.asarray(table.vectors, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite embedding values")
    return x


def fit_pse(
    table: ItemEmbeddingTable,
    n: int,
    M: int,
    iters: int = 10,
    seed: int = 0,
    learn_rotation: bool = True,
    lloyd_iters: int = LLOYD_ITERS,
) -> CodebookSet:
    """Alternate per-subspace k-means and a Procrustes rotation update.

    ``history[i]`` is the mean per-item distortion after outer iteration i.
    """
    x = _check_fit_args(table, n, M, iters)
    table.check_divisible(n)
    d = x.shape[1]
    s = d // n
    rng = np.random.default_rng(seed)
    rotation = np.eye(d)
    centers: list[np.ndarray | None] = [None] * n
    cbs = CodebookSet(rotation=rotation, codebooks=[])
    for it in range(iters):
        z = x @ rotation.T
        recon = np.empty_like(z)
        for k in range(n):
            sub = z[:, k * s:(k + 1) * s]
            centers[k], labels = kmeans(sub, M, rng, iters=lloyd_iters, init=centers[k])
            recon[:, k * s:(k + 1) * s] = centers[k][labels]
        if learn_rotation:
            rotation = procrustes_rotation(x, recon)
        cbs = CodebookSet(rotation=rotation, codebooks=[c.copy() for c in centers], history=cbs.history)
        cbs.history.append(cbs.distortion(x))
        log.debug("pse outer iter %d distortion %.6g", it, cbs.history[-1])
    return cbs


def fit_rq_kmeans(
    table: ItemEmbeddingTable,
    n: int,
    M: int,
    iters: int = LLOYD_ITERS,
    seed: int = 0,
) -> CodebookSet:
    """Residual k-means; ``history[k]`` is the mean residual norm^2 after level k."""
    x = _check_fit_args(table, n, M, iters)
    rng = np.random.default_rng(seed)
    resid = x.copy()
    codebooks = []
    history = []
    for _ in range(n):
        centers, _ = kmeans(resid, M, rng, iters=iters)
        # re-assign so the residual matches what encode() will produce
        labels, _ = nearest(resid, centers)
        resid = resid - centers[labels]
        codebooks.append(centers)
        history.append(float(np.mean(np.sum(resid**2, axis=1))))
    return CodebookSet(rotation=np.eye(x.shape[1]), codebooks=codebooks, residual=True, history=history)


def tokenize(table: ItemEmbeddingTable, codebooks: CodebookSet) -> dict[str, SemanticId]:
    codes = codebooks.encode(table.vectors)
    return {item: tuple(int(v) for v in row) for item, row in zip(table.ids, codes)}


def random_tokenize(item_ids, n: int, M: int, seed: int = 0) -> dict[str, SemanticId]:
    """Uniform digits, a pure function of (item_id, seed)."""
    out = {}
    for item in item_ids:
        digest = hashlib.sha256(f"{seed}\x00{item}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        out[item] = tuple(int(v) for v in rng.integers(0, M, size=n))
    return out


@dataclass
class TokenizerReport:
    distortion: float
    per_item: np.ndarray
    usage: np.ndarray  # (n, M) counts
    items_per_sid: dict[SemanticId, int]

    @property
    def n_unique(self) -> int:
        return len(self.items_per_sid)

    @property
    def max_collision(self) -> int:
        return max(self.items_per_sid.values(), default=0)

    def to_text(self) -> str:
        lines = [
            f"items={int(self.usage[0].sum()) if len(self.usage) else 0}",
            f"distortion={self.distortion:.9g}",
            f"unique_sids={self.n_unique}",
            f"max_items_per_sid={self.max_collision}",
            f"colliding_items={sum(c for c in self.items_per_sid.values() if c > 1)}",
        ]
        for k, row in enumerate(self.usage):
            lines.append(f"usage_digit{k}=" + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def report(
    table: ItemEmbeddingTable, sids: Mapping[str, SemanticId], M: int, codebooks: CodebookSet | None = None
) -> TokenizerReport:
    n = len(next(iter(sids.values()))) if sids else 0
    usage = np.zeros((n, M), dtype=np.int64)
    for sid in sids.values():
        for k, v in enumerate(sid):
            usage[k, v] += 1
    if codebooks is not None:
        per_item = codebooks.item_distortion(table.vectors)
        distortion = float(per_item.mean()) if len(per_item) else 0.0
    else:
        per_item = np.full(len(table), np.nan)
        distortion = float("nan")
    return TokenizerReport(
        distortion=distortion,
        per_item=per_item,
        usage=usage,
        items_per_sid=dict(Counter(sids.values())),
    )


def save_codebooks(path: str | Path, cbs: CodebookSet) -> None:
    magic = RQ_MAGIC if cbs.residual else PSE_MAGIC
    parts = [magic, struct.pack("<III", cbs.n, cbs.M, cbs.dim)]
    if not cbs.residual:
        parts.append(np.ascontiguousarray(cbs.rotation, dtype="<f4").tobytes())
    for cb in cbs.codebooks:
        parts.append(np.ascontiguousarray(cb, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_codebooks(path: str | Path) -> CodebookSet:
    raw = Path(path).read_bytes()
    magic = raw[:4]
    if magic not in (PSE_MAGIC, RQ_MAGIC):
        raise FormatError(f"{path}: bad codebook magic {magic!r}")
    n, M, d = struct.unpack_from("<III", raw, 4)
    off = 16
    residual = magic == RQ_MAGIC

    def take(count: int) -> np.ndarray:
        nonlocal off
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated codebook file")
        arr = np.frombuffer(raw[off:end], dtype="<f4").astype(np.float64)
        off = end
        return arr

    rotation = np.eye(d) if residual else take(d * d).reshape(d, d)
    s = d if residual else d // n
    codebooks = [take(M * s).reshape(M, s) for _ in range(n)]
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return CodebookSet(rotation=rotation, codebooks=codebooks, residual=residual)


def save_sid_map(path: str | Path, sids: Mapping[str, SemanticId]) -> None:
    body = "".join(f"{item}\t{','.join(map(str, sid))}\n" for item, sid in sids.items())
    atomic_write_text(path, body)


def load_sid_map(path: str | Path) -> dict[str, SemanticId]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                item, digits = line.split("\t")
                out[item] = tuple(int(v) for v in digits.split(","))
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed SID map line") from None
    return out
