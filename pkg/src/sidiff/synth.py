"""Synthetic catalog and interaction logs with learnable next-item structure.

Every item carries ``digits`` latent attributes, each taking one of
``levels`` values, and its embedding is the concatenation of one noisy
prototype per attribute, so a product quantizer can recover the attributes.
The first attribute doubles as the item's cluster.  Each cluster has a
hidden successor cycle; a user's next item is the successor of the current
one with probability ``p_follow``, a uniform draw from the whole catalog
with probability ``p_jump`` and otherwise a uniform draw from the current
cluster.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from sidiff.dataset import ItemEmbeddingTable, SemanticId, SplitSpec, save_embeddings, write_log_tsv
from sidiff.fileio import atomic_write_text



@dataclass
class SynthData:
    records: list[tuple[str, str, int]]
    table: ItemEmbeddingTable
    attributes: np.ndarray  # (items, digits)
    cluster_of: np.ndarray  # (items,)
    successor: np.ndarray  # (items,)
    p_follow: float
    p_jump: float = 0.0

    @property
    def item_ids(self) -> list[str]:
        return self.table.ids

    def transition_matrix(self) -> np.ndarray:
        """P(next = j | current = i)."""
        n_items = len(self.cluster_of)
        P = np.full((n_items, n_items), self.p_jump / n_items)
        stay = 1.0 - self.p_follow - self.p_jump
        for i in range(n_items):
            members = np.flatnonzero(self.cluster_of == self.cluster_of[i])
            P[i, members] += stay / len(members)
            P[i, self.successor[i]] += self.p_follow
        return P

    def describe(self) -> str:
        counts = np.bincount(self.cluster_of, minlength=int(self.attributes[:, 0].max(initial=0)) + 1)
        lines = [
            f"items={len(self.cluster_of)}",
            f"clusters={len(counts)}",
            f"p_follow={self.p_follow}",
            f"p_jump={self.p_jump}",
            "items_per_cluster=" + ",".join(map(str, counts)),
        ]
        for i, (c, s) in enumerate(zip(self.cluster_of, self.successor)):
            attrs = ",".join(map(str, self.attributes[i]))
            lines.append(f"{item_name(i)}\tcluster={c}\tattributes={attrs}\tsuccessor={item_name(s)}")
        return "\n".join(lines) + "\n"


def item_name(i: int) -> str:
    return f"item{i:04d}"


def generate(
    users: int,
    items: int,
    seed: int = 0,
    digits: int = 3,
    levels: int = 4,
    sub_dim: int = 8,
    p_follow: float = 0.8,
    p_jump: float = 0.1,
    min_len: int = 5,
    max_len: int = 12,
    proto_scale: float = 3.0,
    noise: float = 0.3,
) -> SynthData:
    """Deterministic per seed; embedding width is ``digits * sub_dim``."""
    rng = np.random.default_rng(seed)
    per_cluster = -(-items // levels)
    tails = levels ** (digits - 1)
    if per_cluster > tails:
        raise ValueError(f"{items} items do not fit in {levels}^{digits} distinct attribute tuples")
    cluster_of = np.arange(items) % levels
    attributes = np.empty((items, digits), dtype=np.int64)
    attributes[:, 0] = cluster_of
    for c in range(levels):
        members = np.flatnonzero(cluster_of == c)
        codes = rng.choice(tails, size=len(members), replace=False)
        for d in range(1, digits):
            attributes[members, d] = (codes // levels ** (digits - 1 - d)) % levels

    protos = rng.normal(size=(digits, levels, sub_dim)) * proto_scale
    vectors = np.concatenate([protos[d][attributes[:, d]] for d in range(digits)], axis=1)
    vectors = (vectors + rng.normal(size=vectors.shape) * noise).astype(np.float32)

    successor = np.empty(items, dtype=np.int64)
    for c in range(levels):
        cycle = rng.permutation(np.flatnonzero(cluster_of == c))
        if len(cycle):
            successor[cycle] = np.roll(cycle, -1)

    members_of = [np.flatnonzero(cluster_of == c) for c in range(levels)]
    records = []
    for u in range(users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(items))
        ts = int(rng.integers(0, 10_000))
        for _ in range(length):
            records.append((f"user{u:04d}", item_name(cur), ts))
            ts += int(rng.integers(1, 1000))
            u_draw = rng.random()
            if u_draw < p_follow:
                cur = int(successor[cur])
            elif u_draw < p_follow + p_jump:
                cur = int(rng.integers(items))
            else:
                cur = int(rng.choice(members_of[cluster_of[cur]]))
    # global time order interleaves users, as a real log would
    records.sort(key=lambda r: (r[2], r[0]))
    table = ItemEmbeddingTable(ids=[item_name(i) for i in range(items)], vectors=vectors)
    return SynthData(
        records=records, table=table, attributes=attributes, cluster_of=cluster_of,
        successor=successor, p_follow=p_follow, p_jump=p_jump,
    )


def write(data: SynthData, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {
        "log": out / "interactions.tsv",
        "embeddings": out / "items.side",
        "generator": out / "generator.txt",
    }
    write_log_tsv(paths["log"], data.records)
    save_embeddings(paths["embeddings"], data.table)
    atomic_write_text(paths["generator"], data.describe())
    return paths


def ceiling_recall(
    data: SynthData, split: SplitSpec, sids: Mapping[str, SemanticId], K: int = 10, which: str = "valid"
) -> float:
    """Recall@K of the generator's own transition law, ranked over SIDs.

    Every SID is scored by the total probability of the items carrying it
    given the true last item, which no model restricted to the same
    history can beat in expectation.
    """
    P = data.transition_matrix()
    index = {item: i for i, item in enumerate(data.item_ids)}
    hits = 0
    for us in split.users.values():
        ctx = us.valid_context if which == "valid" else us.test_context
        target = us.valid_target if which == "valid" else us.test_target
        probs: dict[SemanticId, float] = {}
        for j, p in enumerate(P[index[ctx[-1]]]):
            sid = sids[data.item_ids[j]]
            probs[sid] = probs.get(sid, 0.0) + p
        ranked = sorted(probs, key=lambda s: (-probs[s], s))[:K]
        hits += sids[target] in ranked
    return hits / len(split.users) if split.users else 0.0
