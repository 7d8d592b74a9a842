"""Bipartite soft matching and pair merging of tokens.

Tokens live in ``(n, D)`` or batched ``(B, n, D)`` arrays. A partition splits
the mergeable tokens (everything after ``offset`` protected tokens, e.g. CLS)
into a source set G1 and a destination set G2; each G1 token is matched to its
most cosine-similar G2 token and the ``r`` best-matched G1 tokens are pooled
into their partners.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, as_tensor, concat, gather_rows, scatter_mean_rows, transpose

# cosine similarities closer than this rank as ties (broken by index)
SIMILARITY_RESOLUTION = 1e-12

PARTITION_MODES = ("alternating", "random")
MERGE_MODES = ("weighted", "plain")


class PartitionError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class TokenPartition:
    """Absolute token indices of the two sides; ``offset`` protected tokens precede both."""

    g1_indices: np.ndarray
    g2_indices: np.ndarray
    offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "g1_indices", np.asarray(self.g1_indices, dtype=np.intp))
        object.__setattr__(self, "g2_indices", np.asarray(self.g2_indices, dtype=np.intp))

    @property
    def n(self) -> int:
        return self.g1_indices.size + self.g2_indices.size


@dataclass(frozen=True)
class MatchResult:
    """Selected pairs ``(src[k], dst[k])`` with their cosine scores.

    Arrays have shape ``(r,)`` for one image or ``(B, r)`` for a batch; scores
    are non-increasing along the last axis.
    """

    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray

    @property
    def r(self) -> int:
        return self.src.shape[-1]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        if self.src.ndim != 1:
            raise ValueError("pairs is only defined for an unbatched match")
        return [(int(m), int(n)) for m, n in zip(self.src, self.dst)]

    @classmethod
    def empty(cls, batch: tuple[int, ...] = ()) -> "MatchResult":
        z = np.zeros(batch + (0,), dtype=np.intp)
        return cls(z, z.copy(), np.zeros(batch + (0,)))


def partition_tokens(n: int, mode: str = "alternating", rng: Rng | None = None, offset: int = 0) -> TokenPartition:
    """Split ``n`` mergeable tokens into G1 (``floor(n/2)`` tokens) and G2 (the rest).

    ``alternating`` puts even mergeable positions in G1 and odd ones in G2;
    ``random`` draws a permutation from ``rng``. Both sides are returned in
    ascending index order.
    """
    if n < 2:
        raise PartitionError(f"need at least 2 mergeable tokens, got {n}")
    half = n // 2
    if mode == "alternating":
        g1 = np.arange(0, 2 * half, 2)
        g2 = np.setdiff1d(np.arange(n), g1)
    elif mode == "random":
        if rng is None:
            raise PartitionError("random partition needs an rng")
        perm = rng.permutation(n)
        g1, g2 = np.sort(perm[:half]), np.sort(perm[half:])
    else:
        raise PartitionError(f"unknown partition mode {mode!r}")
    return TokenPartition(g1 + offset, g2 + offset, offset)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine between rows of ``a`` (..., p, D) and ``b`` (..., q, D); zero rows give -inf."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (a / na) @ np.swapaxes(b / nb, -1, -2)
    bad = (na == 0) | np.swapaxes(nb == 0, -1, -2)
    return np.where(bad, -np.inf, sim)


def match_pairs(x, part: TokenPartition, r: int) -> MatchResult:
    """Select the ``r`` G1 tokens whose best G2 match is most similar.

    Ties are broken by lower G1 index, then lower G2 index. Tokens with zero
    norm score ``-inf`` and are ranked last.
    """
    feats = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    if r < 0 or r > part.g1_indices.size:
        raise ScheduleError(f"cannot merge {r} pairs with |G1| = {part.g1_indices.size}")
    batch = feats.shape[:-2]
    if r == 0:
        return MatchResult.empty(batch)
    sim = cosine_similarity(feats[..., part.g1_indices, :], feats[..., part.g2_indices, :])
    sim = np.where(np.isfinite(sim), np.round(sim / SIMILARITY_RESOLUTION) * SIMILARITY_RESOLUTION, sim)
    best_dst = np.argmax(sim, axis=-1)  # first maximum -> lowest G2 index
    best = np.take_along_axis(sim, best_dst[..., None], axis=-1)[..., 0]
    order = np.argsort(-best, axis=-1, kind="stable")[..., :r]  # stable -> lowest G1 index
    src = part.g1_indices[order]
    dst = part.g2_indices[np.take_along_axis(best_dst, order, axis=-1)]
    scores = np.take_along_axis(best, order, axis=-1)
    return MatchResult(src, dst, scores)


def group_matrices(x, match: MatchResult) -> tuple[Tensor, Tensor]:
    """Source and destination tokens as column matrices ``(..., D, r)``."""
    x = as_tensor(x)
    m_s = transpose(gather_rows(x, match.src))
    m_t = transpose(gather_rows(x, match.dst))
    return m_s, m_t


def merge_pairs(x, sizes, match: MatchResult, modulated_Ms=None, mode: str = "weighted"):
    """Pool every selected source token into its destination.

    ``sizes`` counts the original patches behind each token. In ``weighted``
    mode the pooled value is the size-weighted mean; ``plain`` averages the
    contributing tokens uniformly. ``modulated_Ms`` (``(..., D, r)``) replaces
    the source values when given. Unselected tokens keep their relative order.
    Returns ``(x', sizes')`` with ``n - r`` tokens.
    """
    if mode not in MERGE_MODES:
        raise ValueError(f"unknown merge mode {mode!r}")
    x = as_tensor(x)
    sizes = np.asarray(sizes)
    r = match.r
    if r == 0:
        return x, sizes.copy()
    unbatched = x.ndim == 2
    if unbatched:
        x = x.reshape((1,) + x.shape)
        sizes = sizes[None]
        match = MatchResult(match.src[None], match.dst[None], match.scores[None])
        if modulated_Ms is not None:
            modulated_Ms = as_tensor(modulated_Ms).reshape((1,) + modulated_Ms.shape)
    B, n = x.shape[0], x.shape[1]
    rows = np.arange(B)[:, None]

    keep_mask = np.ones((B, n), dtype=bool)
    keep_mask[rows, match.src] = False
    keep_idx = np.nonzero(keep_mask)[1].reshape(B, n - r)
    out_pos = np.cumsum(keep_mask, axis=1) - 1
    dst_pos = out_pos[rows, match.dst]

    src_vals = gather_rows(x, match.src) if modulated_Ms is None else transpose(as_tensor(modulated_Ms))
    values = concat([gather_rows(x, keep_idx), src_vals], axis=1)
    targets = np.concatenate([np.broadcast_to(np.arange(n - r), (B, n - r)), dst_pos], axis=1)
    kept_sizes = sizes[rows, keep_idx]
    src_sizes = sizes[rows, match.src]
    if mode == "weighted":
        weights = np.concatenate([kept_sizes, src_sizes], axis=1)
    else:
        weights = np.ones(targets.shape)
    merged = scatter_mean_rows(values, targets, weights, n_out=n - r)

    new_sizes = kept_sizes.copy()
    np.add.at(new_sizes, (np.broadcast_to(rows, dst_pos.shape), dst_pos), src_sizes)
    if unbatched:
        return merged.reshape(merged.shape[1:]), new_sizes[0]
    return merged, new_sizes
