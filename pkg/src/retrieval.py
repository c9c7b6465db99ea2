"""
Leakage-safe exact top-k retrieval over historical windows.

The candidate pool is cut from the training split only. Each candidate is a
length-``m`` window followed by its ``H``-step future; similarity is cosine
over flattened windows after removing each channel's window mean. The scan
is exhaustive: one matrix product per batch of queries.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from dataset import TimeSeriesDataset
from errors import ConfigurationError, ContractError, DimensionError, LeakageError


logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
# ranking resolution: similarities closer than this tie and fall back to origin order
SIMILARITY_DECIMALS = 12


@dataclass(frozen=True)
class RetrievedSegment:
    window: np.ndarray
    future: np.ndarray
    similarity: float
    origin: int


@dataclass(frozen=True)
class RetrievedSet:
    """Top-k segments, similarity descending, ties broken by smaller origin."""
    segments: List[RetrievedSegment] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def similarities(self) -> np.ndarray:
        return np.array([s.similarity for s in self.segments], dtype=np.float64)

    @property
    def origins(self) -> List[int]:
        return [s.origin for s in self.segments]


class RetrievalIndex:
    """
    Candidate pool over a training series.

    A candidate's ``origin`` is the index of its first future row: its window
    spans ``[origin - m, origin)`` and its future ``[origin, origin + H)``.
    """

    def __init__(self, series: np.ndarray, m: int, horizon: int, stride: int = 1):
        series = np.ascontiguousarray(series, dtype=np.float64)
        if series.ndim != 2:
            raise DimensionError(f"Retrieval series must be (timesteps, channels), got {series.shape}")
        if m < 1 or horizon < 1 or stride < 1:
            raise ConfigurationError(f"m, H and stride must be >= 1, got {m}, {horizon}, {stride}")
        if m + horizon > series.shape[0]:
            raise ConfigurationError(
                f"m + H = {m + horizon} exceeds the {series.shape[0]}-row training split"
            )
        self.series = series
        self.m = m
        self.horizon = horizon
        self.stride = stride
        self.origins = np.arange(m, series.shape[0] - horizon + 1, stride, dtype=np.int64)

        windows = np.lib.stride_tricks.sliding_window_view(series, m, axis=0)[self.origins - m]
        # sliding_window_view puts the window axis last: (n, C, m) -> (n, m, C)
        centered = windows.transpose(0, 2, 1) - windows.mean(axis=2)[:, None, :]
        self._centered = np.ascontiguousarray(centered)
        self.keys = self._centered.reshape(len(self.origins), -1)
        self.norms = np.linalg.norm(self.keys, axis=1)
        self._channel_norms: Optional[np.ndarray] = None
        logger.info(
            f"Built retrieval index: {len(self.origins)} candidates, m={m}, H={horizon}, "
            f"stride={stride}, {series.shape[1]} channels"
        )

    @property
    def n_candidates(self) -> int:
        return len(self.origins)

    @property
    def n_channels(self) -> int:
        return self.series.shape[1]

    @property
    def channel_norms(self) -> np.ndarray:
        if self._channel_norms is None:
            self._channel_norms = np.linalg.norm(self._centered, axis=1)
        return self._channel_norms

    def window(self, origin: int) -> np.ndarray:
        return self.series[origin - self.m:origin]

    def future(self, origin: int) -> np.ndarray:
        return self.series[origin:origin + self.horizon]

    @property
    def candidates(self):
        """Iterate ``(window, future, origin)`` triples."""
        for origin in self.origins:
            yield self.window(int(origin)), self.future(int(origin)), int(origin)

    def eligible(self, query_origin: int) -> np.ndarray:
        """Mask of candidates whose whole span ends before the query window starts."""
        return self.origins + self.horizon <= query_origin - self.m

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save(self, path: Path) -> None:
        np.savez(
            path,
            format_version=INDEX_FORMAT_VERSION,
            series=self.series,
            origins=self.origins,
            m=self.m,
            horizon=self.horizon,
            stride=self.stride,
        )
        logger.info(f"Saved retrieval index to {path}")

    @classmethod
    def load(cls, path: Path) -> 'RetrievalIndex':
        with np.load(path) as archive:
            version = int(archive['format_version'])
            if version != INDEX_FORMAT_VERSION:
                raise ConfigurationError(f"Unsupported retrieval index format {version} in {path}")
            index = cls(archive['series'], int(archive['m']), int(archive['horizon']), int(archive['stride']))
            if not np.array_equal(index.origins, archive['origins']):
                raise ConfigurationError(f"Retrieval index {path} has inconsistent origins")
        return index


def build_index(ds: TimeSeriesDataset, m: int, horizon: int, stride: int = 1) -> RetrievalIndex:
    """Build the candidate pool from the standardized training split of ``ds``."""
    train_end, _ = ds.split_bounds
    if m + horizon > train_end:
        raise ConfigurationError(
            f"m + H = {m + horizon} exceeds the training split of {ds.name!r} ({train_end} rows)"
        )
    return RetrievalIndex(ds.matrix()[:train_end], m, horizon, stride)


def _center(queries: np.ndarray) -> np.ndarray:
    return queries - queries.mean(axis=1, keepdims=True)


def _similarities(index: RetrievalIndex, queries: np.ndarray, channel_independent: bool) -> np.ndarray:
    """Cosine similarity of each query against every candidate, shape ``(B, n)``."""
    centered = _center(queries)
    with np.errstate(divide='ignore', invalid='ignore'):
        if channel_independent:
            # mean over channels of per-channel cosines
            dots = np.einsum('bmc,nmc->bnc', centered, index._centered)
            q_norms = np.linalg.norm(centered, axis=1)
            denom = q_norms[:, None, :] * index.channel_norms[None, :, :]
            sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0).mean(axis=2)
        else:
            flat = centered.reshape(centered.shape[0], -1)
            dots = flat @ index.keys.T
            denom = np.linalg.norm(flat, axis=1)[:, None] * index.norms[None, :]
            sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(sims, -1.0, 1.0)


def cosine_topk_batch(
    index: RetrievalIndex,
    queries: np.ndarray,
    query_origins: Sequence[int],
    k: int,
    channel_independent: bool = False,
) -> List[RetrievedSet]:
    """Exact top-k for a batch of ``(B, m, C)`` queries."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 3 or queries.shape[1:] != (index.m, index.n_channels):
        raise DimensionError(
            f"Queries must be (batch, {index.m}, {index.n_channels}), got {queries.shape}"
        )
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(query_origins) != queries.shape[0]:
        raise DimensionError(f"{len(query_origins)} origins for {queries.shape[0]} queries")

    sims = np.round(_similarities(index, queries, channel_independent), SIMILARITY_DECIMALS)
    results = []
    for row, query_origin in zip(sims, query_origins):
        eligible = np.flatnonzero(index.eligible(int(query_origin)))
        if eligible.size == 0:
            results.append(RetrievedSet())
            continue
        # primary key: similarity descending; secondary: origin ascending
        order = np.lexsort((index.origins[eligible], -row[eligible]))[:k]
        chosen = eligible[order]
        results.append(RetrievedSet([
            RetrievedSegment(
                window=index.window(int(index.origins[i])),
                future=index.future(int(index.origins[i])),
                similarity=float(row[i]),
                origin=int(index.origins[i]),
            )
            for i in chosen
        ]))
    return results


def cosine_topk(
    index: RetrievalIndex,
    query: np.ndarray,
    query_origin: int,
    k: int,
    channel_independent: bool = False,
) -> RetrievedSet:
    """Exact top-k for a single ``(m, C)`` query whose first target row is ``query_origin``."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim == 1:
        query = query[:, None]
    return cosine_topk_batch(index, query[None], [query_origin], k, channel_independent)[0]


def similarity_weights(rs: RetrievedSet, temperature: float) -> np.ndarray:
    """softmax(similarities / temperature)."""
    if len(rs) == 0:
        raise ContractError("Cannot weight an empty retrieved set")
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    logits = rs.similarities / temperature
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def aggregate_futures(rs: RetrievedSet, temperature: float) -> np.ndarray:
    """Similarity-softmax-weighted average of the retrieved futures, ``(H, C)``."""
    weights = similarity_weights(rs, temperature)
    return np.tensordot(weights, np.stack([s.future for s in rs.segments]), axes=1)


def aggregate_windows(rs: RetrievedSet, temperature: float) -> np.ndarray:
    """Same weighting as :func:`aggregate_futures`, applied to the matched windows."""
    weights = similarity_weights(rs, temperature)
    return np.tensordot(weights, np.stack([s.window for s in rs.segments]), axes=1)


def check_no_leakage(rs: RetrievedSet, query_origin: int, horizon: int) -> None:
    """Raise LeakageError if any retrieved future reaches the query's target span."""
    for segment in rs.segments:
        if segment.origin + horizon > query_origin:
            raise LeakageError(
                f"Retrieved future [{segment.origin}, {segment.origin + horizon}) does not precede "
                f"the target span starting at {query_origin}"
            )
