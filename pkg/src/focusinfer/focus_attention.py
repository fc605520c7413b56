"""Confidence-guided query selection and sink-aware sparse attention.

A non-entry decode step does not forward the whole block. Instead:

  1. The positions most likely to unmask next are predicted from the previous
     step's confidence scores (select_focus), then widened by a local window
     (expand_window) to form the active query set.
  2. Early layers attend densely. At the last dense layer, a per-token sink
     score over the prompt is computed from the mean active query; the top
     scorers are kept as attention sinks by all deeper layers.
  3. Sparse layers score each prompt block by the dot product of the mean
     focus query with the block's mean key, keep the top fraction alpha of
     blocks, and attend over (sinks ∪ kept blocks) plus every response
     position. Response rows are never pruned.

All index sets produced here are ascending and duplicate-free, and every
score-based selection breaks ties toward the lowest index, so results are
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, UsageError
from .kv_cache import KVCache

QUERY_AGGS = ("mean", "sum-softmax")


@dataclass(frozen=True)
class FocusConfig:
    """Sparse-attention hyperparameters.

    rho scales how many unmask candidates are predicted per step; window
    widens them into the active query set; dense_layers keeps the first
    layers (and trailing_dense_layers the last ones) at full attention;
    alpha is the fraction of prompt blocks retained; sink_fraction sizes the
    always-kept sink set relative to the prompt.
    """

    rho: float = 4.0
    window: int = 8
    dense_layers: int = 6
    trailing_dense_layers: int = 0
    alpha: float = 0.5
    sink_fraction: float = 0.01
    prompt_block_size: int = 64
    query_agg: str = "mean"
    sink_recompute: bool = False

    def validate(self, num_layers: int) -> None:
        if self.rho < 1:
            raise ConfigError(f"rho must be >= 1, got {self.rho}")
        if self.window < 0:
            raise ConfigError(f"window must be >= 0, got {self.window}")
        if not (0 < self.alpha <= 1):
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not (0 <= self.sink_fraction <= 1):
            raise ConfigError(
                f"sink_fraction must be in [0, 1], got {self.sink_fraction}"
            )
        if not (1 <= self.dense_layers <= num_layers):
            raise ConfigError(
                f"dense_layers must be in [1, {num_layers}], got {self.dense_layers}"
            )
        if self.trailing_dense_layers < 0:
            raise ConfigError(
                f"trailing_dense_layers must be >= 0, got {self.trailing_dense_layers}"
            )
        if self.dense_layers + self.trailing_dense_layers > num_layers:
            raise ConfigError(
                f"dense_layers + trailing_dense_layers exceeds num_layers "
                f"({self.dense_layers} + {self.trailing_dense_layers} > {num_layers})"
            )
        if self.prompt_block_size < 1:
            raise ConfigError(
                f"prompt_block_size must be >= 1, got {self.prompt_block_size}"
            )
        if self.query_agg not in QUERY_AGGS:
            raise ConfigError(f"query_agg must be one of {QUERY_AGGS}, got {self.query_agg!r}")

    def n_sink_for(self, prompt_len: int) -> int:
        # round-half-to-even, same convention as the focus count k
        return int(round(self.sink_fraction * prompt_len))

    def sparse_layers(self, num_layers: int) -> tuple[int, ...]:
        return tuple(range(self.dense_layers, num_layers - self.trailing_dense_layers))

    @property
    def probe_layer(self) -> int:
        """Last dense layer, where sinks are identified."""
        return self.dense_layers - 1


@dataclass(frozen=True)
class AttentionIndexSet:
    """Index sets chosen for one step (at the first sparse layer)."""

    focus: tuple[int, ...]
    active: tuple[int, ...]
    sinks: tuple[int, ...]
    relevant_blocks: tuple[int, ...]
    prompt_selected: tuple[int, ...]

    def validate(self, prompt_len: int, blocks: Sequence[tuple[int, int]]) -> None:
        for name in ("focus", "active", "sinks", "prompt_selected"):
            seq = getattr(self, name)
            if list(seq) != sorted(set(seq)):
                raise UsageError(f"{name} must be ascending and duplicate-free")
        if not set(self.focus) <= set(self.active):
            raise UsageError("focus must be a subset of active")
        if self.sinks and (self.sinks[0] < 0 or self.sinks[-1] >= prompt_len):
            raise UsageError("sinks must lie in the prompt region")
        rebuilt = assemble_index_set(self.sinks, self.relevant_blocks, blocks)
        if tuple(self.prompt_selected) != rebuilt:
            raise UsageError("prompt_selected is not sinks ∪ relevant block members")


def top_by_score(scores, k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, ties to the lowest index, ascending."""
    scores = np.asarray(scores)
    if k <= 0:
        return ()
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def select_focus(
    confidence: Mapping[int, float],
    n_t: int,
    rho: float,
    block_masked: Sequence[int],
) -> tuple[int, ...]:
    """Predict the k = round(rho * n_t) positions most likely to unmask next.

    Candidates are the still-masked positions of the current block, ranked by
    the previous step's confidence. k rounds half to even and is clamped to
    [1, len(block_masked)]; n_t = 0 yields the empty set.
    """
    if n_t == 0:
        return ()
    block_masked = sorted(block_masked)
    if not block_masked:
        raise UsageError("no masked positions in block but n_t > 0")
    missing = [p for p in block_masked if p not in confidence]
    if missing:
        raise UsageError(f"no prior confidence for masked positions {missing[:4]}")
    k = int(round(rho * n_t))
    k = max(1, min(k, len(block_masked)))
    ranked = sorted(block_masked, key=lambda p: (-confidence[p], p))
    return tuple(sorted(ranked[:k]))


def expand_window(
    focus: Sequence[int], window: int, block_bounds: tuple[int, int]
) -> tuple[int, ...]:
    """Union of half-open windows [i - w//2, i + w//2] clamped to the block."""
    start, end = block_bounds
    if any(i < start or i >= end for i in focus):
        raise UsageError(f"focus positions outside block bounds [{start}, {end})")
    half = window // 2
    out: set[int] = set()
    for i in focus:
        out.update(range(max(start, i - half), min(end, i + half + 1)))
    return tuple(sorted(out))


def sink_scores(
    probe_q: np.ndarray, prompt_keys: np.ndarray, query_agg: str = "mean"
) -> np.ndarray:
    """Head-averaged softmax attention mass each prompt token receives.

    probe_q is (heads, A, d) of active queries at the probe layer and
    prompt_keys is (heads, M, d). With query_agg="mean" each head contributes
    Softmax_j(q_bar . K_j / sqrt(d)) for its mean query q_bar; "sum-softmax"
    instead sums each query's softmax row. Scores are over prompt positions
    only.
    """
    probe_q = np.ascontiguousarray(probe_q, dtype=np.float32)
    prompt_keys = np.ascontiguousarray(prompt_keys, dtype=np.float32)
    if probe_q.ndim != 3 or prompt_keys.ndim != 3:
        raise UsageError("probe_q and prompt_keys must be (heads, rows, head_dim)")
    if probe_q.shape[1] == 0:
        raise UsageError("probe_q has no query rows")
    heads, _, d = probe_q.shape
    scale = np.float32(1.0 / math.sqrt(d))
    per_head = np.empty((heads, prompt_keys.shape[1]), dtype=np.float32)
    for h in range(heads):
        kt = np.ascontiguousarray(prompt_keys[h].T)
        if query_agg == "mean":
            qbar = np.mean(probe_q[h], axis=0).reshape(1, -1)
            per_head[h] = tc.row_softmax(tc.matmul(qbar, kt) * scale)[0]
        elif query_agg == "sum-softmax":
            probs = tc.row_softmax(tc.matmul(probe_q[h], kt) * scale)
            per_head[h] = np.sum(probs, axis=0)
        else:
            raise ConfigError(f"query_agg must be one of {QUERY_AGGS}, got {query_agg!r}")
    return np.mean(per_head, axis=0)


def identify_sinks(
    probe_q: np.ndarray,
    prompt_keys: np.ndarray,
    n_sink: int,
    query_agg: str = "mean",
) -> tuple[int, ...]:
    """The n_sink prompt positions with the highest sink score, ascending."""
    M = prompt_keys.shape[1]
    if n_sink > M:
        raise ConfigError(f"n_sink {n_sink} exceeds prompt length {M}")
    if n_sink == 0:
        return ()
    return top_by_score(sink_scores(probe_q, prompt_keys, query_agg), n_sink)


def block_relevance(
    focus_q: np.ndarray, block_means: np.ndarray, query_agg: str = "mean"
) -> np.ndarray:
    """Raw dot product of the aggregated focus query with each block mean key.

    focus_q is (heads, F, d); block_means is (heads, n_blocks, d). No softmax
    and no sqrt(d) scaling here; scores are head-averaged. "sum-softmax"
    aggregation sums per-query dots instead of averaging the queries.
    """
    focus_q = np.ascontiguousarray(focus_q, dtype=np.float32)
    block_means = np.ascontiguousarray(block_means, dtype=np.float32)
    if focus_q.shape[1] == 0:
        raise UsageError("focus_q has no query rows")
    heads = focus_q.shape[0]
    n_blocks = block_means.shape[1]
    per_head = np.empty((heads, n_blocks), dtype=np.float32)
    for h in range(heads):
        mt = np.ascontiguousarray(block_means[h].T)
        if query_agg == "mean":
            qbar = np.mean(focus_q[h], axis=0).reshape(1, -1)
            per_head[h] = tc.matmul(qbar, mt)[0]
        elif query_agg == "sum-softmax":
            per_head[h] = np.sum(tc.matmul(focus_q[h], mt), axis=0)
        else:
            raise ConfigError(f"query_agg must be one of {QUERY_AGGS}, got {query_agg!r}")
    return np.mean(per_head, axis=0)


def select_blocks(scores, alpha: float, n_blocks: int) -> tuple[int, ...]:
    """Top C = floor(alpha * n_blocks) block ids by score, ascending.

    C is raised to 1 when the floor would otherwise leave no prompt context.
    """
    scores = np.asarray(scores)
    if scores.shape != (n_blocks,):
        raise UsageError(f"expected {n_blocks} scores, got shape {scores.shape}")
    if not (0 < alpha <= 1):
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    if n_blocks == 0:
        return ()
    c = max(1, int(math.floor(alpha * n_blocks)))
    return top_by_score(scores, c)


def assemble_index_set(
    sinks: Sequence[int],
    relevant_blocks: Sequence[int],
    blocks: Sequence[tuple[int, int]],
) -> tuple[int, ...]:
    """I_p = sinks ∪ members of the relevant blocks, deduplicated, ascending."""
    out = set(int(i) for i in sinks)
    for b in relevant_blocks:
        if not (0 <= b < len(blocks)):
            raise UsageError(f"block id {b} out of range for {len(blocks)} blocks")
        s, e = blocks[b]
        out.update(range(s, e))
    return tuple(sorted(out))


def build_sparse_context(
    prompt_selected: Sequence[int],
    prompt_keys: np.ndarray,
    prompt_values: np.ndarray,
    resp_keys: np.ndarray,
    resp_values: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Context rows: prompt rows at prompt_selected, then all response rows."""
    idx = np.asarray(list(prompt_selected), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= prompt_keys.shape[1]):
        raise UsageError(f"prompt index out of range [0, {prompt_keys.shape[1]})")
    k_ctx = np.concatenate([prompt_keys[:, idx, :], resp_keys], axis=1)
    v_ctx = np.concatenate([prompt_values[:, idx, :], resp_values], axis=1)
    return k_ctx, v_ctx


def sparse_attend(
    active_q: np.ndarray,
    prompt_selected: Sequence[int],
    prompt_keys: np.ndarray,
    prompt_values: np.ndarray,
    resp_keys: np.ndarray,
    resp_values: np.ndarray,
    return_probs: bool = False,
):
    """Scaled softmax attention over the pruned context.

    The context is prompt rows at prompt_selected (ascending) followed by
    every response row in position order; with prompt_selected covering the
    whole prompt this is bit-identical to full attention because row order
    and accumulation order coincide.
    """
    k_ctx, v_ctx = build_sparse_context(
        prompt_selected, prompt_keys, prompt_values, resp_keys, resp_values
    )
    return tc.attend(active_q, k_ctx, v_ctx, return_probs=return_probs)


class FocusStepPlanner:
    """Per-layer context provider for one non-entry focus step.

    Dense layers refresh the cache at the active positions and attend over
    the full cached sequence. At the last dense layer the planner computes
    sink scores over the prompt; sparse layers then score prompt blocks with
    the focus queries and attend over the pruned context. With
    ``strict_refresh`` the cache write is skipped at sparse layers (the fresh
    active rows still supersede cached ones inside the step's own context).

    The planner records per-layer context sizes, the chosen index sets, and
    (with sink_recompute) per-layer sink score snapshots for analysis.
    """

    def __init__(
        self,
        cache: KVCache,
        cfg: FocusConfig,
        num_layers: int,
        focus: Sequence[int],
        active: Sequence[int],
        strict_refresh: bool = False,
    ):
        self.cache = cache
        self.cfg = cfg
        self.focus = tuple(focus)
        self.active = tuple(active)
        self.strict_refresh = strict_refresh
        self.prompt_len = cache.prompt_len
        self.n_sink = cfg.n_sink_for(self.prompt_len)
        self.sparse = set(cfg.sparse_layers(num_layers))
        self.sinks: tuple[int, ...] = ()
        self.sink_snapshots: dict[int, np.ndarray] = {}
        self.index_set: AttentionIndexSet | None = None
        self.attended: list[int] = []
        self.prompt_kept: dict[int, int] = {}
        self.refreshed_layers: list[int] = []
        row_of = {p: r for r, p in enumerate(self.active)}
        missing = [p for p in self.focus if p not in row_of]
        if missing:
            raise UsageError(f"focus positions {missing[:4]} not in active set")
        self._focus_rows = np.asarray([row_of[p] for p in self.focus], dtype=np.int64)

    def _prompt_rows(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        M = self.prompt_len
        return (
            self.cache.layer_keys(layer)[:, :M, :],
            self.cache.layer_values(layer)[:, :M, :],
        )

    def layer_context(self, layer, q, k, v):
        cache = self.cache
        if layer in self.sparse:
            if not self.strict_refresh:
                cache.refresh_at(layer, self.active, k, v)
                self.refreshed_layers.append(layer)
            cache.require_all_valid(layer)
            prompt_k, prompt_v = self._prompt_rows(layer)
            if self.cfg.sink_recompute:
                scores = sink_scores(q, prompt_k, self.cfg.query_agg)
                self.sink_snapshots[layer] = scores
                sinks = top_by_score(scores, self.n_sink)
            else:
                sinks = self.sinks
            rel = select_blocks(
                block_relevance(q[:, self._focus_rows, :], cache.prompt_means(layer), self.cfg.query_agg),
                self.cfg.alpha,
                len(cache.blocks),
            )
            selected = assemble_index_set(sinks, rel, cache.blocks)
            if self.index_set is None:
                self.index_set = AttentionIndexSet(
                    focus=self.focus,
                    active=self.active,
                    sinks=sinks,
                    relevant_blocks=rel,
                    prompt_selected=selected,
                )
            M = self.prompt_len
            if self.strict_refresh:
                resp_k = cache.layer_keys(layer)[:, M:, :].copy()
                resp_v = cache.layer_values(layer)[:, M:, :].copy()
                rows = np.asarray(self.active, dtype=np.int64) - M
                resp_k[:, rows, :] = k
                resp_v[:, rows, :] = v
            else:
                resp_k = cache.layer_keys(layer)[:, M:, :]
                resp_v = cache.layer_values(layer)[:, M:, :]
            self.prompt_kept[layer] = len(selected)
            self.attended.append(len(selected) + resp_k.shape[1])
            return build_sparse_context(selected, prompt_k, prompt_v, resp_k, resp_v)

        # dense layer: full attention over the refreshed cache
        cache.refresh_at(layer, self.active, k, v)
        self.refreshed_layers.append(layer)
        cache.require_all_valid(layer)
        if layer == self.cfg.probe_layer and self.sparse:
            prompt_k, _ = self._prompt_rows(layer)
            scores = sink_scores(q, prompt_k, self.cfg.query_agg)
            self.sink_snapshots[layer] = scores
            self.sinks = top_by_score(scores, self.n_sink)
        self.attended.append(cache.seq_len)
        return cache.layer_keys(layer), cache.layer_values(layer)
