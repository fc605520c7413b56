"""The iterative denoising loop for masked-diffusion decoding.

A sequence starts as prompt tokens followed by gen_len mask tokens. The
response region is split into fixed-length blocks decoded left to right;
within a block, each step forwards some positions, reads the masked ones'
logits, and commits the n highest-confidence predictions (greedy argmax,
ties to the lowest position).

Three run modes share this loop and differ only in what gets forwarded and
what context attention sees:

  vanilla  every step forwards all positions with full attention, no cache.
  cache    the first step of each block forwards everything and fully
           refreshes the KV cache; other steps forward only the current
           block's positions with full attention over the cache.
  focus    as `cache` at block entries; other steps forward only the
           confidence-predicted active set and use sparse attention in the
           deeper layers (see focus_attention).

Every step appends a StepTrace; replaying a trace's unmask decisions
reproduces the final sequence exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as model_mod
from . import tensor_core as tc
from .errors import ConfigError, ScheduleError, UsageError
from .focus_attention import (
    FocusConfig,
    FocusStepPlanner,
    expand_window,
    select_focus,
)
from .kv_cache import KVCache

MODES = ("vanilla", "cache", "focus")


@dataclass
class SequenceState:
    """Token state at one denoising step.

    tokens[i] equals the mask token exactly for the positions in `masked`;
    prompt positions are never masked. `confidence` and `predicted` hold the
    latest per-position argmax results for masked positions (values from the
    most recent step that forwarded each position).
    """

    tokens: np.ndarray
    prompt_len: int
    masked: set[int]
    confidence: dict[int, float]
    predicted: dict[int, int]
    step: int = 0


@dataclass(frozen=True)
class DecodeSchedule:
    """Block tiling of the response region and per-step unmask counts."""

    gen_len: int
    total_steps: int
    block_len: int
    blocks: tuple[tuple[int, int], ...]  # relative to the response region
    steps_per_block: int
    tokens_per_step: tuple[int, ...]


@dataclass
class StepTrace:
    step: int
    block_index: int
    block_bounds: tuple[int, int]  # absolute sequence positions
    is_entry: bool
    n: int
    focus: tuple[int, ...]
    active: tuple[int, ...]
    sinks: tuple[int, ...]
    relevant_blocks: tuple[int, ...]
    prompt_selected: tuple[int, ...]
    attended_per_layer: tuple[int, ...]
    sparse_prompt_kept: tuple[tuple[int, int], ...]
    refreshed_layers: tuple[int, ...]
    unmasked: tuple[tuple[int, int], ...]  # (position, committed token)
    nanos: int
    confidences: dict[int, float] | None


@dataclass
class DecodeSettings:
    gen_len: int
    total_steps: int
    block_len: int = 32
    focus: FocusConfig = field(default_factory=FocusConfig)
    strict_alg1: bool = False
    record_confidences: bool = True


@dataclass
class DecodeResult:
    tokens: np.ndarray
    traces: list[StepTrace]
    state: SequenceState


@dataclass
class ForwardEvent:
    """Snapshot handed to on_forward hooks after a step's forward pass."""

    step: int
    is_entry: bool
    block_bounds: tuple[int, int]
    n: int
    active: tuple[int, ...]
    logits: np.ndarray | None
    planner: FocusStepPlanner | None


@dataclass
class DecodeRun:
    """Live view of a decode passed to hooks; do not mutate from hooks."""

    weights: model_mod.ModelWeights
    settings: DecodeSettings
    mode: str
    schedule: DecodeSchedule
    state: SequenceState
    cache: KVCache | None


@dataclass
class DecodeHooks:
    on_step_start: Callable[[DecodeRun, int], None] | None = None
    on_forward: Callable[[DecodeRun, int, ForwardEvent], None] | None = None
    on_step_end: Callable[[DecodeRun, StepTrace], None] | None = None
    layer_hooks: tuple[model_mod.LayerForwardHook, ...] = ()


def init_sequence(prompt: Sequence[int], gen_len: int, mask_token_id: int) -> SequenceState:
    """Prompt tokens followed by gen_len masks; all response positions masked."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size == 0:
        raise UsageError("prompt must be a nonempty 1-D sequence of token ids")
    if gen_len < 1:
        raise UsageError(f"gen_len must be >= 1, got {gen_len}")
    if np.any(prompt == mask_token_id):
        raise UsageError("prompt must not contain the mask token")
    m = int(prompt.size)
    tokens = np.concatenate([prompt, np.full(gen_len, mask_token_id, dtype=np.int64)])
    return SequenceState(
        tokens=tokens,
        prompt_len=m,
        masked=set(range(m, m + gen_len)),
        confidence={},
        predicted={},
        step=0,
    )


def build_schedule(gen_len: int, total_steps: int, block_len: int) -> DecodeSchedule:
    """Even block tiling with per-block unmask counts front-loaded.

    Within a block, block_len tokens are spread over steps_per_block steps as
    evenly as possible; remainder tokens go to the earliest steps.
    """
    if gen_len < 1 or block_len < 1 or total_steps < 1:
        raise ConfigError("gen_len, total_steps, and block_len must all be >= 1")
    if gen_len % block_len != 0:
        raise ConfigError(f"block_len {block_len} does not divide gen_len {gen_len}")
    n_blocks = gen_len // block_len
    if total_steps % n_blocks != 0:
        raise ConfigError(
            f"total_steps {total_steps} not divisible by {n_blocks} blocks"
        )
    steps_per_block = total_steps // n_blocks
    base, rem = divmod(block_len, steps_per_block)
    per_block = [base + 1 if s < rem else base for s in range(steps_per_block)]
    blocks = tuple((b * block_len, (b + 1) * block_len) for b in range(n_blocks))
    tokens_per_step = tuple(per_block[t % steps_per_block] for t in range(total_steps))
    return DecodeSchedule(
        gen_len=gen_len,
        total_steps=total_steps,
        block_len=block_len,
        blocks=blocks,
        steps_per_block=steps_per_block,
        tokens_per_step=tokens_per_step,
    )


def confidence_from_logits(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy prediction per row: argmax token and its softmax probability.

    Argmax ties resolve to the lowest token id. Returns (predicted ids,
    confidences), one entry per input row.
    """
    probs = tc.row_softmax(logits)
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(probs.shape[0]), pred]
    return pred.astype(np.int64), conf


def select_unmask(
    state: SequenceState, n: int, block_bounds: tuple[int, int]
) -> tuple[int, ...]:
    """Commit the n highest-confidence masked positions of the current block.

    Ties resolve to the lowest position. Selected positions receive their
    predicted token and leave the masked set; returns them ascending.
    """
    bs, be = block_bounds
    candidates = sorted(p for p in state.masked if bs <= p < be)
    if n > len(candidates):
        raise ScheduleError(
            f"asked to unmask {n} but only {len(candidates)} masked in block [{bs}, {be})"
        )
    if n == 0:
        return ()
    missing = [p for p in candidates if p not in state.confidence]
    if missing:
        raise UsageError(f"masked positions {missing[:4]} have no confidence yet")
    ranked = sorted(candidates, key=lambda p: (-state.confidence[p], p))
    chosen = sorted(ranked[:n])
    for p in chosen:
        state.tokens[p] = state.predicted[p]
        state.masked.remove(p)
        state.confidence.pop(p, None)
        state.predicted.pop(p, None)
    return tuple(chosen)


class CachedDenseContext:
    """Full attention over the cache; entry steps rewrite every row."""

    def __init__(self, cache: KVCache, active: Sequence[int], full: bool):
        self.cache = cache
        self.active = tuple(active)
        self.full = full
        self.refreshed_layers: list[int] = []

    def layer_context(self, layer, q, k, v):
        if self.full:
            self.cache.full_refresh(layer, k, v)
        else:
            self.cache.refresh_at(layer, self.active, k, v)
        self.refreshed_layers.append(layer)
        self.cache.require_all_valid(layer)
        return self.cache.layer_keys(layer), self.cache.layer_values(layer)


def decode(
    weights: model_mod.ModelWeights,
    settings: DecodeSettings,
    prompt: Sequence[int],
    mode: str = "focus",
    hooks: DecodeHooks | None = None,
) -> DecodeResult:
    """Run a full denoising decode in one of the three modes.

    Deterministic: identical weights, settings, prompt, and mode give
    bit-identical tokens and traces regardless of thread count.
    """
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    cfg_m = weights.config
    settings.focus.validate(cfg_m.num_layers)
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size and (prompt.min() < 0 or prompt.max() >= cfg_m.vocab_size):
        raise UsageError("prompt token ids out of vocabulary range")

    state = init_sequence(prompt, settings.gen_len, cfg_m.mask_token_id)
    L = int(state.tokens.size)
    M = state.prompt_len
    if L > cfg_m.max_positions:
        raise ConfigError(f"sequence length {L} exceeds max_positions {cfg_m.max_positions}")
    schedule = build_schedule(settings.gen_len, settings.total_steps, settings.block_len)

    cache = None
    if mode != "vanilla":
        cache = KVCache(
            cfg_m.num_layers, L, cfg_m.num_heads, cfg_m.head_dim,
            M, settings.focus.prompt_block_size,
        )
    run = DecodeRun(
        weights=weights, settings=settings, mode=mode,
        schedule=schedule, state=state, cache=cache,
    )
    all_positions = tuple(range(L))
    n_layers = cfg_m.num_layers
    traces: list[StepTrace] = []

    for t in range(schedule.total_steps):
        if hooks and hooks.on_step_start:
            hooks.on_step_start(run, t)
        t0 = time.perf_counter_ns()

        b = t // schedule.steps_per_block
        is_entry = (t % schedule.steps_per_block) == 0
        rs, re = schedule.blocks[b]
        bounds = (M + rs, M + re)
        n_t = schedule.tokens_per_step[t]

        focus_set: tuple[int, ...] = ()
        planner: FocusStepPlanner | None = None
        provider = None
        if mode == "vanilla":
            active: tuple[int, ...] = all_positions
        elif is_entry:
            active = all_positions
            provider = CachedDenseContext(cache, active, full=True)
        elif mode == "cache":
            active = tuple(range(bounds[0], bounds[1]))
            provider = CachedDenseContext(cache, active, full=False)
        else:
            block_masked = sorted(p for p in state.masked if bounds[0] <= p < bounds[1])
            focus_set = select_focus(state.confidence, n_t, settings.focus.rho, block_masked)
            active = expand_window(focus_set, settings.focus.window, bounds)
            if active:
                planner = FocusStepPlanner(
                    cache, settings.focus, n_layers, focus_set, active,
                    strict_refresh=settings.strict_alg1,
                )
                provider = planner

        logits = None
        if active:
            logits, _ = model_mod.forward_layers(
                weights, state.tokens, active,
                context=provider,
                hooks=hooks.layer_hooks if hooks else (),
            )
            masked_rows = [(r, p) for r, p in enumerate(active) if p in state.masked]
            if masked_rows:
                rows = np.asarray([r for r, _ in masked_rows], dtype=np.int64)
                pred, conf = confidence_from_logits(logits[rows])
                for (_, p), token, c in zip(masked_rows, pred, conf):
                    state.predicted[p] = int(token)
                    state.confidence[p] = float(c)

        nanos = time.perf_counter_ns() - t0
        if hooks and hooks.on_forward:
            hooks.on_forward(run, t, ForwardEvent(
                step=t, is_entry=is_entry, block_bounds=bounds, n=n_t,
                active=active, logits=logits, planner=planner,
            ))

        chosen = select_unmask(state, n_t, bounds)
        unmasked = tuple((p, int(state.tokens[p])) for p in chosen)
        state.step = t + 1

        sinks: tuple[int, ...] = ()
        rel: tuple[int, ...] = ()
        selected: tuple[int, ...] = ()
        kept: tuple[tuple[int, int], ...] = ()
        if planner is not None:
            if planner.index_set is not None:
                sinks = planner.index_set.sinks
                rel = planner.index_set.relevant_blocks
                selected = planner.index_set.prompt_selected
            else:
                sinks = planner.sinks
            kept = tuple(sorted(planner.prompt_kept.items()))
        if mode == "vanilla":
            attended = (L,) * n_layers if active else ()
            refreshed: tuple[int, ...] = ()
        elif planner is not None:
            attended = tuple(planner.attended)
            refreshed = tuple(planner.refreshed_layers)
        elif provider is not None:
            attended = (L,) * n_layers
            refreshed = tuple(provider.refreshed_layers)
        else:
            attended = ()
            refreshed = ()

        conf_snapshot = None
        if settings.record_confidences:
            conf_snapshot = {p: state.confidence[p] for p in sorted(state.confidence)}

        trace = StepTrace(
            step=t, block_index=b, block_bounds=bounds, is_entry=is_entry, n=n_t,
            focus=focus_set, active=active, sinks=sinks, relevant_blocks=rel,
            prompt_selected=selected, attended_per_layer=attended,
            sparse_prompt_kept=kept, refreshed_layers=refreshed,
            unmasked=unmasked, nanos=nanos, confidences=conf_snapshot,
        )
        traces.append(trace)
        if hooks and hooks.on_step_end:
            hooks.on_step_end(run, trace)

    if state.masked:
        raise ScheduleError(f"{len(state.masked)} positions still masked after final step")
    return DecodeResult(tokens=state.tokens.copy(), traces=traces, state=state)


TRACE_COLUMNS = (
    "step", "block", "entry", "n", "n_focus", "n_active", "n_sink",
    "n_prompt_selected", "attended_kv_total", "unmasked", "nanos",
)


def write_trace_csv(traces: Sequence[StepTrace], path, timings: bool = False) -> None:
    """One row per step. Without ``timings`` the nanos column is written as 0
    so that repeated runs of the same configuration produce byte-identical
    files."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_COLUMNS)
        for tr in traces:
            w.writerow([
                tr.step, tr.block_index, int(tr.is_entry), tr.n,
                len(tr.focus), len(tr.active), len(tr.sinks),
                len(tr.prompt_selected), sum(tr.attended_per_layer),
                ";".join(str(p) for p, _ in tr.unmasked),
                tr.nanos if timings else 0,
            ])


def replay_trace(
    prompt: Sequence[int], gen_len: int, mask_token_id: int,
    traces: Sequence[StepTrace],
) -> np.ndarray:
    """Re-apply a trace's unmask decisions; reproduces the decoded sequence."""
    state = init_sequence(prompt, gen_len, mask_token_id)
    for tr in traces:
        for p, token in tr.unmasked:
            if p not in state.masked:
                raise UsageError(f"trace unmasks position {p} twice")
            state.tokens[p] = token
            state.masked.remove(p)
    return state.tokens
