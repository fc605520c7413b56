"""Diagnostics for the sparse decoding pipeline, checked against dense oracles.

Four measurements, all CSV-exportable:

  * adjacent-step confidence correlation: Pearson r between consecutive
    steps' confidence maps on positions masked at both steps; high values are
    what makes prior-step confidence a usable predictor.
  * focus recall: of the positions actually unmasked at a step, the fraction
    that the focus predictor had selected.
  * sink overlap: agreement of per-layer sink score rankings, measured from a
    probe run that recomputes sink scores at every sparse layer.
  * logit divergence: each focus step re-run with full attention on a cloned
    cache; reports max/mean absolute logit difference and whether the unmask
    decision would have changed.

Oracle forwards reuse the engine's own kernels, so divergence numbers isolate
the effect of pruning rather than numeric noise.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import model as model_mod
from .decoder import (
    CachedDenseContext,
    DecodeHooks,
    DecodeResult,
    DecodeSettings,
    StepTrace,
    confidence_from_logits,
    decode,
)
from .errors import UsageError
from .focus_attention import top_by_score


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Pearson correlation in float64; None when either side has no variance."""
    if len(xs) != len(ys):
        raise UsageError("series lengths differ")
    if len(xs) < 2:
        return None
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(float(np.sum(xc * xc)))
    sy = math.sqrt(float(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.sum(xc * yc)) / (sx * sy)


def confidence_correlation(
    conf_maps: Sequence[Mapping[int, float] | None],
) -> list[tuple[int, float | None]]:
    """Per-step Pearson r between adjacent confidence maps on shared positions.

    Entry t covers the pair (t-1, t); steps with fewer than two shared masked
    positions (or degenerate variance) are marked None.
    """
    if len(conf_maps) < 2:
        raise UsageError("need at least two steps of confidence maps")
    out: list[tuple[int, float | None]] = []
    for t in range(1, len(conf_maps)):
        prev, cur = conf_maps[t - 1], conf_maps[t]
        if prev is None or cur is None:
            raise UsageError(f"confidence map missing at step {t}; decode with recording on")
        shared = sorted(set(prev) & set(cur))
        if len(shared) < 2:
            out.append((t, None))
            continue
        out.append((t, pearson([prev[p] for p in shared], [cur[p] for p in shared])))
    return out


def pcgi_recall(traces: Sequence[StepTrace]) -> list[tuple[int, float | None]]:
    """Fraction of actually-unmasked positions that were in the focus set.

    Block-entry steps, steps that unmask nothing, and steps without a
    recorded focus set are marked None.
    """
    out: list[tuple[int, float | None]] = []
    for tr in traces:
        if tr.is_entry or tr.n == 0 or not tr.focus:
            out.append((tr.step, None))
            continue
        got = {p for p, _ in tr.unmasked}
        out.append((tr.step, len(got & set(tr.focus)) / len(got)))
    return out


def recall_for_rho(traces: Sequence[StepTrace], rho: float) -> list[tuple[int, float | None]]:
    """Recall of a hypothetical focus predictor with the given rho.

    Replays the recorded confidence maps and unmask decisions of any decode
    (the run itself need not have used focus mode), recomputing the focus set
    per step. Because the underlying trajectory is fixed, enlarging rho can
    only grow each step's focus set, so recall is monotone in rho.
    """
    from .focus_attention import select_focus

    masked: set[int] = set()
    for tr in traces:
        masked.update(p for p, _ in tr.unmasked)
    out: list[tuple[int, float | None]] = []
    prev_conf: Mapping[int, float] | None = None
    for tr in traces:
        bs, be = tr.block_bounds
        if tr.is_entry or tr.n == 0:
            out.append((tr.step, None))
        else:
            if prev_conf is None:
                raise UsageError("trace does not start at a block entry")
            block_masked = sorted(p for p in masked if bs <= p < be)
            focus = select_focus(prev_conf, tr.n, rho, block_masked)
            got = {p for p, _ in tr.unmasked}
            out.append((tr.step, len(got & set(focus)) / len(got)))
        masked.difference_update(p for p, _ in tr.unmasked)
        if tr.confidences is None:
            raise UsageError("trace lacks confidence maps; decode with recording on")
        prev_conf = tr.confidences
    return out


def sink_layer_overlap(
    snapshots: Sequence[Mapping[int, np.ndarray]], n_sink: int
) -> tuple[tuple[int, ...], np.ndarray]:
    """Mean pairwise overlap of per-layer top-n_sink sink sets.

    Each snapshot maps layer index to that layer's sink score vector for one
    step. Returns (layer ids, matrix) where matrix[a, b] is the average of
    |top(S_a) ∩ top(S_b)| / n_sink over the snapshots.
    """
    if n_sink < 1:
        raise UsageError(f"n_sink must be >= 1 for overlap, got {n_sink}")
    if not snapshots:
        raise UsageError("no sink score snapshots supplied")
    layers = tuple(sorted(snapshots[0]))
    for snap in snapshots:
        if tuple(sorted(snap)) != layers:
            raise UsageError("snapshots cover inconsistent layer sets")
    acc = np.zeros((len(layers), len(layers)), dtype=np.float64)
    for snap in snapshots:
        tops = [set(top_by_score(snap[l], n_sink)) for l in layers]
        for i in range(len(layers)):
            for j in range(len(layers)):
                acc[i, j] += len(tops[i] & tops[j]) / n_sink
    return layers, acc / len(snapshots)


@dataclass(frozen=True)
class DivergenceRow:
    step: int
    max_abs: float
    mean_abs: float
    decision_match: bool


@dataclass
class ProbeResult:
    rows: list[DivergenceRow]
    result: DecodeResult
    snapshots: list[dict[int, np.ndarray]]  # per step with sparse layers


def divergence_vs_oracle(
    weights: model_mod.ModelWeights,
    settings: DecodeSettings,
    prompt: Sequence[int],
) -> ProbeResult:
    """Focus-mode decode where every step is shadowed by a dense twin.

    The twin re-runs the step's forward over a cloned cache with full
    attention (and a full refresh at entries), on the same token state, and
    its hypothetical unmask decision is compared with the real one. The
    primary decode is never perturbed.
    """
    rows: list[DivergenceRow] = []
    snapshots: list[dict[int, np.ndarray]] = []
    pre: dict = {}
    pending: dict = {}

    def on_step_start(run, t):
        pre["cache"] = run.cache.clone() if run.cache is not None else None
        pre["conf"] = dict(run.state.confidence)
        pre["masked"] = set(run.state.masked)

    def on_forward(run, t, ev):
        if ev.planner is not None and ev.planner.sink_snapshots:
            snapshots.append(dict(ev.planner.sink_snapshots))
        if not ev.active:
            pending.update(step=t, max_abs=0.0, mean_abs=0.0, oracle=set())
            return
        twin = CachedDenseContext(pre["cache"], ev.active, full=ev.is_entry)
        o_logits, _ = model_mod.forward_layers(
            weights, run.state.tokens, ev.active, context=twin
        )
        diff = np.abs(o_logits.astype(np.float64) - ev.logits.astype(np.float64))
        oracle_conf = dict(pre["conf"])
        oracle_pred: dict[int, int] = {}
        masked_rows = [(r, p) for r, p in enumerate(ev.active) if p in pre["masked"]]
        if masked_rows:
            sel = np.asarray([r for r, _ in masked_rows], dtype=np.int64)
            o_pred, o_conf = confidence_from_logits(o_logits[sel])
            for (_, p), token, c in zip(masked_rows, o_pred, o_conf):
                oracle_conf[p] = float(c)
                oracle_pred[p] = int(token)
        bs, be = ev.block_bounds
        cands = sorted(p for p in pre["masked"] if bs <= p < be)
        ranked = sorted(cands, key=lambda p: (-oracle_conf[p], p)) if ev.n else []
        pending.update(
            step=t,
            max_abs=float(diff.max()),
            mean_abs=float(diff.mean()),
            oracle=set(ranked[: ev.n]),
        )

    def on_step_end(run, trace):
        actual = {p for p, _ in trace.unmasked}
        rows.append(DivergenceRow(
            step=pending["step"],
            max_abs=pending["max_abs"],
            mean_abs=pending["mean_abs"],
            decision_match=actual == pending["oracle"],
        ))

    hooks = DecodeHooks(
        on_step_start=on_step_start, on_forward=on_forward, on_step_end=on_step_end
    )
    result = decode(weights, settings, prompt, mode="focus", hooks=hooks)
    return ProbeResult(rows=rows, result=result, snapshots=snapshots)


@dataclass
class AnalysisReport:
    correlation: list[tuple[int, float | None]]
    recall: list[tuple[int, float | None]]
    overlap_layers: tuple[int, ...]
    overlap: np.ndarray | None
    divergence: list[DivergenceRow]
    mean_correlation: float | None
    mean_recall: float | None
    mean_offdiag_overlap: float | None
    mean_max_abs: float | None


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def analyze_run(
    weights: model_mod.ModelWeights,
    settings: DecodeSettings,
    prompt: Sequence[int],
) -> AnalysisReport:
    """Run the full diagnostic battery on one focus-mode decode.

    Sink recomputation and confidence recording are forced on for the probe
    run regardless of the supplied settings, since the overlap and
    correlation metrics require them.
    """
    settings = replace(
        settings,
        focus=replace(settings.focus, sink_recompute=True),
        record_confidences=True,
    )
    probe = divergence_vs_oracle(weights, settings, prompt)
    traces = probe.result.traces
    corr = confidence_correlation([tr.confidences for tr in traces])
    rec = pcgi_recall(traces)
    n_sink = settings.focus.n_sink_for(int(np.asarray(prompt).size))
    overlap_layers: tuple[int, ...] = ()
    overlap = None
    if probe.snapshots and n_sink >= 1:
        overlap_layers, overlap = sink_layer_overlap(probe.snapshots, n_sink)
    off_diag = None
    if overlap is not None and len(overlap_layers) > 1:
        mask = ~np.eye(len(overlap_layers), dtype=bool)
        off_diag = float(np.mean(overlap[mask]))
    return AnalysisReport(
        correlation=corr,
        recall=rec,
        overlap_layers=overlap_layers,
        overlap=overlap,
        divergence=probe.rows,
        mean_correlation=_mean([r for _, r in corr if r is not None]),
        mean_recall=_mean([r for _, r in rec if r is not None]),
        mean_offdiag_overlap=off_diag,
        mean_max_abs=_mean([row.max_abs for row in probe.rows]),
    )


def write_report_csvs(report: AnalysisReport, out_dir) -> list[str]:
    """Write the four metric CSVs; skipped steps keep their row with an
    empty value so step numbering stays aligned."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def w(name, header, rows):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        paths.append(path)

    w("confidence_corr.csv", ("step", "r"),
      [(t, "" if r is None else repr(r)) for t, r in report.correlation])
    w("pcgi_recall.csv", ("step", "recall"),
      [(t, "" if r is None else repr(r)) for t, r in report.recall])
    overlap_rows = []
    if report.overlap is not None:
        for i, a in enumerate(report.overlap_layers):
            for j, b in enumerate(report.overlap_layers):
                overlap_rows.append((a, b, repr(float(report.overlap[i, j]))))
    w("sink_overlap.csv", ("layer_a", "layer_b", "overlap"), overlap_rows)
    w("divergence.csv", ("step", "max_abs", "mean_abs", "decision_match"),
      [(r.step, repr(r.max_abs), repr(r.mean_abs), int(r.decision_match))
       for r in report.divergence])
    return paths
