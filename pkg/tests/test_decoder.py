from __future__ import annotations

import numpy as np
import pytest

from focusinfer import decoder as d
from focusinfer.errors import ConfigError, ScheduleError, UsageError
from focusinfer.focus_attention import FocusConfig

from conftest import make_prompt


# --- schedule ----------------------------------------------------------------

def test_schedule_one_token_per_step():
    s = d.build_schedule(gen_len=256, total_steps=256, block_len=32)
    assert len(s.blocks) == 8
    assert s.steps_per_block == 32
    assert s.tokens_per_step == (1,) * 256
    assert s.blocks[0] == (0, 32) and s.blocks[7] == (224, 256)


def test_schedule_multiple_tokens_per_step():
    s = d.build_schedule(gen_len=32, total_steps=8, block_len=32)
    assert s.steps_per_block == 8
    assert s.tokens_per_step == (4,) * 8


def test_schedule_remainder_front_loaded():
    s = d.build_schedule(gen_len=32, total_steps=12, block_len=32)
    assert s.tokens_per_step == (3,) * 8 + (2,) * 4
    assert sum(s.tokens_per_step) == 32


def test_schedule_more_steps_than_tokens():
    s = d.build_schedule(gen_len=8, total_steps=16, block_len=8)
    assert s.tokens_per_step == (1,) * 8 + (0,) * 8


def test_schedule_rejects_bad_divisibility():
    with pytest.raises(ConfigError):
        d.build_schedule(gen_len=33, total_steps=8, block_len=32)
    with pytest.raises(ConfigError):
        d.build_schedule(gen_len=64, total_steps=7, block_len=32)
    with pytest.raises(ConfigError):
        d.build_schedule(gen_len=0, total_steps=1, block_len=1)


# --- sequence state ----------------------------------------------------------

def test_init_sequence_layout():
    state = d.init_sequence([5, 6, 7], gen_len=4, mask_token_id=9)
    assert state.tokens.tolist() == [5, 6, 7, 9, 9, 9, 9]
    assert state.prompt_len == 3
    assert state.masked == {3, 4, 5, 6}
    assert state.confidence == {} and state.predicted == {}


def test_init_sequence_rejects_bad_inputs():
    with pytest.raises(UsageError):
        d.init_sequence([], 4, 9)
    with pytest.raises(UsageError):
        d.init_sequence([1, 2], 0, 9)
    with pytest.raises(UsageError):
        d.init_sequence([1, 9, 2], 4, 9)


# --- greedy confidence -------------------------------------------------------

def test_confidence_from_logits_peak():
    logits = np.asarray([[0.0, 0.0, 50.0]], dtype=np.float32)
    pred, conf = d.confidence_from_logits(logits)
    assert pred.tolist() == [2]
    assert conf[0] > 0.999999


def test_confidence_from_logits_tie_takes_lowest_token():
    logits = np.asarray([[3.0, 3.0, 0.0]], dtype=np.float32)
    pred, conf = d.confidence_from_logits(logits)
    assert pred.tolist() == [0]
    assert abs(conf[0] - d.tc.row_softmax(logits)[0, 0]) < 1e-7


def test_confidence_is_softmax_probability():
    logits = np.asarray([[1.0, 2.0, 0.5]], dtype=np.float32)
    _, conf = d.confidence_from_logits(logits)
    want = np.exp(2.0) / (np.exp(1.0) + np.exp(2.0) + np.exp(0.5))
    assert abs(conf[0] - want) < 1e-6


# --- unmask selection --------------------------------------------------------

def fake_state():
    tokens = np.asarray([1, 2, 9, 9, 9, 9], dtype=np.int64)
    return d.SequenceState(
        tokens=tokens, prompt_len=2, masked={2, 3, 4, 5},
        confidence={2: 0.5, 3: 0.9, 4: 0.9, 5: 0.2},
        predicted={2: 7, 3: 8, 4: 6, 5: 5},
    )


def test_select_unmask_highest_confidence_ties_lowest():
    state = fake_state()
    chosen = d.select_unmask(state, 2, (2, 6))
    assert chosen == (3, 4)
    assert state.tokens.tolist() == [1, 2, 9, 8, 6, 9]
    assert state.masked == {2, 5}
    assert 3 not in state.confidence and 3 not in state.predicted


def test_select_unmask_zero():
    state = fake_state()
    assert d.select_unmask(state, 0, (2, 6)) == ()
    assert state.masked == {2, 3, 4, 5}


def test_select_unmask_respects_block_bounds():
    state = fake_state()
    chosen = d.select_unmask(state, 1, (2, 4))
    assert chosen == (3,)


def test_select_unmask_overdraw_is_schedule_error():
    with pytest.raises(ScheduleError):
        d.select_unmask(fake_state(), 5, (2, 6))


def test_select_unmask_without_confidence_rejected():
    state = fake_state()
    del state.confidence[4]
    with pytest.raises(UsageError):
        d.select_unmask(state, 2, (2, 6))


# --- decode runs -------------------------------------------------------------

def focus_cfg(**over):
    base = dict(dense_layers=2, prompt_block_size=8, rho=2.0, window=4,
                alpha=0.5, sink_fraction=0.25)
    base.update(over)
    return FocusConfig(**base)


def run(small_weights, mode, gen=16, steps=8, block=8, prompt_len=16, seed=0, **over):
    cfg = small_weights.config
    prompt = make_prompt(prompt_len, cfg.vocab_size, cfg.mask_token_id, seed)
    focus_over = {k: v for k, v in over.items() if k in FocusConfig.__dataclass_fields__}
    rest = {k: v for k, v in over.items() if k not in focus_over}
    settings = d.DecodeSettings(
        gen_len=gen, total_steps=steps, block_len=block,
        focus=focus_cfg(**focus_over), **rest,
    )
    return d.decode(small_weights, settings, prompt, mode=mode), prompt


@pytest.mark.parametrize("mode", d.MODES)
def test_decode_completes_and_commits_everything(small_weights, mode):
    result, prompt = run(small_weights, mode)
    cfg = small_weights.config
    assert result.tokens.shape == (32,)
    assert np.array_equal(result.tokens[:16], prompt)
    assert not np.any(result.tokens == cfg.mask_token_id)
    assert result.state.masked == set()
    committed = [p for tr in result.traces for p, _ in tr.unmasked]
    assert sorted(committed) == list(range(16, 32))


@pytest.mark.parametrize("mode", d.MODES)
def test_decode_is_deterministic(small_weights, mode):
    a, _ = run(small_weights, mode, seed=3)
    b, _ = run(small_weights, mode, seed=3)
    assert np.array_equal(a.tokens, b.tokens)
    for ta, tb in zip(a.traces, b.traces):
        assert ta.unmasked == tb.unmasked
        assert ta.focus == tb.focus
        assert ta.sinks == tb.sinks
        assert ta.attended_per_layer == tb.attended_per_layer


def test_single_step_schedule_all_modes_agree_bitwise(small_weights):
    # a one-step block is entry-only: every mode runs the same monolithic
    # forward, so the committed tokens must be identical bit for bit
    outs = [run(small_weights, mode, gen=8, steps=1, block=8)[0] for mode in d.MODES]
    assert np.array_equal(outs[0].tokens, outs[1].tokens)
    assert np.array_equal(outs[1].tokens, outs[2].tokens)


def test_degenerate_focus_equals_cache_mode(small_weights):
    # with every block kept, the whole prompt survives pruning and the active
    # set widened to the full block, focus collapses to the cached dense path
    wide = dict(alpha=1.0, sink_fraction=1.0, window=16, rho=8.0)
    focus_run, _ = run(small_weights, "focus", seed=5, **wide)
    cache_run, _ = run(small_weights, "cache", seed=5)
    assert np.array_equal(focus_run.tokens, cache_run.tokens)


def test_decode_entry_steps_are_block_firsts(small_weights):
    result, _ = run(small_weights, "focus")
    entries = [tr.step for tr in result.traces if tr.is_entry]
    assert entries == [0, 4]
    for tr in result.traces:
        if tr.is_entry:
            assert tr.active == tuple(range(32))
            assert tr.focus == ()


def test_decode_focus_trace_bookkeeping(small_weights):
    result, _ = run(small_weights, "focus")
    L, M = 32, 16
    n_resp = L - M
    for tr in result.traces:
        bs, be = tr.block_bounds
        assert tr.n == 2
        assert len(tr.unmasked) == 2
        assert all(bs <= p < be for p, _ in tr.unmasked)
        assert list(tr.active) == sorted(tr.active)
        if tr.is_entry:
            continue
        # focus positions live inside the block and inside the active set
        assert set(tr.focus) <= set(tr.active)
        assert all(bs <= p < be for p in tr.focus)
        assert 1 <= len(tr.focus) <= 4  # k = round(rho * n) = 4, clamped
        # sinks 25% of the 16-token prompt
        assert len(tr.sinks) == 4
        assert all(0 <= s < M for s in tr.sinks)
        # alpha = 0.5 over two prompt blocks keeps exactly one
        assert len(tr.relevant_blocks) == 1
        assert set(tr.prompt_selected) >= set(tr.sinks)
        # layers 0-1 dense over the whole sequence, 2-3 over the pruned set
        assert len(tr.attended_per_layer) == 4
        assert tr.attended_per_layer[0] == L and tr.attended_per_layer[1] == L
        kept = dict(tr.sparse_prompt_kept)
        assert sorted(kept) == [2, 3]
        assert tr.attended_per_layer[2] == kept[2] + n_resp
        assert tr.attended_per_layer[3] == kept[3] + n_resp
        assert kept[2] == len(tr.prompt_selected)
        assert tr.refreshed_layers == (0, 1, 2, 3)


def test_decode_cache_trace_bookkeeping(small_weights):
    result, _ = run(small_weights, "cache")
    for tr in result.traces:
        assert tr.attended_per_layer == (32, 32, 32, 32)
        assert tr.refreshed_layers == (0, 1, 2, 3)
        assert tr.sinks == () and tr.prompt_selected == ()
        if not tr.is_entry:
            assert tr.active == tuple(range(*tr.block_bounds))


def test_decode_vanilla_trace_bookkeeping(small_weights):
    result, _ = run(small_weights, "vanilla")
    for tr in result.traces:
        assert tr.active == tuple(range(32))
        assert tr.attended_per_layer == (32, 32, 32, 32)
        assert tr.refreshed_layers == ()


def test_decode_strict_mode_skips_sparse_refreshes(small_weights):
    result, _ = run(small_weights, "focus", strict_alg1=True)
    for tr in result.traces:
        if tr.is_entry:
            continue
        assert tr.refreshed_layers == (0, 1)


def test_decode_zero_token_steps(small_weights):
    result, _ = run(small_weights, "focus", gen=8, steps=16, block=8)
    tail = result.traces[8:]
    assert all(tr.n == 0 for tr in tail)
    assert all(tr.active == () and tr.unmasked == () for tr in tail)
    assert not np.any(result.tokens == small_weights.config.mask_token_id)


def test_decode_confidence_snapshots(small_weights):
    result, _ = run(small_weights, "focus")
    for tr in result.traces:
        assert tr.confidences is not None
        # snapshots are post-commit: committed positions carry no confidence
        assert all(p not in tr.confidences for p, _ in tr.unmasked)
        assert list(tr.confidences) == sorted(tr.confidences)
    off, _ = run(small_weights, "focus", record_confidences=False)
    assert all(tr.confidences is None for tr in off.traces)


def test_decode_rejects_bad_inputs(small_weights):
    cfg = small_weights.config
    prompt = make_prompt(16, cfg.vocab_size, cfg.mask_token_id)
    settings = d.DecodeSettings(gen_len=16, total_steps=8, block_len=8,
                                focus=focus_cfg())
    with pytest.raises(UsageError):
        d.decode(small_weights, settings, prompt, mode="turbo")
    bad = prompt.copy()
    bad[0] = cfg.vocab_size
    with pytest.raises(UsageError):
        d.decode(small_weights, settings, bad)
    deep = d.DecodeSettings(gen_len=16, total_steps=8, block_len=8,
                            focus=FocusConfig(dense_layers=6))
    with pytest.raises(ConfigError):
        d.decode(small_weights, deep, prompt)
    long_prompt = make_prompt(1020, cfg.vocab_size, cfg.mask_token_id)
    with pytest.raises(ConfigError):
        d.decode(small_weights, settings, long_prompt)


def test_decode_hooks_see_each_step(small_weights):
    starts, forwards, ends = [], [], []

    def on_start(run_, t):
        starts.append(t)

    def on_forward(run_, t, event):
        forwards.append(event)
        if event.active:
            assert event.logits.shape == (len(event.active), 64)
        if not event.is_entry and run_.mode == "focus" and event.active:
            assert event.planner is not None

    def on_end(run_, trace):
        ends.append(trace.step)

    cfg = small_weights.config
    prompt = make_prompt(16, cfg.vocab_size, cfg.mask_token_id)
    settings = d.DecodeSettings(gen_len=16, total_steps=8, block_len=8,
                                focus=focus_cfg())
    hooks = d.DecodeHooks(on_step_start=on_start, on_forward=on_forward,
                          on_step_end=on_end)
    d.decode(small_weights, settings, prompt, mode="focus", hooks=hooks)
    assert starts == list(range(8)) and ends == list(range(8))
    assert [e.planner is not None for e in forwards] == [
        not e.is_entry for e in forwards
    ]


def test_decode_layer_hooks_fire(small_weights):
    calls = []

    def layer_hook(layer, active, probs):
        calls.append((layer, len(active), probs.shape[2]))

    cfg = small_weights.config
    prompt = make_prompt(16, cfg.vocab_size, cfg.mask_token_id)
    settings = d.DecodeSettings(gen_len=8, total_steps=2, block_len=8,
                                focus=focus_cfg())
    hooks = d.DecodeHooks(layer_hooks=(layer_hook,))
    d.decode(small_weights, settings, prompt, mode="focus", hooks=hooks)
    # 2 steps x 4 layers
    assert len(calls) == 8
    entry_calls = calls[:4]
    assert all(n_active == 24 and ctx == 24 for _, n_active, ctx in entry_calls)
    sparse_calls = calls[4:]
    assert all(ctx < 24 for layer, _, ctx in sparse_calls if layer >= 2)


# --- trace files and replay --------------------------------------------------

def test_replay_reproduces_decode(small_weights):
    for mode in d.MODES:
        result, prompt = run(small_weights, mode, seed=9)
        replayed = d.replay_trace(prompt, 16, small_weights.config.mask_token_id,
                                  result.traces)
        assert np.array_equal(replayed, result.tokens)


def test_replay_rejects_double_unmask(small_weights):
    result, prompt = run(small_weights, "cache", seed=2)
    traces = result.traces + [result.traces[-1]]
    with pytest.raises(UsageError):
        d.replay_trace(prompt, 16, small_weights.config.mask_token_id, traces)


def test_trace_csv_layout(tmp_path, small_weights):
    result, _ = run(small_weights, "focus", seed=4)
    path = tmp_path / "trace.csv"
    d.write_trace_csv(result.traces, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == ",".join(d.TRACE_COLUMNS)
    assert len(lines) == 1 + len(result.traces)
    first = lines[1].split(",")
    assert first[0] == "0" and first[2] == "1"  # step 0 is a block entry
    nanos_col = [line.split(",")[-1] for line in lines[1:]]
    assert all(v == "0" for v in nanos_col)


def test_trace_csv_timings_flag(tmp_path, small_weights):
    result, _ = run(small_weights, "focus", seed=4)
    path = tmp_path / "trace.csv"
    d.write_trace_csv(result.traces, path, timings=True)
    nanos = [int(line.split(",")[-1]) for line in path.read_text().strip().split("\n")[1:]]
    assert all(v >= 0 for v in nanos)
    assert any(v > 0 for v in nanos)


def test_trace_csv_unmasked_column(tmp_path, small_weights):
    result, _ = run(small_weights, "cache", seed=6)
    path = tmp_path / "trace.csv"
    d.write_trace_csv(result.traces, path)
    rows = [line.split(",") for line in path.read_text().strip().split("\n")[1:]]
    col = d.TRACE_COLUMNS.index("unmasked")
    for row, tr in zip(rows, result.traces):
        assert row[col] == ";".join(str(p) for p, _ in tr.unmasked)
