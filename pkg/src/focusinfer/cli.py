"""Command-line entry point.

Subcommands:

  generate   run one decode and write tokens.txt, trace.csv, manifest.json
  bench      time decode modes across context lengths, write bench.csv
  analyze    run the diagnostic battery, write the four metric CSVs
  selftest   quick invariant suite; exits nonzero on any failure

Configuration comes from defaults, then an optional `key = value` config
file (--config), then explicit flags, in increasing priority. Every run
directory gets a manifest with the fully resolved configuration and a
content hash of the weights, which is enough to reproduce the run exactly.
The FOCUS_THREADS environment variable sets kernel parallelism; outputs do
not depend on it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from . import analysis as analysis_mod
from . import model as model_mod
from . import tensor_core as tc
from .decoder import DecodeSettings, decode, replay_trace, write_trace_csv
from .errors import ConfigError, EngineError, UsageError
from .focus_attention import QUERY_AGGS, FocusConfig
from .kv_cache import block_partition


@dataclass
class RunConfig:
    mode: str = "focus"
    seed: int = 0
    model: str | None = None
    prompt_file: str | None = None
    prompt_len: int = 128
    gen_len: int = 32
    steps: int = 32
    block_len: int = 32
    rho: float = 4.0
    window: int = 8
    dense_layers: int = 6
    trailing_dense_layers: int = 0
    alpha: float = 0.5
    sink_frac: float = 0.01
    prompt_block_size: int = 64
    query_agg: str = "mean"
    sink_recompute: bool = False
    strict_alg1: bool = False
    timings: bool = False
    out_dir: str = "runs"
    lengths: tuple[int, ...] = (1024, 2048, 4096)
    bench_modes: tuple[str, ...] = ("vanilla", "cache", "focus")
    num_layers: int = 8
    num_heads: int = 4
    head_dim: int = 16
    mlp_dim: int = 256
    vocab_size: int = 512
    mask_token_id: int = 511
    max_positions: int = 8192

    def validate(self) -> None:
        if self.mode not in ("vanilla", "cache", "focus"):
            raise ConfigError(f"mode must be vanilla, cache, or focus, got {self.mode!r}")
        if self.query_agg not in QUERY_AGGS:
            raise ConfigError(f"query_agg must be one of {QUERY_AGGS}, got {self.query_agg!r}")
        for name in ("prompt_len", "gen_len", "steps", "block_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(m not in ("vanilla", "cache", "focus") for m in self.bench_modes):
            raise ConfigError(f"bench_modes contains an unknown mode: {self.bench_modes}")
        if any(n < 1 for n in self.lengths):
            raise ConfigError(f"lengths must all be >= 1, got {self.lengths}")
        # constructing these validates their own fields with named messages
        self.focus_config()
        self.model_config().validate()

    def focus_config(self) -> FocusConfig:
        cfg = FocusConfig(
            rho=self.rho,
            window=self.window,
            dense_layers=self.dense_layers,
            trailing_dense_layers=self.trailing_dense_layers,
            alpha=self.alpha,
            sink_fraction=self.sink_frac,
            prompt_block_size=self.prompt_block_size,
            query_agg=self.query_agg,
            sink_recompute=self.sink_recompute,
        )
        cfg.validate(self.num_layers)
        return cfg

    def model_config(self) -> model_mod.ModelConfig:
        return model_mod.ModelConfig(
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            head_dim=self.head_dim,
            mlp_dim=self.mlp_dim,
            vocab_size=self.vocab_size,
            mask_token_id=self.mask_token_id,
            max_positions=self.max_positions,
            seed=self.seed,
        )

    def decode_settings(self) -> DecodeSettings:
        return DecodeSettings(
            gen_len=self.gen_len,
            total_steps=self.steps,
            block_len=self.block_len,
            focus=self.focus_config(),
            strict_alg1=self.strict_alg1,
        )


_INT_TUPLE_FIELDS = {"lengths"}
_STR_TUPLE_FIELDS = {"bench_modes"}


def parse_config_file(path) -> dict:
    """Plain `key = value` lines; `#` starts a comment; keys are RunConfig
    fields. Tuple fields take comma-separated values."""
    known = {f.name: f for f in fields(RunConfig)}
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value, lineno, path)
    return out


def _coerce(key: str, value: str, lineno: int, path):
    default = getattr(RunConfig(), key)
    try:
        if key in _INT_TUPLE_FIELDS:
            return tuple(int(v.strip()) for v in value.split(",") if v.strip())
        if key in _STR_TUPLE_FIELDS:
            return tuple(v.strip() for v in value.split(",") if v.strip())
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    # default=None throughout so that "flag was given" is detectable; real
    # defaults live on RunConfig and config files sit in between.
    p.add_argument("--mode", choices=("vanilla", "cache", "focus"), default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--dense-layers", type=int, default=None, dest="dense_layers")
    p.add_argument("--trailing-dense-layers", type=int, default=None, dest="trailing_dense_layers")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--sink-frac", type=float, default=None, dest="sink_frac")
    p.add_argument("--prompt-block-size", type=int, default=None, dest="prompt_block_size")
    p.add_argument("--block-len", type=int, default=None, dest="block_len")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--gen-len", type=int, default=None, dest="gen_len")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--model", default=None, help="weights container to load instead of seeded init")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--out-dir", default=None, dest="out_dir")
    p.add_argument("--prompt-file", default=None, dest="prompt_file",
                   help="token id file, one integer per line (default: synthetic prompt)")
    p.add_argument("--prompt-len", type=int, default=None, dest="prompt_len",
                   help="synthetic prompt length when no prompt file is given")
    p.add_argument("--strict-alg1", action="store_const", const=True, default=None,
                   dest="strict_alg1", help="skip cache writes at sparse layers")
    p.add_argument("--sink-recompute", action="store_const", const=True, default=None,
                   dest="sink_recompute", help="re-identify sinks at every sparse layer")
    p.add_argument("--query-agg", choices=QUERY_AGGS, default=None, dest="query_agg")
    p.add_argument("--timings", action="store_const", const=True, default=None,
                   help="write real per-step nanos into trace.csv (breaks byte-reproducibility)")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for key, value in file_values.items():
        setattr(cfg, key, value)
    for f in fields(RunConfig):
        if f.name in ("lengths", "bench_modes"):
            continue  # bench flags are comma-separated strings, handled below
        if hasattr(args, f.name) and getattr(args, f.name) is not None:
            setattr(cfg, f.name, getattr(args, f.name))
    if getattr(args, "lengths", None):
        cfg.lengths = tuple(int(v) for v in args.lengths.split(","))
    if getattr(args, "modes", None):
        cfg.bench_modes = tuple(args.modes.split(","))
    cfg.validate()
    return cfg


def _load_weights(cfg: RunConfig) -> model_mod.ModelWeights:
    mc = cfg.model_config()
    if cfg.model:
        return model_mod.load_weights(cfg.model, mc)
    return model_mod.init_random(mc)


def _make_prompt(cfg: RunConfig, length: int | None = None) -> np.ndarray:
    if cfg.prompt_file:
        with open(cfg.prompt_file) as fh:
            try:
                ids = [int(line.strip()) for line in fh if line.strip()]
            except ValueError as exc:
                raise UsageError(f"prompt file {cfg.prompt_file} has a non-integer line") from exc
        if not ids:
            raise UsageError(f"prompt file {cfg.prompt_file} is empty")
        return np.asarray(ids, dtype=np.int64)
    n = length if length is not None else cfg.prompt_len
    rng = np.random.default_rng([cfg.seed, n])
    # draw from the vocabulary minus the mask token
    ids = rng.integers(0, cfg.vocab_size - 1, size=n, dtype=np.int64)
    ids[ids >= cfg.mask_token_id] += 1
    return ids


def write_manifest(cfg: RunConfig, weights, out_dir, command: str) -> str:
    manifest = {
        "command": command,
        "engine_version": __version__,
        "config": dataclasses.asdict(cfg),
        "weights_sha256": model_mod.weights_sha256(weights),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def cmd_generate(cfg: RunConfig) -> int:
    weights = _load_weights(cfg)
    prompt = _make_prompt(cfg)
    result = decode(weights, cfg.decode_settings(), prompt, mode=cfg.mode)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "tokens.txt"), "w") as f:
        f.writelines(f"{t}\n" for t in result.tokens)
    write_trace_csv(result.traces, os.path.join(cfg.out_dir, "trace.csv"), timings=cfg.timings)
    write_manifest(cfg, weights, cfg.out_dir, "generate")
    replayed = replay_trace(prompt, cfg.gen_len, cfg.mask_token_id, result.traces)
    if not np.array_equal(replayed, result.tokens):
        raise EngineError("trace replay failed to reproduce the decoded tokens")
    print(f"generate: mode={cfg.mode} L={len(result.tokens)} steps={cfg.steps} -> {cfg.out_dir}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    weights = _load_weights(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    for n in cfg.lengths:
        if n + cfg.gen_len > cfg.max_positions:
            raise ConfigError(f"lengths: {n} + gen_len exceeds max_positions {cfg.max_positions}")
    # warm the JIT kernels so compile time does not pollute the first row
    warm = DecodeSettings(gen_len=cfg.block_len, total_steps=max(1, min(2, cfg.steps)),
                          block_len=cfg.block_len, focus=cfg.focus_config())
    decode(weights, warm, _make_prompt(cfg, length=cfg.prompt_block_size), mode="focus")

    rows = []
    for n in cfg.lengths:
        prompt = _make_prompt(cfg, length=n)
        walls: dict[str, float] = {}
        for mode in cfg.bench_modes:
            t0 = time.perf_counter()
            result = decode(weights, cfg.decode_settings(), prompt, mode=mode)
            wall = time.perf_counter() - t0
            walls[mode] = wall
            attended = [sum(tr.attended_per_layer) for tr in result.traces]
            rows.append({
                "length": n,
                "mode": mode,
                "wall_s": wall,
                "tokens_per_s": cfg.gen_len / wall,
                "mean_attended_kv": sum(attended) / len(attended),
                "speedup": walls["vanilla"] / wall if "vanilla" in walls else "",
            })
            print(f"bench: length={n} mode={mode} wall={wall:.3f}s "
                  f"tok/s={cfg.gen_len / wall:.2f}")
    path = os.path.join(cfg.out_dir, "bench.csv")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["length", "mode", "wall_s", "tokens_per_s",
                                          "mean_attended_kv", "speedup"])
        w.writeheader()
        w.writerows(rows)
    write_manifest(cfg, weights, cfg.out_dir, "bench")
    print(f"bench: wrote {path}")
    return 0


def cmd_analyze(cfg: RunConfig) -> int:
    weights = _load_weights(cfg)
    prompt = _make_prompt(cfg)
    report = analysis_mod.analyze_run(weights, cfg.decode_settings(), prompt)
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = analysis_mod.write_report_csvs(report, cfg.out_dir)
    write_manifest(cfg, weights, cfg.out_dir, "analyze")

    def fmt(x):
        return "n/a" if x is None else f"{x:.4f}"

    print(f"analyze: mean_corr={fmt(report.mean_correlation)} "
          f"mean_recall={fmt(report.mean_recall)} "
          f"mean_offdiag_overlap={fmt(report.mean_offdiag_overlap)} "
          f"mean_max_abs_divergence={fmt(report.mean_max_abs)}")
    print("analyze: wrote " + ", ".join(os.path.basename(p) for p in paths))
    return 0


def _selftest_checks() -> list[tuple[str, object]]:
    from . import decoder as dec

    def check_matmul():
        rng = np.random.default_rng(11)
        a = rng.standard_normal((5, 7), dtype=np.float32)
        b = rng.standard_normal((7, 3), dtype=np.float32)
        got = tc.matmul(a, b)
        want = np.empty((5, 3), dtype=np.float32)
        for i in range(5):
            for j in range(3):
                acc = np.float32(0.0)
                for t in range(7):
                    acc = np.float32(acc + np.float32(a[i, t] * b[t, j]))
                want[i, j] = acc
        assert np.array_equal(got, want), "matmul deviates from fixed-order oracle"

    def check_softmax():
        row = tc.row_softmax(np.asarray([[0.0, 0.0, 0.0, 0.0]], dtype=np.float32))[0]
        assert np.allclose(row, 0.25, atol=1e-6), "uniform softmax row wrong"
        with tc.softmax_sum_check() as bad:
            tc.row_softmax(np.random.default_rng(0).standard_normal((8, 33)).astype(np.float32))
        assert not bad, "softmax rows drifted from sum 1"

    def check_rope_inverse():
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 5, 8), dtype=np.float32)
        pos = np.arange(5)
        back = tc.rope(tc.rope(x, pos), -pos)
        assert np.max(np.abs(back - x)) < 1e-6, "rope inverse rotation does not recover input"

    def check_container():
        cfg = model_mod.ModelConfig(num_layers=1, num_heads=2, head_dim=4,
                                    mlp_dim=8, vocab_size=16, mask_token_id=15)
        w = model_mod.init_random(cfg)
        blob = model_mod.serialize_weights(w)
        assert model_mod.write_container(model_mod.read_container(blob)) == blob
        try:
            model_mod.read_container(blob[:-3])
        except EngineError:
            pass
        else:
            raise AssertionError("truncated container did not raise")

    def check_decode_determinism():
        cfg = model_mod.ModelConfig(num_layers=2, num_heads=2, head_dim=8,
                                    mlp_dim=32, vocab_size=64, mask_token_id=63, seed=5)
        w = model_mod.init_random(cfg)
        prompt = np.arange(1, 17, dtype=np.int64)
        st = dec.DecodeSettings(gen_len=8, total_steps=4, block_len=8,
                                focus=FocusConfig(dense_layers=1, prompt_block_size=8))
        a = decode(w, st, prompt, mode="focus")
        b = decode(w, st, prompt, mode="focus")
        assert np.array_equal(a.tokens, b.tokens), "decode is not deterministic"
        degenerate = FocusConfig(alpha=1.0, sink_fraction=1.0, window=64,
                                 dense_layers=1, prompt_block_size=8)
        st2 = dec.DecodeSettings(gen_len=8, total_steps=4, block_len=8, focus=degenerate)
        f = decode(w, st2, prompt, mode="focus")
        c = decode(w, st2, prompt, mode="cache")
        assert np.array_equal(f.tokens, c.tokens), "degenerate focus differs from cache"

    return [
        ("matmul-fixed-order", check_matmul),
        ("softmax-conservation", check_softmax),
        ("rope-inverse", check_rope_inverse),
        ("container-roundtrip", check_container),
        ("decode-determinism", check_decode_determinism),
    ]


def cmd_selftest(inject_fault: bool = False) -> int:
    if inject_fault:
        tc.set_fault_bias(1e-3)
    failures = 0
    try:
        for name, fn in _selftest_checks():
            try:
                fn()
            except Exception as exc:
                failures += 1
                print(f"FAIL {name}: {exc}")
            else:
                print(f"ok   {name}")
    finally:
        tc.set_fault_bias(0.0)
    if failures:
        print(f"selftest: {failures} check(s) failed")
        return 1
    print("selftest: all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="focusinfer",
        description="Sparse-attention inference engine for masked-diffusion language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="decode one sequence")
    _add_run_flags(p_gen)

    p_bench = sub.add_parser("bench", help="time decode modes across context lengths")
    _add_run_flags(p_bench)
    p_bench.add_argument("--lengths", default=None, help="comma-separated prompt lengths")
    p_bench.add_argument("--modes", default=None, help="comma-separated decode modes")

    p_an = sub.add_parser("analyze", help="run diagnostics against the dense oracle")
    _add_run_flags(p_an)

    p_self = sub.add_parser("selftest", help="run the invariant suite")
    p_self.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        tc.configure_threads()
        if args.command == "selftest":
            return cmd_selftest(inject_fault=args.inject_fault)
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
