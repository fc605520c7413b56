"""A small bidirectional transformer for masked-diffusion decoding.

Pre-norm residual blocks with RMS normalization, rotary positions, and a
gated MLP. There is no causal mask anywhere: every query attends to its full
context, which is what lets masked positions condition on later ones.

The forward pass works on an arbitrary subset of positions ("active"): hidden
states are computed only for active rows, and attention context comes from a
caller-supplied provider (fresh rows, a KV cache, or a sparse selection).
Fresh per-layer key/value rows for the active positions are always returned
so the caller can refresh its cache.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import tensor_core as tc
from .errors import (
    HeaderError,
    MagicError,
    PayloadError,
    ShapeError,
    TruncationError,
    UsageError,
    VersionError,
)

MAGIC = b"FDTC"
FORMAT_VERSION = 1

# Hook signature: (layer index, active positions, attention probabilities
# with shape (heads, len(active), context)). Observation only.
LayerForwardHook = Callable[[int, Sequence[int], np.ndarray], None]


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and special tokens of the toy model."""

    num_layers: int = 8
    num_heads: int = 4
    head_dim: int = 16
    mlp_dim: int = 256
    vocab_size: int = 512
    mask_token_id: int = 511
    max_positions: int = 8192
    seed: int = 0

    @property
    def hidden_dim(self) -> int:
        return self.num_heads * self.head_dim

    def validate(self) -> None:
        if self.num_layers < 1:
            raise UsageError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.head_dim % 2 != 0:
            raise UsageError(f"head_dim must be even, got {self.head_dim}")
        if not (0 <= self.mask_token_id < self.vocab_size):
            raise UsageError(
                f"mask_token_id {self.mask_token_id} not below vocab_size {self.vocab_size}"
            )
        for name in ("num_heads", "head_dim", "mlp_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: np.ndarray = None
    w_out: np.ndarray = None


def _tensor_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; also fixes serialization order."""
    h, m = config.hidden_dim, config.mlp_dim
    specs: list[tuple[str, tuple[int, ...]]] = [("embedding", (config.vocab_size, h))]
    for i in range(config.num_layers):
        specs += [
            (f"layers.{i}.attn_norm", (h,)),
            (f"layers.{i}.wq", (h, h)),
            (f"layers.{i}.wk", (h, h)),
            (f"layers.{i}.wv", (h, h)),
            (f"layers.{i}.wo", (h, h)),
            (f"layers.{i}.mlp_norm", (h,)),
            (f"layers.{i}.w_gate", (h, m)),
            (f"layers.{i}.w_up", (h, m)),
            (f"layers.{i}.w_down", (m, h)),
        ]
    specs += [("final_norm", (h,)), ("w_out", (h, config.vocab_size))]
    return specs


def init_random(config: ModelConfig) -> ModelWeights:
    """Seeded random weights; same config (incl. seed) gives identical bits.

    Projections use scale 0.02/sqrt(num_layers), the embedding 0.02, norm
    gains start at one. Draw order follows the canonical tensor list.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    proj_scale = np.float32(0.02 / np.sqrt(config.num_layers))
    emb_scale = np.float32(0.02)

    def draw(shape, scale):
        return rng.standard_normal(shape, dtype=np.float32) * scale

    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_specs(config):
        if name.endswith("_norm"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name == "embedding":
            tensors[name] = draw(shape, emb_scale)
        else:
            tensors[name] = draw(shape, proj_scale)
    return _weights_from_tensors(config, tensors)


def _weights_from_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> ModelWeights:
    layers = [
        LayerWeights(
            attn_norm=tensors[f"layers.{i}.attn_norm"],
            wq=tensors[f"layers.{i}.wq"],
            wk=tensors[f"layers.{i}.wk"],
            wv=tensors[f"layers.{i}.wv"],
            wo=tensors[f"layers.{i}.wo"],
            mlp_norm=tensors[f"layers.{i}.mlp_norm"],
            w_gate=tensors[f"layers.{i}.w_gate"],
            w_up=tensors[f"layers.{i}.w_up"],
            w_down=tensors[f"layers.{i}.w_down"],
        )
        for i in range(config.num_layers)
    ]
    return ModelWeights(
        config=config,
        embedding=tensors["embedding"],
        layers=layers,
        final_norm=tensors["final_norm"],
        w_out=tensors["w_out"],
    )


def _weights_to_tensors(weights: ModelWeights) -> dict[str, np.ndarray]:
    tensors = {"embedding": weights.embedding, "final_norm": weights.final_norm, "w_out": weights.w_out}
    for i, lw in enumerate(weights.layers):
        tensors[f"layers.{i}.attn_norm"] = lw.attn_norm
        tensors[f"layers.{i}.wq"] = lw.wq
        tensors[f"layers.{i}.wk"] = lw.wk
        tensors[f"layers.{i}.wv"] = lw.wv
        tensors[f"layers.{i}.wo"] = lw.wo
        tensors[f"layers.{i}.mlp_norm"] = lw.mlp_norm
        tensors[f"layers.{i}.w_gate"] = lw.w_gate
        tensors[f"layers.{i}.w_up"] = lw.w_up
        tensors[f"layers.{i}.w_down"] = lw.w_down
    return tensors


# --- tensor container -------------------------------------------------------
#
# Little-endian binary layout, no alignment padding:
#   magic "FDTC" (4 bytes) | version u32 | tensor count u32
#   per tensor: name_len u16 | name UTF-8 | rank u8 | dims u64 each | f32 data
#
# The reader validates every length against the remaining byte count before
# allocating anything, so hostile headers cannot trigger huge allocations.


def write_container(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        # asarray, not ascontiguousarray: the latter promotes rank-0 to rank-1
        arr = np.asarray(arr, dtype="<f4")
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise UsageError(f"tensor name too long: {len(name_b)} bytes")
        if arr.ndim > 255:
            raise UsageError(f"tensor rank too high: {arr.ndim}")
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(
                f"file ends while reading {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_container(data: bytes) -> dict[str, np.ndarray]:
    """Parse container bytes into {name: float32 array}.

    Raises a ContainerError subclass on any malformed input; never raises
    struct or unicode errors, and never allocates based on unvalidated sizes.
    """
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise MagicError("bad magic bytes; not a tensor container")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version}")
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for idx in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, f"tensor {idx} name length"))
        name_b = r.take(name_len, f"tensor {idx} name")
        try:
            name = name_b.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise HeaderError(f"tensor {idx} name is not valid UTF-8") from exc
        if name in tensors:
            raise HeaderError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", r.take(1, f"tensor {name!r} rank"))
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"tensor {name!r} dims"))
        n_elem = 1
        for d in dims:
            n_elem *= d
        n_bytes = n_elem * 4
        if n_bytes > len(r.data) - r.pos:
            raise TruncationError(
                f"tensor {name!r} declares {n_bytes} payload bytes, "
                f"only {len(r.data) - r.pos} remain"
            )
        payload = r.take(n_bytes, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    if r.pos != len(r.data):
        raise PayloadError(f"{len(r.data) - r.pos} trailing bytes after last tensor")
    return tensors


def serialize_weights(weights: ModelWeights) -> bytes:
    ordered = _weights_to_tensors(weights)
    canonical = {name: ordered[name] for name, _ in _tensor_specs(weights.config)}
    return write_container(canonical)


def save_weights(weights: ModelWeights, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_weights(weights))


def load_weights(path, config: ModelConfig) -> ModelWeights:
    """Load weights and validate names, shapes, and finiteness against config."""
    config.validate()
    with open(path, "rb") as f:
        tensors = read_container(f.read())
    expected = dict(_tensor_specs(config))
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing:
        raise ShapeError(f"container is missing tensors: {missing[:4]}")
    if extra:
        raise ShapeError(f"container has unexpected tensors: {extra[:4]}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
        if not np.all(np.isfinite(tensors[name])):
            raise PayloadError(f"tensor {name!r} contains non-finite values")
    return _weights_from_tensors(config, tensors)


def weights_sha256(weights: ModelWeights) -> str:
    return hashlib.sha256(serialize_weights(weights)).hexdigest()


# --- forward pass -----------------------------------------------------------


class LayerContextProvider(Protocol):
    """Supplies the attention context for each layer of a forward pass.

    Receives the layer index and the fresh post-rotary q/k/v rows for the
    active positions, returns (context_keys, context_values), each with shape
    (heads, context, head_dim). The provider owns cache refresh policy:
    model code never writes a cache.
    """

    def layer_context(
        self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]: ...


class FreshContext:
    """Whole-sequence forward: the context is exactly the fresh rows."""

    def layer_context(self, layer, q, k, v):
        return k, v


def _split_heads(x: np.ndarray, num_heads: int, head_dim: int) -> np.ndarray:
    # (rows, hidden) -> (heads, rows, head_dim), contiguous for the kernels
    rows = x.shape[0]
    return np.ascontiguousarray(x.reshape(rows, num_heads, head_dim).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, rows, head_dim = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(rows, heads * head_dim)


def forward_layers(
    weights: ModelWeights,
    tokens: np.ndarray,
    active: Sequence[int],
    context: LayerContextProvider | None = None,
    hooks: Iterable[LayerForwardHook] = (),
    position_ids: np.ndarray | None = None,
):
    """Forward the active positions through all layers.

    Returns (logits, fresh_kv) where logits has one row per active position
    over the vocabulary, and fresh_kv is a per-layer list of (k, v) arrays of
    shape (heads, len(active), head_dim) holding the post-rotary keys and the
    values computed for the active rows.

    With ``context=None``, active must cover the whole sequence and attention
    runs over the fresh rows; this is the monolithic dense forward. Hooks
    observe per-layer attention probabilities and never change outputs.
    """
    cfg = weights.config
    tokens = np.asarray(tokens)
    L = tokens.shape[0]
    active = list(active)
    if any(i < 0 or i >= L for i in active):
        raise UsageError("active positions out of range")
    if context is None:
        if active != list(range(L)):
            raise UsageError("a whole-sequence forward requires active = all positions")
        context = FreshContext()
    if position_ids is None:
        position_ids = np.arange(L, dtype=np.int64)
    hooks = tuple(hooks)

    active_idx = np.asarray(active, dtype=np.int64)
    pos = position_ids[active_idx]
    h = weights.embedding[tokens[active_idx]].astype(np.float32, copy=True)

    fresh_kv: list[tuple[np.ndarray, np.ndarray]] = []
    for layer, lw in enumerate(weights.layers):
        x = tc.rms_norm_rows(h, lw.attn_norm)
        q = tc.rope(_split_heads(tc.matmul(x, lw.wq), cfg.num_heads, cfg.head_dim), pos)
        k = tc.rope(_split_heads(tc.matmul(x, lw.wk), cfg.num_heads, cfg.head_dim), pos)
        v = _split_heads(tc.matmul(x, lw.wv), cfg.num_heads, cfg.head_dim)
        fresh_kv.append((k, v))

        ctx_k, ctx_v = context.layer_context(layer, q, k, v)
        if hooks:
            attn, probs = tc.attend(q, ctx_k, ctx_v, return_probs=True)
            for hook in hooks:
                hook(layer, active, probs)
        else:
            attn = tc.attend(q, ctx_k, ctx_v)
        h = h + tc.matmul(_merge_heads(attn), lw.wo)

        x2 = tc.rms_norm_rows(h, lw.mlp_norm)
        gated = tc.silu(tc.matmul(x2, lw.w_gate)) * tc.matmul(x2, lw.w_up)
        h = h + tc.matmul(gated, lw.w_down)

    logits = tc.matmul(tc.rms_norm_rows(h, weights.final_norm), weights.w_out)
    return logits, fresh_kv
