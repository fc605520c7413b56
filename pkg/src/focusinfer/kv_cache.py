"""Per-layer approximate KV store with compute-or-reuse semantics.

The cache holds one post-rotary key row and one value row per position per
layer, plus a validity bitmap and per-block mean keys over the prompt region.
A decode step overwrites only the rows it recomputed; everything else is
reused bit for bit, which is what the cache-integrity tests check.

Prompt block means are recomputed lazily on the first read after any prompt
write. The prompt is static after the first full refresh, so in practice the
means are computed once per block entry and then served from cache; they are
read at every sparse layer of every step and must be cheap.
"""

from __future__ import annotations

import numpy as np

from . import model as model_mod
from .errors import BoundsError, CacheMissError, ConfigError, ShapeError


def block_partition(prompt_len: int, prompt_block_size: int) -> list[tuple[int, int]]:
    """Contiguous (start, end) blocks covering [0, prompt_len).

    The final block may be shorter; an empty prompt yields no blocks.
    """
    if prompt_block_size < 1:
        raise ConfigError(f"prompt_block_size must be >= 1, got {prompt_block_size}")
    if prompt_len < 0:
        raise ConfigError(f"prompt_len must be >= 0, got {prompt_len}")
    return [
        (s, min(s + prompt_block_size, prompt_len))
        for s in range(0, prompt_len, prompt_block_size)
    ]


class KVCache:
    def __init__(
        self,
        num_layers: int,
        seq_len: int,
        num_heads: int,
        head_dim: int,
        prompt_len: int,
        prompt_block_size: int,
    ):
        if prompt_len > seq_len:
            raise ConfigError(f"prompt_len {prompt_len} exceeds seq_len {seq_len}")
        self.num_layers = num_layers
        self.seq_len = seq_len
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.prompt_len = prompt_len
        self.blocks = block_partition(prompt_len, prompt_block_size)
        shape = (num_heads, seq_len, head_dim)
        self.keys = [np.zeros(shape, dtype=np.float32) for _ in range(num_layers)]
        self.values = [np.zeros(shape, dtype=np.float32) for _ in range(num_layers)]
        self.valid = np.zeros((num_layers, seq_len), dtype=bool)
        self._means: list[np.ndarray | None] = [None] * num_layers

    # -- writes --------------------------------------------------------------

    def _check_rows(self, keys: np.ndarray, values: np.ndarray, n: int, what: str) -> None:
        want = (self.num_heads, n, self.head_dim)
        if keys.shape != want or values.shape != want:
            raise ShapeError(
                f"{what}: expected K/V shape {want}, got {keys.shape} and {values.shape}"
            )

    def full_refresh(self, layer: int, keys: np.ndarray, values: np.ndarray) -> None:
        """Overwrite every position of one layer; marks all rows valid."""
        self._check_layer(layer)
        self._check_rows(keys, values, self.seq_len, "full_refresh")
        self.keys[layer][...] = keys
        self.values[layer][...] = values
        self.valid[layer, :] = True
        self._means[layer] = None

    def refresh_at(
        self,
        layer: int,
        indices,
        keys: np.ndarray,
        values: np.ndarray,
        prompt_touch: bool = False,
    ) -> None:
        """Overwrite only the listed rows; the complement stays bit-identical.

        Prompt rows are static during decoding, so writing one requires the
        explicit ``prompt_touch`` flag and invalidates the cached block means.
        """
        self._check_layer(layer)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size == 0:
            self._check_rows(keys, values, 0, "refresh_at")
            return
        if idx.min() < 0 or idx.max() >= self.seq_len:
            raise BoundsError(f"refresh index out of range [0, {self.seq_len})")
        touches_prompt = bool(idx.min() < self.prompt_len)
        if touches_prompt and not prompt_touch:
            raise BoundsError(
                "refresh_at touches prompt rows; pass prompt_touch=True if intended"
            )
        self._check_rows(keys, values, idx.size, "refresh_at")
        self.keys[layer][:, idx, :] = keys
        self.values[layer][:, idx, :] = values
        self.valid[layer, idx] = True
        if touches_prompt:
            self._means[layer] = None

    # -- reads ---------------------------------------------------------------

    def _check_layer(self, layer: int) -> None:
        if not (0 <= layer < self.num_layers):
            raise BoundsError(f"layer {layer} out of range [0, {self.num_layers})")

    def gather(self, layer: int, indices) -> tuple[np.ndarray, np.ndarray]:
        """Rows in the given index order; reading an unwritten row is an error."""
        self._check_layer(layer)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.seq_len):
            raise CacheMissError(f"gather index out of range [0, {self.seq_len})")
        if idx.size and not np.all(self.valid[layer, idx]):
            bad = idx[~self.valid[layer, idx]][:4]
            raise CacheMissError(f"gather of unwritten positions {bad.tolist()}")
        return self.keys[layer][:, idx, :], self.values[layer][:, idx, :]

    def require_all_valid(self, layer: int) -> None:
        self._check_layer(layer)
        if not np.all(self.valid[layer]):
            missing = np.flatnonzero(~self.valid[layer])[:4]
            raise CacheMissError(
                f"layer {layer} cache incomplete at positions {missing.tolist()}"
            )

    def layer_keys(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self.keys[layer]

    def layer_values(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self.values[layer]

    def prompt_means(self, layer: int) -> np.ndarray:
        """Per-block mean prompt keys, shape (heads, n_blocks, head_dim).

        The trailing partial block averages over its true member count.
        """
        self._check_layer(layer)
        means = self._means[layer]
        if means is None:
            if self.prompt_len and not np.all(self.valid[layer, : self.prompt_len]):
                raise CacheMissError(
                    f"prompt rows of layer {layer} not fully written; means undefined"
                )
            means = np.empty(
                (self.num_heads, len(self.blocks), self.head_dim), dtype=np.float32
            )
            for b, (s, e) in enumerate(self.blocks):
                means[:, b, :] = np.mean(self.keys[layer][:, s:e, :], axis=1)
            self._means[layer] = means
        return means

    # -- utilities -----------------------------------------------------------

    def clone(self) -> "KVCache":
        """Deep copy; used by oracle probes that must not disturb the decode."""
        other = KVCache.__new__(KVCache)
        other.num_layers = self.num_layers
        other.seq_len = self.seq_len
        other.num_heads = self.num_heads
        other.head_dim = self.head_dim
        other.prompt_len = self.prompt_len
        other.blocks = list(self.blocks)
        other.keys = [k.copy() for k in self.keys]
        other.values = [v.copy() for v in self.values]
        other.valid = self.valid.copy()
        other._means = [m.copy() if m is not None else None for m in self._means]
        return other

    def dump_layer(self, layer: int, path) -> None:
        """Debug dump of one layer to the tensor-container format."""
        self._check_layer(layer)
        tensors = {
            "keys": self.keys[layer],
            "values": self.values[layer],
            "valid": self.valid[layer].astype(np.float32),
        }
        if self.blocks and np.all(self.valid[layer, : self.prompt_len]):
            tensors["prompt_block_means"] = self.prompt_means(layer)
        with open(path, "wb") as f:
            f.write(model_mod.write_container(tensors))
