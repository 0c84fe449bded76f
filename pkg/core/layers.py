"""Learnable building blocks whose weights live in a shared ParameterStore.

Token tensors are shaped (groups, tokens, width); grids are H x W x C.
"""

from typing import Optional

import numpy as np

from core.errors import ConfigError, DimensionError
from core.ops import fold, gelu, layer_norm, matmul, softmax_lastdim, unfold
from core.params import ParameterStore
from core.tensor import Tensor, as_tensor, broadcast_to, concat

CEI_VALUES = ("timestep", "keys_plus_timestep")


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        self.d_in = d_in
        self.d_out = d_out
        self.weight = store.create(f"{name}.weight", (d_in, d_out), "zeros" if zero else "normal")
        self.bias = store.create(f"{name}.bias", (d_out,), "zeros") if bias else None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear layer expects width {self.d_in}, got shape {x.shape}")
        vector = x.ndim == 1
        y = matmul(x.reshape(1, self.d_in) if vector else x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(self.d_out) if vector else y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.gamma = store.create(f"{name}.gamma", (dim,), "ones")
        self.beta = store.create(f"{name}.beta", (dim,), "zeros")

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    g, n, w = x.shape
    return x.reshape(g, n, heads, w // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    g, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(g, n, h * d)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over (groups, tokens, width) inputs."""
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = 1.0 / np.sqrt(qh.shape[-1])
    weights = softmax_lastdim(matmul(qh, kh.transpose(0, 1, 3, 2)) * scale)
    return _merge_heads(matmul(weights, vh))


class SelfAttention:
    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.qkv = Linear(store, f"{name}.qkv", dim, 3 * dim)
        self.out = Linear(store, f"{name}.out", dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        qkv = self.qkv(x)
        d = self.dim
        return self.out(attention(qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:], self.heads))


class CrossAttention:
    """Multi-head attention of queries over a separate key and value sequence.

    With ``shared_values`` every key carries the same value row, so the
    softmax weights sum out and each query receives that row. No query or
    key projections are allocated in that case.
    """

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, shared_values: bool = False):
        if dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.shared_values = shared_values
        if not shared_values:
            self.q = Linear(store, f"{name}.q", dim, dim)
            self.k = Linear(store, f"{name}.k", dim, dim)
        self.v = Linear(store, f"{name}.v", dim, dim)
        self.out = Linear(store, f"{name}.out", dim, dim)

    def __call__(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        if self.shared_values:
            row = self.out(self.v(values[:, :1]))
            return broadcast_to(row, queries.shape[:2] + row.shape[2:])
        return self.out(attention(self.q(queries), self.k(keys), self.v(values), self.heads))


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, dim: int, expansion: int = 4):
        self.inner = Linear(store, f"{name}.inner", dim, expansion * dim)
        self.outer = Linear(store, f"{name}.outer", expansion * dim, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x)))


class TransformerBlock:
    """Pre-norm self-attention and feed-forward, each added residually."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int, expansion: int = 4):
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim)
        self.attn = SelfAttention(store, f"{name}.attn", dim, heads)
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim)
        self.ffn = FeedForward(store, f"{name}.ffn", dim, expansion)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class WindowedBlock:
    """A transformer block run independently inside every unfold window."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        dim: int,
        heads: int,
        window: tuple,
        stride: tuple,
        wrap: bool,
        expansion: int = 4,
    ):
        self.window = tuple(window)
        self.stride = tuple(stride)
        self.wrap = wrap
        self.dim = dim
        self.block = TransformerBlock(store, name, dim, heads, expansion)

    def __call__(self, grid: Tensor) -> Tensor:
        tokens = unfold(grid, self.window, self.stride, self.wrap)
        n = tokens.shape[0]
        h, w = self.window
        mixed = self.block(tokens.reshape(n, h * w, self.dim))
        return fold(mixed.reshape(n, h * w * self.dim), grid.shape, self.window, self.stride, self.wrap)


def downsample(store: ParameterStore, name: str, d_in: int, d_out: int):
    """Strided 2 x 2 patch merge followed by a learned projection."""
    proj = Linear(store, name, 4 * d_in, d_out)

    def apply(grid: Tensor) -> Tensor:
        height, width, _ = grid.shape
        merged = proj(unfold(grid, (2, 2), (2, 2)))
        return merged.reshape(height // 2, width // 2, d_out)

    return apply


def upsample(store: ParameterStore, name: str, d_in: int, d_out: int):
    """Learned up-projection into 2 x 2 patches, folded to double resolution."""
    proj = Linear(store, name, d_in, 4 * d_out)

    def apply(grid: Tensor) -> Tensor:
        height, width, _ = grid.shape
        tokens = proj(grid).reshape(height * width, 4 * d_out)
        return fold(tokens, (2 * height, 2 * width, d_out), (2, 2), (2, 2))

    return apply


def apply_timestep(r: Tensor, vm: Tensor, mode: str = "diagonal") -> Tensor:
    """Combine cross-attention output with the timestep token.

    ``diagonal`` scales every channel by the token; ``matrix`` multiplies by
    the rank-one matrix vm^T vm / width.
    """
    if mode == "diagonal":
        return r * vm
    if mode == "matrix":
        width = vm.shape[-1]
        return matmul(r, matmul(vm.transpose(0, 2, 1), vm) * (1.0 / width))
    raise ConfigError(f"unknown timestep product {mode!r}; expected 'diagonal' or 'matrix'")


class ControlInjector:
    """Global-to-focused fusion of dominant tokens with text and timestep tokens.

    Self-attention runs over the joined (text, dominant, timestep) sequence,
    which is then split back into its segments. Dominant tokens query the
    text segment (or, without text, themselves plus the timestep token)
    and read the timestep token as the value of every key. With
    ``values="keys_plus_timestep"`` the values are the keys shifted by that
    token instead. The result is combined with the timestep token and added
    back.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        dim: int,
        heads: int,
        timestep_product: str = "diagonal",
        values: str = "timestep",
    ):
        if values not in CEI_VALUES:
            raise ConfigError(f"unknown CEI value source {values!r}; expected one of {', '.join(CEI_VALUES)}")
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.mix = SelfAttention(store, f"{name}.mix", dim, heads)
        self.cross = CrossAttention(store, f"{name}.cross", dim, heads, shared_values=values == "timestep")
        self.timestep_product = timestep_product
        self.values = values

    def __call__(self, d: Tensor, n: Optional[Tensor], m: Tensor) -> Tensor:
        if m is None:
            raise DimensionError("timestep token is required")
        groups = d.shape[0]
        m = broadcast_to(m, (groups, 1, m.shape[-1]))
        parts = [d, m] if n is None else [broadcast_to(n, (groups,) + n.shape[1:]), d, m]
        seq = concat(parts, axis=1)
        seq = seq + self.mix(self.norm(seq))

        offset = 0 if n is None else n.shape[1]
        qd = seq[:, offset:offset + d.shape[1]]
        vm = seq[:, -1:]
        keys = concat([qd, vm], axis=1) if n is None else seq[:, :offset]
        if self.values == "timestep":
            values = broadcast_to(vm, keys.shape)
        else:
            values = keys + vm
        r = self.cross(qd, keys, values)
        return apply_timestep(r, vm, self.timestep_product) + qd
