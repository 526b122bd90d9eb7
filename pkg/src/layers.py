"""Transformer building blocks on top of the tensor core."""
import math
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from src.errors import ConfigError, DomainError, ShapeError
from src.tensor_core import (
    Parameter, Tensor, gelu, layer_norm, matmul, reshape, softmax, swap_last, transpose,
)


class Module:
    """Container that discovers its parameters through attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                value.name = f"{prefix}{attr}"
                yield value.name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{attr}/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}/{i}/")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters(prefix)}

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, param in self.named_parameters(prefix):
            if name not in state:
                raise ShapeError(f"Missing tensor '{name}' in state")
            param.assign(state[name])

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(in_features), (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4):
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def attention(q: Tensor, k: Tensor, v: Tensor, delta: Union[float, np.ndarray]) -> Tensor:
    """
    softmax(Q K^T / delta) V.

    Args:
        q: Queries (..., N, d).
        k: Keys (..., M, d).
        v: Values (..., M, d_v).
        delta: Temperature, a scalar or one divisor per key column (length M).
            Column divisors scale logits before ONE joint softmax over all keys.

    Returns:
        Attended values (..., N, d_v).
    """
    delta_arr = np.asarray(delta, dtype=np.float64)
    if np.any(~(delta_arr > 0)):
        raise DomainError(f"attention: temperature must be > 0, got min {float(np.min(delta_arr))}")
    if delta_arr.ndim == 1 and delta_arr.shape[0] != k.shape[-2]:
        raise ShapeError(f"attention: {delta_arr.shape[0]} column temperatures for {k.shape[-2]} keys")
    return matmul(softmax(matmul(q, swap_last(k)), axis=-1, temperature=delta), v)


class MultiHeadAttention(Module):
    """Multi-head (cross-)attention with optional per-key-column temperature scales."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"heads ({heads}) must divide the model width ({dim})")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, length, dim = x.shape
        return transpose(reshape(x, (batch, length, self.heads, self.head_dim)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        batch, _, length, _ = x.shape
        return reshape(transpose(x, (0, 2, 1, 3)), (batch, length, self.heads * self.head_dim))

    def forward(self, x: Tensor, context: Optional[Tensor] = None,
                column_scale: Optional[np.ndarray] = None) -> Tensor:
        """
        Args:
            x: Queries (B, N, D).
            context: Keys/values (B, M, D); defaults to `x` (self-attention).
            column_scale: Optional per-key multipliers s of the standard
                temperature, so delta = s * sqrt(head_dim) per column.
        """
        context = x if context is None else context
        if x.ndim != 3 or context.ndim != 3:
            raise ShapeError(f"MultiHeadAttention: expected (B, L, D) inputs, got {x.shape} and {context.shape}")
        delta = math.sqrt(self.head_dim)
        if column_scale is not None:
            delta = np.asarray(column_scale, dtype=np.float64) * delta
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        return self.out_proj(self._merge(attention(q, k, v, delta)))


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm cross-attention block: queries attend over a context sequence."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)

    def forward(self, x: Tensor, context: Tensor, column_scale: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), column_scale)
        return x + self.mlp(self.norm2(x))
