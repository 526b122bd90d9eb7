"""
Multimodal latent connector.

Depth, segmentation and edge tokens plus the caption embedding are assembled
into one sequence of M = 3 g^2 + L_text tokens (absent modalities become
copies of a learnable empty token m0). A short learnable latent sequence
cross-attends over it and is refined by self-attention blocks, so the cost
grows linearly in M.
"""
import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np

from src.errors import ConfigError, DomainError, ShapeError
from src.layers import CrossAttentionBlock, LayerNorm, Module, TransformerBlock
from src.synth_data import L_TEXT, VOCAB
from src.tensor_core import Parameter, Tensor, concat, embedding, expand, mul, add

logger = logging.getLogger(__name__)

SEGMENTS = ("depth", "seg", "edge", "text")
TEMPERATURE_RANGE = (0.4, 10.0)
LATENT_INIT_STD = 0.02

# Cross-attention layer: scores and weighting cost M*N*D each, key/value
# projections M*D^2 each, query/output projections N*D^2 each.
CROSS_MN_D, CROSS_M_D2, CROSS_N_D2 = 2, 2, 2
# Full self-attention over M tokens: scores and weighting M^2*D each,
# four projections M*D^2 each.
SELF_M2_D, SELF_M_D2 = 2, 4


@dataclass(frozen=True)
class TemperatureConfig:
    """Per-segment multipliers s_k of the standard temperature sqrt(d_k)."""

    depth: float = 1.0
    seg: float = 1.0
    edge: float = 1.0
    text: float = 1.0

    def __post_init__(self):
        low, high = TEMPERATURE_RANGE
        for item in fields(self):
            value = getattr(self, item.name)
            if not low <= value <= high:
                raise DomainError(f"Temperature scale for {item.name} must lie in [{low}, {high}], got {value}")

    def scale(self, segment: str) -> float:
        return getattr(self, segment)

    def is_neutral(self) -> bool:
        return all(getattr(self, item.name) == 1.0 for item in fields(self))

    def with_value(self, segment: str, value: float) -> "TemperatureConfig":
        values = {item.name: getattr(self, item.name) for item in fields(self)}
        values[segment] = value
        return TemperatureConfig(**values)


@dataclass
class AssembledSequence:
    tokens: Tensor
    tags: np.ndarray
    present: np.ndarray

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


def segment_tags(grid: int, text_length: int = L_TEXT) -> np.ndarray:
    """Segment id per position: g^2 depth, g^2 seg, g^2 edge, then text."""
    return np.repeat(np.arange(len(SEGMENTS)), [grid * grid] * 3 + [text_length])


def column_temperatures(tags: np.ndarray, temps: TemperatureConfig) -> np.ndarray:
    """Per-key-column scale s_k for an assembled sequence."""
    scales = np.array([temps.scale(name) for name in SEGMENTS], dtype=np.float64)
    return scales[np.asarray(tags)]


class ModalityEmbedder(Module):
    """
    Caption embedding, per-segment positional vectors and the empty token.

    Args:
        d_model: Token width.
        grid: Tokens per side of each modality grid.
        rng: Initialization generator.
        text_length: Caption length.
        vocab_size: Caption vocabulary size.
    """

    def __init__(self, d_model: int, grid: int, rng: np.random.Generator,
                 text_length: int = L_TEXT, vocab_size: int = len(VOCAB)):
        self.d_model = d_model
        self.grid = grid
        self.text_length = text_length
        self.caption_table = Parameter(rng.normal(0.0, LATENT_INIT_STD, (vocab_size, d_model)))
        self.text_pos = Parameter(rng.normal(0.0, LATENT_INIT_STD, (text_length, d_model)))
        self.modality_pos = Parameter(rng.normal(0.0, LATENT_INIT_STD, (3, grid * grid, d_model)))
        self.empty_token = Parameter(rng.normal(0.0, LATENT_INIT_STD, (d_model,)))

    @property
    def sequence_length(self) -> int:
        return 3 * self.grid * self.grid + self.text_length

    def embed_caption(self, caption_ids: np.ndarray) -> Tensor:
        """(B, L_text) ids -> (B, L_text, D) embeddings with positions."""
        caption_ids = np.asarray(caption_ids, dtype=np.int64)
        if caption_ids.ndim != 2 or caption_ids.shape[1] != self.text_length:
            raise ShapeError(f"embed_caption: expected (B, {self.text_length}) ids, got {caption_ids.shape}")
        return embedding(self.caption_table, caption_ids) + self.text_pos

    def _mix(self, tokens: Tensor, keep: np.ndarray) -> Tensor:
        keep = keep.astype(tokens.dtype)[:, None, None]
        return add(mul(tokens, keep), mul(self.empty_token, 1.0 - keep))

    def assemble(self, depth_tok: Optional[np.ndarray], seg_tok: Optional[np.ndarray],
                 edge_tok: Optional[np.ndarray], caption_ids: np.ndarray, mask: np.ndarray) -> AssembledSequence:
        """
        Builds the multimodal sequence in the fixed order depth, seg, edge, text.

        Args:
            depth_tok: (B, g^2, D) tokens already padded to D, or None when absent.
            seg_tok: As `depth_tok`.
            edge_tok: As `depth_tok`.
            caption_ids: (B, L_text) caption token ids.
            mask: (B, 4) or (4,) presence flags in segment order; absent
                segments are replaced by repeated copies of the empty token.

        Returns:
            AssembledSequence of length 3 g^2 + L_text.
        """
        caption_ids = np.asarray(caption_ids, dtype=np.int64)
        if caption_ids.ndim == 1:
            caption_ids = caption_ids[None]
        batch = caption_ids.shape[0]
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (batch, len(SEGMENTS))).copy()
        expected = (batch, self.grid * self.grid, self.d_model)

        parts = []
        for k, tokens in enumerate((depth_tok, seg_tok, edge_tok)):
            if tokens is None:
                if mask[:, k].any():
                    raise ShapeError(f"assemble: {SEGMENTS[k]} marked present but no tokens given")
                tokens = np.zeros(expected)
            tokens = np.asarray(tokens)
            if tokens.shape != expected:
                raise ShapeError(f"assemble: {SEGMENTS[k]} tokens have shape {tokens.shape}, expected {expected}")
            parts.append(self._mix(Tensor(tokens) + self.modality_pos[k], mask[:, k]))
        parts.append(self._mix(self.embed_caption(caption_ids), mask[:, 3]))
        return AssembledSequence(concat(parts, axis=1), segment_tags(self.grid, self.text_length), mask)


class MultimodalLatentConnector(Module):
    """
    Latent tokens (queries) cross-attend over the assembled sequence, then
    self-attention blocks refine them.
    """

    def __init__(self, d_model: int, n_latents: int, heads: int, self_blocks: int, rng: np.random.Generator):
        self.n_latents = n_latents
        self.latents = Parameter(rng.normal(0.0, LATENT_INIT_STD, (n_latents, d_model)))
        self.cross = CrossAttentionBlock(d_model, heads, rng)
        self.blocks = [TransformerBlock(d_model, heads, rng) for _ in range(self_blocks)]
        self.norm = LayerNorm(d_model)

    def forward(self, tokens: Tensor, column_scale: Optional[np.ndarray] = None) -> Tensor:
        """(B, M, D) sequence -> (B, N, D) latents."""
        batch, length, dim = tokens.shape
        if self.n_latents >= length:
            raise ConfigError(f"connect: latent count N={self.n_latents} must be smaller than sequence length M={length}")
        h = self.cross(expand(self.latents, (batch, self.n_latents, dim)), tokens, column_scale)
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def connect(self, seq: AssembledSequence, temps: Optional[TemperatureConfig] = None) -> Tensor:
        scale = None if temps is None else column_temperatures(seq.tags, temps)
        return self.forward(seq.tokens, scale)


def mac_count(m: int, n: int, d: int, heads: int = 1) -> int:
    """
    Multiply-accumulates of the connector's cross-attention layer:
    2 M N D + 2 M D^2 + 2 N D^2 (independent of the head split).
    """
    _check_positive(m=m, n=n, d=d, heads=heads)
    return CROSS_MN_D * m * n * d + CROSS_M_D2 * m * d * d + CROSS_N_D2 * n * d * d


def baseline_mac_count(m: int, d: int, heads: int = 1) -> int:
    """Full self-attention over M tokens: 2 M^2 D + 4 M D^2."""
    _check_positive(m=m, d=d, heads=heads)
    return SELF_M2_D * m * m * d + SELF_M_D2 * m * d * d


def _check_positive(**values):
    for name, value in values.items():
        if value < 1:
            raise DomainError(f"mac_count: {name} must be positive, got {value}")


def present_summary(mask: Sequence[bool]) -> Dict[str, bool]:
    return {name: bool(flag) for name, flag in zip(SEGMENTS, mask)}
