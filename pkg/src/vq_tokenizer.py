"""
Vector-quantized modality tokenizer.

One shared autoencoder turns depth, segmentation and edge maps into a g x g
grid of tokens. Inputs are channel-encoded into 10 channels (depth, 5-way
segmentation one-hot, edge, 3 modality tags); the decoder predicts 7 channels
(depth, segmentation scores, edge score).
"""
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.checkpoint import load_checkpoint, save_checkpoint
from src.errors import ContractError, NumericError, ShapeError
from src.layers import LayerNorm, Linear, Module, TransformerBlock
from src.metrics import binary_f1
from src.synth_data import MODALITIES, SEG_CLASSES, ModalityMap
from src.tensor_core import (
    Adam, GradTape, Parameter, Tensor, embedding, mse, mul, reshape,
    straight_through, transpose,
)

logger = logging.getLogger(__name__)

VQ_VERSION = 1
IN_CHANNELS = 1 + SEG_CLASSES + 1 + len(MODALITIES)
OUT_CHANNELS = 1 + SEG_CLASSES + 1
_DEPTH = slice(0, 1)
_SEG = slice(1, 1 + SEG_CLASSES)
_EDGE = slice(1 + SEG_CLASSES, 2 + SEG_CLASSES)
TOKEN_MODES = ("discrete", "continuous")


@dataclass
class Codebook:
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ContractError(f"Codebook needs K >= 2 rows, got shape {self.vectors.shape}")
        if not np.isfinite(self.vectors).all():
            raise ContractError("Codebook rows must be finite")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class TokenSequence:
    """g*g tokens of one modality map, row-major over the grid."""

    mode: str
    vectors: np.ndarray
    modality: str
    indices: Optional[np.ndarray] = None

    @property
    def grid(self) -> int:
        return int(round(np.sqrt(self.vectors.shape[0])))

    def __len__(self):
        return self.vectors.shape[0]


# ---------------------------------------------------------------------------
# Channel encoding
# ---------------------------------------------------------------------------

def channel_encode(modality: ModalityMap) -> np.ndarray:
    """H x W x IN_CHANNELS input for the encoder."""
    grid = np.asarray(modality.grid)
    out = np.zeros(grid.shape + (IN_CHANNELS,), dtype=np.float64)
    if modality.kind == "depth":
        out[..., 0] = grid
    elif modality.kind == "seg":
        ids = grid.astype(np.int64)
        if ids.min() < 0 or ids.max() >= SEG_CLASSES:
            raise ShapeError(f"Segmentation ids must lie in [0, {SEG_CLASSES}), got [{ids.min()}, {ids.max()}]")
        out[..., _SEG] = np.eye(SEG_CLASSES)[ids]
    elif modality.kind == "edge":
        out[..., _EDGE.start] = grid.astype(np.float64)
    else:
        raise ContractError(f"Cannot tokenize modality '{modality.kind}'")
    out[..., OUT_CHANNELS + MODALITIES.index(modality.kind)] = 1.0
    return out


def reconstruction_mask(kind: str, shape: Tuple[int, int]) -> np.ndarray:
    """Selects the decoder channels supervised for a map of `kind`."""
    mask = np.zeros(shape + (OUT_CHANNELS,))
    mask[..., {"depth": _DEPTH, "seg": _SEG, "edge": _EDGE}[kind]] = 1.0
    return mask


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, (H/p)(W/p), p*p*C), row-major over patches."""
    batch, height, width, channels = x.shape
    if height % patch or width % patch:
        raise ShapeError(f"patchify: {height}x{width} is not divisible into {patch}x{patch} patches")
    gh, gw = height // patch, width // patch
    x = reshape(x, (batch, gh, patch, gw, patch, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch, gh * gw, patch * patch * channels))


def unpatchify(x: Tensor, patch: int, grid: int, channels: int) -> Tensor:
    batch = x.shape[0]
    x = reshape(x, (batch, grid, grid, patch, patch, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch, grid * patch, grid * patch, channels))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class VqEncoder(Module):
    def __init__(self, patch: int, d_tok: int, blocks: int, heads: int, rng: np.random.Generator):
        self.patch = patch
        self.embed = Linear(patch * patch * IN_CHANNELS, d_tok, rng)
        self.blocks = [TransformerBlock(d_tok, heads, rng) for _ in range(blocks)]
        self.norm = LayerNorm(d_tok)

    def forward(self, x: Tensor) -> Tensor:
        h = self.embed(patchify(x, self.patch))
        for block in self.blocks:
            h = block(h)
        return self.norm(h)


class VqDecoder(Module):
    def __init__(self, patch: int, grid: int, d_tok: int, blocks: int, heads: int, rng: np.random.Generator):
        self.patch = patch
        self.grid = grid
        self.blocks = [TransformerBlock(d_tok, heads, rng) for _ in range(blocks)]
        self.norm = LayerNorm(d_tok)
        self.head = Linear(d_tok, patch * patch * OUT_CHANNELS, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        h = tokens
        for block in self.blocks:
            h = block(h)
        return unpatchify(self.head(self.norm(h)), self.patch, self.grid, OUT_CHANNELS)


class VqTokenizer(Module):
    """
    Encoder, codebook and decoder.

    Args:
        codes: Codebook size K (>= 2).
        d_tok: Token width.
        grid: Tokens per side g.
        resolution: Map side length; must be a multiple of `grid`.
        blocks: Self-attention blocks in the encoder and in the decoder.
        heads: Attention heads.
        seed: Parameter initialization seed.
    """

    def __init__(self, codes: int = 64, d_tok: int = 16, grid: int = 8, resolution: int = 32,
                 blocks: int = 2, heads: int = 2, seed: int = 0):
        if codes < 2:
            raise ContractError(f"VqTokenizer: codebook size must be >= 2, got {codes}")
        if resolution % grid:
            raise ShapeError(f"VqTokenizer: resolution {resolution} is not a multiple of grid {grid}")
        rng = np.random.default_rng(seed)
        self.codes = codes
        self.d_tok = d_tok
        self.grid_size = grid
        self.resolution = resolution
        self.patch = resolution // grid
        self.n_blocks = blocks
        self.heads = heads
        self.encoder = VqEncoder(self.patch, d_tok, blocks, heads, rng)
        self.decoder = VqDecoder(self.patch, grid, d_tok, blocks, heads, rng)
        self.codebook = Parameter(rng.normal(0.0, 1.0, (codes, d_tok)))

    def get_codebook(self) -> Codebook:
        return Codebook(self.codebook.data.copy())

    def _check_resolution(self, x: np.ndarray):
        if x.shape[1:3] != (self.resolution, self.resolution):
            raise ShapeError(
                f"VqTokenizer expects {self.resolution}x{self.resolution} maps, got {x.shape[1]}x{x.shape[2]}"
            )

    def encode_batch(self, maps: Sequence[ModalityMap]) -> np.ndarray:
        """Continuous tokens for several maps, shape (B, g*g, d_tok)."""
        x = np.stack([channel_encode(m) for m in maps])
        self._check_resolution(x)
        return self.encoder(Tensor(x)).numpy()

    def tokenize_batch(self, maps: Sequence[ModalityMap], mode: str = "discrete") -> np.ndarray:
        """Tokens in the requested mode, shape (B, g*g, d_tok)."""
        if mode not in TOKEN_MODES:
            raise ContractError(f"Unknown token mode '{mode}', expected one of {TOKEN_MODES}")
        z = self.encode_batch(maps)
        if mode == "continuous":
            return z
        return self.codebook.data[nearest_codes(z, self.codebook.data)]

    def encode(self, modality: ModalityMap) -> TokenSequence:
        return TokenSequence("continuous", self.encode_batch([modality])[0], modality.kind)

    def quantize(self, tokens: TokenSequence) -> TokenSequence:
        return quantize(tokens, self.get_codebook())

    def decode_logits(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors)
        if vectors.ndim == 2:
            vectors = vectors[None]
        return self.decoder(Tensor(vectors)).numpy()

    def decode(self, tokens: TokenSequence) -> ModalityMap:
        """Reconstructs the map; segmentation by argmax, edges by thresholding at 0.5."""
        out = self.decode_logits(tokens.vectors)[0]
        return decode_channels(out, tokens.modality)

    def manifest(self, d_model: Optional[int] = None) -> Dict:
        return {
            "kind": "vq",
            "K": self.codes,
            "D_tok": self.d_tok,
            "g": self.grid_size,
            "D_model": d_model if d_model is not None else self.d_tok,
            "resolution": self.resolution,
            "blocks": self.n_blocks,
            "heads": self.heads,
            "version": VQ_VERSION,
        }


def decode_channels(out: np.ndarray, kind: str) -> ModalityMap:
    if kind == "depth":
        return ModalityMap("depth", np.clip(out[..., 0], 0.0, 1.0).astype(np.float32))
    if kind == "seg":
        return ModalityMap("seg", np.argmax(out[..., _SEG], axis=-1).astype(np.int64))
    if kind == "edge":
        return ModalityMap("edge", out[..., _EDGE.start] > 0.5)
    raise ContractError(f"Cannot decode tokens tagged '{kind}'")


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest codebook row per vector; ties go to the lowest index."""
    codebook = np.asarray(codebook, dtype=np.float64)
    if codebook.shape[0] == 0:
        raise ContractError("quantize: codebook is empty")
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != codebook.shape[1]:
        raise ShapeError(f"quantize: token width {z.shape[-1]} differs from codebook width {codebook.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    distances = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(distances, axis=1).reshape(z.shape[:-1])


def quantize(tokens: TokenSequence, codebook: Codebook) -> TokenSequence:
    indices = nearest_codes(tokens.vectors, codebook.vectors)
    return TokenSequence("discrete", codebook.vectors[indices].copy(), tokens.modality, indices)


def quantize_straight_through(z: Tensor, codebook: Tensor) -> Tuple[Tensor, Tensor, np.ndarray]:
    """
    Differentiable quantization.

    Returns:
        (z_q whose gradient flows straight to z, gathered code rows that
        carry the gradient to the codebook, indices)
    """
    indices = nearest_codes(z.numpy(), codebook.numpy())
    codes = embedding(codebook, indices)
    return straight_through(z, codes.numpy()), codes, indices


def pad_tokens(tokens: np.ndarray, d_model: int) -> np.ndarray:
    """Zero-pads the trailing (feature) axis to `d_model`."""
    tokens = np.asarray(tokens)
    width = tokens.shape[-1]
    if width > d_model:
        raise ContractError(f"pad_tokens: token width {width} exceeds model width {d_model}")
    if width == d_model:
        return tokens
    padding = [(0, 0)] * (tokens.ndim - 1) + [(0, d_model - width)]
    return np.pad(tokens, padding)


def unpad_tokens(tokens: np.ndarray, d_tok: int) -> np.ndarray:
    return np.asarray(tokens)[..., :d_tok]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def vq_loss(tokenizer: VqTokenizer, x: np.ndarray, masks: np.ndarray, beta: float = 0.25):
    """
    Reconstruction + codebook + beta * commitment.

    Reconstruction is the mean squared error over the supervised channels
    only; the codebook term pulls codes towards stopped encoder outputs and
    the commitment term pulls outputs towards stopped codes.

    Returns:
        (total, recon, codebook term, commitment term, indices, encoder output)
    """
    z = tokenizer.encoder(Tensor(x))
    z_q, codes, indices = quantize_straight_through(z, tokenizer.codebook)
    out = tokenizer.decoder(z_q)
    target = Tensor(_target_channels(x) * masks)
    scale = masks.size / max(float(masks.sum()), 1.0)
    recon = mul(mse(mul(out, Tensor(masks)), target), scale)
    codebook_term = mse(z.detach(), codes)
    commit = mse(z, codes.detach())
    total = recon + codebook_term + mul(commit, beta)
    return total, recon, codebook_term, commit, indices, z.numpy()


def _target_channels(x: np.ndarray) -> np.ndarray:
    return x[..., :OUT_CHANNELS]


def _init_codebook(tokenizer: VqTokenizer, x: np.ndarray, rng: np.random.Generator) -> None:
    """Seeds the codebook with encoder outputs (tiled with small noise when too few)."""
    z = tokenizer.encoder(Tensor(x)).numpy().reshape(-1, tokenizer.d_tok)
    if z.shape[0] < tokenizer.codes:
        repeats = -(-tokenizer.codes // z.shape[0])
        z = np.tile(z, (repeats, 1))
        z = z + rng.normal(0.0, 0.01 / np.sqrt(tokenizer.d_tok), z.shape)
    chosen = rng.choice(z.shape[0], size=tokenizer.codes, replace=False)
    tokenizer.codebook.assign(z[chosen])


def _restart_dead_codes(tokenizer: VqTokenizer, usage: np.ndarray, outputs: np.ndarray,
                        rng: np.random.Generator) -> int:
    dead = np.flatnonzero(usage == 0)
    if dead.size == 0:
        return 0
    pool = outputs.reshape(-1, tokenizer.d_tok)
    picks = rng.choice(pool.shape[0], size=dead.size, replace=pool.shape[0] < dead.size)
    # new values only; keep the adaptive moments of live codes
    tokenizer.codebook.data = tokenizer.codebook.data.copy()
    tokenizer.codebook.data[dead] = pool[picks]
    tokenizer.codebook.m[dead] = 0.0
    tokenizer.codebook.v[dead] = 0.0
    return int(dead.size)


def train_vq(maps: Sequence[ModalityMap], tokenizer: VqTokenizer, epochs: int = 20, lr: float = 1e-3,
             batch_size: int = 64, beta: float = 0.25, seed: int = 0, restart_dead_codes: bool = True,
             log_path: Optional[Union[str, Path]] = None, progress: bool = False) -> List[Dict]:
    """
    Trains the tokenizer in place on pooled modality maps.

    Args:
        maps: Depth, segmentation and edge maps (mixed).
        tokenizer: Model to train.
        epochs: Passes over `maps`.
        lr: Adam learning rate.
        batch_size: Maps per step.
        beta: Commitment weight.
        seed: Shuffling / restart seed.
        restart_dead_codes: Re-seed codes unused during an epoch.
        log_path: Optional JSONL file receiving one record per epoch.
        progress: Show a progress bar.

    Returns:
        Per-epoch records {epoch, loss, recon, codebook, commit, used_codes, wall_ms}.
    """
    if not maps:
        raise ContractError("train_vq: no maps to train on")
    rng = np.random.default_rng(seed)
    x_all = np.stack([channel_encode(m) for m in maps])
    tokenizer._check_resolution(x_all)
    masks_all = np.stack([reconstruction_mask(m.kind, x_all.shape[1:3]) for m in maps])
    dtype = tokenizer.codebook.dtype
    x_all, masks_all = x_all.astype(dtype), masks_all.astype(dtype)

    _init_codebook(tokenizer, x_all[rng.permutation(len(maps))[:batch_size]], rng)
    optimizer = Adam(tokenizer.parameters(), lr=lr)
    history = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in tqdm(range(epochs), desc="VQ epochs", disable=not progress):
            start = time.perf_counter()
            order = rng.permutation(len(maps))
            usage = np.zeros(tokenizer.codes, dtype=np.int64)
            totals = np.zeros(4)
            outputs = []
            for begin in range(0, len(order), batch_size):
                batch = order[begin:begin + batch_size]
                try:
                    with GradTape() as tape:
                        total, recon, codebook_term, commit, indices, z = vq_loss(
                            tokenizer, x_all[batch], masks_all[batch], beta
                        )
                    tape.backward(total)
                except NumericError as error:
                    raise NumericError(f"train_vq diverged at epoch {epoch}: {error}") from error
                optimizer.step()
                usage += np.bincount(indices.reshape(-1), minlength=tokenizer.codes)
                totals += len(batch) * np.array([total.item(), recon.item(), codebook_term.item(), commit.item()])
                outputs.append(z)

            totals /= len(maps)
            record = {
                "epoch": epoch,
                "loss": float(totals[0]),
                "recon": float(totals[1]),
                "codebook": float(totals[2]),
                "commit": float(totals[3]),
                "used_codes": int((usage > 0).sum()),
                "wall_ms": (time.perf_counter() - start) * 1000.0,
            }
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
            logger.debug(f"VQ epoch {epoch}: loss={record['loss']:.5f} used={record['used_codes']}/{tokenizer.codes}")

            if restart_dead_codes and epoch < epochs - 1:
                restarted = _restart_dead_codes(tokenizer, usage, np.concatenate(outputs), rng)
                if restarted:
                    logger.warning(f"VQ epoch {epoch}: restarted {restarted} dead codes")
    finally:
        if log_file:
            log_file.close()

    logger.info(f"VQ training finished: loss={history[-1]['loss']:.5f}, used codes={history[-1]['used_codes']}")
    return history


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def codebook_usage(tokenizer: VqTokenizer, maps: Sequence[ModalityMap]) -> int:
    """Number of distinct codes selected over `maps`."""
    indices = nearest_codes(tokenizer.encode_batch(maps), tokenizer.codebook.data)
    return int(np.unique(indices).size)


def reconstruct(tokenizer: VqTokenizer, maps: Sequence[ModalityMap], mode: str) -> List[ModalityMap]:
    out = tokenizer.decode_logits(tokenizer.tokenize_batch(maps, mode))
    return [decode_channels(o, m.kind) for o, m in zip(out, maps)]


def reconstruction_error(original: ModalityMap, rebuilt: ModalityMap) -> float:
    """depth: mean squared error; seg: pixel error rate; edge: 1 - F1."""
    if original.kind == "depth":
        return float(np.mean((np.asarray(original.grid, dtype=np.float64) - rebuilt.grid) ** 2))
    if original.kind == "seg":
        return float(np.mean(np.asarray(original.grid) != rebuilt.grid))
    return 1.0 - binary_f1(rebuilt.grid, original.grid, radius=0)


def compare_token_paths(tokenizer: VqTokenizer, maps: Sequence[ModalityMap]) -> List[Dict]:
    """
    Reconstruction error of the discrete and continuous token paths per
    modality, one row per modality present in `maps`.
    """
    rows = []
    for kind in MODALITIES:
        subset = [m for m in maps if m.kind == kind]
        if not subset:
            continue
        row = {"modality": kind, "count": len(subset)}
        for mode in TOKEN_MODES:
            rebuilt = reconstruct(tokenizer, subset, mode)
            row[f"{mode}_error"] = float(np.mean([reconstruction_error(o, r) for o, r in zip(subset, rebuilt)]))
        rows.append(row)
    return rows


def reconstruction_scores(tokenizer: VqTokenizer, maps: Sequence[ModalityMap],
                          mode: str = "discrete") -> Dict[str, float]:
    """Segmentation pixel accuracy and edge F1 of the chosen token path."""
    scores = {}
    seg = [m for m in maps if m.kind == "seg"]
    edge = [m for m in maps if m.kind == "edge"]
    if seg:
        scores["seg_accuracy"] = 1.0 - float(np.mean([
            reconstruction_error(o, r) for o, r in zip(seg, reconstruct(tokenizer, seg, mode))
        ]))
    if edge:
        scores["edge_f1"] = float(np.mean([
            binary_f1(r.grid, o.grid, radius=0) for o, r in zip(edge, reconstruct(tokenizer, edge, mode))
        ]))
    return scores


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_vq(tokenizer: VqTokenizer, directory: Union[str, Path], d_model: Optional[int] = None,
            extra: Optional[Dict] = None) -> Path:
    manifest = tokenizer.manifest(d_model)
    manifest.update(extra or {})
    return save_checkpoint(directory, tokenizer.state_dict(), manifest)


def tokenizer_from_manifest(manifest: Dict) -> VqTokenizer:
    return VqTokenizer(codes=manifest["K"], d_tok=manifest["D_tok"], grid=manifest["g"],
                       resolution=manifest["resolution"], blocks=manifest["blocks"], heads=manifest["heads"])


def load_vq(directory: Union[str, Path]) -> Tuple[VqTokenizer, Dict]:
    tensors, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "vq":
        raise ContractError(f"{directory} is not a tokenizer checkpoint (kind={manifest.get('kind')!r})")
    tokenizer = tokenizer_from_manifest(manifest)
    tokenizer.load_state_dict(tensors)
    return tokenizer, manifest
