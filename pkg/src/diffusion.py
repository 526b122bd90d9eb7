"""
Pixel-space diffusion super-resolution model.

The denoiser sees the noisy HR image concatenated with the bilinearly
upsampled LR image, split into 4x4 patch tokens, and cross-attends to the
conditioning sequence [caption embedding, connector latents]. Images live in
[0, 1] outside this module and in [-1, 1] inside it.
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.checkpoint import load_checkpoint, prefixed, save_checkpoint, subset
from src.errors import ContractError, DomainError, NumericError, ShapeError
from src.layers import LayerNorm, Linear, MLP, Module, MultiHeadAttention
from src.mmlc import SEGMENTS, ModalityEmbedder, MultimodalLatentConnector, TemperatureConfig
from src.synth_data import EMPTY_ID, MODALITIES, SamplePair, modality_mask_for
from src.tensor_core import (
    Adam, GradTape, Parameter, Tensor, concat, mse, reshape, upsample_bilinear,
)
from src.vq_tokenizer import VqTokenizer, pad_tokens, patchify, tokenizer_from_manifest, unpatchify

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
IMAGE_CHANNELS = 3
PATCH = 4
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Linear-beta forward process.

    `alpha_bars[t]` is the cumulative product up to and including step t, so
    alpha_bars[1] = 1 - beta_1; index 0 holds 1 (the clean image).
    """

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def betas(self) -> np.ndarray:
        return np.concatenate([[0.0], np.linspace(self.beta_start, self.beta_end, self.steps)])

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.steps):
            raise DomainError(f"Timestep outside [0, {self.steps}]: {t}")
        return self.alpha_bars[t]

    def to_manifest(self) -> Dict:
        return {"T": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass
class DiffusionState:
    z: np.ndarray
    t: int


def to_signed(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * 2.0 - 1.0


def to_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule = NoiseSchedule()) -> np.ndarray:
    """
    z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with x0 rescaled from [0, 1] to [-1, 1].

    Args:
        x0: Clean images (..., H, W, C) in [0, 1].
        t: Timestep in [1, T], scalar or one per leading item.
        eps: Standard normal noise shaped like `x0`.
    """
    x0 = to_signed(x0)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ShapeError(f"forward_diffuse: noise {eps.shape} differs from image {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.steps):
        raise DomainError(f"forward_diffuse: t must lie in [1, {schedule.steps}], got {t}")
    abar = schedule.alpha_bars[t].reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features (B, dim): sin for the first half, cos for the second."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


@dataclass
class ConditioningSequence:
    tokens: Tensor
    present: np.ndarray = field(default_factory=lambda: np.zeros((1, len(SEGMENTS)), dtype=bool))

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


class DenoiserBlock(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.mlp = MLP(dim, rng)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm_q(x), self.norm_kv(cond))
        return x + self.mlp(self.norm3(x))


class Denoiser(Module):
    """Patch-token transformer predicting the noise of a 3-channel image."""

    def __init__(self, resolution: int, scale: int, d_model: int, blocks: int, heads: int,
                 rng: np.random.Generator, patch: int = PATCH):
        if resolution % patch or resolution % scale:
            raise ShapeError(f"Denoiser: resolution {resolution} must be divisible by patch {patch} and scale {scale}")
        self.resolution = resolution
        self.scale = scale
        self.patch = patch
        self.grid = resolution // patch
        self.d_model = d_model
        self.in_proj = Linear(patch * patch * 2 * IMAGE_CHANNELS, d_model, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, (self.grid * self.grid, d_model)))
        self.time_proj = Linear(d_model, d_model, rng)
        self.blocks = [DenoiserBlock(d_model, heads, rng) for _ in range(blocks)]
        self.norm = LayerNorm(d_model)
        self.head = Linear(d_model, patch * patch * IMAGE_CHANNELS, rng)
        self.head.weight.assign(self.head.weight.data * HEAD_INIT_SCALE)

    def forward(self, z_t: Tensor, t: np.ndarray, lr_up: Tensor, cond: Tensor) -> Tensor:
        batch = z_t.shape[0]
        h = self.in_proj(patchify(concat([z_t, lr_up], axis=-1), self.patch)) + self.pos
        time = self.time_proj(Tensor(timestep_embedding(t, self.d_model)))
        h = h + reshape(time, (batch, 1, self.d_model))
        for block in self.blocks:
            h = block(h, cond)
        return unpatchify(self.head(self.norm(h)), self.patch, self.grid, IMAGE_CHANNELS)


class MultimodalSRModel(Module):
    """
    Embeddings, empty token, connector and denoiser trained together.

    With `use_mmlc=False` the denoiser cross-attends to the raw assembled
    sequence instead of the connector latents.
    """

    def __init__(self, d_model: int = 64, n_latents: int = 32, mmlc_self_blocks: int = 2,
                 denoiser_blocks: int = 4, heads: int = 4, use_mmlc: bool = True, grid: int = 8,
                 resolution: int = 32, scale: int = 4, d_tok: int = 16, token_mode: str = "discrete",
                 seed: int = 0, schedule: Optional[Dict] = None):
        if d_tok > d_model:
            raise ContractError(f"Token width {d_tok} exceeds model width {d_model}")
        rng = np.random.default_rng(seed)
        self.hparams = {
            "d_model": d_model, "n_latents": n_latents, "mmlc_self_blocks": mmlc_self_blocks,
            "denoiser_blocks": denoiser_blocks, "heads": heads, "use_mmlc": use_mmlc, "grid": grid,
            "resolution": resolution, "scale": scale, "d_tok": d_tok, "token_mode": token_mode, "seed": seed,
        }
        self.schedule = NoiseSchedule(**{
            "steps": (schedule or {}).get("T", 1000),
            "beta_start": (schedule or {}).get("beta_start", 1e-4),
            "beta_end": (schedule or {}).get("beta_end", 0.02),
        })
        self.use_mmlc = use_mmlc
        self.token_mode = token_mode
        self.d_model = d_model
        self.embed = ModalityEmbedder(d_model, grid, rng)
        self.mmlc = MultimodalLatentConnector(d_model, n_latents, heads, mmlc_self_blocks, rng) if use_mmlc else None
        self.denoiser = Denoiser(resolution, scale, d_model, denoiser_blocks, heads, rng)

    def condition(self, tokens: Dict[str, Optional[np.ndarray]], caption_ids: np.ndarray, mask: np.ndarray,
                  temps: Optional[TemperatureConfig] = None) -> ConditioningSequence:
        """
        Builds [caption embedding, latents] for a batch.

        Args:
            tokens: {"depth", "seg", "edge"} -> (B, g^2, d_model) padded tokens or None.
            caption_ids: (B, L_text) ids of the positive caption.
            mask: (B, 4) presence flags (depth, seg, edge, text).
            temps: Sampling-time temperature scales for the connector.
        """
        caption_ids = np.atleast_2d(np.asarray(caption_ids, dtype=np.int64))
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (caption_ids.shape[0], len(SEGMENTS)))
        seq = self.embed.assemble(tokens.get("depth"), tokens.get("seg"), tokens.get("edge"), caption_ids, mask)
        direct_ids = np.where(mask[:, 3:4], caption_ids, EMPTY_ID)
        caption = self.embed.embed_caption(direct_ids)
        if self.mmlc is None:
            if temps is not None and not temps.is_neutral():
                logger.debug("Temperature scales ignored: connector disabled")
            return ConditioningSequence(concat([caption, seq.tokens], axis=1), seq.present)
        return ConditioningSequence(concat([caption, self.mmlc.connect(seq, temps)], axis=1), seq.present)

    def predict_eps(self, z_t, t, lr_img: np.ndarray, cond: ConditioningSequence) -> Tensor:
        """
        Noise prediction.

        Args:
            z_t: (B, H, W, 3) noisy images in signed range.
            t: (B,) or scalar timesteps in [1, T].
            lr_img: (B, H/s, W/s, 3) LR images in [0, 1].
            cond: Conditioning sequence with batch B (or 1, broadcast).
        """
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        batch = z_t.shape[0]
        expected = (batch, self.denoiser.resolution, self.denoiser.resolution, IMAGE_CHANNELS)
        if z_t.shape != expected:
            raise ShapeError(f"predict_eps: z_t has shape {z_t.shape}, expected {expected}")
        lr_img = np.asarray(lr_img)
        lr_side = self.denoiser.resolution // self.denoiser.scale
        if lr_img.shape != (batch, lr_side, lr_side, IMAGE_CHANNELS):
            raise ShapeError(f"predict_eps: LR image has shape {lr_img.shape}, expected {(batch, lr_side, lr_side, 3)}")
        if cond.tokens.ndim != 3 or cond.tokens.shape[1] < 1 or cond.tokens.shape[2] != self.d_model:
            raise ShapeError(f"predict_eps: conditioning must be (B, L>=1, {self.d_model}), got {cond.tokens.shape}")
        t = np.broadcast_to(np.asarray(t), (batch,))
        if np.any(t < 1) or np.any(t > self.schedule.steps):
            raise DomainError(f"predict_eps: t must lie in [1, {self.schedule.steps}], got {t}")
        lr_up = upsample_bilinear(Tensor(to_signed(lr_img)), self.denoiser.scale)
        return self.denoiser(z_t, t, lr_up, cond.tokens)


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    hr: np.ndarray
    lr: np.ndarray
    tokens: Dict[str, np.ndarray]
    captions: np.ndarray
    masks: np.ndarray

    def __len__(self):
        return self.hr.shape[0]

    def take(self, index: np.ndarray) -> "TrainingData":
        return TrainingData(self.hr[index], self.lr[index], {k: v[index] for k, v in self.tokens.items()},
                            self.captions[index], self.masks[index])


def prepare_training_data(samples: Sequence[SamplePair], tokenizer: VqTokenizer, d_model: int,
                          token_mode: str = "discrete") -> TrainingData:
    """Precomputes frozen-tokenizer tokens (padded to `d_model`) for every sample."""
    tokens = {
        kind: pad_tokens(tokenizer.tokenize_batch([s.modalities[kind] for s in samples], token_mode), d_model)
        for kind in MODALITIES
    }
    return TrainingData(
        hr=np.stack([s.hr for s in samples]),
        lr=np.stack([s.lr for s in samples]),
        tokens=tokens,
        captions=np.stack([s.caption.ids for s in samples]),
        masks=np.stack([modality_mask_for(s) for s in samples]),
    )


def drop_modalities(seed, p: float = 0.1, joint_p: float = 0.05) -> np.ndarray:
    """
    Training-time modality dropout.

    Each of (depth, seg, edge, caption) is dropped independently with
    probability `p`; with probability `joint_p` all four are dropped together.
    The per-modality rate `p` and per-pair rate `p**2` describe the
    independent draw alone. With the joint draw the marginal drop rate is
    `1 - (1 - joint_p) * (1 - p)` (0.145 at the defaults) and a given pair
    is dropped together with probability `joint_p + (1 - joint_p) * p**2`
    (about 0.06).

    Returns:
        (4,) keep flags.
    """
    if not (0.0 <= p <= 1.0 and 0.0 <= joint_p <= 1.0):
        raise DomainError(f"drop_modalities: probabilities must lie in [0, 1], got p={p}, joint_p={joint_p}")
    rng = np.random.default_rng(seed)
    joint = rng.random() < joint_p
    dropped = rng.random(len(SEGMENTS)) < p
    return ~(dropped | joint)


def diffusion_loss(model: MultimodalSRModel, data: TrainingData, t: np.ndarray, eps: np.ndarray,
                   masks: np.ndarray) -> Tensor:
    """mean ||eps - eps_hat(z_t, t, LR, cond)||^2 for explicit t, noise and masks."""
    z_t = forward_diffuse(data.hr, t, eps, model.schedule)
    cond = model.condition(data.tokens, data.captions, masks)
    eps_hat = model.predict_eps(Tensor(z_t), t, data.lr, cond)
    return mse(eps_hat, Tensor(eps))


class DiffusionTrainer:
    """Stage-2 trainer: the tokenizer is frozen, everything in the model is optimized."""

    def __init__(self, model: MultimodalSRModel, lr: float = 1e-4, drop_p: float = 0.1,
                 joint_drop_p: float = 0.05, seed: int = 0):
        self.model = model
        self.optimizer = Adam(model.parameters(), lr=lr)
        self.drop_p = drop_p
        self.joint_drop_p = joint_drop_p
        self.seed = seed

    def draw(self, data: TrainingData, step: int, batch_size: int):
        """Batch indices, timesteps, noise and keep-masks for `step`."""
        rng = np.random.default_rng((self.seed, step))
        index = rng.choice(len(data), size=batch_size, replace=len(data) < batch_size)
        t = rng.integers(1, self.model.schedule.steps + 1, size=batch_size)
        eps = rng.standard_normal((batch_size,) + data.hr.shape[1:])
        drops = np.stack([drop_modalities((self.seed, step, i), self.drop_p, self.joint_drop_p)
                          for i in range(batch_size)])
        return index, t, eps, data.masks[index] & drops

    def train_step(self, data: TrainingData, step: int, batch_size: int) -> float:
        index, t, eps, masks = self.draw(data, step, batch_size)
        try:
            with GradTape() as tape:
                loss = diffusion_loss(self.model, data.take(index), t, eps, masks)
            tape.backward(loss)
        except NumericError as error:
            raise NumericError(f"Diffusion training diverged at step {step}: {error}") from error
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"Diffusion training diverged at step {step}: loss={value}")
        self.optimizer.step()
        return value

    def fit(self, data: TrainingData, steps: int, batch_size: int, log_every: int = 100,
            log_path: Optional[Union[str, Path]] = None, progress: bool = False) -> List[Dict]:
        """
        Runs `steps` optimizer steps.

        Returns:
            Logged records {step, loss, lr, wall_ms}, one every `log_every` steps and at the end.
        """
        history = []
        start = time.perf_counter()
        log_file = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            bar = tqdm(range(steps), desc="Diffusion steps", disable=not progress)
            for step in bar:
                loss = self.train_step(data, step, batch_size)
                if step % log_every == 0 or step == steps - 1:
                    record = {"step": step, "loss": loss, "lr": self.optimizer.lr,
                              "wall_ms": (time.perf_counter() - start) * 1000.0}
                    history.append(record)
                    if log_file:
                        log_file.write(json.dumps(record) + "\n")
                    bar.set_postfix(loss=f"{loss:.4f}")
        finally:
            if log_file:
                log_file.close()
        if history:
            logger.info(f"Diffusion training finished after {steps} steps: loss={history[-1]['loss']:.5f}")
        return history


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(model: MultimodalSRModel, tokenizer: VqTokenizer, directory: Union[str, Path],
               config_hash: str = "", config: Optional[Dict] = None) -> Path:
    """Writes the stage-2 checkpoint (model tensors plus the frozen tokenizer under "vq/")."""
    tensors = {}
    tensors.update(model.embed.state_dict("embed/"))
    if model.mmlc is not None:
        tensors.update(model.mmlc.state_dict("mmlc/"))
    tensors.update(model.denoiser.state_dict("denoiser/"))
    tensors.update(prefixed(tokenizer.state_dict(), "vq/"))
    manifest = {
        "kind": "mmdiff",
        "version": MODEL_VERSION,
        "model": model.hparams,
        "schedule": model.schedule.to_manifest(),
        "groups": {
            "denoiser": "denoiser/",
            "mmlc": "mmlc/" if model.mmlc is not None else None,
            "embeddings": "embed/",
            "empty_token": "embed/empty_token",
            "tokenizer": "vq/",
        },
        "vq": tokenizer.manifest(model.d_model),
        "config_hash": config_hash,
        "config": config or {},
    }
    return save_checkpoint(directory, tensors, manifest)


def load_model(directory: Union[str, Path]) -> Tuple[MultimodalSRModel, VqTokenizer, Dict]:
    tensors, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "mmdiff":
        raise ContractError(f"{directory} is not a diffusion checkpoint (kind={manifest.get('kind')!r})")
    model = MultimodalSRModel(**manifest["model"], schedule=manifest["schedule"])
    model.embed.load_state_dict(subset(tensors, "embed/"))
    if model.mmlc is not None:
        model.mmlc.load_state_dict(subset(tensors, "mmlc/"))
    model.denoiser.load_state_dict(subset(tensors, "denoiser/"))
    tokenizer = tokenizer_from_manifest(manifest["vq"])
    tokenizer.load_state_dict(subset(tensors, "vq/"))
    return model, tokenizer, manifest
