"""
Deterministic DDIM sampling with text, empty-modality and multimodal
classifier-free guidance.

Guidance combines two noise predictions as

    eps = eps_pos + w * (eps_pos - eps_neg)  ==  (1 + w) eps_pos - w eps_neg

and the modes differ only in the modality set each branch sees:

    cfg        pos: empty set   neg: empty set
    mnull-cfg  pos: m           neg: empty set
    m-cfg      pos: m           neg: m

Both branches keep the LR image; the negative caption is all-EMPTY.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.diffusion import ConditioningSequence, MultimodalSRModel, to_unit
from src.errors import ContractError, DomainError
from src.metrics import MetricReport, evaluate
from src.mmlc import TemperatureConfig
from src.synth_data import EMPTY_ID, MODALITIES, SamplePair, empty_caption, lr_modalities, modality_mask_for
from src.tensor_core import Tensor, no_grad
from src.vq_tokenizer import VqTokenizer, pad_tokens

logger = logging.getLogger(__name__)

CFG, MNULL_CFG, M_CFG = "cfg", "mnull-cfg", "m-cfg"
GUIDANCE_MODES = (CFG, MNULL_CFG, M_CFG)
_MODE_ALIASES = {"m∅-cfg": MNULL_CFG, "m0-cfg": MNULL_CFG}
SWEEP_AXES = ("w", "s_depth", "s_seg", "s_edge", "s_text")


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in GUIDANCE_MODES:
        raise ContractError(f"Unknown guidance mode '{mode}', expected one of {GUIDANCE_MODES}")
    return mode


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = M_CFG
    w: float = 4.0
    steps: int = 50
    eta: float = 0.0
    temps: TemperatureConfig = TemperatureConfig()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        if not self.w >= 0:
            raise DomainError(f"Guidance scale w must be >= 0, got {self.w}")
        if self.steps < 1:
            raise DomainError(f"DDIM steps must be >= 1, got {self.steps}")
        if self.eta != 0.0:
            raise DomainError(f"Only deterministic DDIM (eta = 0) is supported, got eta={self.eta}")


@dataclass
class ModalitySet:
    """Padded (g^2, d_model) tokens per modality plus presence flags; all-absent is the empty set."""

    tokens: Dict[str, np.ndarray] = field(default_factory=dict)
    present: np.ndarray = field(default_factory=lambda: np.zeros(len(MODALITIES), dtype=bool))

    @classmethod
    def empty(cls) -> "ModalitySet":
        return cls()

    def masked(self, keep: Sequence[bool]) -> "ModalitySet":
        return ModalitySet(self.tokens, self.present & np.asarray(keep, dtype=bool))


@dataclass
class ConditionBundle:
    lr: np.ndarray
    pos: np.ndarray
    neg: np.ndarray = field(default_factory=lambda: empty_caption().ids)
    modalities: Optional[ModalitySet] = None

    def check(self, mode: str) -> None:
        if np.shape(self.pos) != np.shape(self.neg):
            raise ContractError(f"Positive and negative captions differ in length: {np.shape(self.pos)} vs {np.shape(self.neg)}")
        if mode == CFG and self.modalities is not None:
            raise ContractError("cfg guidance takes no modality set; pass modalities=None")
        if mode != CFG and self.modalities is None:
            raise ContractError(f"{mode} guidance needs a modality set (use ModalitySet.empty() for none)")


def _condition(model: MultimodalSRModel, modalities: Optional[ModalitySet], caption: np.ndarray,
               temps: TemperatureConfig) -> ConditioningSequence:
    modalities = modalities or ModalitySet.empty()
    caption = np.asarray(caption, dtype=np.int64)
    text_present = bool(np.any(caption != EMPTY_ID))
    mask = np.append(modalities.present, text_present)[None]
    tokens = {
        kind: modalities.tokens[kind][None] if modalities.present[i] else None
        for i, kind in enumerate(MODALITIES)
    }
    return model.condition(tokens, caption[None], mask, temps)


def prepare_branches(model: MultimodalSRModel, bundle: ConditionBundle,
                     config: GuidanceConfig) -> Tuple[ConditioningSequence, ConditioningSequence]:
    """Conditioning of the positive and negative branch for the configured mode."""
    bundle.check(config.mode)
    if config.mode == CFG:
        pos_set, neg_set = None, None
    elif config.mode == MNULL_CFG:
        pos_set, neg_set = bundle.modalities, None
    else:
        pos_set, neg_set = bundle.modalities, bundle.modalities
    with no_grad():
        return (_condition(model, pos_set, bundle.pos, config.temps),
                _condition(model, neg_set, bundle.neg, config.temps))


def guided_eps(model: MultimodalSRModel, z_t: np.ndarray, t: int, bundle: ConditionBundle,
               config: GuidanceConfig,
               branches: Optional[Tuple[ConditioningSequence, ConditioningSequence]] = None) -> np.ndarray:
    """
    Guided noise estimate for one noisy image.

    Args:
        model: Trained model.
        z_t: (H, W, 3) noisy image in signed range.
        t: Timestep in [1, T].
        bundle: Conditioning inputs.
        config: Guidance mode and scale.
        branches: Precomputed `prepare_branches` output.

    Returns:
        (H, W, 3) float64 estimate.
    """
    cond_pos, cond_neg = branches or prepare_branches(model, bundle, config)
    z = Tensor(np.asarray(z_t)[None])
    lr = np.asarray(bundle.lr)[None]
    with no_grad():
        eps_pos = model.predict_eps(z, [t], lr, cond_pos).numpy()[0].astype(np.float64)
        eps_neg = model.predict_eps(z, [t], lr, cond_neg).numpy()[0].astype(np.float64)
    return eps_pos + config.w * (eps_pos - eps_neg)


def ddim_timesteps(steps: int, total: int) -> np.ndarray:
    """Uniform-stride decreasing timesteps from T down to exactly 1."""
    if not 1 <= steps <= total:
        raise DomainError(f"DDIM steps must lie in [1, {total}], got {steps}")
    if steps == 1:
        return np.array([total])
    return np.round(np.linspace(total, 1, steps)).astype(np.int64)


def ddim_sample(model: MultimodalSRModel, bundle: ConditionBundle, config: GuidanceConfig,
                progress: bool = False) -> np.ndarray:
    """
    Deterministic (eta = 0) DDIM trajectory.

    Returns:
        (H, W, 3) float32 image in [0, 1].
    """
    if model is None:
        raise ContractError("ddim_sample: no model checkpoint loaded")
    schedule = model.schedule
    timesteps = ddim_timesteps(config.steps, schedule.steps)
    branches = prepare_branches(model, bundle, config)
    side = model.denoiser.resolution
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal((side, side, 3))
    alpha_bars = schedule.alpha_bars

    for i, t in enumerate(tqdm(timesteps, desc="DDIM", disable=not progress)):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps = guided_eps(model, x, int(t), bundle, config, branches)
        abar, abar_prev = alpha_bars[t], alpha_bars[t_prev]
        x0_hat = (x - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
        x = np.sqrt(abar_prev) * x0_hat + np.sqrt(1.0 - abar_prev) * eps
    return np.clip(to_unit(x), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

def modality_set_for(sample: SamplePair, tokenizer: VqTokenizer, model: MultimodalSRModel,
                     source: str = "scene") -> ModalitySet:
    """
    Tokens of the sample's modalities.

    `source="scene"` uses the exact maps; `source="lr"` uses only what can be
    extracted from the LR image (edges), leaving depth and seg absent.
    """
    if source == "scene":
        return _tokenized(sample.modalities, modality_mask_for(sample)[:len(MODALITIES)], tokenizer, model)
    if source == "lr":
        return lr_modality_set(sample.lr, tokenizer, model)
    raise ContractError(f"Unknown modality source '{source}', expected 'scene' or 'lr'")


def lr_modality_set(lr: np.ndarray, tokenizer: VqTokenizer, model: MultimodalSRModel) -> ModalitySet:
    """Modalities recoverable from an LR image alone; depth and seg stay absent."""
    maps = lr_modalities(np.asarray(lr, dtype=np.float32), model.denoiser.scale)
    present = np.array([kind in maps and bool(np.any(maps[kind].grid)) for kind in MODALITIES])
    return _tokenized(maps, present, tokenizer, model)


def _tokenized(maps, present: np.ndarray, tokenizer: VqTokenizer, model: MultimodalSRModel) -> ModalitySet:
    tokens = {
        kind: pad_tokens(tokenizer.tokenize_batch([maps[kind]], model.token_mode)[0], model.d_model)
        for kind in MODALITIES if kind in maps
    }
    return ModalitySet(tokens, np.asarray(present, dtype=bool))


def bundle_for(sample: SamplePair, tokenizer: VqTokenizer, model: MultimodalSRModel, mode: str,
               keep: Sequence[bool] = (True, True, True, True), source: str = "scene") -> ConditionBundle:
    """
    Bundle for a stored sample.

    Args:
        keep: Inference-time mask over (depth, seg, edge, caption); dropped
            entries become the empty token / EMPTY caption.
    """
    mode = normalize_mode(mode)
    caption = sample.caption.ids if keep[3] else empty_caption().ids
    modalities = None
    if mode != CFG:
        modalities = modality_set_for(sample, tokenizer, model, source).masked(keep[:3])
    return ConditionBundle(lr=sample.lr, pos=caption, modalities=modalities)


def lr_only_bundle(lr: np.ndarray, mode: str, tokenizer: Optional[VqTokenizer] = None,
                   model: Optional[MultimodalSRModel] = None) -> ConditionBundle:
    """
    Bundle for a bare LR image with no caption. Given a tokenizer and model,
    non-cfg modes condition on the edges extracted from the LR image;
    otherwise the modality set is empty.
    """
    mode = normalize_mode(mode)
    lr = np.asarray(lr, dtype=np.float32)
    if mode == CFG:
        modalities = None
    elif tokenizer is not None and model is not None:
        modalities = lr_modality_set(lr, tokenizer, model)
    else:
        modalities = ModalitySet.empty()
    return ConditionBundle(lr=lr, pos=empty_caption().ids, modalities=modalities)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    value: float
    image: np.ndarray
    report: Optional[MetricReport]


def sweep(model: MultimodalSRModel, bundle: ConditionBundle, config: GuidanceConfig, axis: str,
          values: Sequence[float], hr: Optional[np.ndarray] = None,
          gt_edges: Optional[np.ndarray] = None) -> List[SweepPoint]:
    """
    One sample per value at the configured seed, in the order given.

    Args:
        axis: "w" or "s_<segment>" for a connector temperature scale.
        hr: Optional reference image; with `gt_edges` enables metrics.
    """
    if axis not in SWEEP_AXES:
        raise ContractError(f"Unknown sweep axis '{axis}', expected one of {SWEEP_AXES}")
    configs = []
    for value in values:
        if axis == "w":
            configs.append(GuidanceConfig(config.mode, float(value), config.steps, config.eta, config.temps, config.seed))
        else:
            temps = config.temps.with_value(axis[2:], float(value))
            configs.append(GuidanceConfig(config.mode, config.w, config.steps, config.eta, temps, config.seed))

    points = []
    for value, point_config in zip(values, configs):
        image = ddim_sample(model, bundle, point_config)
        report = evaluate(image, hr, gt_edges) if hr is not None and gt_edges is not None else None
        points.append(SweepPoint(float(value), image, report))
        logger.info(f"Sweep {axis}={value}: " + (f"psnr={report.psnr:.2f}" if report else "done"))
    return points
