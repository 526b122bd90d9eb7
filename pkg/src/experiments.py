"""
Evaluation harnesses: SR evaluation against a bicubic baseline, modality and
guidance ablations, the connector ablation and temperature sweeps.
"""
import csv
import logging
import time
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from src.diffusion import DiffusionTrainer, MultimodalSRModel, TrainingData, prepare_training_data
from src.errors import ContractError
from src.metrics import MetricReport, bicubic_upsample, evaluate, mean_reports
from src.sampler import (
    GUIDANCE_MODES, GuidanceConfig, SweepPoint, bundle_for, ddim_sample, sweep,
)
from src.synth_data import SamplePair
from src.tensor_core import Tensor, no_grad
from src.vq_tokenizer import VqTokenizer

logger = logging.getLogger(__name__)

# (depth, seg, edge, caption) keep flags
MODALITY_MASKS = {
    "LR-only": (False, False, False, False),
    "text": (False, False, False, True),
    "text+dep": (True, False, False, True),
    "text+seg": (False, True, False, True),
    "text+edg": (False, False, True, True),
    "all": (True, True, True, True),
}
GUIDANCE_GRID = (2.0, 10.0, 14.0)
METRIC_FIELDS = ["psnr", "ssim", "edge_f1"]


def write_csv(rows: Sequence[Dict], path: Union[str, Path], fieldnames: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key) for key in fieldnames})
    return path


def _sample_one(model, tokenizer, sample, config, keep, source) -> Tuple[np.ndarray, MetricReport]:
    bundle = bundle_for(sample, tokenizer, model, config.mode, keep, source)
    image = ddim_sample(model, bundle, config)
    return image, evaluate(image, sample.hr, sample.modalities["edge"].grid)


def sample_set(model: MultimodalSRModel, tokenizer: VqTokenizer, samples: Sequence[SamplePair],
               config: GuidanceConfig, keep: Sequence[bool] = (True, True, True, True),
               source: str = "scene", n_jobs: int = 1,
               progress: bool = False) -> Tuple[List[np.ndarray], List[MetricReport]]:
    """Samples every item (results in input order) and scores it against its HR image."""
    if n_jobs == 1:
        results = [_sample_one(model, tokenizer, s, config, keep, source)
                   for s in tqdm(samples, desc="Sampling", disable=not progress)]
    else:
        results = Parallel(n_jobs=n_jobs, backend="threading")(
            delayed(_sample_one)(model, tokenizer, s, config, keep, source) for s in samples
        )
    return [r[0] for r in results], [r[1] for r in results]


def evaluate_sr(model: MultimodalSRModel, tokenizer: VqTokenizer, samples: Sequence[SamplePair],
                config: GuidanceConfig, n_jobs: int = 1, progress: bool = False) -> Dict[str, MetricReport]:
    """Mean metrics of DDIM samples and of bicubic upsampling over `samples`."""
    _, reports = sample_set(model, tokenizer, samples, config, n_jobs=n_jobs, progress=progress)
    scale = model.denoiser.scale
    bicubic = [evaluate(bicubic_upsample(s.lr, scale), s.hr, s.modalities["edge"].grid) for s in samples]
    result = {"ddim": mean_reports(reports), "bicubic": mean_reports(bicubic)}
    logger.info(f"SR: psnr {result['ddim'].psnr:.2f} dB vs bicubic {result['bicubic'].psnr:.2f} dB")
    return result


def ablate_modalities(model: MultimodalSRModel, tokenizer: VqTokenizer, samples: Sequence[SamplePair],
                      config: GuidanceConfig, n_jobs: int = 1, progress: bool = False) -> List[Dict]:
    """
    Masks modalities at test time on one checkpoint (absent inputs become the
    empty token). One row per mask configuration.
    """
    if config.mode == "cfg":
        raise ContractError("Modality ablation needs a guidance mode that uses modalities (mnull-cfg or m-cfg)")
    rows = []
    for name, keep in MODALITY_MASKS.items():
        _, reports = sample_set(model, tokenizer, samples, config, keep, n_jobs=n_jobs, progress=progress)
        mean = mean_reports(reports)
        rows.append({"mask": name, **mean.as_row()})
        logger.info(f"Mask {name}: psnr={mean.psnr:.2f} edge_f1={mean.edge_f1:.3f}")
    return rows


def ablate_guidance(model: MultimodalSRModel, tokenizer: VqTokenizer, samples: Sequence[SamplePair],
                    config: GuidanceConfig, w_values: Sequence[float] = GUIDANCE_GRID,
                    n_jobs: int = 1, progress: bool = False) -> List[Dict]:
    """Guidance modes x scales grid, one row per (mode, w)."""
    rows = []
    for mode in GUIDANCE_MODES:
        for w in w_values:
            point = GuidanceConfig(mode, float(w), config.steps, config.eta, config.temps, config.seed)
            _, reports = sample_set(model, tokenizer, samples, point, n_jobs=n_jobs, progress=progress)
            rows.append({"mode": mode, "w": float(w), **mean_reports(reports).as_row()})
    return rows


def guidance_degradation(rows: Sequence[Dict], mode: str, low: float = 2.0, high: float = 14.0) -> float:
    """Drop of edge F1 between the lowest and highest guidance scale for `mode`."""
    by_w = {row["w"]: row["edge_f1"] for row in rows if row["mode"] == mode}
    return by_w[low] - by_w[high]


def forward_time_ms(model: MultimodalSRModel, data: TrainingData, repeats: int = 3) -> Tuple[float, int]:
    """Median wall time of one conditioning + denoiser forward on the first item, and the conditioning length."""
    item = data.take(np.arange(1))
    z = Tensor(np.zeros_like(item.hr))
    samples, length = [], 0
    with no_grad():
        for _ in range(repeats):
            start = time.perf_counter()
            cond = model.condition(item.tokens, item.captions, item.masks)
            model.predict_eps(z, [model.schedule.steps // 2], item.lr, cond)
            samples.append((time.perf_counter() - start) * 1000.0)
            length = cond.length
    return float(np.median(samples)), length


def ablate_mmlc(train_samples: Sequence[SamplePair], heldout: Sequence[SamplePair], tokenizer: VqTokenizer,
                model_kwargs: Dict, train_kwargs: Dict, config: GuidanceConfig, steps: int, batch_size: int,
                n_jobs: int = 1, progress: bool = False) -> List[Dict]:
    """
    Trains the model with and without the connector under identical settings
    and compares held-out metrics and forward throughput.
    """
    rows = []
    for use_mmlc in (False, True):
        model = MultimodalSRModel(**{**model_kwargs, "use_mmlc": use_mmlc})
        data = prepare_training_data(train_samples, tokenizer, model.d_model, model.token_mode)
        DiffusionTrainer(model, **train_kwargs).fit(data, steps, batch_size, progress=progress)
        ms, length = forward_time_ms(model, data)
        _, reports = sample_set(model, tokenizer, heldout, config, n_jobs=n_jobs, progress=progress)
        rows.append({
            "variant": "w. MMLC" if use_mmlc else "w/o. MMLC",
            "cond_length": length,
            "forward_ms": ms,
            "parameters": model.num_parameters(),
            **mean_reports(reports).as_row(),
        })
    return rows


def sweep_temperature(model: MultimodalSRModel, tokenizer: VqTokenizer, sample: SamplePair,
                      config: GuidanceConfig, modality: str, values: Sequence[float]) -> List[SweepPoint]:
    """Temperature series for one modality on one sample."""
    if modality not in ("depth", "seg", "edge", "text"):
        raise ContractError(f"Unknown modality '{modality}' for a temperature sweep")
    bundle = bundle_for(sample, tokenizer, model, config.mode)
    return sweep(model, bundle, config, f"s_{modality}", values, sample.hr, sample.modalities["edge"].grid)


def sweep_rows(points: Sequence[SweepPoint]) -> List[Dict]:
    return [{"value": p.value, **(p.report.as_row() if p.report else {})} for p in points]
