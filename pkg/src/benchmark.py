"""Connector complexity benchmark: instrumented MAC counts and wall time versus M."""
import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from src.errors import ContractError
from src.layers import MultiHeadAttention
from src.mmlc import MultimodalLatentConnector, baseline_mac_count, mac_count
from src.tensor_core import Tensor, count_macs, no_grad

logger = logging.getLogger(__name__)

DEFAULT_M_LIST = (128, 256, 512, 1024)


def fit_loglog(ms: Sequence[int], values: Sequence[float]) -> Dict[str, object]:
    """Least-squares line through (log M, log value): slope, r2 and residuals."""
    x = np.log(np.asarray(ms, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    residuals = y - (slope * x + intercept)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((residuals ** 2).sum()) / total if total > 0 else 1.0
    return {"slope": float(slope), "r2": r2, "residuals": residuals.tolist()}


def _timed(fn, trials: int) -> float:
    samples = []
    for _ in range(trials):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return float(np.median(samples))


def bench_mmlc(m_list: Sequence[int] = DEFAULT_M_LIST, n: int = 8, d: int = 4, heads: int = 4,
               trials: int = 5, seed: int = 0) -> Dict[str, object]:
    """
    Measures the connector's cross-attention layer and a full self-attention
    baseline over sequences of each length in `m_list`.

    Args:
        m_list: At least 3 sequence lengths spanning a factor of 8 or more.
        n: Latent tokens.
        d: Model width.
        heads: Attention heads (must divide `d`).
        trials: Timing repetitions; the median is reported.
        seed: Input and parameter seed.

    Returns:
        {"points": [{M, macs, ns, baseline_macs, baseline_ns, formula_match}],
         "slope", "r2", "residuals", "baseline_slope", "baseline_r2", "baseline_residuals", "N", "D"}
    """
    m_list = [int(m) for m in m_list]
    if len(m_list) < 3:
        raise ContractError(f"bench_mmlc: need at least 3 sequence lengths, got {len(m_list)}")
    if max(m_list) < 8 * min(m_list):
        raise ContractError(f"bench_mmlc: lengths must span at least 8x, got {min(m_list)}..{max(m_list)}")
    if min(m_list) <= n:
        raise ContractError(f"bench_mmlc: every M must exceed N={n}, got {min(m_list)}")

    rng = np.random.default_rng(seed)
    connector = MultimodalLatentConnector(d, n, heads, 0, rng)
    baseline = MultiHeadAttention(d, heads, rng)
    latents = Tensor(connector.latents.data[None])

    points = []
    with threadpool_limits(limits=1), no_grad():
        for m in m_list:
            context = Tensor(rng.normal(0.0, 1.0, (1, m, d)))
            with count_macs() as counter:
                connector.cross.attn(latents, context)
            with count_macs() as base_counter:
                baseline(context)
            point = {
                "M": m,
                "macs": counter.macs,
                "ns": _timed(lambda: connector.cross.attn(latents, context), trials),
                "baseline_macs": base_counter.macs,
                "baseline_ns": _timed(lambda: baseline(context), trials),
                "formula_match": counter.macs == mac_count(m, n, d, heads)
                and base_counter.macs == baseline_mac_count(m, d, heads),
            }
            points.append(point)
            logger.debug(f"bench M={m}: macs={point['macs']} baseline={point['baseline_macs']}")

    connector_fit = fit_loglog(m_list, [p["macs"] for p in points])
    baseline_fit = fit_loglog(m_list, [p["baseline_macs"] for p in points])
    report = {
        "N": n,
        "D": d,
        "points": points,
        "slope": connector_fit["slope"],
        "r2": connector_fit["r2"],
        "residuals": connector_fit["residuals"],
        "baseline_slope": baseline_fit["slope"],
        "baseline_r2": baseline_fit["r2"],
        "baseline_residuals": baseline_fit["residuals"],
    }
    logger.info(f"Connector MAC slope {report['slope']:.4f}, full attention slope {report['baseline_slope']:.4f}")
    return report


def write_bench_json(report: Dict[str, object], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    return path
