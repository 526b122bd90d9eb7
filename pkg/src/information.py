"""Exact entropies and conditional mutual information on finite joint tables (bits)."""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.special import entr, rel_entr

from src.errors import ContractError, NumericError

logger = logging.getLogger(__name__)

AXES = ("x", "y", "m")
MAX_ALPHABET = 16
NORMALIZATION_TOL = 1e-12
IDENTITY_TOL = 1e-12


@dataclass
class JointDistribution:
    """p(x, y, m) as a 3-D table."""

    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 3:
            raise ContractError(f"JointDistribution needs a 3-D table over (x, y, m), got shape {self.table.shape}")
        if max(self.table.shape) > MAX_ALPHABET:
            raise ContractError(f"Alphabets are limited to {MAX_ALPHABET} symbols, got {self.table.shape}")
        if np.any(self.table < 0):
            raise ContractError("JointDistribution has negative entries")
        total = float(self.table.sum())
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ContractError(f"JointDistribution sums to {total!r}, not 1")

    def marginal(self, keep: Sequence[str]) -> np.ndarray:
        """Marginal over the named axes, kept in (x, y, m) order."""
        unknown = set(keep) - set(AXES)
        if unknown:
            raise ContractError(f"Unknown axes {sorted(unknown)}, expected a subset of {AXES}")
        drop = tuple(i for i, name in enumerate(AXES) if name not in keep)
        return self.table.sum(axis=drop) if drop else self.table

    @classmethod
    def random(cls, rng: np.random.Generator, shape=(4, 4, 4)) -> "JointDistribution":
        table = rng.dirichlet(np.ones(int(np.prod(shape)))).reshape(shape)
        return cls(table / table.sum())


def entropy(p: np.ndarray) -> float:
    """H(p) in bits with 0 log 0 = 0."""
    return float(entr(np.asarray(p, dtype=np.float64)).sum() / math.log(2.0))


def cond_entropy(p: JointDistribution, target: Sequence[str], given: Sequence[str] = ()) -> float:
    """H(target | given) = H(target, given) - H(given), in bits."""
    if not isinstance(p, JointDistribution):
        p = JointDistribution(p)
    target, given = list(target), list(given)
    if set(target) & set(given):
        raise ContractError(f"Target {target} and condition {given} overlap")
    joint = entropy(p.marginal(target + given))
    return joint - (entropy(p.marginal(given)) if given else 0.0)


def mutual_info_kl(p: JointDistribution) -> float:
    """
    I(x; m | y) from its divergence form:
    sum p(x,y,m) log [p(x,y,m) p(y) / (p(x,y) p(y,m))].
    """
    table = p.table
    p_y = p.marginal(["y"])[None, :, None]
    p_xy = p.marginal(["x", "y"])[:, :, None]
    p_ym = p.marginal(["y", "m"])[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        reference = np.where(table > 0, p_xy * p_ym / np.where(p_y > 0, p_y, 1.0), 1.0)
    return float(rel_entr(table, reference).sum() / math.log(2.0))


def cond_mutual_info(p: JointDistribution) -> float:
    """
    I(x; m | y) = H(x | y) - H(x | y, m), cross-checked against the
    divergence form.
    """
    if not isinstance(p, JointDistribution):
        p = JointDistribution(p)
    difference = cond_entropy(p, ["x"], ["y"]) - cond_entropy(p, ["x"], ["y", "m"])
    divergence = mutual_info_kl(p)
    if abs(difference - divergence) > 1e-9:
        raise NumericError(f"Mutual information forms disagree: {difference!r} vs {divergence!r}")
    return difference


@dataclass
class EntropyCheckResult:
    passed: int
    total: int
    analytic_ok: bool
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.analytic_ok and self.passed == self.total

    def summary(self) -> str:
        return f"{'OK' if self.ok else 'FAIL'} {self.passed}/{self.total}"


def _analytic_cases() -> List[str]:
    failures = []
    # x uniform over 4 and independent of (y, m)
    independent = JointDistribution(np.full((4, 2, 3), 1.0 / 24.0))
    if abs(cond_entropy(independent, ["x"], ["y"]) - 2.0) > IDENTITY_TOL:
        failures.append("uniform independent x: H(x|y) != 2")
    if abs(cond_mutual_info(independent)) > IDENTITY_TOL:
        failures.append("independent m: I(x;m|y) != 0")
    # m determines x
    table = np.zeros((4, 2, 4))
    for value in range(4):
        table[value, :, value] = 1.0 / 8.0
    if abs(cond_entropy(JointDistribution(table), ["x"], ["y", "m"])) > IDENTITY_TOL:
        failures.append("deterministic channel: H(x|y,m) != 0")
    return failures


def entropy_check(trials: int = 100, seed: int = 0) -> EntropyCheckResult:
    """
    Runs the information oracle on `trials` random tables: non-negativity of
    I(x; m | y), conditioning never increases entropy, and agreement of the
    entropy-difference and divergence forms.
    """
    if trials < 1:
        raise ContractError(f"entropy_check: trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    failures = _analytic_cases()
    analytic_ok = not failures
    passed = 0
    for trial in range(trials):
        shape = tuple(int(v) for v in rng.integers(2, 7, size=3))
        p = JointDistribution.random(rng, shape)
        h_xy = cond_entropy(p, ["x"], ["y"])
        h_xym = cond_entropy(p, ["x"], ["y", "m"])
        info = mutual_info_kl(p)
        problems = []
        if info < -IDENTITY_TOL:
            problems.append(f"I={info!r} < 0")
        if h_xy - h_xym < -IDENTITY_TOL:
            problems.append(f"H(x|y)={h_xy!r} < H(x|y,m)={h_xym!r}")
        if abs((h_xy - h_xym) - info) > IDENTITY_TOL:
            problems.append(f"identity gap {abs((h_xy - h_xym) - info)!r}")
        if problems:
            failures.append(f"trial {trial} {shape}: " + "; ".join(problems))
        else:
            passed += 1
    result = EntropyCheckResult(passed, trials, analytic_ok, failures)
    logger.info(f"Entropy check: {result.summary()}")
    return result
