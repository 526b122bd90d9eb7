import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import numpy as np
import pytest

from src.errors import ContractError
from src.information import (
    JointDistribution, cond_entropy, cond_mutual_info, entropy, entropy_check, mutual_info_kl,
)


def test_entropy_of_uniform_and_point_mass():
    assert entropy(np.full(8, 1 / 8)) == pytest.approx(3.0)
    assert entropy(np.array([1.0, 0.0, 0.0])) == 0.0


def test_independent_modality_carries_no_information():
    p = JointDistribution(np.full((4, 2, 3), 1 / 24))
    assert cond_entropy(p, ["x"], ["y"]) == pytest.approx(2.0, abs=1e-12)
    assert cond_mutual_info(p) == pytest.approx(0.0, abs=1e-12)


def test_modality_that_determines_x():
    table = np.zeros((4, 2, 4))
    for value in range(4):
        table[value, :, value] = 1 / 8
    p = JointDistribution(table)
    assert cond_entropy(p, ["x"], ["y", "m"]) == pytest.approx(0.0, abs=1e-12)
    assert cond_mutual_info(p) == pytest.approx(2.0, abs=1e-12)
    assert mutual_info_kl(p) == pytest.approx(2.0, abs=1e-12)


def test_conditioning_never_increases_entropy(rng):
    for _ in range(20):
        p = JointDistribution.random(rng, (3, 4, 5))
        assert cond_entropy(p, ["x"], ["y"]) >= cond_entropy(p, ["x"], ["y", "m"]) - 1e-12
        assert cond_mutual_info(p) >= -1e-12


def test_entropy_check_passes():
    result = entropy_check(100, seed=0)
    assert result.ok
    assert result.summary() == "OK 100/100"
    assert result.failures == []


def test_joint_distribution_validation():
    with pytest.raises(ContractError):
        JointDistribution(np.full((2, 2), 0.25))
    with pytest.raises(ContractError):
        JointDistribution(np.full((2, 2, 2), 0.2))
    bad = np.full((2, 2, 2), 1 / 8)
    bad[0, 0, 0], bad[0, 0, 1] = -1 / 8, 3 / 8
    with pytest.raises(ContractError):
        JointDistribution(bad)
    with pytest.raises(ContractError):
        JointDistribution(np.full((17, 1, 1), 1 / 17))
    p = JointDistribution(np.full((2, 2, 2), 1 / 8))
    with pytest.raises(ContractError):
        cond_entropy(p, ["x"], ["x"])
    with pytest.raises(ContractError):
        p.marginal(["z"])
    with pytest.raises(ContractError):
        entropy_check(0)


def _brute_force_cond_entropy(table):
    """H(x | y, m) and H(x | y) by explicit loops."""
    nx, ny, nm = table.shape
    h_xym = 0.0
    for y in range(ny):
        for m in range(nm):
            p_ym = sum(table[x, y, m] for x in range(nx))
            for x in range(nx):
                if table[x, y, m] > 0:
                    h_xym -= table[x, y, m] * np.log2(table[x, y, m] / p_ym)
    h_xy = 0.0
    for y in range(ny):
        p_y = sum(table[x, y, m] for x in range(nx) for m in range(nm))
        for x in range(nx):
            p_xy = sum(table[x, y, m] for m in range(nm))
            if p_xy > 0:
                h_xy -= p_xy * np.log2(p_xy / p_y)
    return h_xy, h_xym


def test_matches_brute_force(rng):
    for _ in range(5):
        p = JointDistribution.random(rng, (4, 4, 4))
        h_xy, h_xym = _brute_force_cond_entropy(p.table)
        assert cond_entropy(p, ["x"], ["y"]) == pytest.approx(h_xy, abs=1e-12)
        assert cond_entropy(p, ["x"], ["y", "m"]) == pytest.approx(h_xym, abs=1e-12)
        assert cond_mutual_info(p) == pytest.approx(h_xy - h_xym, abs=1e-12)
