"""
Full-scale training runs. These take tens of minutes on a laptop CPU, so they
only run with MMDIFF_ACCEPTANCE=1.
"""
import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import json
import os

import pytest

from mmdiff import main
from mmdiff_config import RunConfig
from src.diffusion import load_model
from src.experiments import ablate_guidance, ablate_modalities, evaluate_sr, guidance_degradation
from src.sampler import GuidanceConfig
from src.synth_data import read_dataset

pytestmark = pytest.mark.skipif(os.getenv("MMDIFF_ACCEPTANCE") != "1", reason="set MMDIFF_ACCEPTANCE=1 to run")


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    base = ["--workdir", str(root), "-q"]
    assert main(base + ["gen-data", "--out", "train.mmds"]) == 0
    assert main(base + ["gen-data", "--out", "heldout.mmds", "--heldout"]) == 0
    return root


def test_tokenizer_reconstruction(run, capsys):
    assert main(["--workdir", str(run), "-q", "train-vq", "--data", "train.mmds", "--out", "vq",
                 "--heldout", "heldout.mmds"]) == 0
    scores = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert scores["seg_accuracy"] >= 0.95
    assert scores["edge_f1"] >= 0.90


def test_super_resolution_beats_bicubic(run):
    assert main(["--workdir", str(run), "-q", "train-diff", "--data", "train.mmds", "--vq", "vq",
                 "--out", "ckpt"]) == 0
    model, tokenizer, _ = load_model(run / "ckpt")
    heldout = read_dataset(run / "heldout.mmds")
    sample = RunConfig().sample
    config = GuidanceConfig(sample.mode, sample.w, sample.steps)
    result = evaluate_sr(model, tokenizer, heldout, config)
    assert result["ddim"].psnr >= result["bicubic"].psnr + 0.5

    rows = {row["mask"]: row for row in ablate_modalities(model, tokenizer, heldout, config)}
    assert rows["all"]["edge_f1"] >= rows["LR-only"]["edge_f1"]

    grid = ablate_guidance(model, tokenizer, heldout, config)
    assert len(grid) == 9
    assert guidance_degradation(grid, "m-cfg") <= guidance_degradation(grid, "cfg")
