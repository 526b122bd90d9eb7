import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import csv
import json

import pytest

from mmdiff import main, parse_temps
from src.errors import ContractError, DomainError

TINY_CONFIG = {
    "data": {"n": 6, "seed": 0, "heldout_n": 2, "heldout_seed": 1},
    "vq": {"K": 8, "d_tok": 4, "g": 8, "epochs": 1, "batch": 6, "blocks": 0, "heads": 1},
    "model": {"d_model": 8, "n_latents": 4, "mmlc_self_blocks": 1, "denoiser_blocks": 1, "heads": 2},
    "train": {"steps": 2, "batch": 2, "log_every": 1},
    "sample": {"steps": 2},
}


def _json_line(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny end-to-end run: data, tokenizer and diffusion checkpoint."""
    root = tmp_path_factory.mktemp("run")
    (root / "tiny.json").write_text(json.dumps(TINY_CONFIG))
    base = ["--workdir", str(root), "-q"]
    assert main(base + ["gen-data", "--config", "tiny.json", "--out", "train.mmds", "--export", "1"]) == 0
    assert main(base + ["gen-data", "--config", "tiny.json", "--out", "heldout.mmds", "--heldout"]) == 0
    assert main(base + ["train-vq", "--config", "tiny.json", "--data", "train.mmds", "--out", "vq",
                        "--heldout", "heldout.mmds"]) == 0
    assert main(base + ["train-diff", "--config", "tiny.json", "--data", "train.mmds", "--vq", "vq",
                        "--out", "ckpt"]) == 0
    return root


def _run(workdir, *args):
    return main(["--workdir", str(workdir), "-q", *args])


def test_pipeline_outputs(workdir):
    assert (workdir / "train_export" / "00000_hr.ppm").exists()
    assert (workdir / "train_export" / "00000_edge.pgm").exists()
    assert [row["modality"] for row in _rows(workdir / "vq" / "token_paths.csv")] == ["depth", "seg", "edge"]
    log = [json.loads(line) for line in (workdir / "ckpt" / "train_log.jsonl").read_text().splitlines()]
    assert [record["step"] for record in log] == [0, 1]
    manifest = json.loads((workdir / "ckpt" / "manifest.json").read_text())
    assert manifest["config"]["model"]["d_model"] == 8
    assert len(manifest["config_hash"]) == 64


def test_sample_is_reproducible(workdir, capsys):
    args = ["sample", "--ckpt", "ckpt", "--index", "0", "--data", "heldout.mmds", "--seed", "3"]
    assert _run(workdir, *args, "--out", "a.ppm") == 0
    first = _json_line(capsys)
    assert _run(workdir, *args, "--out", "b.ppm") == 0
    second = _json_line(capsys)
    assert (workdir / "a.ppm").read_bytes() == (workdir / "b.ppm").read_bytes()
    assert first["mode"] == "m-cfg" and first["seed"] == 3
    assert first["psnr"] == second["psnr"] and 0.0 <= first["edge_f1"] <= 1.0


def test_sample_from_lr_file(workdir, capsys):
    assert _run(workdir, "sample", "--ckpt", "ckpt", "--lr-file", "train_export/00000_lr.ppm",
                "--modality-source", "lr", "--mode", "m∅-cfg", "--out", "lr.ppm") == 0
    line = _json_line(capsys)
    assert line["mode"] == "mnull-cfg" and line["psnr"] is None
    assert (workdir / "lr.ppm").exists()


def test_sample_index_without_data_is_a_usage_error(workdir):
    assert _run(workdir, "sample", "--ckpt", "ckpt", "--index", "0", "--out", "x.ppm") == 1


def test_ablate_guidance_writes_grid(workdir):
    assert _run(workdir, "ablate-guidance", "--ckpt", "ckpt", "--data", "heldout.mmds", "--limit", "1",
                "--steps", "1") == 0
    rows = _rows(workdir / "ablate_guidance.csv")
    assert len(rows) == 9
    assert list(rows[0]) == ["mode", "w", "psnr", "ssim", "edge_f1"]


def test_ablate_modalities_writes_masks(workdir):
    assert _run(workdir, "ablate-modalities", "--ckpt", "ckpt", "--data", "heldout.mmds", "--limit", "1",
                "--steps", "1", "--out", "masks.csv") == 0
    assert [row["mask"] for row in _rows(workdir / "masks.csv")][-1] == "all"


def test_sweep_temp(workdir):
    assert _run(workdir, "sweep-temp", "--ckpt", "ckpt", "--modality", "edge", "--values", "0.5,2",
                "--data", "heldout.mmds", "--steps", "1") == 0
    assert (workdir / "sweep" / "edge_0.5.ppm").exists()
    assert (workdir / "sweep" / "edge_2.ppm").exists()
    assert len(_rows(workdir / "sweep" / "sweep.csv")) == 2


def test_train_diff_rejects_mismatched_tokenizer(workdir):
    config = json.loads(json.dumps(TINY_CONFIG))
    config["vq"]["K"] = 16
    (workdir / "other.json").write_text(json.dumps(config))
    assert _run(workdir, "train-diff", "--config", "other.json", "--data", "train.mmds", "--vq", "vq",
                "--out", "bad") == 1


def test_missing_input_is_an_io_error(tmp_path):
    assert main(["--workdir", str(tmp_path), "-q", "train-vq", "--data", "nope.mmds", "--out", "vq"]) == 2


def test_bad_config_is_a_config_error(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"vq": {"codes": 3}}))
    assert main(["--workdir", str(tmp_path), "-q", "gen-data", "--config", "bad.json", "--out", "x.mmds"]) == 1


def test_usage_errors_exit_with_one():
    with pytest.raises(SystemExit) as excinfo:
        main(["sample", "--bogus"])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main(["sample", "--ckpt", "c", "--index", "0", "--lr-file", "x.ppm", "--out", "o.ppm"])
    assert excinfo.value.code == 1


def test_entropy_check(capsys):
    assert main(["-q", "entropy-check", "--trials", "100"]) == 0
    assert capsys.readouterr().out.strip() == "OK 100/100"


def test_bench_mmlc(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "-q", "bench-mmlc", "--M-list", "128,256,1024", "--trials", "1",
                 "--out", "bench.json"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("M,macs,formula_match")
    assert "slope=" in out
    report = json.loads((tmp_path / "bench.json").read_text())
    assert all(point["formula_match"] for point in report["points"])


def test_parse_temps():
    temps = parse_temps("depth=0.5, text=2")
    assert temps.scale("depth") == 0.5 and temps.scale("text") == 2.0 and temps.scale("edge") == 1.0
    with pytest.raises(ContractError):
        parse_temps("depth")
    with pytest.raises(ContractError):
        parse_temps("sky=1")
    with pytest.raises(ContractError):
        parse_temps("edge=sharp")
    with pytest.raises(DomainError):
        parse_temps("edge=0.1")
