import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import json

import numpy as np
import pytest

from src.diffusion import (
    DiffusionTrainer, MultimodalSRModel, NoiseSchedule, TrainingData, diffusion_loss, drop_modalities, forward_diffuse,
    load_model, prepare_training_data, save_model, timestep_embedding,
)
from src.errors import ContractError, DomainError, ShapeError
from src.synth_data import L_TEXT
from src.tensor_core import GradTape, Tensor, no_grad
from src.vq_tokenizer import save_vq

TINY = dict(d_model=8, n_latents=4, mmlc_self_blocks=1, denoiser_blocks=1, heads=2,
            grid=8, resolution=32, scale=4, d_tok=4, seed=0)


def test_noise_schedule():
    schedule = NoiseSchedule()
    abar = schedule.alpha_bars
    assert abar.shape == (1001,)
    assert abar[0] == 1.0
    assert abar[1] == pytest.approx(1.0 - 1e-4)
    assert np.all(np.diff(abar) < 0)
    with pytest.raises(DomainError):
        schedule.alpha_bar(1001)


def test_forward_diffuse_formula(rng):
    x0 = rng.random((2, 4, 4, 3))
    eps = rng.standard_normal(x0.shape)
    schedule = NoiseSchedule()
    z = forward_diffuse(x0, [1, 500], eps, schedule)
    for i, t in enumerate((1, 500)):
        abar = schedule.alpha_bars[t]
        expected = np.sqrt(abar) * (2 * x0[i] - 1) + np.sqrt(1 - abar) * eps[i]
        np.testing.assert_allclose(z[i], expected)
    with pytest.raises(DomainError):
        forward_diffuse(x0[0], 0, eps[0], schedule)
    with pytest.raises(DomainError):
        forward_diffuse(x0[0], 1001, eps[0], schedule)
    with pytest.raises(ShapeError):
        forward_diffuse(x0, 3, eps[0], schedule)


def test_timestep_embedding_shape():
    emb = timestep_embedding(np.array([1, 10, 100]), 7)
    assert emb.shape == (3, 7)
    np.testing.assert_allclose(emb[:, :3], np.sin(np.array([1, 10, 100])[:, None] * np.exp(
        -np.log(10000.0) * np.arange(3) / 3)))


def test_drop_modalities_extremes():
    assert drop_modalities(0, p=0.0, joint_p=0.0).all()
    assert not drop_modalities(0, p=1.0, joint_p=0.0).any()
    assert not drop_modalities(0, p=0.0, joint_p=1.0).any()
    with pytest.raises(DomainError):
        drop_modalities(0, p=1.5)


def _drop_rates(**kwargs):
    dropped = ~np.stack([drop_modalities(seed, **kwargs) for seed in range(100_000)])
    pairs = [(dropped[:, i] & dropped[:, j]).mean() for i in range(4) for j in range(i + 1, 4)]
    return dropped.mean(axis=0), np.array(pairs)


def test_drop_modalities_independent_rates():
    marginal, pairs = _drop_rates(p=0.1, joint_p=0.0)
    assert np.all(np.abs(marginal - 0.1) < 0.005)
    assert np.all(np.abs(pairs - 0.01) < 0.002)


def test_drop_modalities_default_rates_include_joint_drop():
    marginal, pairs = _drop_rates()
    assert np.all(np.abs(marginal - (1 - 0.95 * 0.9)) < 0.005)
    assert np.all(np.abs(pairs - (0.05 + 0.95 * 0.01)) < 0.005)


def test_drop_modalities_is_deterministic():
    np.testing.assert_array_equal(drop_modalities((3, 7, 1)), drop_modalities((3, 7, 1)))


def test_condition_lengths(tiny_model, samples, tokenizer):
    data = prepare_training_data(samples[:2], tokenizer, tiny_model.d_model)
    cond = tiny_model.condition(data.tokens, data.captions, data.masks)
    assert cond.tokens.shape == (2, L_TEXT + 4, 8)
    raw = MultimodalSRModel(**{**TINY, "use_mmlc": False})
    assert raw.condition(data.tokens, data.captions, data.masks).length == L_TEXT + 3 * 64 + L_TEXT


def test_predict_eps_shapes(tiny_model, samples, tokenizer):
    data = prepare_training_data(samples[:2], tokenizer, tiny_model.d_model)
    cond = tiny_model.condition(data.tokens, data.captions, data.masks)
    z = Tensor(np.zeros((2, 32, 32, 3)))
    with no_grad():
        assert tiny_model.predict_eps(z, [5, 900], data.lr, cond).shape == (2, 32, 32, 3)
        with pytest.raises(ShapeError):
            tiny_model.predict_eps(z, [5, 900], data.hr, cond)
        with pytest.raises(DomainError):
            tiny_model.predict_eps(z, [0, 5], data.lr, cond)
        with pytest.raises(ShapeError):
            tiny_model.predict_eps(Tensor(np.zeros((2, 16, 16, 3))), 5, data.lr, cond)


def test_model_rejects_token_width_above_model_width():
    with pytest.raises(ContractError):
        MultimodalSRModel(**{**TINY, "d_tok": 16})


def test_empty_token_receives_gradient_when_everything_is_dropped(tiny_model, samples, tokenizer, rng):
    data = prepare_training_data(samples[:2], tokenizer, tiny_model.d_model)
    masks = np.zeros((2, 4), dtype=bool)
    eps = rng.standard_normal(data.hr.shape)
    with GradTape() as tape:
        loss = diffusion_loss(tiny_model, data, np.array([10, 600]), eps, masks)
    tape.backward(loss)
    assert np.abs(tiny_model.embed.empty_token.grad).sum() > 0


def test_full_drop_ignores_tokens_and_captions(tiny_model, samples, tokenizer, rng):
    data = prepare_training_data(samples[:2], tokenizer, tiny_model.d_model)
    other = prepare_training_data(samples[2:4], tokenizer, tiny_model.d_model)
    swapped = TrainingData(data.hr, data.lr, other.tokens, other.captions, other.masks)
    masks = np.zeros((2, 4), dtype=bool)
    t = np.array([25, 700])
    eps = rng.standard_normal(data.hr.shape)
    with no_grad():
        first = diffusion_loss(tiny_model, data, t, eps, masks).numpy()
        second = diffusion_loss(tiny_model, swapped, t, eps, masks).numpy()
    np.testing.assert_array_equal(first, second)


def test_duplicated_batch_has_single_sample_loss(tiny_model, samples, tokenizer, rng):
    data = prepare_training_data(samples[:1], tokenizer, tiny_model.d_model)
    eps = rng.standard_normal(data.hr.shape)
    masks = np.ones((1, 4), dtype=bool)
    with no_grad():
        single = diffusion_loss(tiny_model, data, np.array([300]), eps, masks).numpy()
        double = diffusion_loss(tiny_model, data.take(np.array([0, 0])), np.array([300, 300]),
                                np.concatenate([eps, eps]), np.concatenate([masks, masks])).numpy()
    assert float(double) == pytest.approx(float(single), rel=1e-6)


def test_trainer_is_deterministic_and_logs(tmp_path, samples, tokenizer):
    def run(log_path):
        model = MultimodalSRModel(**TINY)
        data = prepare_training_data(samples, tokenizer, model.d_model)
        trainer = DiffusionTrainer(model, lr=1e-3, seed=5)
        return model, trainer.fit(data, steps=3, batch_size=2, log_every=1, log_path=log_path)

    model_a, history_a = run(tmp_path / "a.jsonl")
    model_b, history_b = run(tmp_path / "b.jsonl")
    assert [r["loss"] for r in history_a] == [r["loss"] for r in history_b]
    assert all(np.isfinite(r["loss"]) for r in history_a)
    records = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 1, 2]
    assert set(records[0]) == {"step", "loss", "lr", "wall_ms"}
    for name, value in model_a.state_dict().items():
        np.testing.assert_array_equal(value, model_b.state_dict()[name])


def test_checkpoint_round_trip(tmp_path, tiny_model, samples, tokenizer):
    save_model(tiny_model, tokenizer, tmp_path / "ckpt", config_hash="h", config={})
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["groups"]["empty_token"] == "embed/empty_token"
    assert manifest["vq"]["D_model"] == 8
    assert "embed/empty_token" in manifest["tensors"]
    model, loaded_tokenizer, _ = load_model(tmp_path / "ckpt")

    data = prepare_training_data(samples[:1], tokenizer, 8)
    z = Tensor(np.full((1, 32, 32, 3), 0.1))
    with no_grad():
        expected = tiny_model.predict_eps(z, 7, data.lr, tiny_model.condition(data.tokens, data.captions, data.masks))
        actual = model.predict_eps(z, 7, data.lr, model.condition(data.tokens, data.captions, data.masks))
    np.testing.assert_array_equal(actual.numpy(), expected.numpy())
    np.testing.assert_array_equal(loaded_tokenizer.codebook.numpy(), tokenizer.codebook.numpy())


def test_load_model_rejects_tokenizer_checkpoint(tmp_path, tokenizer):
    save_vq(tokenizer, tmp_path / "vq")
    with pytest.raises(ContractError):
        load_model(tmp_path / "vq")


def test_forward_diffuse_limits_and_moments(rng):
    schedule = NoiseSchedule()
    x0 = rng.random((8, 8, 3))
    signed = 2 * x0 - 1
    z1 = forward_diffuse(x0, 1, rng.standard_normal(x0.shape), schedule)
    assert np.sqrt(np.mean((z1 - signed) ** 2)) < 0.02

    draws = 1000
    zT = np.stack([forward_diffuse(x0, 1000, rng.standard_normal(x0.shape), schedule) for _ in range(draws)])
    assert abs(np.corrcoef(zT.mean(axis=0).ravel(), signed.ravel())[0, 1]) < 0.5
    per_draw = [abs(np.corrcoef(z.ravel(), signed.ravel())[0, 1]) for z in zT]
    assert np.mean(per_draw) < 0.1

    t = 400
    abar = schedule.alpha_bars[t]
    pixel = np.full((1, 1, 1), 0.8)
    samples = np.array([forward_diffuse(pixel, t, rng.standard_normal(pixel.shape), schedule).item()
                        for _ in range(10000)])
    mean, var = np.sqrt(abar) * 0.6, 1 - abar
    assert abs(samples.mean() - mean) < 4 * np.sqrt(var / 10000)
    assert abs(samples.var() - var) < 4 * var * np.sqrt(2 / 9999)
