import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent.absolute()
sys.path.append(str(project_root))

import io

import numpy as np
import pytest

from src.errors import ContractError, DomainError, FormatError, NumericError, ShapeError
from src.layers import CrossAttentionBlock, MultiHeadAttention, TransformerBlock, attention
from src.mmlc import MultimodalLatentConnector
from src.diffusion import Denoiser
from src.tensor_core import (
    Adam, GradTape, Parameter, Tensor, add, backward, concat, count_macs, div, embedding, expand, gelu,
    getitem, grad_check, layer_norm, matmul, mean, mse, mul, no_grad, precision, reshape, softmax,
    straight_through, sub, sum_, transpose, upsample_bilinear, upsample_nearest,
)
from src.tensor_io import read_mmt1, write_mmt1
from src.vq_tokenizer import VqDecoder, VqEncoder

TOL = 1e-4
INSTANCES = 5


def _weights(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape), dtype=np.float64)


def _check(build, shape, seed=0):
    """Runs grad_check on `INSTANCES` random points of `shape`."""
    rng = np.random.default_rng(seed)
    for i in range(INSTANCES):
        with precision("float64"):
            f = build(i)
        assert grad_check(f, rng.normal(size=shape)) < TOL


ELEMENTWISE = {
    "add": lambda x, c: add(x, c),
    "sub": lambda x, c: sub(c, x),
    "mul": lambda x, c: mul(x, c),
    "div": lambda x, c: div(x, add(mul(c, c), 1.0)),
    "div_denominator": lambda x, c: div(c, add(mul(x, x), 1.0)),
    "gelu": lambda x, c: gelu(x),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_gradients(name):
    op = ELEMENTWISE[name]

    def build(i):
        c = _weights((3, 4), 100 + i)
        w = _weights((3, 4), 200 + i)
        return lambda x: sum_(mul(op(x, c), w))

    _check(build, (3, 4))


def test_broadcast_gradients():
    def build(i):
        w = _weights((2, 3, 4), i)
        other = _weights((2, 3, 4), 10 + i)
        return lambda x: sum_(mul(mul(x, other), w))

    _check(build, (1, 4))


def test_layout_gradients():
    def build(i):
        w = _weights((4, 3, 2), i)
        return lambda x: sum_(mul(transpose(reshape(x, (2, 3, 4)), (2, 1, 0)), w))

    _check(build, (6, 4))


def test_getitem_concat_expand_gradients():
    def build(i):
        w = _weights((2, 5, 3), i)

        def f(x):
            parts = concat([getitem(x, (slice(None), slice(0, 2))), x], axis=1)
            return sum_(mul(expand(reshape(parts, (1, 5, 3)), (2, 5, 3)), w))
        return f

    _check(build, (1, 3, 3))


def test_matmul_gradients():
    def build(i):
        b = _weights((2, 4, 5), i)
        w = _weights((2, 3, 5), 10 + i)
        return lambda x: sum_(mul(matmul(x, b), w))

    _check(build, (3, 4))


def test_reduction_gradients():
    def build(i):
        w = _weights((3,), i)
        return lambda x: add(sum_(mul(mean(x, axis=1), w)), mean(mul(x, x)))

    _check(build, (3, 4))


def test_embedding_gradients():
    indices = np.array([[0, 2, 2], [1, 0, 3]])

    def build(i):
        w = _weights((2, 3, 4), i)
        return lambda table: sum_(mul(embedding(table, indices), w))

    _check(build, (5, 4))


def test_layer_norm_gradients():
    def build(i):
        gamma = _weights((6,), i)
        beta = _weights((6,), 10 + i)
        w = _weights((2, 6), 20 + i)
        return lambda x: sum_(mul(layer_norm(x, gamma, beta), w))

    _check(build, (2, 6))


def test_softmax_gradients_with_column_temperatures():
    delta = np.array([0.5, 1.0, 2.0, 4.0])

    def build(i):
        w = _weights((3, 4), i)
        return lambda x: sum_(mul(softmax(x, axis=-1, temperature=delta), w))

    _check(build, (3, 4))


def test_softmax_closed_forms():
    flat = softmax(Tensor(np.array([1.0, 2.0, 3.0])), temperature=1e6).numpy()
    np.testing.assert_allclose(flat, np.full(3, 1.0 / 3.0), atol=1e-5)
    odds = softmax(Tensor(np.array([0.0, np.log(3.0)])), temperature=1.0).numpy()
    np.testing.assert_allclose(odds, [0.25, 0.75], atol=1e-6)


def test_mse_gradients():
    def build(i):
        target = _weights((2, 3), i)
        return lambda x: mse(x, target)

    _check(build, (2, 3))


@pytest.mark.parametrize("op", [upsample_nearest, upsample_bilinear])
def test_upsample_gradients(op):
    def build(i):
        w = _weights((1, 6, 6, 2), i)
        return lambda x: sum_(mul(op(x, 3), w))

    _check(build, (1, 2, 2, 2))


def test_straight_through_gradient_is_identity():
    z = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    upstream = np.array([1.5, -2.0, 0.25])
    with GradTape() as tape:
        out = straight_through(z, np.array([1.0, -1.0, 2.0]))
        loss = sum_(mul(out, upstream))
    tape.backward(loss)
    np.testing.assert_allclose(out.numpy(), [1.0, -1.0, 2.0])
    np.testing.assert_allclose(z.grad, upstream, atol=1e-6)


def test_mse_is_mean_of_squares():
    with precision("float64"):
        a = Tensor(np.array([1.0, 2.0, 3.0, 4.0]), requires_grad=True)
        with GradTape() as tape:
            loss = mse(a, np.zeros(4))
        tape.backward(loss)
    assert loss.item() == pytest.approx(30.0 / 4.0)
    np.testing.assert_allclose(a.grad, 2.0 * a.data / 4.0)


def test_composite_attention_gradients():
    scale = np.array([0.5, 1.0, 2.0, 1.0, 4.0])

    def build(i):
        attn = MultiHeadAttention(4, 2, np.random.default_rng(i))
        context = _weights((1, 5, 4), 10 + i)
        w = _weights((1, 3, 4), 20 + i)
        return lambda x: sum_(mul(attn(x, context, scale), w))

    _check(build, (1, 3, 4))


def test_composite_block_gradients():
    def build(i):
        block = TransformerBlock(4, 2, np.random.default_rng(i))
        cross = CrossAttentionBlock(4, 2, np.random.default_rng(50 + i))
        context = _weights((1, 6, 4), 10 + i)
        w = _weights((1, 3, 4), 20 + i)
        return lambda x: sum_(mul(cross(block(x), context), w))

    _check(build, (1, 3, 4))


def test_vq_encoder_decoder_gradients():
    def build(i):
        rng = np.random.default_rng(i)
        encoder = VqEncoder(4, 4, 1, 2, rng)
        decoder = VqDecoder(4, 2, 4, 1, 2, rng)
        w = _weights((1, 8, 8, 7), 20 + i)
        return lambda x: sum_(mul(decoder(encoder(x)), w))

    _check(build, (1, 8, 8, 10))


def test_connector_gradients():
    scale = np.array([1.0, 1.0, 2.0, 2.0, 0.5, 0.5])

    def build(i):
        connector = MultimodalLatentConnector(4, 2, 2, 1, np.random.default_rng(i))
        w = _weights((1, 2, 4), 20 + i)
        return lambda x: sum_(mul(connector(x, scale), w))

    _check(build, (1, 6, 4))


def test_denoiser_gradients():
    def build(i):
        denoiser = Denoiser(8, 2, 8, 1, 2, np.random.default_rng(i))
        lr_up = _weights((1, 8, 8, 3), 10 + i)
        cond = _weights((1, 3, 8), 30 + i)
        w = _weights((1, 8, 8, 3), 20 + i)
        return lambda z: sum_(mul(denoiser(z, np.array([10]), lr_up, cond), w))

    _check(build, (1, 8, 8, 3))


def test_attention_rejects_bad_temperature():
    q = Tensor(np.ones((1, 2, 4)))
    with pytest.raises(DomainError):
        attention(q, q, q, 0.0)
    with pytest.raises(ShapeError):
        attention(q, q, q, np.ones(3))


def test_shape_errors_are_descriptive():
    with pytest.raises(ShapeError, match="inner dimensions"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        reshape(Tensor(np.ones(6)), (4, 2))


def test_non_finite_results_raise():
    with pytest.raises(NumericError, match="mul"):
        mul(Tensor(np.array([np.inf])), 2.0)
    with pytest.raises(DomainError):
        div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_backward_requires_scalar_loss():
    x = Parameter(np.ones(3))
    with GradTape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(1)))


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3))
    with GradTape() as tape:
        with no_grad():
            mul(x, 2.0)
    assert len(tape) == 0


def test_count_macs_matches_matmul_extents():
    with count_macs() as counter:
        matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert counter.macs == 2 * 3 * 4 * 5
    assert counter.calls == 1


def test_adam_moves_against_gradient():
    param = Parameter(np.array([1.0, -1.0]))
    optimizer = Adam([param], lr=0.1)
    with GradTape() as tape:
        loss = sum_(mul(param, param))
    tape.backward(loss)
    optimizer.step()
    np.testing.assert_allclose(param.data, [0.9, -0.9], atol=1e-6)
    np.testing.assert_array_equal(param.grad, [0.0, 0.0])
    with pytest.raises(DomainError):
        Adam([param], lr=0.0)


def test_precision_switches_dtype():
    assert Tensor(1.0).dtype == np.float32
    with precision("float64"):
        assert Tensor(1.0).dtype == np.float64
    with pytest.raises(DomainError):
        with precision("float16"):
            pass


def test_mmt1_preserves_values_and_dtype():
    array = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7.0
    stream = io.BytesIO()
    write_mmt1(stream, array)
    write_mmt1(stream, array.astype(np.float32))
    stream.seek(0)
    first, second = read_mmt1(stream), read_mmt1(stream)
    np.testing.assert_array_equal(first, array)
    assert second.dtype == np.float32


def test_mmt1_rejects_truncation_and_bad_magic():
    stream = io.BytesIO()
    write_mmt1(stream, np.ones((4, 4)))
    data = stream.getvalue()
    with pytest.raises(FormatError):
        read_mmt1(io.BytesIO(data[:-3]))
    with pytest.raises(FormatError):
        read_mmt1(io.BytesIO(b"XXXX" + data[4:]))
