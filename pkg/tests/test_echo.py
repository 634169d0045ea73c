import numpy as np
import pytest

from echo_lora import autodiff as ad
from echo_lora.autodiff import IGNORE_INDEX, Tensor
from echo_lora.data import eval_accuracy, gen_dataset
from echo_lora.echo import (CALL_COUNTS, EchoConfig, build_answer_mask, compute_injection,
                            echo_param_count, extract_echo, find_boundary, init_echo_params,
                            inject, InjectionContext)
from echo_lora.errors import ConfigError, DataError, DimensionError

from conftest import MICRO, MICRO_SPEC, micro_model

X = IGNORE_INDEX


def test_zero_init_injection_is_exactly_zero():
    p = init_echo_params(EchoConfig(bottleneck_dim=4), 8, 8, np.random.default_rng(0))
    delta, gate = compute_injection(np.random.default_rng(1).normal(size=8), p, return_gate=True)
    assert np.all(delta.data == 0.0)
    np.testing.assert_allclose(gate.data, 1 / (1 + np.exp(2.0)))


def test_param_count():
    p = init_echo_params(EchoConfig(bottleneck_dim=3), 8, 6, np.random.default_rng(0))
    assert sum(t.size for t in p.tensors().values()) == echo_param_count(8, 6, 3)


@pytest.mark.parametrize("kwargs", [
    dict(source_layers=[]),
    dict(bottleneck_dim=0),
    dict(target_projections=["x"]),
    dict(source_layers=[1], target_layers=[2]),
    dict(source_layers=[9]),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        EchoConfig(**kwargs).resolved(4)


def test_negative_indices_resolve():
    assert EchoConfig(source_layers=[-1, -2], target_layers=[0]).resolved(4) == ([2, 3], [0])


def test_find_boundary():
    assert find_boundary([X, X, X, 4, 5, X]) == 2
    np.testing.assert_array_equal(find_boundary([[X, 1, 2], [X, X, 3]]), [0, 1])
    for bad in ([X, X, X], [1, 2, X], [X, 1, X, 2]):
        with pytest.raises(DataError):
            find_boundary(bad)


def test_answer_mask():
    np.testing.assert_array_equal(build_answer_mask([X, 3, 4, X]), [0, 1, 1, 0])


def test_extract_echo_is_detached_mean_of_sources():
    model = micro_model(jitter=0.1)
    _, trace = model.forward(np.array([[1, 2, 3, 4], [4, 3, 2, 1]]))
    z = extract_echo(trace, [2, 3], np.array([1, 2]))
    assert not z.requires_grad
    h2, h3 = trace.block_output(2).data, trace.block_output(3).data
    np.testing.assert_allclose(z.data[0], (h2[0, 1] + h3[0, 1]) / 2)
    np.testing.assert_allclose(z.data[1], (h2[1, 2] + h3[1, 2]) / 2)
    with pytest.raises(DataError):
        extract_echo(trace, [3], np.array([1, 9]))


def test_inject_only_touches_masked_rows():
    rng = np.random.default_rng(2)
    o = Tensor(rng.normal(size=(2, 4, 3)))
    delta = Tensor(rng.normal(size=(2, 3)))
    mask = np.array([[0, 1, 1, 0], [0, 0, 0, 1]])
    out = inject(o, delta, mask, 1).data
    untouched = mask == 0
    np.testing.assert_array_equal(out[untouched], o.data[untouched])
    np.testing.assert_array_equal(out[0, 1], o.data[0, 1] + delta.data[0])
    assert inject(o, delta, mask, 0) is o


def test_inject_errors():
    o, d = Tensor(np.zeros((4, 3))), Tensor(np.zeros(3))
    with pytest.raises(DataError):
        inject(o, d, np.ones(4), 2)
    with pytest.raises(DimensionError):
        inject(o, d, np.ones(5), 1)


def test_non_finite_echo_rejected():
    p = init_echo_params(EchoConfig(bottleneck_dim=2), 4, 4, np.random.default_rng(0))
    with pytest.raises(DataError):
        compute_injection(np.array([0.0, np.nan, 1.0, 2.0]), p)


def test_evaluation_never_touches_the_echo_path():
    model = micro_model(jitter=0.1)
    samples = gen_dataset("copy", 8, 0, MICRO_SPEC, MICRO.vocab_size)
    before = dict(CALL_COUNTS)
    eval_accuracy(model, samples)
    assert dict(CALL_COUNTS) == before


def test_injection_gradient_reaches_echo_but_not_echo_vector():
    model = micro_model(jitter=0.1)
    tokens = np.array([[1, 2, 3, 4]])
    labels = np.array([[X, X, 3, 4]])
    with ad.no_grad():
        _, trace = model.forward(tokens)
    ctx = InjectionContext.build(trace, labels, model.echo_config, 1, MICRO.n_layers)
    logits, _ = model.forward(tokens, echo_ctx=ctx)
    ad.backward(ad.sum_(logits))
    assert ctx.z_bar.grad is None
    assert all(t.grad is not None for _, t in model.adapters.named_echo_tensors())
