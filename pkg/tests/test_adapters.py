import numpy as np
import pytest

from echo_lora.adapters import (AdapterSet, adapter_forward, init_dora, init_lora, linear,
                                merge_lora, row_norms, strip_echo)
from echo_lora.autodiff import Tensor
from echo_lora.errors import CheckpointError, ConfigError, DimensionError

from conftest import micro_model


def test_lora_init_and_scale():
    p = init_lora(np.random.default_rng(0), 8, 6, rank=4, alpha=32)
    assert p.A.shape == (4, 6) and p.B.shape == (8, 4)
    assert np.all(p.B.data == 0) and p.scale == 8.0
    assert np.all(np.abs(p.A.data) <= 1 / np.sqrt(6))


def test_rank_is_capped_with_warning():
    with pytest.warns(UserWarning, match="capping"):
        p = init_lora(np.random.default_rng(0), 4, 3, rank=16, alpha=32)
    assert p.rank == 3
    with pytest.raises(ConfigError):
        init_lora(np.random.default_rng(0), 4, 3, rank=0, alpha=1)


def test_lora_at_init_equals_frozen_projection():
    rng = np.random.default_rng(1)
    W, u = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(3, 4)))
    p = init_lora(rng, 5, 4, 2, 4.0)
    np.testing.assert_array_equal(adapter_forward(W, p, u).data, linear(u, W).data)


def test_dora_magnitude_init_keeps_output():
    rng = np.random.default_rng(2)
    W, u = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(3, 4)))
    p = init_dora(rng, W.data, 2, 4.0)
    np.testing.assert_array_equal(p.m.data, row_norms(W.data))
    np.testing.assert_allclose(adapter_forward(W, p, u).data, linear(u, W).data, rtol=1e-14)


@pytest.mark.parametrize("kind", ["lora", "dora"])
def test_merge_matches_adapted_forward(kind):
    rng = np.random.default_rng(3)
    W, u = Tensor(rng.normal(size=(6, 5))), Tensor(rng.normal(size=(4, 5)))
    p = init_lora(rng, 6, 5, 3, 6.0) if kind == "lora" else init_dora(rng, W.data, 3, 6.0)
    lora = p if kind == "lora" else p.lora
    lora.B.data = rng.normal(size=lora.B.shape)
    if kind == "dora":
        p.m.data = p.m.data * rng.uniform(0.5, 2.0, p.m.shape)
    merged = u.data @ merge_lora(W, p).T
    np.testing.assert_allclose(merged, adapter_forward(W, p, u).data, rtol=0, atol=1e-12)


def test_dropout_only_touches_the_low_rank_branch():
    rng = np.random.default_rng(4)
    W, u = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(3, 4)))
    p = init_lora(rng, 5, 4, 2, 4.0, dropout_p=0.5)
    out = adapter_forward(W, p, u, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, linear(u, W).data)  # B = 0


def test_shape_mismatch():
    rng = np.random.default_rng(5)
    p = init_lora(rng, 5, 4, 2, 4.0)
    with pytest.raises(DimensionError):
        adapter_forward(Tensor(np.zeros((5, 4))), p, Tensor(np.zeros((2, 3))))


def test_adapter_set_naming_and_counts():
    model = micro_model()
    names = [n for n, _ in model.adapters.named_adapter_tensors()]
    assert names[:2] == ["adapter.0.q.A", "adapter.0.q.B"]
    assert len(names) == 4 * 4 * 2
    echo_names = [n for n, _ in model.adapters.named_echo_tensors()]
    assert "echo.0.q.W1" in echo_names and "echo.1.v.lambda" in echo_names
    assert model.adapters.count() == sum(p.size for p in model.parameters())
    assert model.adapters.without_echo().echo == {}


def test_strip_echo():
    model = micro_model()
    tensors = {n: t.data for n, t in model.adapters.named_parameters()}
    out = strip_echo(tensors)
    assert out and not any(n.startswith("echo.") for n in out)
    with pytest.raises(CheckpointError):
        strip_echo({"echo.0.q.W1": np.zeros(1)})
    with pytest.raises(CheckpointError):
        strip_echo(out, expected_adapters=["adapter.9.q.A"])


def test_adapter_set_defaults_empty():
    s = AdapterSet()
    assert s.count() == 0 and s.get(0, "q") is None
