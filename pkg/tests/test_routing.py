import numpy as np
import pytest

from echo_lora.errors import ConfigError, UsageError
from echo_lora.routing import Router, RoutingSchedule, routing_prob


def test_schedule_examples():
    s = RoutingSchedule(1.0, 0.2, K=5)
    assert [routing_prob(k, s) for k in range(5)] == pytest.approx([1.0, 0.8, 0.6, 0.4, 0.2])
    assert routing_prob(0, s) == 1.0 and routing_prob(4, s) == 0.2


def test_single_step_schedule():
    assert routing_prob(0, RoutingSchedule(0.7, 0.1, K=1)) == 0.7


def test_endpoints_exact_for_awkward_K():
    s = RoutingSchedule(1.0, 0.2, K=1873)
    assert routing_prob(0, s) == 1.0 and routing_prob(1872, s) == 0.2


@pytest.mark.parametrize("kw", [dict(p_start=0.1, p_end=0.5), dict(p_end=-0.1), dict(p_start=1.5),
                                dict(K=0)])
def test_schedule_validation(kw):
    with pytest.raises(ConfigError):
        RoutingSchedule(**kw)


def test_step_out_of_range():
    with pytest.raises(UsageError):
        routing_prob(5, RoutingSchedule(K=5))


def test_router_is_deterministic_and_force_keeps_stream():
    s = RoutingSchedule(K=100, rng_seed=7)
    a, b = Router(s), Router(s)
    draws = [a.sample(k) for k in range(100)]
    assert draws == [b.sample(k) for k in range(100)]
    forced = Router(s, force=0)
    assert [forced.sample(k) for k in range(50)] == [0] * 50
    plain = Router(s)
    for k in range(50):
        plain.sample(k)
    assert forced.rng.bit_generator.state == plain.rng.bit_generator.state
    with pytest.raises(ConfigError):
        Router(s, force=2)


def test_router_stream_is_independent_of_global_numpy_state():
    s = RoutingSchedule(K=20, rng_seed=3)
    first = [Router(s).sample(k) for k in range(1)]
    np.random.seed(0)
    np.random.random(100)
    assert first == [Router(s).sample(k) for k in range(1)]
