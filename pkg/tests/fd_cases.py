"""Finite-difference cases: one entry per differentiable op.

Each case builds fresh leaf tensors and returns them with a closure that
evaluates the op. The scalar under test is ``sum(op(...) * R)`` for a fixed
random ``R``, which exercises every output entry.
"""

from __future__ import annotations

import numpy as np

from echo_lora import autodiff as ad
from echo_lora.adapters import lora_projection
from echo_lora.autodiff import Tensor
from echo_lora.echo import inject

H = 1e-5
TOL = 1e-4


def _leaf(rng, *shape, low=None, high=None):
    if low is not None:
        return Tensor(rng.uniform(low, high, shape), requires_grad=True)
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _cases(rng):
    x = lambda *s, **k: _leaf(rng, *s, **k)  # noqa: E731
    mask = np.tril(np.ones((4, 4), dtype=bool))
    labels = np.array([[-100, 2, 0, -100], [1, -100, 3, 4]])
    inj_mask = np.array([[0, 1, 1, 0], [1, 0, 0, 1]])
    keep = (rng.random((2, 3, 5)) > 0.3) / 0.7
    return {
        "add": ([x(3, 4), x(4)], lambda a, b: ad.add(a, b)),
        "sub": ([x(3, 1), x(3, 4)], lambda a, b: ad.sub(a, b)),
        "mul": ([x(2, 3), x(2, 3)], lambda a, b: ad.mul(a, b)),
        "div": ([x(2, 3), x(2, 3, low=0.5, high=2.0)], lambda a, b: ad.div(a, b)),
        "scale": ([x(5)], lambda a: ad.scale(a, -1.7)),
        "tanh": ([x(4, 3)], ad.tanh),
        "sigmoid": ([x(4, 3)], ad.sigmoid),
        "silu": ([x(4, 3)], ad.silu),
        "exp": ([x(4)], ad.exp),
        "log": ([x(4, low=0.3, high=3.0)], ad.log),
        "sqrt": ([x(4, low=0.3, high=3.0)], ad.sqrt),
        "clamp_min": ([Tensor(np.array([-2.0, -0.5, 0.4, 1.3]), requires_grad=True)],
                      lambda a: ad.clamp_min(a, 0.0)),
        "reshape": ([x(2, 6)], lambda a: ad.reshape(a, (3, 4))),
        "transpose": ([x(2, 3, 4)], lambda a: ad.transpose(a, (2, 0, 1))),
        "take": ([x(5, 3)], lambda a: ad.take(a, np.array([0, 2, 2, 4]))),
        "sum": ([x(3, 4)], lambda a: ad.sum_(a, axis=1, keepdims=True)),
        "mean": ([x(3, 4)], lambda a: ad.mean(a, axis=0)),
        "matmul": ([x(2, 3, 4), x(4, 5)], ad.matmul),
        "matmul_batched": ([x(2, 3, 4), x(2, 4, 2)], ad.matmul),
        "linear": ([x(2, 3, 4), x(5, 4)], ad.linear),
        "rms_norm": ([x(3, 6)], ad.rms_norm),
        "rms_norm_weighted": ([x(2, 3, 6), x(6)], ad.rms_norm),
        "softmax": ([x(4, 4)], lambda a: ad.softmax_rows(a, 2.0, mask)),
        "log_softmax": ([x(3, 5)], ad.log_softmax_rows),
        "embedding": ([x(7, 3)], lambda w: ad.embedding(w, np.array([[1, 6], [1, 0]]))),
        "cross_entropy": ([x(2, 4, 5)], lambda a: ad.masked_cross_entropy(a, labels).value),
        "kl_rows": ([x(3, 4), x(3, 4)],
                    lambda a, b: ad.kl_rows(ad.softmax_rows(a), ad.softmax_rows(b))),
        "causal_attention": ([x(2, 4, 6), x(2, 4, 6), x(2, 4, 6)],
                             lambda q, k, v: ad.causal_attention(q, k, v, 2)),
        "gated_mlp": ([x(2, 3, 4), x(6, 4), x(6, 4), x(4, 6)], ad.gated_mlp),
        "lora_projection": ([x(2, 3, 5), x(4, 5), x(2, 5), x(4, 2)],
                            lambda u, W, A, B: lora_projection(u, W, A, B, 1.5, keep)),
        "inject": ([x(2, 4, 3), x(2, 3)], lambda o, d: inject(o, d, inj_mask, 1)),
    }


OP_NAMES = tuple(_cases(np.random.default_rng(0)))


def op_case(name: str, seed: int = 0):
    rng = np.random.default_rng(seed)
    inputs, fn = _cases(rng)[name]
    probe_rng = np.random.default_rng(seed + 1)
    R = None

    def scalar():
        nonlocal R
        out = fn(*inputs)
        if R is None:
            R = probe_rng.normal(size=out.shape)
        return ad.sum_(ad.mul(out, R))

    return inputs, scalar


def op_relative_error(name: str, seed: int = 0) -> float:
    from echo_lora.gradcheck import check_gradients

    inputs, scalar = op_case(name, seed)
    loss = scalar()
    ad.backward(loss)
    return check_gradients(lambda: scalar().item(), inputs, H)
