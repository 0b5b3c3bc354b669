"""Finite-difference verification of every differentiable operation.

Each named check builds fresh random inputs, runs central differences
against the backward pass (tensor.grad_check for inputs,
tensor.grad_check_params for parameters), and reports the worst relative
error.  micro_model_check drives the same comparison through the whole
network at once on sampled parameter entries.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (
    bidirectional_attend,
    diagonal_attention_loss,
    diagonal_constraint_matrix,
    shared_matrix_additive,
    shared_matrix_multiplicative,
)
from .boundary import BoundaryDetector, build_feature_matrix
from .layers import BatchNorm, BiGRU, Linear
from .model import NeuFA, NeuFAConfig
from .positional import PEFlags, apply_positional_encodings
from .tensor import Tensor, grad_check, grad_check_params

__all__ = ["OP_CHECKS", "gradient_suite", "micro_model_check"]


def _scalarize(x: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_value(x * Tensor(weights))


def _check_matmul(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    w = rng.normal(size=(3, 2))
    return max(
        grad_check(lambda t: _scalarize(T.matmul(t, Tensor(b)), w), Tensor(a)),
        grad_check(lambda t: _scalarize(T.matmul(Tensor(a), t), w), Tensor(b)),
    )


def _check_elementwise(rng):
    errs = []
    w = rng.normal(size=(3, 4))
    units = {
        "relu": T.relu, "sigmoid": T.sigmoid, "tanh": T.tanh,
        "exp": T.exp, "sin": T.sin, "cos": T.cos,
    }
    for kind, fn in units.items():
        shift = 0.3 if kind == "relu" else 0.0  # keep samples off the relu kink
        x = rng.normal(size=(3, 4)) + shift
        errs.append(grad_check(lambda t, f=fn: _scalarize(f(t), w), Tensor(x)))
    x = rng.uniform(0.5, 2.0, size=(3, 4))
    errs.append(grad_check(lambda t: _scalarize(T.log(t), w), Tensor(x)))
    y = rng.normal(size=(3, 4))
    errs.append(
        grad_check(lambda t: _scalarize(t * Tensor(y) + t, w), Tensor(rng.normal(size=(3, 4))))
    )
    return max(errs)


def _check_softmax(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))
    return max(
        grad_check(lambda t: _scalarize(T.softmax(t, axis=0), w), Tensor(x)),
        grad_check(lambda t: _scalarize(T.softmax(t, axis=1), w), Tensor(x)),
    )


def _check_scan(rng):
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 3))
    return max(
        grad_check(lambda t: _scalarize(T.scan(t, axis=0), w), Tensor(x)),
        grad_check(lambda t: _scalarize(T.scan(t, axis=0, reverse=True), w), Tensor(x)),
        grad_check(lambda t: _scalarize(T.scan(t, axis=1), w), Tensor(x)),
    )


def _check_conv2d(rng):
    x = rng.normal(size=(2, 5, 6))
    f = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=(3, 5, 6))
    return max(
        grad_check(lambda t: _scalarize(T.conv2d(t, Tensor(f), Tensor(b)), w), Tensor(x)),
        grad_check(lambda t: _scalarize(T.conv2d(Tensor(x), t, Tensor(b)), w), Tensor(f)),
        grad_check(lambda t: _scalarize(T.conv2d(Tensor(x), Tensor(f), t), w), Tensor(b)),
    )


def _check_gru(rng):
    d_in, h, steps = 3, 2, 4
    x = rng.normal(size=(steps, d_in))
    w = Tensor(rng.normal(size=(d_in, 3 * h)) * 0.5, requires_grad=True)
    u_zr = Tensor(rng.normal(size=(h, 2 * h)) * 0.5, requires_grad=True)
    u_n = Tensor(rng.normal(size=(h, h)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3 * h) * 0.5, requires_grad=True)
    w_out = rng.normal(size=(steps, h))
    errs = []
    for reverse in (False, True):
        errs.append(
            grad_check(
                lambda t, r=reverse: _scalarize(T.gru_sequence(t, None, w, u_zr, u_n, b, reverse=r), w_out),
                Tensor(x),
            )
        )
        xt = Tensor(x)
        errs.append(
            grad_check_params(
                lambda r=reverse, xt=xt: _scalarize(
                    T.gru_sequence(xt, None, w, u_zr, u_n, b, reverse=r), w_out
                ),
                [w, u_zr, u_n, b],
            )
        )
    # padded batch: gradients must ignore masked steps
    xb = rng.normal(size=(2, steps, d_in))
    mask = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 1.0, 0.0, 0.0]])
    wb = rng.normal(size=(2, steps, h)) * mask[:, :, None]
    errs.append(
        grad_check(
            lambda t: _scalarize(T.gru_sequence(t, mask, w, u_zr, u_n, b), wb), Tensor(xb)
        )
    )
    return max(errs)


def _check_recurrent_layer(rng):
    layer = BiGRU("g", 3, 4, rng)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 4))
    return max(
        grad_check(lambda t: _scalarize(layer(t), w), Tensor(x)),
        grad_check_params(lambda: _scalarize(layer(Tensor(x)), w), list(layer.parameters())),
    )


def _check_losses(rng):
    errs = []
    target = rng.normal(size=(4, 3))
    x = rng.normal(size=(4, 3))
    errs.append(grad_check(lambda t: T.mse_loss(t, target), Tensor(x)))
    # keep samples away from the absolute-value kink at pred == target
    gap = rng.uniform(0.2, 1.0, size=target.shape) * rng.choice([-1.0, 1.0], size=target.shape)
    errs.append(grad_check(lambda t: T.mae_loss(t, target), Tensor(target + gap)))
    mask = np.array([1.0, 1.0, 0.0, 1.0])[:, None]
    errs.append(grad_check(lambda t: T.mse_loss(t, target, mask=mask), Tensor(x)))
    logits = rng.normal(size=(4, 5))
    idx = rng.integers(0, 5, size=4)
    errs.append(
        grad_check(lambda t: T.cross_entropy_loss(T.softmax(t, axis=1), idx), Tensor(logits))
    )
    errs.append(grad_check(lambda t: T.mean_value(t * t), Tensor(rng.normal(size=(3, 3)))))
    return max(errs)


def _check_batch_norm(rng):
    bn = BatchNorm("bn", 3)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(5, 3))

    def of_input(t):
        out, _ = T.masked_batch_norm(t, bn.gamma, bn.beta)
        return _scalarize(out, w)

    def of_params():
        out, _ = T.masked_batch_norm(Tensor(x), bn.gamma, bn.beta)
        return _scalarize(out, w)

    return max(
        grad_check(of_input, Tensor(x)),
        grad_check_params(of_params, [bn.gamma, bn.beta]),
    )


def _check_positional_block(rng):
    d = 4
    proj_t = Linear("pt", d, 1, rng)
    proj_s = Linear("ps", d, 1, rng)
    e_t = rng.normal(size=(3, d))
    e_s = rng.normal(size=(6, d))
    w = rng.normal(size=(3, 2 * d))

    def run(t):
        pair, l_t, l_s, _, _ = apply_positional_encodings(
            t, Tensor(e_s), proj_t, proj_s, PEFlags()
        )
        return _scalarize(pair.e_t, w) + l_t + l_s + T.mean_value(pair.e_s)

    def run_params():
        pair, l_t, l_s, _, _ = apply_positional_encodings(
            Tensor(e_t), Tensor(e_s), proj_t, proj_s, PEFlags()
        )
        return _scalarize(pair.e_t, w) + l_t + l_s + T.mean_value(pair.e_s)

    return max(
        grad_check(run, Tensor(e_t)),
        grad_check_params(run_params, [proj_t.w, proj_t.b, proj_s.w, proj_s.b]),
    )


def _check_attention_multiplicative(rng):
    n1, n2, d_k, d_a = 3, 5, 4, 3
    f1 = Linear("f1", d_k, d_a, rng)
    f2 = Linear("f2", d_k, d_a, rng)
    k1 = rng.normal(size=(n1, d_k))
    k2 = rng.normal(size=(n2, d_k))
    w1 = rng.normal(size=(n2, d_k))
    w2 = rng.normal(size=(n1, d_k))

    def summarize(t_k1):
        att = bidirectional_attend(
            shared_matrix_multiplicative(t_k1, Tensor(k2), f1, f2), t_k1, Tensor(k2)
        )
        return _scalarize(att.O1, w1) + _scalarize(att.O2, w2)

    def of_params():
        att = bidirectional_attend(
            shared_matrix_multiplicative(Tensor(k1), Tensor(k2), f1, f2), Tensor(k1), Tensor(k2)
        )
        return _scalarize(att.O1, w1) + _scalarize(att.O2, w2)

    return max(
        grad_check(summarize, Tensor(k1)),
        grad_check_params(of_params, [f1.w, f1.b, f2.w, f2.b]),
    )


def _check_attention_additive(rng):
    n1, n2, d_k, d_a = 3, 4, 3, 2
    f1 = Linear("f1", d_k, d_a, rng)
    f2 = Linear("f2", d_k, d_a, rng)
    fa = Linear("fa", d_a, 1, rng)
    k1 = rng.normal(size=(n1, d_k))
    k2 = rng.normal(size=(n2, d_k))
    w1 = rng.normal(size=(n2, d_k))
    w2 = rng.normal(size=(n1, d_k))

    def summarize(t_k1):
        att = bidirectional_attend(
            shared_matrix_additive(t_k1, Tensor(k2), f1, f2, fa), t_k1, Tensor(k2)
        )
        return _scalarize(att.O1, w1) + _scalarize(att.O2, w2)

    def of_params():
        att = bidirectional_attend(
            shared_matrix_additive(Tensor(k1), Tensor(k2), f1, f2, fa), Tensor(k1), Tensor(k2)
        )
        return _scalarize(att.O1, w1) + _scalarize(att.O2, w2)

    # The scorer is linear, so each bias shifts every entry of A by one
    # constant and both softmax normalizations cancel it: those gradients
    # are identically zero.  Central differences only bound zero by
    # round-off (~1e-10 here), so verify the exact zero analytically and
    # finite-difference the remaining parameters.
    biases = [f1.b, f2.b, fa.b]
    for p in [f1.w, f1.b, f2.w, f2.b, fa.w, fa.b]:
        p.zero_grad()
    of_params().backward()
    bias_residual = max(float(np.max(np.abs(p.grad))) for p in biases)
    return max(
        bias_residual,
        grad_check(summarize, Tensor(k1)),
        grad_check_params(of_params, [f1.w, f2.w, fa.w]),
    )


def _check_dal(rng):
    n1, n2 = 4, 6
    constraint = diagonal_constraint_matrix(n1, n2)
    a = rng.normal(size=(n1, n2))
    v1 = Tensor(np.zeros((n1, 2)))
    v2 = Tensor(np.zeros((n2, 2)))

    def run(t):
        att = bidirectional_attend(t, v1, v2)
        return diagonal_attention_loss(att.W12, att.W21, constraint)

    return grad_check(run, Tensor(a))


def _check_detector_stack(rng):
    det = BoundaryDetector("det", rng, channels=2, kernel=3)
    # Zero-init biases can leave a relu input exactly at its kink (dead
    # upstream channel -> pre-activation 0), where the analytic slope is 0
    # but finite differences measure the one-sided branch.  Lift biases so
    # every pre-activation sits clear of the kink.
    for p in det.parameters():
        if p.name.endswith(".b"):
            p.data += rng.uniform(0.2, 0.5, size=p.data.shape)
    n1, n2 = 3, 5
    a = np.abs(rng.normal(size=(n1, n2))) + 0.1
    a /= a.sum(axis=0, keepdims=True)
    b = np.abs(rng.normal(size=(n2, n1))) + 0.1
    b /= b.sum(axis=0, keepdims=True)
    w = rng.normal(size=(n1, n2, 2))

    def of_input(t):
        return _scalarize(det(build_feature_matrix(t, Tensor(b))), w)

    def of_params():
        return _scalarize(det(build_feature_matrix(Tensor(a), Tensor(b))), w)

    return max(
        grad_check(of_input, Tensor(a)),
        grad_check_params(of_params, list(det.parameters())),
    )


OP_CHECKS = {
    "matmul": _check_matmul,
    "elementwise": _check_elementwise,
    "softmax": _check_softmax,
    "scan": _check_scan,
    "conv2d": _check_conv2d,
    "gru": _check_gru,
    "bigru_layer": _check_recurrent_layer,
    "losses": _check_losses,
    "batch_norm": _check_batch_norm,
    "positional": _check_positional_block,
    "attention_multiplicative": _check_attention_multiplicative,
    "attention_additive": _check_attention_additive,
    "diagonal_attention_loss": _check_dal,
    "detector_stack": _check_detector_stack,
}


def gradient_suite(seeds_per_op: int = 20, base_seed: int = 0) -> dict:
    """Run every op check over fresh seeds; returns op name -> worst error."""
    results = {}
    for index, (name, check) in enumerate(OP_CHECKS.items()):
        worst = 0.0
        for s in range(seeds_per_op):
            rng = np.random.default_rng([base_seed, index, s])
            worst = max(worst, check(rng))
        results[name] = worst
    return results


def micro_model_check(entries_per_param: int = 2, seed: int = 0) -> float:
    """Sampled finite-difference check through the entire network.

    Uses a tiny configuration (vocab 5, d_mel 4, width 8) and a loss mixing
    all six terms.  The relative-error denominator is floored at 1e-4 so
    round-off on near-zero gradients does not register as failure.
    """
    cfg = NeuFAConfig(
        vocab_size=5, d_mel=4, text_width=8, speech_width=8, d_a=8,
        decoder_width=8, detector_channels=2, seed=7,
        loss_weights=(0.1, 1.0, 10.0, 10.0, 1.0, 1.0),
    )
    model = NeuFA(cfg)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, 5, size=3)
    frames = rng.normal(size=(7, 4))
    signals = np.zeros((3, 7, 2))
    signals[:, 4:, :] = 1.0

    def loss():
        return model.forward(tokens, frames, gt_signals=signals).total

    model.zero_grad()
    loss().backward()
    grads = {
        p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for p in model.parameters()
    }
    h = 1e-5
    worst = 0.0
    for p in model.parameters():
        if p.name.startswith("att.fa"):
            continue  # inert under the multiplicative form
        flat = p.data.reshape(-1)
        count = min(entries_per_param, flat.size)
        for i in rng.choice(flat.size, size=count, replace=False):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss().data)
            flat[i] = keep - h
            down = float(loss().data)
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            analytic = grads[p.name].reshape(-1)[i]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst
