"""Finite-difference checks of the reverse-mode gradients.

Each parameter tensor of a small network is probed with central
differences on a handful of single entries (always including the entry with
the largest analytic gradient) and along random dense directions, which move
every entry at once. A tensor passes when the vector of numerical estimates
agrees with the matching analytic values to a relative error below ``tol``.

Central differences are only meaningful where the loss is smooth on the
whole segment [x - h, x + h]. Probes whose endpoints take a different relu
or max branch than the base point straddle a kink; they are discarded and
replaced by fresh ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .network import NetworkParams, forward, tiny_config
from .trainer import loss_tensors

H = 1e-3
TOL = 1e-4
GUARD = 1e-8


def check_point(params, rng):
    """Move ``params`` to a well-conditioned point for finite differences.

    Matrices get std 1/sqrt(fan_in) so every activation is O(1); biases and
    layer-norm parameters get small generic offsets. At the training init
    (std 0.02) a 1e-3 step on a first-layer weight is a 5% change that the
    following layer norm blows up past the relu kinks, and the near-uniform
    attention leaves gradients at the float64 noise floor of a central
    difference.
    """
    for name, t in params.items():
        shape = t.shape
        if len(shape) == 2:
            t.data[...] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        elif name.endswith(".g"):
            t.data[...] = 1.0 + rng.normal(0.0, 0.1, shape)
        else:
            t.data[...] = rng.normal(0.0, 0.1, shape)
    return params


@dataclass(frozen=True)
class TensorCheck:
    name: str
    rel_error: float
    n_probes: int
    n_skipped: int = 0

    @property
    def ok(self):
        return self.n_probes > 0 and self.rel_error < TOL


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GUARD)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def central_difference(f, x, direction, h=H, base=None):
    """(f(x + h d) - f(x - h d)) / 2h, restoring ``x`` in place afterwards.

    ``f`` returns ``(value, branches)``. With ``base`` branches given, None
    is returned when either endpoint leaves that smooth piece.
    """
    orig = x.copy()
    x += h * direction
    up, b_up = f()
    x[...] = orig - h * direction
    down, b_down = f()
    x[...] = orig
    if base is not None and not (_same_branches(base, b_up) and _same_branches(base, b_down)):
        return None
    return (up - down) / (2 * h)


def check_tensors(loss_fn, tensors, rng, entries=6, directions=2, h=H, max_attempts=20):
    """Check every tensor in ``tensors`` (name -> Tensor) against ``loss_fn()``.

    ``loss_fn`` must rebuild the graph from the current tensor data and
    return a scalar Tensor.
    """
    for t in tensors.values():
        t.grad = None
    ad.backward(loss_fn())
    grads = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
             for k, t in tensors.items()}

    def value():
        with ad.no_grad(), ad.record_branches() as branches:
            v = float(loss_fn().data)
        return v, list(branches)

    _, base = value()
    out = []
    for name, t in tensors.items():
        g = grads[name]
        flat = g.ravel()
        order = [int(np.abs(flat).argmax())]
        order += [int(i) for i in rng.permutation(flat.size) if i != order[0]]
        analytic, numeric = [], []
        skipped = 0

        def probe(d, a):
            nonlocal skipped
            n = central_difference(value, t.data, d, h, base)
            if n is None:
                skipped += 1
                return False
            analytic.append(a)
            numeric.append(n)
            return True

        taken = 0
        for i in order[:max_attempts * (entries + 1)]:
            if taken > entries:
                break
            d = np.zeros(t.data.size)
            d[i] = 1.0
            taken += probe(d.reshape(t.shape), flat[i])
        taken = 0
        for _ in range(max_attempts * directions):
            if taken >= directions:
                break
            d = rng.standard_normal(t.shape)
            d /= np.linalg.norm(d)
            taken += probe(d, float((g * d).sum()))
        err = relative_error(analytic, numeric) if analytic else float("inf")
        out.append(TensorCheck(name, err, len(analytic), skipped))
    return out


def network_gradcheck(config=None, seed=0, n_points=16, batch=2, entries=6, directions=2,
                      min_probes=3, max_points=5, h=H):
    """Check every parameter of a ``config`` network (tiny by default).

    A tensor that cannot collect ``min_probes`` kink-free probes at one
    evaluation point is retried at a freshly drawn one; a tensor whose probes
    disagree is a failure and is not retried.
    """
    config = config or tiny_config()
    rng = np.random.default_rng(seed)
    params = NetworkParams.init(config, seed)
    pending = list(params.tensors)
    results = {}
    for _ in range(max_points):
        check_point(params, rng)
        points = rng.uniform(-1.0, 1.0, (batch, n_points, 3))
        target = np.concatenate([
            rng.integers(0, config.n_cmd, (batch, config.n_seq, 1)),
            rng.integers(0, config.n_classes, (batch, config.n_seq, config.n_params)),
        ], axis=-1)

        def loss_fn():
            return loss_tensors(forward(points, params), target, config.beta)[0]

        subset = {k: params[k] for k in pending}
        for c in check_tensors(loss_fn, subset, rng, entries, directions, h):
            results[c.name] = c
        pending = [k for k in pending if results[k].n_probes < min_probes]
        if not pending:
            break
    return [results[k] for k in params.tensors]
