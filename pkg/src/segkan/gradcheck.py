"""Registered gradient checks for every differentiable layer and the full model."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import diffengine as de
from .diffengine import Array
from .kan import FkacBlock, FourierBasis, KanKernel, SplineBasis, fkac_forward, fourier_phi, kan_conv, spline_eval
from .net import ModelConfig, SegKanModel, forward, soft_dice_loss
from .ptsn import LstmParams, PtsnParams, PtsnState, lstm_cell, ptsn_cell, ptsn_sequence

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-4


def leaf(values) -> Array:
    return Array(values, requires_grad=True)


def check_all(loss_fn: Callable[[], Array], params, eps: float = EPS,
              indices: dict | None = None) -> float:
    """Worst grad_check error of a closure over several leaves."""
    worst = 0.0
    for name, p in params.items():
        idx = None if indices is None else indices.get(name)
        if indices is not None and not idx:
            continue
        worst = max(worst, de.grad_check(lambda _: loss_fn(), p, eps, idx))
    return worst


def check_conv3d(rng) -> float:
    x = leaf(rng.normal(size=(2, 2, 4, 5, 3)))
    k = leaf(rng.normal(size=(3, 2, 2, 3, 2)))
    b = leaf(rng.normal(size=3))
    w = Array(rng.normal(size=(2, 3, 3, 3, 4)))
    loss = lambda: de.mul(de.conv3d(x, k, stride=(1, 2, 1), pad=(0, 1, 1), bias=b), w).sum()
    return check_all(loss, {"x": x, "k": k, "b": b})


def check_spline(rng) -> float:
    basis = SplineBasis(coefficients=leaf(rng.normal(size=8)))
    x = leaf(rng.uniform(-0.95, 0.95, size=(3, 4)))
    w = Array(rng.normal(size=(3, 4)))
    loss = lambda: de.mul(spline_eval(basis, x), w).sum()
    return check_all(loss, {"x": x, "coef": basis.coefficients})


def check_fourier(rng) -> float:
    basis = FourierBasis(3, 4, output_dim=2, rng=rng)
    x = leaf(rng.normal(size=(5, 3)))
    w = Array(rng.normal(size=(5, 2)))
    loss = lambda: de.mul(fourier_phi(basis, x), w).sum()
    return check_all(loss, {"x": x, "a": basis.a, "b": basis.b})


def check_kan_conv(rng) -> float:
    kernel = KanKernel((2, 2), rng=rng, init_scale=0.5)
    img = leaf(rng.uniform(-0.9, 0.9, size=(5, 5)))
    w = Array(rng.normal(size=(6, 6)))
    loss = lambda: de.mul(kan_conv(img, kernel, pad=1), w).sum()
    return check_all(loss, {"image": img, **kernel.parameters()})


def check_fkac(rng) -> float:
    block = FkacBlock(8, 4, 4, rng=rng)
    x = leaf(rng.normal(size=(8, 3, 2, 3)))
    w = Array(rng.normal(size=(8, 3, 2, 3)))
    loss = lambda: de.mul(fkac_forward(block, x), w).sum()
    return check_all(loss, {"x": x, **block.parameters()})


def _cell_check(cell, params, rng) -> float:
    n = params.hidden
    x = leaf(rng.normal(size=params.input_dim))
    h = leaf(rng.uniform(-0.9, 0.9, size=n))
    c = leaf(rng.normal(size=n))
    wh, wc = Array(rng.normal(size=n)), Array(rng.normal(size=n))

    def loss():
        s = cell(x, PtsnState(h, c), params)
        return de.add(de.mul(s.h, wh).sum(), de.mul(s.c, wc).sum())

    return check_all(loss, {"x": x, "h": h, "c": c, **params.parameters()})


def check_ptsn_cell(rng) -> float:
    params = PtsnParams.init(4, 4, rng)
    params.b_g.data[:] = rng.normal(size=4)
    params.b_h.data[:] = rng.normal(size=4)
    return _cell_check(ptsn_cell, params, rng)


def check_lstm_cell(rng) -> float:
    return _cell_check(lstm_cell, LstmParams.init(4, 4, rng), rng)


def check_ptsn_sequence(rng) -> float:
    params = PtsnParams.init(3, 4, rng)
    xs = [leaf(rng.normal(size=3)) for _ in range(10)]
    w = Array(rng.normal(size=4))
    loss = lambda: de.mul(ptsn_sequence(xs, params)[-1], w).sum()
    leaves = {f"x{i}": x for i, x in enumerate(xs)}
    return check_all(loss, {**leaves, **params.parameters()})


def check_end_to_end(rng, n_params: int = 50) -> float:
    """Soft Dice through the whole model on an 8^3 volume with 8 patches."""
    model = SegKanModel(ModelConfig(patches=8), (8, 8, 8), seed=int(rng.integers(1 << 31)))
    vol = Array(rng.uniform(0, 1, size=(8, 8, 8)))
    target = (rng.uniform(size=(8, 8, 8)) < 0.3).astype(float)
    params = model.parameters()
    names = list(params)
    sizes = np.array([params[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    indices = {}
    for flat in sorted(picks):
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        indices.setdefault(names[j], []).append(int(flat - offsets[j]))
    loss = lambda: soft_dice_loss(de.sigmoid(forward(model, vol)), target)
    return check_all(loss, params, indices=indices)


# name -> (check, tolerance)
COMPONENTS = {
    "conv3d": (check_conv3d, LAYER_TOL),
    "spline_eval": (check_spline, LAYER_TOL),
    "fourier_phi": (check_fourier, LAYER_TOL),
    "kan_conv": (check_kan_conv, LAYER_TOL),
    "fkac_forward": (check_fkac, LAYER_TOL),
    "ptsn_cell": (check_ptsn_cell, LAYER_TOL),
    "ptsn_sequence": (check_ptsn_sequence, LAYER_TOL),
    "lstm_cell": (check_lstm_cell, LAYER_TOL),
    "end_to_end": (check_end_to_end, MODEL_TOL),
}


def run_suite(seed: int = 0) -> list:
    """[(name, max_rel_err, tolerance, passed)] for every registered component."""
    rows = []
    for i, (name, (check, tol)) in enumerate(COMPONENTS.items()):
        err = check(np.random.default_rng([seed, i]))
        rows.append((name, err, tol, err < tol))
    return rows
