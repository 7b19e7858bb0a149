"""Learnable univariate bases and the layers built from them.

Two parameterisations of a univariate function are provided:

* B-splines on a uniform clamped grid, used by the element-wise KAN
  convolution kernel (reference / ablation path).
* Truncated Fourier series, used by the FKAC embedding block, which wraps
  the series between two pointwise convolutions and a residual add.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Array


# ---------------------------------------------------------------- B-splines

def knot_vector(grid_min: float, grid_max: float, grid_size: int, order: int) -> np.ndarray:
    h = (grid_max - grid_min) / grid_size
    return grid_min + (np.arange(grid_size + 2 * order + 1) - order) * h


def bspline_basis(x: np.ndarray, grid_min: float, grid_max: float,
                  grid_size: int, order: int):
    """All ``grid_size + order`` basis values at ``x`` (flattened).

    Returns ``(basis, dbasis)`` with shape ``[x.size, grid_size + order]``;
    ``dbasis`` is the derivative wrt x and is zero where x was clamped.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = (grid_max - grid_min) / grid_size
    t = knot_vector(grid_min, grid_max, grid_size, order)
    xc = np.clip(x, grid_min, grid_max)
    inside = (x >= grid_min) & (x <= grid_max)
    # the right grid edge belongs to the last interior interval
    span = np.clip(np.floor((xc - t[0]) / h).astype(np.int64), order, order + grid_size - 1)
    basis = np.zeros((x.size, len(t) - 1))
    basis[np.arange(x.size), span] = 1.0
    prev = basis
    for p in range(1, order + 1):
        n = basis.shape[1] - 1
        left = (xc[:, None] - t[None, :n]) / (p * h)
        right = (t[None, p + 1:p + 1 + n] - xc[:, None]) / (p * h)
        prev = basis
        basis = left * prev[:, :n] + right * prev[:, 1:n + 1]
    if order >= 1:
        dbasis = (prev[:, :-1] - prev[:, 1:]) / h
    else:
        dbasis = np.zeros_like(basis)
    dbasis = dbasis * inside[:, None]
    return basis, dbasis


@dataclass
class SplineBasis:
    grid_min: float = -1.0
    grid_max: float = 1.0
    grid_size: int = 5
    order: int = 3
    coefficients: Array | None = None

    def __post_init__(self):
        if not self.grid_min < self.grid_max:
            raise ValueError("grid_min must be < grid_max")
        if self.grid_size < 1 or self.order < 1:
            raise ValueError("grid_size and order must be >= 1")
        if self.coefficients is None:
            self.coefficients = de.zeros(self.n_basis, requires_grad=True)
        if self.coefficients.shape != (self.n_basis,):
            raise ValueError(f"expected {self.n_basis} coefficients")

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.order

    @property
    def grid(self) -> tuple:
        return self.grid_min, self.grid_max, self.grid_size, self.order


def spline(x: Array, coef: Array, grid: tuple) -> Array:
    """Differentiable spline evaluation.

    ``coef`` is either ``[n_basis]`` (one function for every element of x)
    or ``[K, n_basis]`` with ``x.shape[0] == K`` (one function per row).
    """
    x, coef = de.as_array(x), de.as_array(coef)
    basis, dbasis = bspline_basis(x.data, *grid)
    nb = basis.shape[1]
    if coef.ndim == 1:
        if coef.shape[0] != nb:
            raise de.ShapeError(f"spline needs {nb} coefficients, got {coef.shape[0]}")
        out = (basis @ coef.data).reshape(x.shape)

        def rule(g):
            gf = g.reshape(-1)
            return (g * (dbasis @ coef.data).reshape(x.shape), basis.T @ gf)
    else:
        k = coef.shape[0]
        if coef.shape != (k, nb) or x.ndim == 0 or x.shape[0] != k:
            raise de.ShapeError(f"per-row coefficients {coef.shape} do not match x {x.shape}")
        b3 = basis.reshape(k, -1, nb)
        d3 = dbasis.reshape(k, -1, nb)
        out = np.einsum("krn,kn->kr", b3, coef.data).reshape(x.shape)

        def rule(g):
            g2 = g.reshape(k, -1)
            gx = g2 * np.einsum("krn,kn->kr", d3, coef.data)
            return gx.reshape(x.shape), np.einsum("krn,kr->kn", b3, g2)

    return de.record("spline", out, (x, coef), rule)


def spline_eval(basis: SplineBasis, x: Array) -> Array:
    return spline(x, basis.coefficients, basis.grid)


@dataclass
class KanKernelElem:
    w_b: Array
    w_s: Array
    spline: SplineBasis


def phi_eval(elem: KanKernelElem, x: Array) -> Array:
    """w_b * SiLU(x) + w_s * spline(x)."""
    x = de.as_array(x)
    return de.add(de.mul(elem.w_b, de.silu(x)), de.mul(elem.w_s, spline_eval(elem.spline, x)))


class KanKernel:
    """Grid of learnable univariate functions, stored as stacked parameters.

    Element ``idx`` is ``phi(x) = w_b[idx]*SiLU(x) + w_s[idx]*spline_idx(x)``
    with all splines sharing one grid.
    """

    def __init__(self, shape, grid_min=-1.0, grid_max=1.0, grid_size=5, order=3,
                 rng: np.random.Generator | None = None, init_scale: float = 0.1):
        self.shape = tuple(int(s) for s in shape)
        SplineBasis(grid_min, grid_max, grid_size, order, de.zeros(grid_size + order))
        self.grid = (grid_min, grid_max, grid_size, order)
        nb = grid_size + order
        rng = rng if rng is not None else np.random.default_rng(0)
        self.w_b = Array(rng.uniform(-1, 1, self.shape), requires_grad=True)
        self.w_s = Array(np.ones(self.shape), requires_grad=True)
        self.coef = Array(rng.normal(0.0, init_scale, self.shape + (nb,)), requires_grad=True)

    def parameters(self) -> dict:
        return {"w_b": self.w_b, "w_s": self.w_s, "coef": self.coef}

    def elem(self, idx) -> KanKernelElem:
        """Standalone (detached) copy of one kernel element."""
        idx = tuple(idx)
        lo, hi, g, k = self.grid
        return KanKernelElem(Array(self.w_b.data[idx]), Array(self.w_s.data[idx]),
                             SplineBasis(lo, hi, g, k, Array(self.coef.data[idx])))

    def phi_values(self, idx, a: float) -> float:
        """Plain-float evaluation of one element (used by the reference path)."""
        idx = tuple(idx)
        lo, hi, g, k = self.grid
        t = knot_vector(lo, hi, g, k)
        x = min(max(a, lo), hi)
        spl = sum(c * _cox_de_boor(j, k, t, x, k + g - 1) for j, c in enumerate(self.coef.data[idx]))
        silu = a / (1.0 + math.exp(-a))
        return float(self.w_b.data[idx] * silu + self.w_s.data[idx] * spl)


def _cox_de_boor(i: int, p: int, t, x: float, last: int) -> float:
    """Scalar recursive basis value; interval ``last`` is closed on the right."""
    if p == 0:
        if x >= t[last + 1]:
            return 1.0 if i == last else 0.0
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = (x - t[i]) / (t[i + p] - t[i]) * _cox_de_boor(i, p - 1, t, x, last)
    right = (t[i + p + 1] - x) / (t[i + p + 1] - t[i + 1]) * _cox_de_boor(i + 1, p - 1, t, x, last)
    return left + right


def _conv_geometry(img_shape, kshape, stride, pad):
    n = len(kshape)
    stride = (stride,) * n if isinstance(stride, int) else tuple(stride)
    pad = (pad,) * n if isinstance(pad, int) else tuple(pad)
    if len(img_shape) != n:
        raise de.ShapeError(f"image rank {len(img_shape)} != kernel rank {n}")
    out = []
    for s, k, st, p in zip(img_shape, kshape, stride, pad):
        if st < 1:
            raise ValueError("stride must be >= 1")
        if k > s + 2 * p:
            raise de.ShapeError("kernel window larger than padded image")
        out.append((s + 2 * p - k) // st + 1)
    return stride, pad, tuple(out)


def kan_conv(image: Array, kernel: KanKernel, stride=1, pad=0) -> Array:
    """out[i] = sum over window offsets o of phi_o(image[i*stride + o]).

    Works for any rank (2-D images, 3-D volumes); zero padding.
    """
    image = de.as_array(image)
    stride, pad, out_shape = _conv_geometry(image.shape, kernel.shape, stride, pad)
    if any(pad):
        image = de.pad(image, [(p, p) for p in pad])
    views = []
    for off in np.ndindex(*kernel.shape):
        sl = tuple(slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(off, stride, out_shape))
        views.append(image[sl])
    kcount = len(views)
    win = de.stack(views, axis=0)                       # [K, *out]
    full = (kcount,) + out_shape
    unit = (kcount,) + (1,) * len(out_shape)
    wb = de.expand(de.reshape(kernel.w_b, unit), full)
    ws = de.expand(de.reshape(kernel.w_s, unit), full)
    coef = de.reshape(kernel.coef, (kcount, -1))
    phi = de.add(de.mul(wb, de.silu(win)), de.mul(ws, spline(win, coef, kernel.grid)))
    return de.reduce(phi, "sum", 0)


def kan_conv_reference(image, kernel: KanKernel, stride=1, pad=0) -> np.ndarray:
    """Direct nested-loop evaluation of the KAN convolution sum (no graph)."""
    img = np.asarray(image.data if isinstance(image, Array) else image, dtype=np.float64)
    stride, pad, out_shape = _conv_geometry(img.shape, kernel.shape, stride, pad)
    img = np.pad(img, [(p, p) for p in pad])
    out = np.zeros(out_shape)
    for i in np.ndindex(*out_shape):
        total = 0.0
        for off in np.ndindex(*kernel.shape):
            src = tuple(a * st + o for a, st, o in zip(i, stride, off))
            total += kernel.phi_values(off, float(img[src]))
        out[i] = total
    return out


# ---------------------------------------------------------------- Fourier

class FourierBasis:
    """Per-output truncated Fourier series over a d-vector.

    out[o] = sum_i sum_k cos(k x_i) a[o,i,k] + sin(k x_i) b[o,i,k]
    """

    def __init__(self, input_dim: int, grid_size: int = 4, output_dim: int | None = None,
                 rng: np.random.Generator | None = None):
        self.input_dim = int(input_dim)
        self.grid_size = int(grid_size)
        self.output_dim = int(output_dim if output_dim is not None else input_dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        std = 1.0 / (self.input_dim * self.grid_size)
        shape = (self.output_dim, self.input_dim, self.grid_size)
        self.a = Array(rng.normal(0.0, std, shape), requires_grad=True)
        self.b = Array(rng.normal(0.0, std, shape), requires_grad=True)

    def parameters(self) -> dict:
        return {"a": self.a, "b": self.b}


def fourier_phi(basis: FourierBasis, x: Array) -> Array:
    x = de.as_array(x)
    d, g, dout = basis.input_dim, basis.grid_size, basis.output_dim
    if x.ndim == 0 or x.shape[-1] != d:
        raise de.ShapeError(f"fourier_phi expects last extent {d}, got shape {x.shape}")
    lead = x.shape[:-1]
    m = int(np.prod(lead)) if lead else 1
    xf = de.reshape(x, (m, d))
    kx = [de.mul(xf, float(k)) for k in range(1, g + 1)]
    cos_f = de.reshape(de.stack([de.cos(v) for v in kx], axis=-1), (m, d * g))
    sin_f = de.reshape(de.stack([de.sin(v) for v in kx], axis=-1), (m, d * g))
    a = de.transpose(de.reshape(basis.a, (dout, d * g)))
    b = de.transpose(de.reshape(basis.b, (dout, d * g)))
    out = de.add(de.matmul(cos_f, a), de.matmul(sin_f, b))
    return de.reshape(out, lead + (dout,))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Array(rng.uniform(-bound, bound, shape), requires_grad=True)


class FkacBlock:
    """x + expand(fourier(compress(x))) with 1x1x1 compress/expand convs."""

    def __init__(self, channels: int, reduction: int = 4, grid_size: int = 4,
                 rng: np.random.Generator | None = None):
        if channels % reduction:
            raise ValueError(f"channels ({channels}) not divisible by reduction ({reduction})")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.reduction = reduction
        inner = channels // reduction
        self.compress_w = _uniform(rng, channels, (inner, channels, 1, 1, 1))
        self.compress_b = _uniform(rng, channels, (inner,))
        self.basis = FourierBasis(inner, grid_size, inner, rng=rng)
        self.expand_w = _uniform(rng, inner, (channels, inner, 1, 1, 1))
        self.expand_b = _uniform(rng, inner, (channels,))

    def parameters(self) -> dict:
        return {
            "compress_w": self.compress_w, "compress_b": self.compress_b,
            "fourier_a": self.basis.a, "fourier_b": self.basis.b,
            "expand_w": self.expand_w, "expand_b": self.expand_b,
        }

    def __call__(self, x: Array) -> Array:
        return fkac_forward(self, x)


def fkac_forward(block: FkacBlock, x: Array) -> Array:
    x = de.as_array(x)
    if x.ndim not in (4, 5) or x.shape[-4] != block.channels:
        raise de.ShapeError(f"fkac expects {block.channels} channels, got shape {x.shape}")
    z = de.conv3d(x, block.compress_w, bias=block.compress_b)
    # channels last so the series acts on each voxel's channel vector
    ch_axis = z.ndim - 4
    perm = tuple(i for i in range(z.ndim) if i != ch_axis) + (ch_axis,)
    inv = tuple(np.argsort(perm))
    z = de.transpose(fourier_phi(block.basis, de.transpose(z, perm)), inv)
    return de.add(x, de.conv3d(z, block.expand_w, bias=block.expand_b))
