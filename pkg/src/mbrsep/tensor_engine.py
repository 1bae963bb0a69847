"""Small numerical engine for the separation networks.

Tensors are plain 4-axis numpy arrays laid out as (batch, channel, time,
frequency).  Every layer kind the models need has a forward and a backward
function; the state that changes during training lives in explicit records
(:class:`BatchNormState`, :class:`AdamState`) owned by the operation that
updates them.

Convolutions are computed in the Fourier domain.  The kernels used by the
models reach (29, 1025), where direct summation is far too slow; with FFTs
every convolution, its input gradient and its weight gradient reduce to one
batched complex matrix product per frequency point.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Literal, Optional

import numpy as np
import scipy.fft as sfft

Padding = Literal["same", "valid"]


class EngineError(ValueError):
    """Raised on bad shapes or non-finite values inside the engine."""


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise EngineError(f"non-finite values produced by {where}")
    return arr


def _check_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise EngineError(f"{name} must be 4-D (batch, channel, time, freq), got shape {x.shape}")
    if x.size == 0:
        raise EngineError(f"{name} has zero size: {x.shape}")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvParams:
    """Hyper-parameters of one 2-D (transposed) convolution.

    Kernel sizes are given as (time, frequency), matching how the layer
    tables list them.
    """

    out_channels: int
    in_channels: int
    kernel_time: int
    kernel_freq: int
    stride_time: int = 1
    stride_freq: int = 1
    padding: Padding = "same"
    use_bias: bool = True

    def __post_init__(self):
        if min(self.kernel_time, self.kernel_freq) < 1:
            raise EngineError(f"kernel sizes must be >= 1, got {self.kernel}")
        if min(self.stride_time, self.stride_freq) < 1:
            raise EngineError("strides must be >= 1")
        if min(self.out_channels, self.in_channels) < 1:
            raise EngineError("channel counts must be >= 1")
        if self.padding not in ("same", "valid"):
            raise EngineError(f"unknown padding {self.padding!r}")

    @property
    def kernel(self) -> tuple[int, int]:
        return (self.kernel_time, self.kernel_freq)

    @property
    def stride(self) -> tuple[int, int]:
        return (self.stride_time, self.stride_freq)

    @property
    def n_weights(self) -> int:
        return self.out_channels * self.in_channels * self.kernel_time * self.kernel_freq

    @property
    def n_params(self) -> int:
        return self.n_weights + (self.out_channels if self.use_bias else 0)


@dataclass(frozen=True)
class _AxisGeom:
    """Geometry of a strided correlation along one axis.

    ``n`` input samples are embedded into a padded buffer of ``n_pad``
    samples starting at offset ``before``; output ``i`` reads buffer samples
    ``i*stride .. i*stride + kernel - 1``.
    """

    n: int
    kernel: int
    stride: int
    out: int
    before: int
    n_pad: int

    @property
    def upsampled(self) -> int:
        return (self.out - 1) * self.stride + 1


def _axis_geom(n: int, kernel: int, stride: int, padding: Padding, axis: str) -> _AxisGeom:
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + kernel - n, 0)
        before = total // 2
    else:
        if n < kernel:
            raise EngineError(f"{axis} axis: input size {n} smaller than kernel {kernel} with valid padding")
        out = (n - kernel) // stride + 1
        before = 0
    return _AxisGeom(n, kernel, stride, out, before, (out - 1) * stride + kernel)


def output_size(n: int, kernel: int, stride: int, padding: Padding) -> int:
    return _axis_geom(n, kernel, stride, padding, "").out


def transpose_output_size(n: int, kernel: int, stride: int, padding: Padding) -> int:
    """Spatial size produced by a transposed convolution from ``n`` inputs."""
    if padding == "same":
        return n * stride
    return (n - 1) * stride + kernel


def _kept(g: _AxisGeom) -> int:
    """Input samples that land inside the padded buffer (valid padding may drop a tail)."""
    return min(g.n, g.n_pad - g.before)


@dataclass(frozen=True)
class _Grid:
    """Fourier grid for one correlation.

    The time axis is short (tens of frames), so its DFT is a small dense
    matrix product; that also lets arbitrary offsets and strides be folded
    into column/row selections.  The frequency axis uses a real FFT.
    """

    pt: int
    pf: int

    @property
    def fq(self) -> int:
        return self.pf // 2 + 1


@lru_cache(maxsize=64)
def _dft_matrix(n: int, dtype: str, inverse: bool) -> np.ndarray:
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    m = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    if inverse:
        m /= n
    m = m.astype(dtype)
    m.setflags(write=False)
    return m


def _grid(gt: _AxisGeom, gf: _AxisGeom) -> _Grid:
    # A circular correlation over >= n_pad samples never wraps into the kept
    # outputs (overlap-save), so n_pad bounds both axes.
    return _Grid(gt.n_pad, sfft.next_fast_len(gf.n_pad, real=True))


def _complex_dtype(a: np.ndarray) -> np.dtype:
    return np.result_type(a.dtype, np.complex64)


def _spectrum(a: np.ndarray, grid: _Grid, t0: int = 0, f0: int = 0, t_step: int = 1, f_step: int = 1,
              conj: bool = False) -> np.ndarray:
    """2-D DFT of ``a`` (R0, R1, rows, cols) placed on the grid.

    Entry ``a[..., i, j]`` sits at grid position ``(t0 + i*t_step, f0 + j*f_step)``.
    Returns a contiguous (points, R0, R1) array, conjugated if requested.
    """
    r0, r1, rows, cols = a.shape
    if f_step > 1:
        up = np.zeros((r0, r1, rows, (cols - 1) * f_step + 1), dtype=a.dtype)
        up[..., ::f_step] = a
        a = up
    if f0:
        a = np.pad(a, ((0, 0), (0, 0), (0, 0), (f0, 0)))
    s1 = sfft.rfft(a, n=grid.pf, axis=-1)
    s1 = np.ascontiguousarray(s1.transpose(2, 3, 0, 1))
    if conj:
        np.conjugate(s1, out=s1)
    dft = _dft_matrix(grid.pt, _complex_dtype(a).name, False)
    cols_t = dft[:, t0:t0 + (rows - 1) * t_step + 1:t_step]
    if conj:
        cols_t = cols_t.conj()
    out = cols_t @ s1.reshape(rows, -1)
    return out.reshape(grid.pt * grid.fq, r0, r1)


def _inverse(spec: np.ndarray, grid: _Grid, t_sel: tuple[int, int, int], f_sel: tuple[int, int, int],
             real_dtype) -> np.ndarray:
    """Real inverse DFT of (points, R0, R1), keeping ``(start, count, step)`` along each axis."""
    _, r0, r1 = spec.shape
    t_start, t_count, t_step = t_sel
    f_start, f_count, f_step = f_sel
    idft = _dft_matrix(grid.pt, spec.dtype.name, True)
    rows = idft[t_start:t_start + (t_count - 1) * t_step + 1:t_step]
    s1 = (rows @ spec.reshape(grid.pt, -1)).reshape(t_count, grid.fq, r0, r1)
    s1 = np.ascontiguousarray(s1.transpose(2, 3, 0, 1))
    out = sfft.irfft(s1, n=grid.pf, axis=-1)[..., f_start:f_start + (f_count - 1) * f_step + 1:f_step]
    return np.ascontiguousarray(out, dtype=real_dtype)


def _place(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-extend the spatial axes of ``arr`` to ``shape`` (for cropped valid-padding tails)."""
    if arr.shape[2:] == shape:
        return arr
    out = np.zeros(arr.shape[:2] + shape, dtype=arr.dtype)
    out[:, :, :arr.shape[2], :arr.shape[3]] = arr
    return out


@dataclass
class ConvCache:
    """Fourier-domain operands kept from a forward pass for the backward pass.

    ``signal_spec`` is the padded input of the underlying correlation (for a
    transposed convolution: the conjugated, upsampled layer input) and
    ``weight_conj`` the conjugated weight spectrum, both (points, rows, cols).
    """

    geom: tuple[_AxisGeom, _AxisGeom]
    grid: _Grid
    signal_spec: np.ndarray
    weight_conj: np.ndarray


def _check_weights(w: np.ndarray, expected: tuple[int, int, int, int], what: str) -> None:
    if w.shape != expected:
        names = ("dim0", "dim1", "kernel_time", "kernel_freq")
        bad = [n for n, a, b in zip(names, w.shape, expected) if a != b] if w.ndim == 4 else ["rank"]
        raise EngineError(f"{what} weights shape {w.shape} != expected {expected} (mismatch on {', '.join(bad)})")


def _geoms(nt: int, nf: int, params: ConvParams):
    gt = _axis_geom(nt, params.kernel_time, params.stride_time, params.padding, "time")
    gf = _axis_geom(nf, params.kernel_freq, params.stride_freq, params.padding, "frequency")
    return gt, gf


def conv2d_forward_cached(x, weights, bias, params: ConvParams):
    _check_4d(x, "conv2d input")
    if x.shape[1] != params.in_channels:
        raise EngineError(f"conv2d channel axis: input has {x.shape[1]} channels, layer expects {params.in_channels}")
    _check_weights(weights, (params.out_channels, params.in_channels) + params.kernel, "conv2d")
    gt, gf = _geoms(x.shape[2], x.shape[3], params)
    grid = _grid(gt, gf)
    xs = _spectrum(x[:, :, :_kept(gt), :_kept(gf)], grid, gt.before, gf.before)
    wc = _spectrum(weights.astype(x.dtype, copy=False), grid, conj=True)
    ys = np.matmul(xs, wc.transpose(0, 2, 1))
    y = _inverse(ys, grid, (0, gt.out, gt.stride), (0, gf.out, gf.stride), x.dtype)
    if params.use_bias and bias is not None:
        y += bias.reshape(1, -1, 1, 1).astype(y.dtype, copy=False)
    return check_finite(y, "conv2d_forward"), ConvCache((gt, gf), grid, xs, wc)


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray], params: ConvParams) -> np.ndarray:
    """2-D cross-correlation (no kernel flip) with 'same' or 'valid' padding.

    ``weights`` has shape (out_channels, in_channels, kernel_time, kernel_freq).
    'same' padding produces ``ceil(n / stride)`` outputs per axis, splitting the
    padding with the smaller half in front.
    """
    return conv2d_forward_cached(x, weights, bias, params)[0]


def conv2d_backward(grad_out, cached_input, weights, params: ConvParams, cache: Optional[ConvCache] = None,
                    need_input: bool = True):
    """Returns ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`.

    Passing the ``cache`` from :func:`conv2d_forward_cached` skips recomputing
    the Fourier transforms of the input and weights.
    """
    if cache is None:
        _, cache = conv2d_forward_cached(cached_input, weights, None, params)
    gt, gf = cache.geom
    expected = (cached_input.shape[0], params.out_channels, gt.out, gf.out)
    if grad_out.shape != expected:
        raise EngineError(f"conv2d_backward: grad_out shape {grad_out.shape} != forward output shape {expected}")
    grid = cache.grid
    dtype = grad_out.dtype
    zc = _spectrum(grad_out, grid, t_step=gt.stride, f_step=gf.stride, conj=True)
    gws = np.matmul(zc.transpose(0, 2, 1), cache.signal_spec)
    grad_w = _inverse(gws, grid, (0, gt.kernel, 1), (0, gf.kernel, 1), dtype)
    grad_x = None
    if need_input:
        gxs = np.matmul(zc, cache.weight_conj)
        np.conjugate(gxs, out=gxs)
        grad_x = _place(_inverse(gxs, grid, (gt.before, _kept(gt), 1), (gf.before, _kept(gf), 1), dtype),
                        (gt.n, gf.n))
    grad_b = grad_out.sum(axis=(0, 2, 3)) if params.use_bias else None
    return grad_x, grad_w, grad_b


def conv2d_transpose_forward_cached(x, weights, bias, params: ConvParams):
    _check_4d(x, "conv2d_transpose input")
    if x.shape[1] != params.in_channels:
        raise EngineError(
            f"conv2d_transpose channel axis: input has {x.shape[1]} channels, layer expects {params.in_channels}")
    _check_weights(weights, (params.in_channels, params.out_channels) + params.kernel, "conv2d_transpose")
    nt = transpose_output_size(x.shape[2], params.kernel_time, params.stride_time, params.padding)
    nf = transpose_output_size(x.shape[3], params.kernel_freq, params.stride_freq, params.padding)
    gt, gf = _geoms(nt, nf, params)
    if (gt.out, gf.out) != x.shape[2:]:
        raise EngineError(f"conv2d_transpose: input spatial shape {x.shape[2:]} cannot come from a {nt}x{nf} signal")
    grid = _grid(gt, gf)
    zc = _spectrum(x, grid, t_step=gt.stride, f_step=gf.stride, conj=True)
    wc = _spectrum(weights.astype(x.dtype, copy=False), grid, conj=True)
    ys = np.matmul(zc, wc)
    np.conjugate(ys, out=ys)
    y = _place(_inverse(ys, grid, (gt.before, _kept(gt), 1), (gf.before, _kept(gf), 1), x.dtype), (nt, nf))
    if params.use_bias and bias is not None:
        y += bias.reshape(1, -1, 1, 1).astype(y.dtype, copy=False)
    return check_finite(y, "conv2d_transpose_forward"), ConvCache((gt, gf), grid, zc, wc)


def conv2d_transpose_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray],
                             params: ConvParams) -> np.ndarray:
    """Transposed convolution: the adjoint of :func:`conv2d_forward` w.r.t. its input.

    ``weights`` has shape (in_channels, out_channels, kernel_time, kernel_freq),
    so one tensor serves both a convolution and its transpose.  Stride acts as an
    upsampling factor; 'same' padding gives ``n * stride`` outputs per axis.
    """
    return conv2d_transpose_forward_cached(x, weights, bias, params)[0]


def conv2d_transpose_backward(grad_out, cached_input, weights, params: ConvParams,
                              cache: Optional[ConvCache] = None, need_input: bool = True):
    if cache is None:
        _, cache = conv2d_transpose_forward_cached(cached_input, weights, None, params)
    gt, gf = cache.geom
    expected = (cached_input.shape[0], params.out_channels, gt.n, gf.n)
    if grad_out.shape != expected:
        raise EngineError(f"conv2d_transpose_backward: grad_out shape {grad_out.shape} != forward output {expected}")
    grid = cache.grid
    dtype = grad_out.dtype
    gs = _spectrum(grad_out[:, :, :_kept(gt), :_kept(gf)], grid, gt.before, gf.before)
    gws = np.matmul(cache.signal_spec.transpose(0, 2, 1), gs)
    grad_w = _inverse(gws, grid, (0, gt.kernel, 1), (0, gf.kernel, 1), dtype)
    grad_x = None
    if need_input:
        gxs = np.matmul(gs, cache.weight_conj.transpose(0, 2, 1))
        grad_x = _inverse(gxs, grid, (0, gt.out, gt.stride), (0, gf.out, gf.stride), dtype)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if params.use_bias else None
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# batch normalisation, activations, dense, loss


@dataclass
class BatchNormState:
    channels: int
    affine: bool = True
    momentum: float = 0.99
    epsilon: float = 1e-3
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    moving_mean: np.ndarray = None
    moving_var: np.ndarray = None

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise EngineError(f"batch-norm momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0:
            raise EngineError("batch-norm epsilon must be positive")
        if self.moving_mean is None:
            self.moving_mean = np.zeros(self.channels)
        if self.moving_var is None:
            self.moving_var = np.ones(self.channels)
        if self.affine:
            if self.gamma is None:
                self.gamma = np.ones(self.channels)
            if self.beta is None:
                self.beta = np.zeros(self.channels)

    @property
    def n_params(self) -> int:
        # moving statistics count as (non-trainable) parameters
        return (4 if self.affine else 2) * self.channels

    @property
    def n_trainable(self) -> int:
        return 2 * self.channels if self.affine else 0


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Per-channel normalisation over (batch, time, frequency).

    In ``"train"`` mode the batch statistics are used and the moving averages
    in ``state`` are updated as ``m <- momentum*m + (1-momentum)*batch``.
    ``"infer"`` mode uses the moving statistics.  Returns ``(y, cache)``.
    """
    _check_4d(x, "batchnorm input")
    if x.shape[1] != state.channels:
        raise EngineError(f"batchnorm channel axis: input has {x.shape[1]} channels, state has {state.channels}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.moving_mean = m * state.moving_mean + (1 - m) * mean
        state.moving_var = m * state.moving_var + (1 - m) * var
    elif mode == "infer":
        mean, var = state.moving_mean, state.moving_var
    else:
        raise EngineError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean.reshape(1, -1, 1, 1).astype(x.dtype)) * inv_std.reshape(1, -1, 1, 1).astype(x.dtype)
    y = x_hat
    if state.affine:
        y = x_hat * state.gamma.reshape(1, -1, 1, 1).astype(x.dtype) + state.beta.reshape(1, -1, 1, 1).astype(x.dtype)
    return check_finite(y, "batchnorm_forward"), BatchNormCache(x_hat, inv_std, mode)


def batchnorm_backward(grad_out: np.ndarray, cache: BatchNormCache, state: BatchNormState):
    """Returns ``(grad_input, grad_gamma, grad_beta)``; the last two are None without affine."""
    x_hat = cache.x_hat
    grad_gamma = grad_beta = None
    g = grad_out
    if state.affine:
        grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
        grad_beta = grad_out.sum(axis=(0, 2, 3))
        g = grad_out * state.gamma.reshape(1, -1, 1, 1).astype(grad_out.dtype)
    inv_std = cache.inv_std.reshape(1, -1, 1, 1).astype(grad_out.dtype)
    if cache.mode == "infer":
        return g * inv_std, grad_gamma, grad_beta
    mean_g = g.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (g * x_hat).mean(axis=(0, 2, 3), keepdims=True)
    grad_x = inv_std * (g - mean_g - x_hat * mean_gx)
    return grad_x, grad_gamma, grad_beta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    # subgradient 0 at x == 0
    return grad_out * (cached_input > 0)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    """Affine map on the last axis.  ``weights`` is (out, in), so ``y = x @ W.T + b``."""
    if x.shape[-1] != weights.shape[1]:
        raise EngineError(f"dense: input width {x.shape[-1]} != weight input dim {weights.shape[1]}")
    y = x @ weights.T
    if bias is not None:
        if bias.shape != (weights.shape[0],):
            raise EngineError(f"dense: bias shape {bias.shape} != ({weights.shape[0]},)")
        y = y + bias.astype(y.dtype, copy=False)
    return check_finite(y, "dense_forward")


def dense_backward(grad_out: np.ndarray, cached_input: np.ndarray, weights: np.ndarray):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    x2 = cached_input.reshape(-1, cached_input.shape[-1])
    return grad_out @ weights, g2.T @ x2, g2.sum(axis=0)


def mse_loss(estimate: np.ndarray, reference: np.ndarray):
    """Mean squared error and its gradient w.r.t. ``estimate``."""
    if estimate.shape != reference.shape:
        raise EngineError(f"mse_loss: shapes differ {estimate.shape} vs {reference.shape}")
    diff = estimate - reference
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    if not np.isfinite(loss):
        raise EngineError("mse_loss: non-finite loss")
    return loss, (2.0 / diff.size) * diff


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    learning_rate: float = 1e-4

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise EngineError(f"adam_step: shape mismatch params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.isfinite(grads).all():
        raise EngineError(f"adam_step: non-finite gradient at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * np.square(grads)
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    params -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(params.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Worst entry-wise relative error.

    Entries are compared relative to ``max(|a|, |n|)``, but never relative to
    anything smaller than ``floor`` times the largest gradient magnitude, so
    tiny gradient entries do not amplify rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / denom).max())


def numeric_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. entries of ``x`` (modified in place, restored)."""
    flat = x.reshape(-1)
    idx = np.arange(flat.size) if indices is None else indices
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def grad_check(forward: Callable[[np.ndarray], np.ndarray],
               backward: Callable[[np.ndarray], np.ndarray],
               x: np.ndarray, h: float = 1e-5,
               rng: Optional[np.random.Generator] = None,
               max_probes: Optional[int] = None) -> float:
    """Compare an analytic input gradient against central differences.

    ``forward(x)`` returns a tensor y and ``backward(dy)`` the gradient w.r.t.
    ``x`` for the most recent forward call.  The scalar probed is ``sum(r*y)``
    for a fixed random ``r``.  Returns the worst relative error (see
    :func:`relative_error`).
    """
    if x.dtype != np.float64:
        raise EngineError("grad_check needs float64 tensors")
    rng = rng or np.random.default_rng(0)
    x = x.copy()
    y = forward(x)
    r = rng.standard_normal(y.shape)
    analytic = backward(r).ravel()
    idx = None
    if max_probes is not None and x.size > max_probes:
        idx = rng.choice(x.size, size=max_probes, replace=False)
        analytic = analytic[idx]
    numeric = numeric_gradient(lambda: float(np.sum(r * forward(x))), x, h, idx)
    return relative_error(analytic, numeric)

