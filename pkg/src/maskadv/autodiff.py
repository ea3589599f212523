"""Minimal reverse-mode autodiff over dense float64 grids.

A Tape records every operation in creation order (a Wengert list);
backward() replays it once in reverse. Grids are 1-D or 2-D numpy arrays;
binary operations require exactly matching shapes (scalars are the only
broadcast). All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np


class Tape:
    """Recorded computation graph; single backward pass per recording."""

    def __init__(self, debug: bool = False):
        self._nodes: list[DiffValue] = []
        self.consumed = False
        self.debug = debug

    def leaf(self, data) -> "DiffValue":
        return self._record(np.asarray(data, dtype=np.float64), None, requires_grad=True)

    def constant(self, data) -> "DiffValue":
        return DiffValue(np.asarray(data, dtype=np.float64), self, requires_grad=False)

    def _record(self, data, backward_fn, requires_grad) -> "DiffValue":
        if self.debug and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite intermediate value")
        node = DiffValue(data, self, requires_grad)
        if requires_grad:
            node._backward = backward_fn
            self._nodes.append(node)
        return node

    def backward(self, loss: "DiffValue") -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed; re-record the graph")
        if loss._tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class DiffValue:
    """A grid plus its adjoint accumulator and position on a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_tape")

    def __init__(self, data: np.ndarray, tape: Tape, requires_grad: bool):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._tape = tape

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


def backward(loss: DiffValue) -> None:
    loss._tape.backward(loss)


def _is_scalar(x) -> bool:
    return np.ndim(x) == 0


def _as_operand(tape: Tape, x):
    if isinstance(x, DiffValue):
        if x._tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _check_shapes(a: DiffValue, b: DiffValue, op: str) -> None:
    if _is_scalar(a.data) or _is_scalar(b.data):
        return
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: DiffValue, b) -> DiffValue:
    b = _as_operand(a._tape, b)
    _check_shapes(a, b, "add")
    out_data = a.data + b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data))

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


def sub(a: DiffValue, b) -> DiffValue:
    b = _as_operand(a._tape, b)
    _check_shapes(a, b, "sub")
    out_data = a.data - b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data))

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


def neg(a: DiffValue) -> DiffValue:
    def rule(g):
        a.accumulate(-g)

    return a._tape._record(-a.data, rule, a.requires_grad)


def mul(a: DiffValue, b) -> DiffValue:
    b = _as_operand(a._tape, b)
    _check_shapes(a, b, "mul")
    out_data = a.data * b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data))

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


def div(a: DiffValue, b) -> DiffValue:
    b = _as_operand(a._tape, b)
    _check_shapes(a, b, "div")
    out_data = a.data / b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data))

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


def _unbroadcast(g: np.ndarray, target: np.ndarray) -> np.ndarray:
    if g.shape == target.shape:
        return g
    # only scalar broadcast is permitted
    return np.sum(g).reshape(target.shape)


def matmul(a: DiffValue, b) -> DiffValue:
    b = _as_operand(a._tape, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def rule(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def square(a: DiffValue) -> DiffValue:
    def rule(g):
        a.accumulate(g * 2.0 * a.data)

    return a._tape._record(a.data * a.data, rule, a.requires_grad)


def sqrt(a: DiffValue) -> DiffValue:
    out_data = np.sqrt(a.data)

    def rule(g):
        denom = np.where(out_data > 0, out_data, np.inf)
        a.accumulate(g * 0.5 / denom)

    return a._tape._record(out_data, rule, a.requires_grad)


def absval(a: DiffValue) -> DiffValue:
    def rule(g):
        a.accumulate(g * np.sign(a.data))

    return a._tape._record(np.abs(a.data), rule, a.requires_grad)


def exp(a: DiffValue) -> DiffValue:
    out_data = np.exp(a.data)

    def rule(g):
        a.accumulate(g * out_data)

    return a._tape._record(out_data, rule, a.requires_grad)


def log10(a: DiffValue) -> DiffValue:
    out_data = np.log10(a.data)
    inv_ln10 = 1.0 / np.log(10.0)

    def rule(g):
        a.accumulate(g * inv_ln10 / a.data)

    return a._tape._record(out_data, rule, a.requires_grad)


def sigmoid(a: DiffValue) -> DiffValue:
    # split by sign to avoid exp overflow
    pos = a.data >= 0
    z = np.exp(np.where(pos, -a.data, a.data))
    out_data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def rule(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return a._tape._record(out_data, rule, a.requires_grad)


def tanh(a: DiffValue) -> DiffValue:
    out_data = np.tanh(a.data)

    def rule(g):
        a.accumulate(g * (1.0 - out_data * out_data))

    return a._tape._record(out_data, rule, a.requires_grad)


def clamp(a: DiffValue, lo=None, hi=None) -> DiffValue:
    """Clip to [lo, hi]; subgradient 1 inside the active range, boundary inside."""
    out_data = np.clip(a.data, lo, hi)

    def rule(g):
        inside = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            inside &= a.data >= lo
        if hi is not None:
            inside &= a.data <= hi
        a.accumulate(g * inside)

    return a._tape._record(out_data, rule, a.requires_grad)


def minimum(a: DiffValue, b) -> DiffValue:
    """Elementwise min; ties route the gradient to the first argument."""
    b = _as_operand(a._tape, b)
    _check_shapes(a, b, "minimum")
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def rule(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * take_a, a.data))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~take_a, b.data))

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: DiffValue) -> DiffValue:
    def rule(g):
        a.accumulate(np.full_like(a.data, float(g)))

    return a._tape._record(np.asarray(np.sum(a.data)), rule, a.requires_grad)


def mean_all(a: DiffValue) -> DiffValue:
    n = a.data.size

    def rule(g):
        a.accumulate(np.full_like(a.data, float(g) / n))

    return a._tape._record(np.asarray(np.mean(a.data)), rule, a.requires_grad)


def row_sum(a: DiffValue) -> DiffValue:
    _need_2d(a, "row_sum")

    def rule(g):
        a.accumulate(np.repeat(g[:, None], a.data.shape[1], axis=1))

    return a._tape._record(np.sum(a.data, axis=1), rule, a.requires_grad)


def row_mean(a: DiffValue) -> DiffValue:
    _need_2d(a, "row_mean")
    c = a.data.shape[1]

    def rule(g):
        a.accumulate(np.repeat(g[:, None] / c, c, axis=1))

    return a._tape._record(np.mean(a.data, axis=1), rule, a.requires_grad)


def row_norm(a: DiffValue) -> DiffValue:
    """Euclidean norm of each row of a 2-D grid."""
    _need_2d(a, "row_norm")
    out_data = np.sqrt(np.sum(a.data * a.data, axis=1))

    def rule(g):
        denom = np.where(out_data > 0, out_data, np.inf)
        a.accumulate((g / denom)[:, None] * a.data)

    return a._tape._record(out_data, rule, a.requires_grad)


def row_dot(a: DiffValue, b) -> DiffValue:
    b = _as_operand(a._tape, b)
    _need_2d(a, "row_dot")
    if a.data.shape != b.data.shape:
        raise ValueError(f"row_dot: shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = np.sum(a.data * b.data, axis=1)

    def rule(g):
        if a.requires_grad:
            a.accumulate(g[:, None] * b.data)
        if b.requires_grad:
            b.accumulate(g[:, None] * a.data)

    return a._tape._record(out_data, rule, a.requires_grad or b.requires_grad)


def mul_rows(a: DiffValue, s) -> DiffValue:
    """Scale row r of a (R, C) grid by s[r]."""
    s = _as_operand(a._tape, s)
    _need_2d(a, "mul_rows")
    if s.data.shape != (a.data.shape[0],):
        raise ValueError(f"mul_rows: scale shape {s.data.shape} != ({a.data.shape[0]},)")
    out_data = a.data * s.data[:, None]

    def rule(g):
        if a.requires_grad:
            a.accumulate(g * s.data[:, None])
        if s.requires_grad:
            s.accumulate(np.sum(g * a.data, axis=1))

    return a._tape._record(out_data, rule, a.requires_grad or s.requires_grad)


def sub_rows(a: DiffValue, s) -> DiffValue:
    """Subtract s[r] from every entry of row r."""
    s = _as_operand(a._tape, s)
    _need_2d(a, "sub_rows")
    if s.data.shape != (a.data.shape[0],):
        raise ValueError(f"sub_rows: shape {s.data.shape} != ({a.data.shape[0]},)")
    out_data = a.data - s.data[:, None]

    def rule(g):
        if a.requires_grad:
            a.accumulate(g)
        if s.requires_grad:
            s.accumulate(-np.sum(g, axis=1))

    return a._tape._record(out_data, rule, a.requires_grad or s.requires_grad)


def add_rowvec(a: DiffValue, v) -> DiffValue:
    """Add a length-C vector to every row of a (R, C) grid."""
    v = _as_operand(a._tape, v)
    _need_2d(a, "add_rowvec")
    if v.data.shape != (a.data.shape[1],):
        raise ValueError(f"add_rowvec: shape {v.data.shape} != ({a.data.shape[1]},)")
    out_data = a.data + v.data[None, :]

    def rule(g):
        if a.requires_grad:
            a.accumulate(g)
        if v.requires_grad:
            v.accumulate(np.sum(g, axis=0))

    return a._tape._record(out_data, rule, a.requires_grad or v.requires_grad)


def col_percentile(a: DiffValue, q: float) -> DiffValue:
    """Linear-interpolated percentile down each column of a (R, C) grid."""
    _need_2d(a, "col_percentile")
    rows = a.data.shape[0]
    pos = (rows - 1) * q / 100.0
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    w = pos - lo
    order = np.argsort(a.data, axis=0, kind="stable")
    cols = np.arange(a.data.shape[1])
    lo_rows = order[lo, :]
    hi_rows = order[hi, :]
    out_data = (1.0 - w) * a.data[lo_rows, cols] + w * a.data[hi_rows, cols]

    def rule(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (lo_rows, cols), (1.0 - w) * g)
        if w > 0:
            np.add.at(acc, (hi_rows, cols), w * g)
        a.accumulate(acc)

    return a._tape._record(out_data, rule, a.requires_grad)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------


def _need_2d(a: DiffValue, op: str) -> None:
    if a.data.ndim != 2:
        raise ValueError(f"{op} requires a 2-D grid, got shape {a.data.shape}")


def reshape(a: DiffValue, shape) -> DiffValue:
    out_data = a.data.reshape(shape)

    def rule(g):
        a.accumulate(g.reshape(a.data.shape))

    return a._tape._record(out_data, rule, a.requires_grad)


def transpose(a: DiffValue) -> DiffValue:
    _need_2d(a, "transpose")

    def rule(g):
        a.accumulate(np.ascontiguousarray(g.T))

    return a._tape._record(np.ascontiguousarray(a.data.T), rule, a.requires_grad)


def slice1d(a: DiffValue, start: int, stop: int, step: int = 1) -> DiffValue:
    if a.data.ndim != 1:
        raise ValueError("slice1d requires a 1-D grid")
    sel = slice(start, stop, step)
    out_data = a.data[sel].copy()

    def rule(g):
        acc = np.zeros_like(a.data)
        acc[sel] = g
        a.accumulate(acc)

    return a._tape._record(out_data, rule, a.requires_grad)


def concat(parts: list[DiffValue], axis: int) -> DiffValue:
    if not parts:
        raise ValueError("concat of nothing")
    tape = parts[0]._tape
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sel = [slice(None)] * g.ndim
                sel[axis] = slice(a, b)
                p.accumulate(g[tuple(sel)])

    return tape._record(out_data, rule, any(p.requires_grad for p in parts))


def take_rows(a: DiffValue, idx) -> DiffValue:
    """Gather rows (2-D) or elements (1-D) by an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx].copy()

    def rule(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a.accumulate(acc)

    return a._tape._record(out_data, rule, a.requires_grad)


def pad1d(a: DiffValue, before: int, after: int) -> DiffValue:
    if a.data.ndim != 1:
        raise ValueError("pad1d requires a 1-D grid")
    out_data = np.concatenate([np.zeros(before), a.data, np.zeros(after)])
    n = a.data.shape[0]

    def rule(g):
        a.accumulate(g[before : before + n])

    return a._tape._record(out_data, rule, a.requires_grad)


def pad_rows(a: DiffValue, before: int, after: int) -> DiffValue:
    _need_2d(a, "pad_rows")
    c = a.data.shape[1]
    out_data = np.concatenate(
        [np.zeros((before, c)), a.data, np.zeros((after, c))], axis=0
    )
    n = a.data.shape[0]

    def rule(g):
        a.accumulate(g[before : before + n, :])

    return a._tape._record(out_data, rule, a.requires_grad)


def frame(a: DiffValue, window: int, hop: int) -> DiffValue:
    """Slice a 1-D grid into overlapping rows of length `window`."""
    if a.data.ndim != 1:
        raise ValueError("frame requires a 1-D grid")
    n = a.data.shape[0]
    if n < window:
        raise ValueError(f"cannot frame {n} samples with window {window}")
    count = 1 + (n - window) // hop
    idx = np.arange(count)[:, None] * hop + np.arange(window)[None, :]
    out_data = a.data[idx]

    def rule(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a.accumulate(acc)

    return a._tape._record(out_data, rule, a.requires_grad)


def overlap_add(frames_dv: DiffValue, hop: int, length: int) -> DiffValue:
    """Adjoint of frame(): sum overlapping rows into a 1-D grid."""
    _need_2d(frames_dv, "overlap_add")
    count, window = frames_dv.data.shape
    covered = (count - 1) * hop + window
    idx = np.arange(count)[:, None] * hop + np.arange(window)[None, :]
    buf = np.zeros(max(length, covered))
    np.add.at(buf, idx, frames_dv.data)
    out_data = buf[:length].copy()

    def rule(g):
        gg = np.zeros(max(length, covered))
        gg[:length] = g
        frames_dv.accumulate(gg[idx])

    return frames_dv._tape._record(out_data, rule, frames_dv.requires_grad)


def sliding_rows(a: DiffValue, width: int) -> DiffValue:
    """im2col over axis 0: (n, C) -> (n - width + 1, width * C)."""
    _need_2d(a, "sliding_rows")
    n, c = a.data.shape
    count = n - width + 1
    idx = np.arange(count)[:, None] + np.arange(width)[None, :]
    out_data = a.data[idx].reshape(count, width * c)

    def rule(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g.reshape(count, width, c))
        a.accumulate(acc)

    return a._tape._record(out_data, rule, a.requires_grad)


def segment_cols(a: DiffValue, width: int) -> DiffValue:
    """Sliding column segments: (F, B) -> (B * M, width), M = F - width + 1.

    Output row b*M + m holds a[m : m + width, b].
    """
    _need_2d(a, "segment_cols")
    f, b = a.data.shape
    m = f - width + 1
    if m < 1:
        raise ValueError(f"segment width {width} exceeds frame count {f}")
    idx = np.arange(m)[:, None] + np.arange(width)[None, :]
    out_data = (
        a.data[idx, :].transpose(2, 0, 1).reshape(b * m, width).copy()
    )

    def rule(g):
        acc = np.zeros_like(a.data)
        cube = g.reshape(b, m, width).transpose(1, 2, 0)
        np.add.at(acc, idx, cube)
        a.accumulate(acc)

    return a._tape._record(out_data, rule, a.requires_grad)


def tile_rows(v: DiffValue, count: int) -> DiffValue:
    """Repeat a length-C vector into a (count, C) grid."""
    if v.data.ndim != 1:
        raise ValueError("tile_rows requires a 1-D grid")
    out_data = np.tile(v.data, (count, 1))

    def rule(g):
        v.accumulate(np.sum(g, axis=0))

    return v._tape._record(out_data, rule, v.requires_grad)


def upsample_zero(a: DiffValue, factor: int) -> DiffValue:
    if a.data.ndim != 1:
        raise ValueError("upsample_zero requires a 1-D grid")
    n = a.data.shape[0]
    out_data = np.zeros(n * factor)
    out_data[::factor] = a.data

    def rule(g):
        a.accumulate(g[::factor].copy())

    return a._tape._record(out_data, rule, a.requires_grad)


_FFT_CONV_THRESHOLD = 1 << 20


def fast_full_convolve(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Full 1-D convolution, via FFT when the direct cost would be large."""
    n, m = x.shape[0], kernel.shape[0]
    if n * m <= _FFT_CONV_THRESHOLD:
        return np.convolve(x, kernel)
    full = n + m - 1
    nfft = 1 << (full - 1).bit_length()
    return np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(kernel, nfft), nfft)[:full]


def _valid_correlate(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    n_out = g.shape[0] - kernel.shape[0] + 1
    if n_out * kernel.shape[0] <= _FFT_CONV_THRESHOLD:
        return np.correlate(g, kernel, mode="valid")
    m = kernel.shape[0]
    return fast_full_convolve(g, kernel[::-1])[m - 1 : m - 1 + n_out]


def conv1d_full(a: DiffValue, kernel: np.ndarray) -> DiffValue:
    """Full convolution of a 1-D grid with a constant kernel."""
    if a.data.ndim != 1:
        raise ValueError("conv1d_full requires a 1-D grid")
    kernel = np.asarray(kernel, dtype=np.float64)
    out_data = fast_full_convolve(a.data, kernel)

    def rule(g):
        a.accumulate(_valid_correlate(g, kernel))

    return a._tape._record(out_data, rule, a.requires_grad)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def pearson_rows(a: DiffValue, b, eps: float = 1e-12) -> DiffValue:
    """Pearson correlation along each row of two matching (R, C) grids."""
    b = _as_operand(a._tape, b)
    ac = sub_rows(a, row_mean(a))
    bc = sub_rows(b, row_mean(b))
    denom = mul(row_norm(ac), row_norm(bc))
    return div(row_dot(ac, bc), add(denom, a._tape.constant(eps)))


def dft_matrices(window_length: int, fft_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Real matrix pair (C, S) with frames @ C = Re(rfft), frames @ S = Im(rfft)."""
    n = np.arange(window_length)[:, None]
    k = np.arange(fft_size // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / fft_size
    return np.cos(ang), -np.sin(ang)


def idft_matrices(fft_size: int, window_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Real matrix pair (IC, IS): re @ IC + im @ IS = irfft(re + i*im)[:window].

    Mirrors numpy.fft.irfft, which ignores the imaginary parts of the DC and
    Nyquist bins.
    """
    bins = fft_size // 2 + 1
    k = np.arange(bins)[:, None]
    n = np.arange(window_length)[None, :]
    ang = 2.0 * np.pi * k * n / fft_size
    wk = np.full((bins, 1), 2.0)
    wk[0] = 1.0
    wk[-1] = 1.0
    ic = wk * np.cos(ang) / fft_size
    ws = np.full((bins, 1), 2.0)
    ws[0] = 0.0
    ws[-1] = 0.0
    is_ = -ws * np.sin(ang) / fft_size
    return ic, is_


def grad_check(build, point: np.ndarray, coords, step: float = 1e-3) -> float:
    """Max relative error between analytic gradient and central differences.

    `build(tape, leaf)` must return a scalar DiffValue.
    """
    point = np.asarray(point, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(point)
    loss = build(tape, leaf)
    tape.backward(loss)
    analytic = leaf.grad

    worst = 0.0
    for coord in coords:
        coord = tuple(np.atleast_1d(coord))
        plus = point.copy()
        plus[coord] += step
        minus = point.copy()
        minus[coord] -= step
        t1 = Tape()
        f1 = build(t1, t1.leaf(plus))
        t2 = Tape()
        f2 = build(t2, t2.leaf(minus))
        numeric = (float(f1.data) - float(f2.data)) / (2.0 * step)
        a = float(analytic[coord])
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
