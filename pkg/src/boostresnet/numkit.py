"""Small dense linear-algebra helpers, a reproducible PRNG and numerical gradients.

Matrices and vectors are plain ``float64`` numpy arrays. The helpers here add
shape validation and finiteness checks on top of numpy so that the rest of the
package fails loudly on dimension slips instead of silently broadcasting.
"""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class NumericalError(ArithmeticError):
    """Raised when a computation produces NaN or infinite values."""


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(a, name="vector"):
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def check_finite(a, what="result"):
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")
    return a


def matvec(m, v):
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec dimension mismatch: {m.shape} x {v.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = m @ v
    return check_finite(out, "matvec")


def matmul(a, b):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul")


def transpose(m):
    return np.ascontiguousarray(as_matrix(m).T)


def axpy(a, x, y):
    """Return ``a * x + y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return check_finite(a * x + y, "axpy")


def dot(x, y):
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"dot length mismatch: {x.shape} vs {y.shape}")
    return float(x @ y)


def l1_norm(x):
    return float(np.sum(np.abs(x)))


def linf_norm(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.max(np.abs(x))) if x.size else 0.0


def relu(v):
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def relu_grad(v):
    # subgradient at exactly 0 is fixed to 0
    return (np.asarray(v, dtype=np.float64) > 0.0).astype(np.float64)


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(v, axis=None):
    v = np.asarray(v, dtype=np.float64)
    mx = np.max(v, axis=axis, keepdims=True)
    out = mx + np.log(np.sum(np.exp(v - mx), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``x`` may have any shape; the result has the same shape.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor=1e-8):
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _mix64(z):
    # numpy wraps uint64 arithmetic modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _stable_hash(name):
    return zlib.crc32(name.encode("utf-8")) & 0xFFFFFFFF


class Rng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` (0-based) of a generator seeded with ``s`` is
    ``mix(s + (i + 1) * 0x9E3779B97F4A7C15)``, which is exactly the
    SplitMix64 output stream. Everything is integer arithmetic on uint64, so
    streams reproduce bit-for-bit on any platform. Gaussians use Box-Muller.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def spawn(self, name):
        """Independent named sub-stream derived from this generator's seed."""
        key = (_stable_hash(name) << 32) | _stable_hash(name[::-1])
        return Rng(int(Rng(self.seed ^ key).next_u64(1)[0]))

    def next_u64(self, size):
        size = int(size)
        idx = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        return _mix64(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, size, low=0.0, high=1.0):
        """Uniform floats in ``[low, high)`` with 53 random bits each."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size, loc=0.0, scale=1.0):
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        bits = self.next_u64(2 * half)
        # u1 in (0, 1] keeps the log finite
        u1 = ((bits[:half] >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)
        u2 = (bits[half:] >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return (loc + scale * z).reshape(shape)

    def permutation(self, n):
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def integers(self, low, high, size):
        """Integers in ``[low, high)`` (modulo reduction; bias < 2**-40 for small ranges)."""
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError("empty integer range")
        return (self.next_u64(size) % np.uint64(span)).astype(np.int64) + int(low)
