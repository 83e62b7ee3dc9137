"""Numeric kernels: matmul, Newton-Schulz, Hadamard, moments, seeded draws."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from numpy.random import Philox

# quintic Newton-Schulz coefficients from the Muon reference implementation
NS_COEFFS = (3.4445, -4.7750, 2.0315)
NS_STEPS = 5
# The quintic map oscillates around 1 (singular values end in roughly
# [0.7, 1.2]); a few cubic Newton-Schulz steps then converge quadratically.
POLISH_STEPS = 3


class NumericsError(ValueError):
    pass


class DegenerateDistributionError(NumericsError):
    pass


class InsufficientSamplesError(NumericsError):
    pass


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"{what} contains non-finite entries")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise NumericsError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def newton_schulz_orthogonalize(g: np.ndarray, iterations: int = NS_STEPS,
                                polish: int = POLISH_STEPS) -> np.ndarray:
    """Approximate U V^T for g = U S V^T with the quintic Newton-Schulz map.

    The input is scaled to unit Frobenius norm first, which puts every
    singular value in (0, 1] where the quintic pushes them quickly towards
    ~1.  ``polish`` cubic steps (1.5 x - 0.5 x x^T x) then pull them onto 1.
    Tall inputs are handled through their transpose so the Gram matrix
    is the smaller of the two.
    """
    if iterations < 1 or polish < 0:
        raise NumericsError("iterations must be >= 1 and polish >= 0")
    g = np.asarray(g)
    if g.ndim != 2:
        raise NumericsError("newton_schulz_orthogonalize expects a 2-D matrix")
    check_finite(g, "gradient")
    norm = np.linalg.norm(g)
    if norm == 0.0:
        raise NumericsError("cannot orthogonalize a zero matrix")
    a, b, c = NS_COEFFS
    tall = g.shape[0] > g.shape[1]
    x = g.T / norm if tall else g / norm
    for _ in range(iterations):
        gram = x @ x.T
        x = a * x + (b * gram + c * (gram @ gram)) @ x
    for _ in range(polish):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
    return x.T if tall else x


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard_matrix(d: int) -> np.ndarray:
    """Orthonormal Sylvester-Hadamard matrix of size d (d a power of two)."""
    if not is_power_of_two(d):
        raise NumericsError(f"Hadamard size must be a power of two, got {d}")
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(d)


def excess_kurtosis(samples) -> float:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 4:
        raise InsufficientSamplesError(f"need at least 4 samples, got {x.size}")
    centered = x - x.mean()
    var = np.mean(centered**2)
    if not var > 0.0:
        raise DegenerateDistributionError("standard deviation is zero")
    return float(np.mean(centered**4) / var**2 - 3.0)


# --- deterministic randomness ---------------------------------------------

_BLOCK = 4  # Philox emits four 64-bit words per counter increment


@dataclass(frozen=True)
class RngState:
    """Immutable handle on a counter-based Philox stream.

    ``position`` counts consumed Philox blocks, so a state can be saved as
    two integers and resumed exactly.
    """

    seed: int
    position: int = 0
    stream: int = 0

    def split(self, name: str) -> "RngState":
        """Independent child stream keyed by a name (e.g. a tensor name)."""
        digest = hashlib.blake2b(f"{self.stream}:{name}".encode(), digest_size=8).digest()
        return RngState(self.seed, 0, int.from_bytes(digest, "little"))


def _raw(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    blocks = -(-n // _BLOCK)
    gen = Philox(key=[rng.seed % 2**64, rng.stream % 2**64], counter=[rng.position, 0, 0, 0])
    words = gen.random_raw(blocks * _BLOCK)
    return words[:n], RngState(rng.seed, rng.position + blocks, rng.stream)


def uniform(rng: RngState, n: int) -> tuple[np.ndarray, RngState]:
    """n doubles in [0, 1) from the top 53 bits of each word."""
    words, rng = _raw(rng, n)
    return (words >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53), rng


def randint(rng: RngState, n: int, high: int) -> tuple[np.ndarray, RngState]:
    """n integers uniform in [0, high) via Lemire's multiply-shift on 32-bit halves."""
    if high < 1 or high > 2**32:
        raise NumericsError("high must be in [1, 2**32]")
    words, rng = _raw(rng, n)
    top = (words >> np.uint64(32)).astype(np.uint64)
    return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64), rng


def gaussian(rng: RngState, n: int, mean: float = 0.0, std: float = 1.0) -> tuple[np.ndarray, RngState]:
    """Box-Muller normals; always consumes exactly ceil(n/2)*2 words."""
    if std < 0:
        raise NumericsError("std must be non-negative")
    pairs = -(-n // 2)
    u, rng = uniform(rng, 2 * pairs)
    u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
    u2 = u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
    if std == 0:
        return np.full(n, float(mean)), rng
    return mean + std * z, rng


def orthogonal_init(rows: int, cols: int, rng: RngState) -> tuple[np.ndarray, RngState]:
    if rows < 1 or cols < 1:
        raise NumericsError("rows and cols must be positive")
    big, small = max(rows, cols), min(rows, cols)
    z, rng = gaussian(rng, big * small)
    q, r = np.linalg.qr(z.reshape(big, small))
    # sign fix makes the factorization unique
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    return (q if rows >= cols else q.T), rng
