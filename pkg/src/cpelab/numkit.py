"""Dense float64 primitives: column softmax, norms, seeded streams, mixtures.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Embeddings
are ``d x m`` matrices whose columns are token vectors.
"""

from dataclasses import dataclass
import json

import numpy as np

from . import kernels
from .errors import ConvergenceError, InvalidInputError


def as_matrix(a, name="matrix"):
    """Coerce ``a`` to a finite float64 2-D array or raise InvalidInputError."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return arr


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Two streams built from the same pair produce identical sequences. Use
    ``spawn`` to derive independent streams for parallel work.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id):
        return RngStream(self.seed, stream_id)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def beta(self, a, b, size=None):
        return self.gen.beta(a, b, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture over ``d x m`` embeddings.

    ``weights`` has shape (R,), ``means`` (R, d, m) and ``sigmas`` (R,).
    """

    weights: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.means, dtype=np.float64)
        sig = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if mu.ndim == 2:
            mu = mu[None]
        if mu.ndim != 3 or not (len(w) == len(sig) == mu.shape[0] >= 1):
            raise InvalidInputError("weights, means and sigmas disagree on the mode count")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"mixture weights must lie in [0,1] and sum to 1, got {w}")
        if np.any(sig < 0) or not np.all(np.isfinite(sig)) or not np.all(np.isfinite(mu)):
            raise InvalidInputError("sigmas must be finite and nonnegative; means finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "sigmas", sig)

    @classmethod
    def single(cls, mean, sigma):
        mean = np.asarray(mean, dtype=np.float64)
        return cls(np.ones(1), mean[None], np.array([float(sigma)]))

    @property
    def n_modes(self):
        return len(self.weights)

    @property
    def d(self):
        return self.means.shape[1]

    @property
    def m(self):
        return self.means.shape[2]

    def mean(self):
        """Mixture mean, the weighted average of the mode means."""
        return np.tensordot(self.weights, self.means, axes=1)


def softmax_columns(m):
    """Softmax of every column of ``m``; columns of the result sum to one."""
    return kernels.softmax_columns(as_matrix(m))


def frobenius_norm(m):
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(w, tol=1e-12, max_iters=10_000, rng=None):
    """Largest singular value of ``w`` by power iteration on ``w.T @ w``.

    Starts from the normalized all-ones vector. Once converged, the iterate is
    nudged with seeded noise and rerun so that a start orthogonal to the top
    right singular vector cannot leave the estimate stuck on a smaller one.
    """
    w = as_matrix(w, "W")
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if w.size == 0 or not np.any(w):
        return 0.0
    rng = rng if rng is not None else RngStream(0, 0)
    x = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    best = 0.0
    for _ in range(4):
        est, x, _, converged = kernels.power_iteration(w, x, tol, max_iters)
        if not converged:
            raise ConvergenceError(f"power iteration did not converge in {max_iters} iterations", est)
        if est <= best * (1 + 10 * tol):
            break
        best = max(best, est)
        x = x + 1e-3 * rng.normal(x.shape) / np.sqrt(x.size)
    return float(best)


def sample_gmm(spec, rng):
    """Draw one embedding: a single mode for the whole matrix, then isotropic noise."""
    r = _choose_modes(spec.weights, rng.uniform(size=1))[0]
    noise = rng.normal(spec.means.shape[1:])
    return spec.means[r] + spec.sigmas[r] * noise


def sample_gmm_batch(spec, rng, n):
    """``n`` whole-matrix draws; returns (samples of shape (n, d, m), mode indices)."""
    modes = _choose_modes(spec.weights, rng.uniform(size=n))
    noise = rng.normal((n,) + spec.means.shape[1:])
    return spec.means[modes] + spec.sigmas[modes][:, None, None] * noise, modes


def sample_gmm_tokens(spec, rng, n):
    """``n`` draws where every token picks its own mode independently.

    Token ``i`` of a draw from mode ``r`` is ``means[r][:, i] + sigmas[r] * xi``.
    Returns samples (n, d, m) and the per-token modes (n, m).
    """
    d, m = spec.d, spec.m
    modes = _choose_modes(spec.weights, rng.uniform(size=n * m)).reshape(n, m)
    noise = rng.normal((n, d, m))
    # means[modes] has shape (n, m, d, m); pick token column i for token i
    cols = np.arange(m)
    mu = spec.means[modes, :, cols[None, :]]  # (n, m, d)
    mu = np.transpose(mu, (0, 2, 1))
    return mu + spec.sigmas[modes][:, None, :] * noise, modes


def _choose_modes(weights, u):
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(weights) - 1)


# -- binary tensor blobs ----------------------------------------------------


def write_tensors(path, tensors):
    """Write float64 arrays back to back (little-endian, row-major).

    Returns manifest entries ``{name, rows, cols, offset}`` in write order;
    1-D arrays are stored as a single row.
    """
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim == 1:
                a = a[None, :]
            if a.ndim != 2:
                raise InvalidInputError(f"tensor {name!r} must be 1-D or 2-D")
            data = np.ascontiguousarray(a, dtype="<f8").tobytes()
            fh.write(data)
            entries.append({"name": name, "rows": int(a.shape[0]), "cols": int(a.shape[1]), "offset": offset})
            offset += len(data)
    return entries


def read_tensors(path, entries):
    with open(path, "rb") as fh:
        blob = fh.read()
    out = {}
    for e in entries:
        n = e["rows"] * e["cols"]
        end = e["offset"] + 8 * n
        if end > len(blob):
            raise InvalidInputError(f"tensor {e['name']!r} runs past the end of {path}")
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = a.reshape(e["rows"], e["cols"]).astype(np.float64)
    return out


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
