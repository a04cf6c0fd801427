"""Simulation of the latent factor system on a uniform observation grid.

The k-dimensional common factor follows df = b_f(f) dt + S dW and each of
the p unique coordinates follows de_i = b_i(e_i) dt + sigma_i dB_i, with W
and all B_i mutually independent.  The observed path is X = Lambda f + e
at times t_i = i*h.

Scheme: Euler-Maruyama with an optional number of substeps per observation
interval (default 1).  An exact Gaussian transition for linear
(Ornstein-Uhlenbeck) drifts is provided as a simulation-accuracy oracle.

Randomness contract
-------------------
All noise derives from a single 64-bit ``seed`` through the counter-based
Philox (4x64) bit generator with fixed named substreams:

* factor driving noise:   SeedSequence(seed, spawn_key=(0,))
* unique coordinate i:    SeedSequence(seed, spawn_key=(1, i))

Identical configs therefore produce bitwise-identical paths, and changing
p never perturbs the factor path under the same seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import expm

from .model import ModelSpec, ParamVector, loading_matrix

_BIN_MAGIC = b"DFA0"
_BIN_VERSION = 1
_NOISE_CHUNK = 65536  # substeps buffered per RNG draw; bounds memory at long n


class SimulationError(RuntimeError):
    """Integration produced a non-finite state (drift explosion)."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at grid step {step}")


@dataclass(frozen=True)
class DriftSpec:
    """Drift of one diffusion component.

    ``linear_ou`` drifts are x -> -(B x - mu); ``custom`` drifts carry a
    callable together with a declared global Lipschitz bound, which is
    recorded in metadata but not verified.
    """

    kind: str
    b: np.ndarray | float | None = None
    mu: np.ndarray | float | None = None
    func: object = None
    lipschitz_bound: float | None = None

    @staticmethod
    def linear_ou(b, mu):
        return DriftSpec(kind="linear_ou", b=np.asarray(b, dtype=float),
                         mu=np.asarray(mu, dtype=float))

    @staticmethod
    def custom(func, lipschitz_bound):
        if not callable(func):
            raise ValueError("custom drift requires a callable")
        return DriftSpec(kind="custom", func=func,
                         lipschitz_bound=float(lipschitz_bound))

    def __post_init__(self):
        if self.kind not in ("linear_ou", "custom"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind == "custom" and self.lipschitz_bound is None:
            raise ValueError("custom drift must declare a Lipschitz bound")


@dataclass(frozen=True)
class SimConfig:
    """Full description of one simulated system.

    ``a`` is the free (p-k) x k loading block (the top k x k block of
    Lambda is the identity), so the generating parameter vector is
    recoverable via :func:`implied_params`.
    """

    spec: ModelSpec
    a: np.ndarray
    factor_drift: DriftSpec
    factor_dispersion: np.ndarray  # k x r
    unique_drifts: tuple  # p scalar DriftSpecs
    unique_dispersions: np.ndarray  # p positive std-devs
    f0: np.ndarray
    e0: np.ndarray
    seed: int
    substeps: int = 1

    def __post_init__(self):
        p, k = self.spec.p, self.spec.k
        a = np.atleast_2d(np.array(self.a, dtype=float))
        s = np.atleast_2d(np.array(self.factor_dispersion, dtype=float))
        disp = np.array(self.unique_dispersions, dtype=float).ravel()
        f0 = np.array(self.f0, dtype=float).ravel()
        e0 = np.array(self.e0, dtype=float).ravel()
        if a.shape != (p - k, k):
            raise ValueError(f"loading block must be {(p - k, k)}, got {a.shape}")
        if s.shape[0] != k:
            raise ValueError(f"factor dispersion must have {k} rows, got {s.shape}")
        if len(self.unique_drifts) != p:
            raise ValueError(f"need {p} unique drifts, got {len(self.unique_drifts)}")
        if disp.size != p or np.any(disp < 0):
            raise ValueError("unique dispersions must be p non-negative std-devs")
        if f0.size != k or e0.size != p:
            raise ValueError("initial vectors must have lengths k and p")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        for name, val in (("a", a), ("factor_dispersion", s),
                          ("unique_dispersions", disp), ("f0", f0), ("e0", e0)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "unique_drifts", tuple(self.unique_drifts))

    @property
    def r(self):
        return self.factor_dispersion.shape[1]

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class SamplePath:
    """Observations x on the grid times, with latent f and e when retained."""

    times: np.ndarray
    x: np.ndarray
    f: np.ndarray | None = None
    e: np.ndarray | None = None

    @property
    def n(self):
        return self.x.shape[0] - 1

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def h(self):
        return float(self.times[1] - self.times[0])


def implied_params(config):
    """Generating ParamVector of a config: Sigma_ff = S S^T, sigma^2 = disp^2.

    Built non-strict so degenerate simulation configs (zero dispersion)
    remain expressible; estimation assumptions are checked elsewhere.
    """
    s = config.factor_dispersion
    return ParamVector(a=config.a, sigma_ff=s @ s.T,
                       sigma_ee=config.unique_dispersions ** 2, strict=False)


def _rng_streams(seed, p):
    root = np.random.SeedSequence(int(seed))
    factor = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(root.entropy, spawn_key=(0,))))
    uniques = [
        np.random.Generator(
            np.random.Philox(np.random.SeedSequence(root.entropy, spawn_key=(1, i))))
        for i in range(p)
    ]
    return factor, uniques


def _factor_drift_fn(drift, k):
    if drift.kind == "linear_ou":
        b = np.asarray(drift.b, dtype=float).reshape((k, k))
        mu = np.asarray(drift.mu, dtype=float).reshape(k)
        return lambda f: mu - b @ f
    return lambda f: np.asarray(drift.func(f), dtype=float).reshape(k)


def _unique_drift_fn(drifts, p):
    if all(d.kind == "linear_ou" for d in drifts):
        b = np.array([float(np.asarray(d.b)) for d in drifts])
        mu = np.array([float(np.asarray(d.mu)) for d in drifts])
        return lambda e: mu - b * e
    funcs = [d.func if d.kind == "custom" else None for d in drifts]
    lin_b = np.array([float(np.asarray(d.b)) if d.kind == "linear_ou" else 0.0
                      for d in drifts])
    lin_mu = np.array([float(np.asarray(d.mu)) if d.kind == "linear_ou" else 0.0
                       for d in drifts])

    def drift_e(e):
        out = lin_mu - lin_b * e
        for i, fn in enumerate(funcs):
            if fn is not None:
                out[i] = fn(e[i])
        return out

    return drift_e


def simulate(config, keep_latent=False):
    """Integrate the latent system and return the observed SamplePath.

    Deterministic given ``config.seed``.  Raises SimulationError with the
    offending grid index if the state leaves the finite range.
    """
    spec = config.spec
    p, k, n, h = spec.p, spec.k, spec.n, spec.h
    if n < 1 or h <= 0:
        raise ValueError("spec must carry n >= 1 and h > 0 for simulation")
    sub = config.substeps
    delta = h / sub
    sqdelta = np.sqrt(delta)
    s_fac = config.factor_dispersion
    r = s_fac.shape[1]
    sig = config.unique_dispersions

    drift_f = _factor_drift_fn(config.factor_drift, k)
    drift_e = _unique_drift_fn(config.unique_drifts, p)

    rng_f, rng_e = _rng_streams(config.seed, p)

    f_path = np.empty((n + 1, k))
    e_path = np.empty((n + 1, p))
    f_path[0] = config.f0
    e_path[0] = config.e0
    f = config.f0.copy()
    e = config.e0.copy()

    total = n * sub
    chunk = max(sub, (_NOISE_CHUNK // sub) * sub) if sub <= _NOISE_CHUNK else sub
    drawn = 0
    xi_f = xi_e = None
    offset = 0
    for i in range(n):
        for j in range(sub):
            if drawn == 0 or offset == drawn:
                m = min(chunk, total - (i * sub + j))
                xi_f = rng_f.standard_normal((m, r))
                xi_e = np.column_stack([g.standard_normal(m) for g in rng_e])
                drawn, offset = m, 0
            f = f + drift_f(f) * delta + (s_fac @ xi_f[offset]) * sqdelta
            e = e + drift_e(e) * delta + sig * xi_e[offset] * sqdelta
            offset += 1
        f_path[i + 1] = f
        e_path[i + 1] = e
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(e))):
            raise SimulationError(i + 1)

    lam = loading_matrix(implied_params(config))
    x = f_path @ lam.T + e_path
    times = np.arange(n + 1) * h
    if keep_latent:
        return SamplePath(times=times, x=x, f=f_path, e=e_path)
    return SamplePath(times=times, x=x)


def _phi1(z, terms=24):
    """phi1(Z) = sum_{j>=0} Z^j/(j+1)!  so that (e^Z - I) = Z phi1(Z).

    Uses scaling by powers of two with the doubling identity
    phi1(2Z) = (e^Z + I) phi1(Z) / 2.
    """
    z = np.asarray(z, dtype=float)
    d = z.shape[0]
    scale = 0
    norm = np.linalg.norm(z, np.inf)
    while norm > 0.5:
        z = z / 2.0
        norm /= 2.0
        scale += 1
    acc = np.eye(d)
    term = np.eye(d)
    for j in range(1, terms):
        term = term @ z / (j + 1)
        acc = acc + term
    for _ in range(scale):
        acc = (expm(z) + np.eye(d)) @ acc / 2.0
        z = z * 2.0
    return acc


def exact_ou_transition(b, mu, s, h):
    """One-step exact transition of dX = -(B X - mu) dt + S dW over time h.

    Returns (phi, const, cov): X_h | X_0 = x is N(phi @ x + const, cov) with
    phi = e^{-Bh}, const = (I - e^{-Bh}) B^{-1} mu (evaluated through a
    series that remains valid for singular B) and cov the integrated
    Gaussian covariance, computed by a block matrix exponential.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    d = b.shape[0]
    mu = np.asarray(mu, dtype=float).reshape(d)
    s = np.atleast_2d(np.asarray(s, dtype=float))
    phi = expm(-b * h)
    # (I - e^{-Bh}) B^{-1} = h * phi1(-Bh)
    const = h * _phi1(-b * h) @ mu
    q = s @ s.T
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = -b
    block[:d, d:] = q
    block[d:, d:] = b.T
    eb = expm(block * h)
    cov = eb[:d, d:] @ phi.T
    return phi, const, (cov + cov.T) / 2.0


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))


def exact_ou_step(state, b, mu, s, h, noise):
    """Advance a linear-OU state by one exact Gaussian transition.

    ``noise`` is a standard normal vector of the state dimension; the
    Gaussian increment is a fixed factor of the exact transition covariance
    applied to it (lower Cholesky, or the symmetric PSD square root when
    the covariance is singular).
    """
    state = np.asarray(state, dtype=float).ravel()
    phi, const, cov = exact_ou_transition(b, mu, s, h)
    noise = np.asarray(noise, dtype=float).reshape(state.size)
    return phi @ state + const + _psd_factor(cov) @ noise


def path_to_csv(path, fileobj):
    """Write a SamplePath as CSV with header t,x1..xp[,f1..fk,e1..ep]."""
    p = path.p
    header = ["t"] + [f"x{i + 1}" for i in range(p)]
    blocks = [path.times[:, None], path.x]
    if path.f is not None and path.e is not None:
        k = path.f.shape[1]
        header += [f"f{i + 1}" for i in range(k)] + [f"e{i + 1}" for i in range(p)]
        blocks += [path.f, path.e]
    data = np.hstack(blocks)
    writer = csv.writer(fileobj, lineterminator="\n")
    writer.writerow(header)
    for row in data:
        writer.writerow([repr(float(v)) for v in row])


def path_from_csv(fileobj):
    """Read a SamplePath written by :func:`path_to_csv`."""
    header = fileobj.readline().strip().split(",")
    if not header or header[0] != "t":
        raise ValueError("not a sample-path CSV: first column must be t")
    data = np.loadtxt(fileobj, delimiter=",", ndmin=2)
    p = sum(1 for c in header if c.startswith("x"))
    k = sum(1 for c in header if c.startswith("f"))
    times = data[:, 0]
    x = data[:, 1 : 1 + p]
    f = e = None
    if k:
        f = data[:, 1 + p : 1 + p + k]
        e = data[:, 1 + p + k : 1 + 2 * p + k]
    return SamplePath(times=times, x=x, f=f, e=e)


def path_to_binary(path, fileobj):
    """Compact binary container, little-endian throughout:

    magic ``DFA0`` (4 bytes), uint32 version=1, uint32 flags (bit 0 set when
    latent paths are present), uint64 row count, uint32 p, uint32 k, then
    float64 arrays in row-major order: times (rows), x (rows*p), and when
    flagged f (rows*k) and e (rows*p).
    """
    rows = path.x.shape[0]
    has_latent = path.f is not None and path.e is not None
    k = path.f.shape[1] if has_latent else 0
    fileobj.write(_BIN_MAGIC)
    fileobj.write(struct.pack("<IIQII", _BIN_VERSION, 1 if has_latent else 0,
                              rows, path.p, k))
    fileobj.write(np.ascontiguousarray(path.times, dtype="<f8").tobytes())
    fileobj.write(np.ascontiguousarray(path.x, dtype="<f8").tobytes())
    if has_latent:
        fileobj.write(np.ascontiguousarray(path.f, dtype="<f8").tobytes())
        fileobj.write(np.ascontiguousarray(path.e, dtype="<f8").tobytes())


def path_from_binary(fileobj):
    """Read a SamplePath written by :func:`path_to_binary`."""
    magic = fileobj.read(4)
    if magic != _BIN_MAGIC:
        raise ValueError("not a sample-path binary container")
    version, flags, rows, p, k = struct.unpack("<IIQII", fileobj.read(24))
    if version != _BIN_VERSION:
        raise ValueError(f"unsupported container version {version}")

    def read_array(count, cols):
        buf = fileobj.read(8 * count * cols)
        arr = np.frombuffer(buf, dtype="<f8").astype(float)
        return arr.reshape((count, cols)) if cols > 1 else arr

    times = read_array(rows, 1)
    x = np.frombuffer(fileobj.read(8 * rows * p), dtype="<f8").reshape((rows, p)).astype(float)
    f = e = None
    if flags & 1:
        f = np.frombuffer(fileobj.read(8 * rows * k), dtype="<f8").reshape((rows, k)).astype(float)
        e = np.frombuffer(fileobj.read(8 * rows * p), dtype="<f8").reshape((rows, p)).astype(float)
    return SamplePath(times=times, x=x, f=f, e=e)
