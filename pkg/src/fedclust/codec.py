"""Model-update codecs.

Every codec maps a 1-D float64 update vector to a :class:`CompressedUpdate`
variant and back.  Soft-cluster quantization (``mucsc``) and its boosted,
top-k variant (``bmucsc``) are implemented here together with the four
baselines (sign, QSGD, STC, DGC) and a dense passthrough.

Transmitted reals are binary32 on the wire, so every real stored inside a
``CompressedUpdate`` is already float32-representable; that keeps
``decode(encode(c)) == c`` exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidConfig,
    InvalidParams,
    MalformedPayload,
    MissingResidual,
    NonFiniteInput,
    OutOfRange,
)

CODECS = ("none", "mucsc", "bmucsc", "signsgd", "qsgd", "stc", "dgc")
RESIDUAL_CODECS = ("stc", "dgc")

# relative gap below which two fitted centroids are merged
_COLLISION_RTOL = 1e-12


def as_update(u) -> np.ndarray:
    """Coerce to a finite, non-empty 1-D float64 array."""
    arr = np.asarray(u, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise InvalidParams("update vector must have d >= 1")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("update vector contains NaN or Inf")
    return arr


def _f32_nearest(x: float) -> float:
    return float(np.float32(x))


def _f32_down(x: float) -> float:
    f = np.float32(x)
    if float(f) > x:
        f = np.nextafter(f, np.float32(-np.inf))
    return float(f)


def _f32_up(x: float) -> float:
    f = np.float32(x)
    if float(f) < x:
        f = np.nextafter(f, np.float32(np.inf))
    return float(f)


def _arrays_equal(a, b) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a, b))


# ---------------------------------------------------------------------------
# Codebook and EM fitting


@dataclass(eq=False)
class Codebook:
    centroids: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64).reshape(-1)

    @property
    def z(self) -> int:
        return int(self.centroids.size)

    def validate(self):
        c = self.centroids
        if c.size < 1:
            raise MalformedPayload("codebook is empty")
        if not np.all(np.isfinite(c)):
            raise MalformedPayload("codebook has non-finite centroids")
        if c.size > 1 and not np.all(np.diff(c) > 0):
            raise MalformedPayload("codebook centroids not strictly ascending")

    def __eq__(self, other):
        return isinstance(other, Codebook) and _arrays_equal(self.centroids, other.centroids)

    def __repr__(self):
        return f"Codebook(z={self.z}, centroids={self.centroids!r})"


@dataclass(frozen=True)
class EmConfig:
    z: int = 16
    iters: int = 5
    alpha: float = 0.001
    decay: float = 10.0

    def validate(self):
        if int(self.z) != self.z or self.z < 2:
            raise InvalidConfig(f"EmConfig.z must be an integer >= 2, got {self.z}")
        if int(self.iters) != self.iters or self.iters < 1:
            raise InvalidConfig(f"EmConfig.iters must be >= 1, got {self.iters}")
        if not self.alpha > 0:
            raise InvalidConfig(f"EmConfig.alpha must be > 0, got {self.alpha}")
        if not self.decay > 1:
            raise InvalidConfig(f"EmConfig.decay must be > 1, got {self.decay}")


def uniform_codebook(u, z: int) -> Codebook:
    """Evenly spaced centroids from min(u) to max(u), endpoints exact."""
    u = as_update(u)
    lo, hi = float(u.min()), float(u.max())
    if lo == hi:
        return Codebook([lo])
    r = np.linspace(lo, hi, z)
    r[0], r[-1] = lo, hi
    return Codebook(r)


def _bin_index(r: np.ndarray, u: np.ndarray) -> np.ndarray:
    # phi(U_m): r[z] <= U_m <= r[z+1]; an exact interior centroid falls in the bin it opens
    z = np.searchsorted(r, u, side="right") - 1
    return np.clip(z, 0, r.size - 2)


def _check_range(r: np.ndarray, u: np.ndarray):
    if u.min() < r[0] or u.max() > r[-1]:
        raise OutOfRange(
            f"values span [{u.min()!r}, {u.max()!r}] outside codebook [{r[0]!r}, {r[-1]!r}]"
        )


def compression_loss(cb: Codebook, u) -> float:
    """Expected squared quantization error of stochastic rounding onto ``cb``."""
    u = as_update(u)
    r = cb.centroids
    _check_range(r, u)
    if r.size == 1:
        return 0.0
    z = _bin_index(r, u)
    return float(np.sum((r[z + 1] - u) * (u - r[z])))


def _em_gradient(r: np.ndarray, su: np.ndarray, csum: np.ndarray) -> np.ndarray:
    """dJ/dr_z for the interior centroids, from per-bin counts and sums of sorted ``su``."""
    edges = np.searchsorted(su, r, side="left")
    edges[0] = 0
    edges[-1] = su.size
    counts = np.diff(edges).astype(np.float64)
    sums = csum[edges[1:]] - csum[edges[:-1]]
    # bin k holds L_k = {m : r_k <= U_m < r_{k+1}}
    left = sums[:-1] - counts[:-1] * r[:-2]  # sum over L_{z-1} of (U - r_{z-1})
    right = counts[1:] * r[2:] - sums[1:]  # sum over L_z of (r_{z+1} - U)
    return left - right


def _merge_collisions(r: np.ndarray) -> np.ndarray:
    span = r[-1] - r[0]
    keep = np.ones(r.size, dtype=bool)
    last = r[0]
    for i in range(1, r.size - 1):
        if r[i] - last <= _COLLISION_RTOL * span:
            keep[i] = False
        else:
            last = r[i]
    if r.size > 2 and r[-1] - last <= _COLLISION_RTOL * span:
        # drop the interior neighbour, the pinned maximum stays
        keep[np.flatnonzero(keep[:-1])[-1]] = False
    return r[keep]


def fit_centroids(u, cfg: EmConfig) -> Codebook:
    """Fit a Z-centroid codebook minimizing the stochastic-rounding variance.

    Endpoints are pinned to min(u) and max(u).  Interior centroids start
    evenly spaced and take ``cfg.iters`` gradient steps on the loss; a step
    that would push any interior centroid outside its neighbours is rejected
    and the learning rate divided by ``cfg.decay``.  If the result is worse
    than the uniform start, the uniform codebook is returned.
    """
    u = as_update(u)
    cfg.validate()
    lo, hi = float(u.min()), float(u.max())
    if lo == hi:
        return Codebook([lo])
    distinct = np.unique(u)
    if distinct.size <= cfg.z:
        return Codebook(distinct)

    start = uniform_codebook(u, cfg.z).centroids
    r = start.copy()
    if cfg.z > 2:
        su = np.sort(u)
        csum = np.concatenate(([0.0], np.cumsum(su)))
        alpha = float(cfg.alpha)
        for _ in range(cfg.iters):
            cand = r.copy()
            cand[1:-1] -= alpha * _em_gradient(r, su, csum)
            inside = np.all((cand[1:-1] > r[:-2]) & (cand[1:-1] < r[2:]))
            if inside and np.all(np.diff(cand) > 0):
                r = cand
            else:
                alpha /= cfg.decay
        r = _merge_collisions(r)

    fitted = Codebook(r)
    if compression_loss(fitted, u) > compression_loss(Codebook(start), u):
        return Codebook(start)
    return fitted


def wire_codebook(cb: Codebook) -> Codebook:
    """Round centroids to binary32, widening the endpoints outward.

    Outward rounding keeps every input value inside [r_1, r_Z] so stochastic
    rounding stays exactly unbiased with respect to the float64 input.
    """
    r = cb.centroids
    if r.size == 1 and _f32_nearest(r[0]) == r[0]:
        return Codebook(r.copy())
    lo, hi = _f32_down(r[0]), _f32_up(r[-1])
    inner = np.asarray(r[1:-1], dtype=np.float32).astype(np.float64)
    inner = inner[(inner > lo) & (inner < hi)]
    return Codebook(np.unique(np.concatenate(([lo], inner, [hi]))))


def quantize_stochastic(cb: Codebook, u, rng: np.random.Generator) -> np.ndarray:
    """Round each value to one of its two neighbouring centroids, unbiasedly."""
    u = as_update(u)
    r = cb.centroids
    _check_range(r, u)
    draws = rng.random(u.size)
    if r.size == 1:
        return np.zeros(u.size, dtype=np.int64)
    z = _bin_index(r, u)
    lo, hi = r[z], r[z + 1]
    p_up = (u - lo) / (hi - lo)
    return z + (draws < p_up).astype(np.int64)


# ---------------------------------------------------------------------------
# Compressed payload variants


@dataclass(eq=False)
class Mucsc:
    codebook: Codebook
    ids: np.ndarray
    kind = "mucsc"

    @property
    def d(self) -> int:
        return int(self.ids.size)

    def validate(self):
        self.codebook.validate()
        if self.ids.size < 1:
            raise MalformedPayload("mucsc payload has d = 0")
        if self.ids.min() < 0 or self.ids.max() >= self.codebook.z:
            raise MalformedPayload(f"cluster id out of range for Z={self.codebook.z}")

    def decompress(self) -> np.ndarray:
        return self.codebook.centroids[self.ids]

    def __eq__(self, other):
        return (
            isinstance(other, Mucsc)
            and self.codebook == other.codebook
            and _arrays_equal(self.ids, other.ids)
        )


def _check_indices(indices: np.ndarray, d: int, what: str):
    if indices.size == 0:
        return
    if indices.min() < 0 or indices.max() >= d:
        raise MalformedPayload(f"{what} index out of range [0, {d})")
    if indices.size > 1 and not np.all(np.diff(indices) > 0):
        raise MalformedPayload(f"{what} indices not strictly increasing")


@dataclass(eq=False)
class Bmucsc:
    d: int
    indices: np.ndarray
    cluster_ids: np.ndarray
    codebook: Codebook
    rest_mean: float
    kind = "bmucsc"

    def validate(self):
        self.codebook.validate()
        if self.d < 1:
            raise MalformedPayload("bmucsc payload has d = 0")
        if self.indices.size != self.cluster_ids.size:
            raise MalformedPayload("bmucsc index/cluster id length mismatch")
        _check_indices(self.indices, self.d, "bmucsc")
        if self.cluster_ids.size and (
            self.cluster_ids.min() < 0 or self.cluster_ids.max() >= self.codebook.z
        ):
            raise MalformedPayload(f"cluster id out of range for Z={self.codebook.z}")

    def decompress(self) -> np.ndarray:
        out = np.full(self.d, self.rest_mean, dtype=np.float64)
        out[self.indices] = self.codebook.centroids[self.cluster_ids]
        return out

    def __eq__(self, other):
        return (
            isinstance(other, Bmucsc)
            and self.d == other.d
            and _arrays_equal(self.indices, other.indices)
            and _arrays_equal(self.cluster_ids, other.cluster_ids)
            and self.codebook == other.codebook
            and self.rest_mean == other.rest_mean
        )


@dataclass(eq=False)
class Sign:
    negative: np.ndarray  # bool, True where the element is < 0
    scale: float
    kind = "signsgd"

    @property
    def d(self) -> int:
        return int(self.negative.size)

    def validate(self):
        if self.negative.size < 1:
            raise MalformedPayload("sign payload has d = 0")

    def decompress(self) -> np.ndarray:
        return np.where(self.negative, -self.scale, self.scale)

    def __eq__(self, other):
        return (
            isinstance(other, Sign)
            and self.scale == other.scale
            and _arrays_equal(self.negative, other.negative)
        )


@dataclass(eq=False)
class Qsgd:
    norm: float
    levels: np.ndarray
    negative: np.ndarray
    bit_width: int
    kind = "qsgd"

    @property
    def d(self) -> int:
        return int(self.levels.size)

    def validate(self):
        if self.levels.size < 1 or self.levels.size != self.negative.size:
            raise MalformedPayload("qsgd payload has inconsistent length")
        if not 1 <= self.bit_width <= 31:
            raise MalformedPayload(f"qsgd bit width {self.bit_width} unsupported")
        if self.levels.min() < 0 or self.levels.max() > (1 << self.bit_width) - 1:
            raise MalformedPayload("qsgd level exceeds the bit width")

    def decompress(self) -> np.ndarray:
        s = (1 << self.bit_width) - 1
        mag = self.norm * self.levels / s
        return np.where(self.negative, -mag, mag)

    def __eq__(self, other):
        return (
            isinstance(other, Qsgd)
            and self.norm == other.norm
            and self.bit_width == other.bit_width
            and _arrays_equal(self.levels, other.levels)
            and _arrays_equal(self.negative, other.negative)
        )


@dataclass(eq=False)
class Stc:
    d: int
    indices: np.ndarray
    negative: np.ndarray
    mu: float
    kind = "stc"

    def validate(self):
        if self.d < 1:
            raise MalformedPayload("stc payload has d = 0")
        if self.indices.size != self.negative.size:
            raise MalformedPayload("stc index/sign length mismatch")
        _check_indices(self.indices, self.d, "stc")

    def decompress(self) -> np.ndarray:
        out = np.zeros(self.d, dtype=np.float64)
        out[self.indices] = np.where(self.negative, -self.mu, self.mu)
        return out

    def __eq__(self, other):
        return (
            isinstance(other, Stc)
            and self.d == other.d
            and self.mu == other.mu
            and _arrays_equal(self.indices, other.indices)
            and _arrays_equal(self.negative, other.negative)
        )


@dataclass(eq=False)
class Dgc:
    d: int
    indices: np.ndarray
    values: np.ndarray
    kind = "dgc"

    def validate(self):
        if self.d < 1:
            raise MalformedPayload("dgc payload has d = 0")
        if self.indices.size != self.values.size:
            raise MalformedPayload("dgc index/value length mismatch")
        _check_indices(self.indices, self.d, "dgc")

    def decompress(self) -> np.ndarray:
        out = np.zeros(self.d, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def __eq__(self, other):
        return (
            isinstance(other, Dgc)
            and self.d == other.d
            and _arrays_equal(self.indices, other.indices)
            and _arrays_equal(self.values, other.values)
        )


@dataclass(eq=False)
class Dense:
    values: np.ndarray
    kind = "none"

    @property
    def d(self) -> int:
        return int(self.values.size)

    def validate(self):
        if self.values.size < 1:
            raise MalformedPayload("dense payload has d = 0")

    def decompress(self) -> np.ndarray:
        return self.values.copy()

    def __eq__(self, other):
        return isinstance(other, Dense) and _arrays_equal(self.values, other.values)


CompressedUpdate = Mucsc | Bmucsc | Sign | Qsgd | Stc | Dgc | Dense


def decompress(c: CompressedUpdate) -> np.ndarray:
    c.validate()
    return c.decompress()


# ---------------------------------------------------------------------------
# Compression entry point


@dataclass(frozen=True)
class CodecParams:
    em: EmConfig = field(default_factory=EmConfig)
    bmucsc_fraction: float = 0.01
    qsgd_bits: int = 4
    stc_fraction: float = 0.03
    dgc_fraction: float = 0.01

    def validate(self):
        self.em.validate()
        for name in ("bmucsc_fraction", "stc_fraction", "dgc_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise InvalidParams(f"{name} must lie in (0, 1], got {v}")
        if not 1 <= self.qsgd_bits <= 31:
            raise InvalidParams(f"qsgd_bits must lie in [1, 31], got {self.qsgd_bits}")


def top_count(fraction: float, d: int) -> int:
    """Number of coordinates kept by a top-fraction selector: round(fraction*d), at least 1."""
    return int(min(d, max(1, round(fraction * d))))


def top_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Ascending indices of the k largest |values|; ties go to the lower index."""
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:k])


def _compress_mucsc(u, params, rng):
    cb = wire_codebook(fit_centroids(u, params.em))
    return Mucsc(cb, quantize_stochastic(cb, u, rng))


def _compress_bmucsc(u, params, rng):
    d = u.size
    d0 = top_count(params.bmucsc_fraction, d)
    idx = top_indices(u, d0)
    picked = u[idx]
    cb = wire_codebook(fit_centroids(picked, params.em))
    ids = quantize_stochastic(cb, picked, rng)
    mask = np.ones(d, dtype=bool)
    mask[idx] = False
    rest = _f32_nearest(u[mask].mean()) if d0 < d else 0.0
    return Bmucsc(d, idx.astype(np.int64), ids, cb, rest)


def _compress_sign(u):
    return Sign(u < 0, _f32_nearest(np.mean(np.abs(u))))


def _compress_qsgd(u, params, rng):
    bits = int(params.qsgd_bits)
    s = (1 << bits) - 1
    draws = rng.random(u.size)
    norm = _f32_up(float(np.linalg.norm(u)))
    if norm == 0.0:
        levels = np.zeros(u.size, dtype=np.int64)
    else:
        x = np.minimum(np.abs(u) / norm * s, s)
        floor = np.floor(x)
        levels = (floor + (draws < x - floor)).astype(np.int64)
    return Qsgd(norm, levels, u < 0, bits)


def _compress_stc(acc, params):
    idx = top_indices(acc, top_count(params.stc_fraction, acc.size))
    mu = _f32_nearest(np.mean(np.abs(acc[idx])))
    return Stc(acc.size, idx.astype(np.int64), acc[idx] < 0, mu)


def _compress_dgc(acc, params):
    idx = top_indices(acc, top_count(params.dgc_fraction, acc.size))
    vals = acc[idx].astype(np.float32).astype(np.float64)
    return Dgc(acc.size, idx.astype(np.int64), vals)


def compress(kind: str, u, params: CodecParams, rng: np.random.Generator, residual=None):
    """Compress ``u`` with codec ``kind``.

    Returns ``(compressed, residual)``.  For ``stc`` and ``dgc`` the residual
    is the error-feedback accumulator: the input is added to it before
    selection and the transmitted reconstruction is subtracted afterwards,
    so ``residual_t = sum(u_j) - sum(decompress(c_j))``.  Other codecs hand
    the residual back untouched.
    """
    u = as_update(u)
    params.validate()
    if kind not in CODECS:
        raise InvalidParams(f"unknown codec {kind!r}; expected one of {CODECS}")

    if kind in RESIDUAL_CODECS:
        if residual is None:
            raise MissingResidual(f"codec {kind!r} needs a residual accumulator")
        residual = np.asarray(residual, dtype=np.float64)
        if residual.shape != u.shape:
            raise DimensionMismatch(f"residual has d={residual.size}, update has d={u.size}")
        acc = residual + u
        c = _compress_stc(acc, params) if kind == "stc" else _compress_dgc(acc, params)
        return c, acc - c.decompress()

    if kind == "none":
        c = Dense(u.astype(np.float32).astype(np.float64))
    elif kind == "mucsc":
        c = _compress_mucsc(u, params, rng)
    elif kind == "bmucsc":
        c = _compress_bmucsc(u, params, rng)
    elif kind == "signsgd":
        c = _compress_sign(u)
    else:
        c = _compress_qsgd(u, params, rng)
    return c, residual
