"""Compression-rate verification: closed forms against one measured synthetic round."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec, payload
from .config import AUTO_DOWNLINK, ExperimentConfig

# published rates and the tolerance each is checked at
REFERENCE_RATES = {
    "mucsc": (14.54, 0.02),
    "qsgd": (1.98, 0.02),
    "signsgd": (58.18, 0.02),
    "bmucsc": (196.57, 0.03),
    "dgc": (1.99, 0.02),
    "stc": (88.15, 0.02),
}


def ideal_bytes(kind: str, d: int, params: codec.CodecParams, h: int = 4) -> float:
    """Payload size with fractional-octet bit accounting and no header or padding."""
    lg = payload.ceil_log2
    z = params.em.z
    if kind == "none":
        return h * d
    if kind == "mucsc":
        return h * z + lg(z) / 8 * d
    if kind == "bmucsc":
        d0 = codec.top_count(params.bmucsc_fraction, d)
        return (lg(z) + lg(d)) / 8 * d0 + h * z + h
    if kind == "signsgd":
        return d / 8 + h
    if kind == "qsgd":
        return (params.qsgd_bits + 1) / 8 * d + h
    if kind == "stc":
        return (lg(d) + 1) / 8 * codec.top_count(params.stc_fraction, d) + h
    if kind == "dgc":
        d0 = codec.top_count(params.dgc_fraction, d)
        return lg(d) / 8 * d0 + h * d0
    raise ValueError(kind)


def formula_rate(up_bytes, down_bytes, d: int, k: int, n: int, h: int = 4) -> float:
    """2hd over the expected per-client traffic: mean uplink times K/N plus downlink."""
    return 2 * h * d / (float(np.mean(up_bytes)) * k / n + down_bytes)


def codec_params(cfg: ExperimentConfig, kind: str, z: int) -> codec.CodecParams:
    c = cfg.codec
    return codec.CodecParams(
        em=codec.EmConfig(c.bmucsc_z if kind == "bmucsc" else z, c.em_iters, c.em_alpha, c.em_decay),
        bmucsc_fraction=c.bmucsc_fraction,
        qsgd_bits=c.qsgd_bits,
        stc_fraction=c.stc_fraction,
        dgc_fraction=c.dgc_fraction,
    )


def synthetic_round(cfg: ExperimentConfig, up_kind: str, down_kind: str, d: int, seed: int = 0):
    """One round of traffic with Gaussian stand-in updates instead of training.

    K participants upload, the server averages the decompressed uploads and
    broadcasts to all N clients; every payload goes through encode/decode.
    """
    k, n = cfg.fedavg.participants, cfg.fedavg.n_clients
    rng = np.random.default_rng(seed)
    ledger = payload.TrafficLedger(n, k)
    received = []
    for i in range(k):
        u = rng.normal(0.0, 0.01, size=d)
        z = cfg.codec.z_u[i % len(cfg.codec.z_u)]
        c, _ = codec.compress(up_kind, u, codec_params(cfg, up_kind, z), rng, np.zeros(d))
        wire = payload.encode(c)
        ledger.record(0, i, payload.UPLINK, len(wire))
        received.append(codec.decompress(payload.decode(wire)))
    agg = np.mean(received, axis=0)
    c, _ = codec.compress(down_kind, agg, codec_params(cfg, down_kind, cfg.codec.z_d), rng, np.zeros(d))
    wire = payload.encode(c)
    for i in range(n):
        ledger.record(0, i, payload.DOWNLINK, len(wire))
    return ledger


@dataclass
class RateRow:
    codec: str
    downlink: str
    formula: float
    measured: float
    reference: float | None
    tolerance: float | None

    @property
    def passed(self) -> bool | None:
        if self.reference is None:
            return None
        return abs(self.measured - self.reference) <= self.tolerance * self.reference

    def as_dict(self) -> dict:
        return {**self.__dict__, "passed": self.passed}


def check_codec(cfg: ExperimentConfig, kind: str, d: int | None = None, h: int | None = None) -> RateRow:
    d = d or cfg.verify.d
    h = h or cfg.verify.h
    k, n = cfg.fedavg.participants, cfg.fedavg.n_clients
    down = AUTO_DOWNLINK[kind]
    z_u = cfg.codec.z_u
    ups = [ideal_bytes(kind, d, codec_params(cfg, kind, z_u[i % len(z_u)]), h) for i in range(k)]
    dn = ideal_bytes(down, d, codec_params(cfg, down, cfg.codec.z_d), h)
    ledger = synthetic_round(cfg, kind, down, d, seed=cfg.experiment.seed)
    measured = payload.measured_rate(ledger, payload.dense_exchange_bytes(d, h))
    ref, tol = REFERENCE_RATES.get(kind, (None, None))
    return RateRow(kind, down, formula_rate(ups, dn, d, k, n, h), measured, ref, tol)


def verify_rates(cfg: ExperimentConfig, kinds=tuple(REFERENCE_RATES)) -> list[RateRow]:
    return [check_codec(cfg, kind) for kind in kinds]
