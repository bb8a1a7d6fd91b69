"""FedAvg simulation with compressed uplink and downlink.

One round: sample participants, run E local SGD steps on each, compress and
encode the local update, decode and aggregate on the server, compress the
aggregate, broadcast it to every client, and have every client (and the
server) apply ``w <- w - decompress(D~)``.  Clients never keep local
progress between rounds, so all models stay bit-identical.
"""
from __future__ import annotations

import time
import zlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import codec, netmodel, payload, tasks
from .config import ExperimentConfig
from .errors import DimensionMismatch, EmptyShard, InvalidParams, InvalidWeights


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for the named randomness source under ``seed``."""
    key = tuple(n if isinstance(n, int) else zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def learning_rate(cfg: ExperimentConfig, t: int) -> float:
    lr = cfg.lr
    return lr.scale * max(lr.base / (1 + t / lr.decay_steps), lr.floor)


@dataclass
class ClientState:
    id: int
    weight: float
    shard: tasks.Dataset
    model: np.ndarray
    z_u: int
    batch_rng: np.random.Generator
    codec_rng: np.random.Generator
    residual: np.ndarray | None = None


@dataclass
class ServerState:
    model: np.ndarray
    t: int = 0
    codec_rng: np.random.Generator | None = None
    residual: np.ndarray | None = None


@dataclass
class RoundReport:
    round: int
    loss: float
    accuracy: float
    up_bytes: int
    down_bytes: int
    comm_s: float
    comp_s: float


@dataclass
class TrainingResult:
    reports: list
    ledger: payload.TrafficLedger
    model: np.ndarray
    target_reached: bool | None
    summary: dict = field(default_factory=dict)


def local_train(client: ClientState, w_start, model: tasks.Model, lrs, batch_size: int, rng) -> np.ndarray:
    """Run ``len(lrs)`` SGD steps from ``w_start``; return ``w_start - w_end``.

    Each step draws a fresh mini-batch uniformly at random (without
    replacement inside the batch when the shard is large enough).
    """
    n = len(client.shard)
    if n == 0:
        raise EmptyShard(f"client {client.id} has no samples")
    x, y = client.shard.features, client.shard.labels
    w = np.array(w_start, dtype=np.float64)
    for eta in lrs:
        idx = rng.choice(n, size=batch_size, replace=batch_size > n)
        _, grad = model.loss_and_grad(w, x[idx], y[idx])
        w = w - eta * grad
    return w_start - w


def sample_participants(weights, k: int, rng) -> list[int]:
    """``k`` independent draws with replacement, client i with probability ``weights[i]``."""
    p = np.asarray(weights, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidWeights("weights must be nonnegative and sum to 1")
    if k < 1:
        raise InvalidParams("k must be >= 1")
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    draws = np.searchsorted(cdf, rng.random(k), side="right")
    return sorted(int(i) for i in draws)


def aggregate(updates: dict, mode: str, multiplicity: dict | None = None, sizes: dict | None = None) -> np.ndarray:
    """Combine decompressed client updates in ascending client-id order.

    ``full-weighted``: sum of ``|S_i| / sum_selected |S_j|`` times each update.
    ``partial-mean``: plain mean over the K draws, a client drawn twice counting twice.
    """
    if not updates:
        raise InvalidParams("no updates to aggregate")
    ids = sorted(updates)
    d = updates[ids[0]].size
    if any(updates[i].size != d for i in ids):
        raise DimensionMismatch("updates differ in length")
    acc = np.zeros(d)
    if mode == "full-weighted":
        sizes = sizes or {i: 1 for i in ids}
        total = float(sum(sizes[i] for i in ids))
        for i in ids:
            acc += (sizes[i] / total) * updates[i]
        return acc
    if mode == "partial-mean":
        multiplicity = multiplicity or {i: 1 for i in ids}
        k = sum(multiplicity[i] for i in ids)
        for i in ids:
            acc += multiplicity[i] * updates[i]
        return acc / k
    raise InvalidParams(f"unknown aggregation mode {mode!r}")


class Simulation:
    """Holds the server, the clients and the traffic ledger of one experiment."""

    def __init__(self, cfg: ExperimentConfig, train=None, test=None, shards=None):
        cfg.validate()
        self.cfg = cfg
        seed = cfg.experiment.seed
        t = cfg.task
        if train is None:
            train, test = self._load_data(cfg)
        self.train, self.test = train, test
        n_features = train.features.shape[1]
        self.model = tasks.Model(t.model, n_features, train.n_classes, t.hidden, t.l2)
        if shards is None:
            spec = tasks.PartitionSpec(
                t.partition,
                (t.samples_min, t.samples_max) if t.samples_max else None,
                t.classes_per_client or None,
            )
            shards = tasks.partition(train, spec, cfg.fedavg.n_clients, stream(seed, "partition"))
        if len(shards) != cfg.fedavg.n_clients:
            raise InvalidParams("one shard per client required")

        w0 = self.model.init(stream(seed, "init"))
        sizes = np.array([len(s) for s in shards], dtype=np.float64)
        weights = sizes / sizes.sum()
        up_residual = cfg.codec.uplink in codec.RESIDUAL_CODECS
        self.clients = [
            ClientState(
                id=i,
                weight=float(weights[i]),
                shard=train.subset(shards[i]),
                model=w0.copy(),
                z_u=cfg.codec.z_u[i % len(cfg.codec.z_u)],
                batch_rng=stream(seed, "batch", i),
                codec_rng=stream(seed, "codec", i),
                residual=np.zeros(w0.size) if up_residual else None,
            )
            for i in range(cfg.fedavg.n_clients)
        ]
        self.weights = weights
        self.server = ServerState(
            model=w0.copy(),
            codec_rng=stream(seed, "server_codec"),
            residual=np.zeros(w0.size) if cfg.downlink in codec.RESIDUAL_CODECS else None,
        )
        self.participation_rng = stream(seed, "participation")
        self.net_rng = stream(seed, "net")
        self.link = netmodel.LinkModel(cfg.net.mean_speed, cfg.net.std_fraction, cfg.net.floor or None)
        k = cfg.fedavg.n_clients if cfg.fedavg.participation == "full" else cfg.fedavg.participants
        self.ledger = payload.TrafficLedger(cfg.fedavg.n_clients, k)
        self.round_index = 0

    @staticmethod
    def _load_data(cfg):
        t = cfg.task
        rng = stream(cfg.experiment.seed, "data")
        if t.csv:
            train = tasks.load_csv(t.csv)
            if t.test_csv:
                return train, tasks.load_csv(t.test_csv, train.n_classes)
            return tasks.train_test_split(train, t.n_test, rng)
        ds = tasks.gen_synthetic(t.n_train + t.n_test, t.n_features, t.n_classes, t.separation, rng)
        return tasks.train_test_split(ds, t.n_test, rng)

    # -- codec plumbing ------------------------------------------------------

    def _params(self, kind: str, z: int) -> codec.CodecParams:
        c = self.cfg.codec
        if kind == "bmucsc":
            z = c.bmucsc_z
        return codec.CodecParams(
            em=codec.EmConfig(z, c.em_iters, c.em_alpha, c.em_decay),
            bmucsc_fraction=c.bmucsc_fraction,
            qsgd_bits=c.qsgd_bits,
            stc_fraction=c.stc_fraction,
            dgc_fraction=c.dgc_fraction,
        )

    def participants(self) -> list[int]:
        f = self.cfg.fedavg
        if f.participation == "full":
            return list(range(f.n_clients))
        return sample_participants(self.weights, f.participants, self.participation_rng)

    # -- one round -------------------------------------------------------------

    def run_round(self) -> RoundReport:
        cfg = self.cfg
        r = self.round_index
        steps = cfg.fedavg.local_steps
        t0 = self.server.t
        lrs = [learning_rate(cfg, t0 + j) for j in range(steps)]
        drawn = self.participants()
        multiplicity = Counter(drawn)
        selected = sorted(multiplicity)

        up_wire = {}
        client_secs = []
        for i in selected:
            cl = self.clients[i]
            tic = time.perf_counter()
            u = local_train(cl, cl.model, self.model, lrs, cfg.fedavg.batch_size, cl.batch_rng)
            c, cl.residual = codec.compress(
                cfg.codec.uplink, u, self._params(cfg.codec.uplink, cl.z_u), cl.codec_rng, cl.residual
            )
            up_wire[i] = payload.encode(c)
            client_secs.append(time.perf_counter() - tic)
            self.ledger.record(r, i, payload.UPLINK, len(up_wire[i]))

        tic = time.perf_counter()
        received = {i: codec.decompress(payload.decode(up_wire[i])) for i in selected}
        if cfg.fedavg.participation == "full":
            sizes = {i: len(self.clients[i].shard) for i in selected}
            agg = aggregate(received, "full-weighted", sizes=sizes)
        else:
            agg = aggregate(received, "partial-mean", multiplicity=multiplicity)
        down_kind = cfg.downlink
        dc, self.server.residual = codec.compress(
            down_kind, agg, self._params(down_kind, cfg.codec.z_d), self.server.codec_rng, self.server.residual
        )
        down_wire = payload.encode(dc)
        broadcast = codec.decompress(payload.decode(down_wire))
        server_secs = time.perf_counter() - tic

        for cl in self.clients:
            self.ledger.record(r, cl.id, payload.DOWNLINK, len(down_wire))
            cl.model = cl.model - broadcast
        self.server.model = self.server.model - broadcast
        self.server.t = t0 + steps
        self.round_index += 1

        up_sizes = [len(up_wire[i]) for i in selected]
        down_sizes = [len(down_wire)] * len(self.clients)
        comm = netmodel.round_time(
            up_sizes,
            netmodel.sample_speeds(self.link, len(up_sizes), self.net_rng),
            down_sizes,
            netmodel.sample_speeds(self.link, len(down_sizes), self.net_rng),
        )
        loss, acc = self.model.evaluate(self.server.model, self.test)
        return RoundReport(
            round=r + 1,
            loss=float(loss),
            accuracy=acc,
            up_bytes=sum(up_sizes),
            down_bytes=sum(down_sizes),
            comm_s=comm,
            comp_s=max(client_secs, default=0.0) + server_secs,
        )

    def synchronized(self) -> bool:
        ref = self.server.model
        return all(np.array_equal(cl.model, ref) for cl in self.clients)

    def run(self) -> TrainingResult:
        cfg = self.cfg
        target = cfg.experiment.target_accuracy
        reports = []
        reached = None if target is None else False
        for _ in range(cfg.n_rounds):
            rep = self.run_round()
            reports.append(rep)
            if target is not None and rep.accuracy >= target:
                reached = True
                break
        return TrainingResult(reports, self.ledger, self.server.model.copy(), reached, self.summary(reports, reached))

    def summary(self, reports, reached) -> dict:
        cfg = self.cfg
        d = self.model.d
        out = {
            "name": cfg.experiment.name,
            "uplink": cfg.codec.uplink,
            "downlink": cfg.downlink,
            "d": d,
            "rounds": len(reports),
            "iterations": len(reports) * cfg.fedavg.local_steps,
            "final_loss": reports[-1].loss if reports else None,
            "final_accuracy": reports[-1].accuracy if reports else None,
            "total_up_bytes": sum(r.up_bytes for r in reports),
            "total_down_bytes": sum(r.down_bytes for r in reports),
            "total_traffic_bytes": sum(r.up_bytes + r.down_bytes for r in reports),
            "total_comm_s": sum(r.comm_s for r in reports),
            "total_comp_s": sum(r.comp_s for r in reports),
            "target_accuracy": cfg.experiment.target_accuracy,
            "target_reached": reached,
        }
        if reached is False:
            out["flag"] = "target_not_reached"
        if reports:
            out["compression_rate"] = payload.measured_rate(self.ledger, payload.dense_exchange_bytes(d, 4))
            k, n = self.ledger.participants, self.ledger.n_clients
            dense = payload.HEADER_SIZE + 4 * d
            out["compression_rate_actual"] = payload.measured_rate(
                self.ledger, dense * (k + n), accounting="actual"
            )
        return out


def run_training(cfg: ExperimentConfig, **kwargs) -> TrainingResult:
    return Simulation(cfg, **kwargs).run()
