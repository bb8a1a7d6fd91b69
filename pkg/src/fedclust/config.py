"""Experiment configuration: dotted ``section.key`` settings with defaults.

Config files are INI-style; ``[fedavg]`` followed by ``n_clients = 20`` sets
``fedavg.n_clients``.  Values are coerced to the field's declared type.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .codec import CODECS
from .errors import InvalidConfig

# downlink codec paired with each uplink codec when codec.downlink = auto
AUTO_DOWNLINK = {
    "none": "none",
    "mucsc": "mucsc",
    "bmucsc": "bmucsc",
    "signsgd": "signsgd",
    "stc": "stc",
    "qsgd": "none",
    "dgc": "none",
}


@dataclass
class ExperimentSection:
    name: str = "base"
    seed: int = 0
    target_accuracy: typing.Optional[float] = None


@dataclass
class FedAvgSection:
    n_clients: int = 100
    participants: int = 10
    local_steps: int = 5
    batch_size: int = 8
    total_iterations: int = 500
    participation: str = "partial"  # partial | full


@dataclass
class LrSection:
    base: float = 0.5
    decay_steps: float = 400.0
    floor: float = 0.01
    scale: float = 1.0


@dataclass
class CodecSection:
    uplink: str = "mucsc"
    downlink: str = "auto"
    z_u: typing.Tuple[int, ...] = (16,)
    z_d: int = 16
    em_iters: int = 5
    em_alpha: float = 0.001
    em_decay: float = 10.0
    bmucsc_fraction: float = 0.01
    bmucsc_z: int = 256
    qsgd_bits: int = 4
    stc_fraction: float = 0.03
    dgc_fraction: float = 0.01


@dataclass
class TaskSection:
    model: str = "logistic"
    n_features: int = 10
    n_classes: int = 4
    hidden: int = 32
    l2: float = 1e-3
    separation: float = 4.0
    n_train: int = 20000
    n_test: int = 2000
    partition: str = "iid"
    samples_min: int = 0
    samples_max: int = 0
    classes_per_client: int = 0
    csv: str = ""
    test_csv: str = ""


@dataclass
class NetSection:
    mean_speed: float = 1.4e6
    std_fraction: float = 0.1
    floor: float = 0.0  # 0 means mean_speed / 10


@dataclass
class OutputSection:
    timing: bool = False


@dataclass
class VerifySection:
    d: int = 1_000_000
    h: int = 4


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    fedavg: FedAvgSection = field(default_factory=FedAvgSection)
    lr: LrSection = field(default_factory=LrSection)
    codec: CodecSection = field(default_factory=CodecSection)
    task: TaskSection = field(default_factory=TaskSection)
    net: NetSection = field(default_factory=NetSection)
    output: OutputSection = field(default_factory=OutputSection)
    verify: VerifySection = field(default_factory=VerifySection)

    @property
    def downlink(self) -> str:
        if self.codec.downlink == "auto":
            return AUTO_DOWNLINK[self.codec.uplink]
        return self.codec.downlink

    @property
    def n_rounds(self) -> int:
        return self.fedavg.total_iterations // self.fedavg.local_steps

    def validate(self) -> ExperimentConfig:
        f, c = self.fedavg, self.codec
        target = self.experiment.target_accuracy
        # a target above 1 is allowed and simply never reached
        if target is not None and not (target >= 0 and target != float("inf")):
            raise InvalidConfig("experiment.target_accuracy must be a finite number >= 0")
        if f.n_clients < 1 or not 1 <= f.participants <= f.n_clients:
            raise InvalidConfig("need 1 <= fedavg.participants <= fedavg.n_clients")
        if f.local_steps < 1 or f.batch_size < 1 or f.total_iterations < 0:
            raise InvalidConfig("local_steps and batch_size must be >= 1, total_iterations >= 0")
        if f.total_iterations % f.local_steps:
            raise InvalidConfig("fedavg.total_iterations must be a multiple of fedavg.local_steps")
        if f.participation not in ("partial", "full"):
            raise InvalidConfig("fedavg.participation must be 'partial' or 'full'")
        if c.uplink not in CODECS:
            raise InvalidConfig(f"codec.uplink must be one of {CODECS}")
        if c.downlink != "auto" and c.downlink not in CODECS:
            raise InvalidConfig(f"codec.downlink must be 'auto' or one of {CODECS}")
        if not c.z_u or min(c.z_u) < 2 or c.z_d < 2 or c.bmucsc_z < 2:
            raise InvalidConfig("centroid counts (z_u, z_d, bmucsc_z) must be >= 2")
        if max(c.z_u + (c.z_d, c.bmucsc_z)) > 65535:
            raise InvalidConfig("centroid counts must fit in 16 bits")
        if self.task.model not in ("logistic", "mlp"):
            raise InvalidConfig("task.model must be 'logistic' or 'mlp'")
        if self.task.partition not in ("iid", "noniid"):
            raise InvalidConfig("task.partition must be 'iid' or 'noniid'")
        if self.net.mean_speed <= 0 or not 0 <= self.net.std_fraction < 1:
            raise InvalidConfig("net.mean_speed > 0 and 0 <= net.std_fraction < 1 required")
        if self.verify.d < 1 or self.verify.h < 1:
            raise InvalidConfig("verify.d and verify.h must be >= 1")
        return self

    # -- dotted-key access --------------------------------------------------

    def to_flat(self) -> dict:
        out = {}
        for sec in dataclasses.fields(self):
            for fld in dataclasses.fields(getattr(self, sec.name)):
                val = getattr(getattr(self, sec.name), fld.name)
                out[f"{sec.name}.{fld.name}"] = list(val) if isinstance(val, tuple) else val
        return out

    def set(self, key: str, raw):
        sec_name, _, name = key.partition(".")
        sec = getattr(self, sec_name, None)
        if sec is None or not dataclasses.is_dataclass(sec) or name not in _field_types(type(sec)):
            raise InvalidConfig(f"unknown config key {key!r}")
        setattr(sec, name, _coerce(key, raw, _field_types(type(sec))[name]))

    def content_hash(self) -> str:
        """Git blob hash of the canonical JSON form; independent of key order."""
        body = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(key, raw, tp):
    if not isinstance(raw, str):
        if tp == typing.Tuple[int, ...] and isinstance(raw, (list, tuple)):
            return tuple(int(v) for v in raw)
        if tp == typing.Tuple[int, ...] and isinstance(raw, int):
            return (raw,)
        return raw
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(text)
            return low in ("true", "1", "yes", "on")
        if tp is int:
            return int(float(text)) if "e" in text.lower() else int(text)
        if tp is float:
            return float(text)
        if tp == typing.Optional[float]:
            return None if text.lower() in ("", "none", "null") else float(text)
        if tp == typing.Tuple[int, ...]:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise InvalidConfig(f"bad value {raw!r} for {key}") from exc


def parse_overrides(pairs) -> list[tuple[str, str]]:
    out = []
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise InvalidConfig(f"override {item!r} is not key=value")
        out.append((key.strip(), value))
    return out


def loads(text: str, overrides=()) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfig(str(exc)) from exc
    cfg = ExperimentConfig()
    for sec in cp.sections():
        for name, value in cp.items(sec):
            cfg.set(f"{sec}.{name}", value)
    for key, value in overrides:
        cfg.set(key, value)
    return cfg.validate()


def load(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    return loads(text, overrides)


def from_flat(flat: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for key, value in flat.items():
        cfg.set(key, value)
    return cfg.validate()
