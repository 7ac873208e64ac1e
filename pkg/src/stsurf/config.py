"""Flat ``key=value`` run configuration covering model and training knobs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .kinet_unit import KinetConfig
from .network import BackboneConfig, TrainConfig


@dataclass
class RunConfig:
    # kinematic units
    reduce_ratio: float = 0.5
    group_dim: int = 4
    dt: int = 1
    dr: float = 0.5
    out_dim: int = 64
    k_max: int = 32
    # backbone
    centroids: tuple = (512, 128)
    radii: tuple = (0.2, 0.4)
    nsample: tuple = (32, 32)
    mlps: tuple = ((32, 64), (64, 128))
    # training
    epochs_static: int = 30
    epochs_temporal: int = 30
    lr: float = 1e-3
    batch_size: int = 16
    optimizer: str = "adam"
    clip_norm: float = 10.0
    # data
    frames: int = 8
    points: int = 256
    # neighbor cap for fit-normals / refine (0: uncapped; the network uses k_max)
    normals_k_max: int = 0
    # bench a lone kinematic unit with this many input features (0: whole model)
    unit_static_dim: int = 0

    def kinet(self, ablation=None) -> KinetConfig:
        kc = KinetConfig(self.reduce_ratio, self.group_dim, self.dt, self.dr, self.out_dim, self.k_max)
        if ablation == "no-weight":
            kc.use_weights = False
        elif ablation == "no-normal":
            kc.use_normals = False
            kc.use_weights = False
        elif ablation is not None:
            raise ConfigError(f"unknown ablation {ablation!r}")
        return kc

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.centroids, self.radii, self.nsample, self.mlps)

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(self.epochs_static, self.epochs_temporal, self.lr, self.batch_size,
                           seed, self.optimizer, self.clip_norm)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name, raw):
    default = _FIELDS[name].default
    try:
        if name == "mlps":
            return tuple(tuple(int(w) for w in grp.split(",")) for grp in raw.split(";"))
        if isinstance(default, tuple):
            cast = float if isinstance(default[0], float) else int
            return tuple(cast(v) for v in raw.split(","))
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def _format_value(v):
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return ";".join(",".join(str(w) for w in grp) for grp in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    """Apply ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    values = dataclasses.asdict(base or RunConfig())
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={_format_value(v)}\n" for k, v in dataclasses.asdict(cfg).items())
