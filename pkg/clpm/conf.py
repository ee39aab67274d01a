"""
Run configuration: CLPM_DEFAULTS from the Django settings, then a JSON config file, then explicit command-line flags.
The merged configuration is echoed into every output directory so a run can be repeated from it.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

from django.conf import settings
from django.core.serializers.json import DjangoJSONEncoder

from .evaluation import SCORERS
from .exceptions import ConfigError
from .inference import Hyperparams

log = logging.getLogger("clpm.conf")


@dataclass
class RunConfig:
    # model and training
    d: int = 2
    K: int = 15
    tau: float = 1.0
    tau0: float = None
    epochs: int = 500
    lr_phi: float = 0.01
    lr_beta: float = 1e-5
    riemann_R: int = 10
    kind: str = "euclidean"
    negatives: int = None
    batch: int = None
    negatives_per_interval: bool = False
    elbo_samples: int = 1
    seed: int = 0
    threads: int = 1
    strict_deterministic: bool = False
    log_every: int = 50
    # data
    events: str = None
    directed: bool = False
    test_frac: float = 0.1
    val_frac: float = 0.0
    # evaluation
    model: str = None
    scorers: list = field(default_factory=lambda: list(SCORERS))
    draws: int = 100
    track_node: str = "0"
    lsdm_iterations: int = 1000
    split: str = None
    # scoring
    pairs: str = None
    scorer: str = "tgne"
    # simulation
    n: int = 60
    intra_rate: float = 8.0
    inter_rate: float = 0.3
    output: str = "."

    def __post_init__(self):
        if isinstance(self.scorers, str):
            self.scorers = [s.strip() for s in self.scorers.split(",") if s.strip()]
        unknown = [s for s in self.scorers if s not in SCORERS]
        if unknown:
            raise ConfigError(f"unknown scorer(s) {', '.join(unknown)}; expected {', '.join(SCORERS)}")
        if self.scorer not in ("tgne", "tgne-predictive"):
            raise ConfigError(f"pair scoring supports tgne and tgne-predictive, got {self.scorer!r}")
        if self.draws < 2:
            raise ConfigError(f"draws must be at least 2, got {self.draws}")
        if self.track_node is not None:
            self.track_node = str(self.track_node)

    def to_hyperparams(self):
        values = {f.name: getattr(self, f.name) for f in fields(Hyperparams)}
        if self.strict_deterministic:
            values["threads"] = 1
        return Hyperparams(**values)

    def as_dict(self):
        return asdict(self)


def _known(values, source):
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {source}: {', '.join(unknown)}")
    return values


def read_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            values = json.load(fh)
    except OSError as ose:
        raise ConfigError(f"cannot read config {path}: {ose.strerror}")
    except ValueError as ve:
        raise ConfigError(f"config {path} is not valid JSON: {ve}")
    if not isinstance(values, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return _known(values, path)


def build_run_config(config_path=None, **flags):
    """CLPM_DEFAULTS < config file < flags; flags that are None were not given"""
    values = dict(_known(getattr(settings, "CLPM_DEFAULTS", {}), "CLPM_DEFAULTS"))
    if config_path:
        values.update(read_config_file(config_path))
    values.update(_known({k: v for k, v in flags.items() if v is not None}, "command-line flags"))
    try:
        run = RunConfig(**values)
        run.to_hyperparams()
    except TypeError as te:
        raise ConfigError(f"invalid configuration: {te}")
    log.debug(f"run configuration: {run.as_dict()}")
    return run


def write_config(run, directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run.as_dict(), fh, cls=DjangoJSONEncoder, indent=1, sort_keys=True)
    return path
