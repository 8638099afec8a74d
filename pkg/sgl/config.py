"""config.py

Experiment configuration files.

A configuration is a YAML document with the sections ``experiment``,
``target``, ``sde``, ``model``, ``train``, ``theory`` and ``output``. Values are
resolved in this order, later ones winning:

- the defaults of the dataclasses below
- the configuration file
- ``section.key=value`` overrides, with values read as YAML scalars
- the explicit command-line flags ``--out``, ``--seed`` and ``--workers``

"""


import dataclasses
import logging

from dataclasses import dataclass, field

import numpy as np
import yaml

from sgl.errors import ConfigError, SglError
from sgl.sde import LinearSde
from sgl.targets import GaussianMixture, symmetric_mixture
from sgl.theory import BoundConstants
from sgl.training import TrainConfig


logger = logging.getLogger(__name__)

EXPERIMENTS = ("kl-dynamics", "modes-shift", "capacity-sweep", "bounds", "mc-gap", "verify")
MODEL_KINDS = ("random_feature", "swish_mlp")
MODEL_INITS = ("default", "least-squares")


@dataclass(frozen=True)
class ExperimentSection:
    """What to run and how to sweep it.

    Parameters
    ------------
    kind: str
        the experiment, one of ``EXPERIMENTS``.
    seed: int
        the master seed every run seed is split from.
    workers: int
        the number of parallel runs of a sweep.
    runs: int
        the number of repeated runs with independent seeds.
    mu_list: tuple(float)
        the mode distances of ``modes-shift``.
    m_list: tuple(int)
        the widths of ``capacity-sweep`` and ``mc-gap``.
    snapshot_epochs: tuple(int)
        the epochs whose model densities are saved.
    smoothing_window: int
        the moving-average width of the early-stopping detector.
    patience: int
        the rise length of the early-stopping detector.
    kl_criterion: float
        the KL below which a run generalizes.
    kl_at_epoch: int
        the epoch whose KL is compared across widths.
    n_samples: int
        the number of samples drawn from trained models.
    include_slow: bool
        lets ``verify`` run the properties that train networks.
    """

    kind: str = "kl-dynamics"
    seed: int = 0
    workers: int = 1
    runs: int = 1
    mu_list: tuple = (3.0, 15.0)
    m_list: tuple = (2, 8, 32, 128, 512)
    snapshot_epochs: tuple = (100, 1000, 1900)
    smoothing_window: int = 25
    patience: int = 10
    kl_criterion: float = 0.1
    kl_at_epoch: int = 1000
    n_samples: int = 2000
    include_slow: bool = False

    def __post_init__(self):
        if self.kind not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment '{self.kind}', expected one of {EXPERIMENTS}")

        if self.workers < 1 or self.runs < 1:
            raise ConfigError("workers and runs must be at least 1")


@dataclass(frozen=True)
class TargetSection:
    """The target mixture: explicit ``modes``, or the symmetric pair at
    ``-mu`` and ``mu``."""

    mu: float = 3.0
    variance: float = 1.0
    q: float = 0.5
    modes: tuple = ()

    def mixture(self, mu: float = None):
        if self.modes and mu is None:
            return GaussianMixture(
                weights=tuple(mode[0] for mode in self.modes),
                means=tuple(mode[1] for mode in self.modes),
                variances=tuple(mode[2] for mode in self.modes),
            )

        return symmetric_mixture(self.mu if mu is None else mu, self.variance, self.q)


@dataclass(frozen=True)
class SdeSection:
    preset: str = "ou"
    horizon_T: float = 3.0
    sigma: float = 1.0
    table_t: tuple = ()
    table_f: tuple = ()
    table_g: tuple = ()

    def __post_init__(self):
        self.build()

    def build(self):
        return LinearSde(**dataclasses.asdict(self))


@dataclass(frozen=True)
class ModelSection:
    """The score network: ``width`` is ``m`` for random features and ``h``
    for the Swish network.

    ``x_scale`` divides the spatial input of the Swish network; ``None`` uses
    the dataset std clamped to at least 1.
    """

    kind: str = "swish_mlp"
    width: int = 128
    d_e: int = 4
    init: str = "default"
    n_mc: int = 20000
    x_scale: float = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"Unknown model kind '{self.kind}', expected one of {MODEL_KINDS}")

        if self.init not in MODEL_INITS:
            raise ConfigError(f"Unknown model init '{self.init}', expected one of {MODEL_INITS}")

        if self.init == "least-squares" and self.kind != "random_feature":
            raise ConfigError("Least-squares initialization needs a random_feature model")

        if self.x_scale is not None and not self.x_scale > 0:
            raise ConfigError(f"x_scale must be positive, got {self.x_scale}")


@dataclass(frozen=True)
class TheorySection:
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    c5: float = 1.0
    poly_mu_degree: int = 6
    m: int = 1000
    n: int = 1000
    tau_min: float = 1.0
    tau_max: float = 1000.0
    tau_points: int = 200
    m_ref: int = 2**14
    n_mc: int = 4096
    feature_seed: int = 0

    def constants(self):
        return BoundConstants(self.c1, self.c2, self.c3, self.c4, self.c5, self.poly_mu_degree)

    def tau_grid(self):
        return np.geomspace(self.tau_min, self.tau_max, self.tau_points)


@dataclass(frozen=True)
class OutputSection:
    out_dir: str = "out"


SECTIONS = {
    "experiment": ExperimentSection,
    "target": TargetSection,
    "sde": SdeSection,
    "model": ModelSection,
    "train": TrainConfig,
    "theory": TheorySection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete, serializable experiment description."""

    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    target: TargetSection = field(default_factory=TargetSection)
    sde: SdeSection = field(default_factory=SdeSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    theory: TheorySection = field(default_factory=TheorySection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self):
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def replace(self, section: str, **changes):
        """A copy with some keys of one section changed."""
        updated = dataclasses.replace(getattr(self, section), **changes)

        return dataclasses.replace(self, **{section: updated})

    @property
    def out_dir(self):
        return self.output.out_dir


def _plain(value):
    """Tuples to lists, recursively, for YAML."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}

    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]

    return value


def _frozen(value):
    """Lists to tuples, recursively."""
    if isinstance(value, list):
        return tuple(_frozen(item) for item in value)

    return value


def _modes(modes):
    """Mode entries as ``(q, mu, var)`` triples; mappings with those keys are
    accepted too."""
    triples = list()

    for mode in modes or ():
        try:
            if isinstance(mode, dict):
                mode = (mode["q"], mode["mu"], mode.get("var", 1.0))

            q, mu, var = (float(value) for value in mode)

        except (KeyError, TypeError, ValueError) as error:
            raise ConfigError(f"Target mode {mode} is not a (q, mu, var) entry") from error

        triples.append((q, mu, var))

    return tuple(triples)


def _build_section(name: str, data):
    section = SECTIONS[name]

    if data is None:
        data = dict()

    if not isinstance(data, dict):
        raise ConfigError(f"Section '{name}' must be a mapping, got {type(data).__name__}")

    known = {item.name for item in dataclasses.fields(section)}
    unknown = sorted(set(data) - known)

    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {unknown}")

    values = {key: _frozen(item) for key, item in data.items()}

    if name == "target" and "modes" in data:
        values["modes"] = _modes(data["modes"])

    try:
        return section(**values)

    except ConfigError:
        raise

    except (SglError, TypeError, ValueError) as error:
        raise ConfigError(f"Invalid section '{name}': {error}") from error


def from_dict(data: dict):
    """Builds a config from nested mappings, rejecting unknown sections and
    keys."""
    data = dict() if data is None else data

    if not isinstance(data, dict):
        raise ConfigError("A configuration must be a mapping of sections")

    unknown = sorted(set(data) - set(SECTIONS))

    if unknown:
        raise ConfigError(f"Unknown configuration sections: {unknown}")

    return ExperimentConfig(**{name: _build_section(name, data.get(name)) for name in SECTIONS})


def parse_config(text: str):
    try:
        data = yaml.safe_load(text)

    except yaml.YAMLError as error:
        raise ConfigError(f"Configuration is not valid YAML: {error}") from error

    return from_dict(data)


def serialize_config(config: ExperimentConfig):
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def apply_overrides(data: dict, overrides):
    """Applies ``section.key=value`` strings to nested mappings in place."""
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Override '{override}' is not of the form section.key=value")

        path, raw = override.split("=", 1)
        keys = path.strip().split(".")

        if len(keys) != 2:
            raise ConfigError(f"Override key '{path}' must be section.key")

        section, key = keys

        try:
            value = yaml.safe_load(raw)

        except yaml.YAMLError as error:
            raise ConfigError(f"Override value '{raw}' is not valid YAML") from error

        current = data.get(section) or dict()
        current[key] = value
        data[section] = current

    return data


def load_config(filepath: str = None, overrides=(), out_dir: str = None, seed: int = None, workers: int = None, kind: str = None):
    """Reads a configuration file and applies overrides and flags.

    Parameters
    ------------
    filepath: str
        the YAML file; ``None`` starts from the defaults.
    overrides: list(str)
        ``section.key=value`` strings.
    out_dir: str
        replaces ``output.out_dir``.
    seed: int
        replaces ``experiment.seed``.
    workers: int
        replaces ``experiment.workers``.
    kind: str
        replaces ``experiment.kind``.

    Returns
    ---------
    ExperimentConfig
        the resolved configuration.
    """
    data = dict()

    if filepath is not None:
        try:
            with open(filepath, "r", encoding="utf-8") as file:
                data = yaml.safe_load(file) or dict()

        except OSError as error:
            raise ConfigError(f"Cannot read configuration '{filepath}': {error}") from error

        except yaml.YAMLError as error:
            raise ConfigError(f"Configuration '{filepath}' is not valid YAML: {error}") from error

    apply_overrides(data, overrides)

    flags = {
        ("output", "out_dir"): out_dir,
        ("experiment", "seed"): seed,
        ("experiment", "workers"): workers,
        ("experiment", "kind"): kind,
    }

    for (section, key), value in flags.items():
        if value is not None:
            data.setdefault(section, dict())
            data[section] = data[section] or dict()
            data[section][key] = value

    return from_dict(data)


def run_seed(master: int, index: int, *streams):
    """The 64-bit seed of run ``index``, split from the master seed.

    Extra ``streams`` keys split one run further, for example into data,
    noise and initialization seeds.
    """
    sequence = np.random.SeedSequence(entropy=master, spawn_key=(index, *streams))

    return int(sequence.generate_state(1, dtype=np.uint64)[0])
