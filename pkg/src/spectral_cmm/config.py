"""Experiment configuration: dataclass sections, TOML round-trip and overrides."""

import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .cmm import HparamGrid
from .contrastive import TrainConfig
from .errors import InvalidInput

SEED_ENV = "SPECTRAL_CMM_SEED"


@dataclass
class DataSection:
    dgp: str = "npiv"  # npiv | proxy
    rho: float = 0.7
    d: int = 1
    d_ex: int = 32
    n: int = 4000  # total rows; one half learns features, the other fits the estimator
    test_factor: float = 5.0  # test rows = test_factor * n / 2
    train_fraction: float = 0.8  # of each half; the rest is validation
    path: str = ""  # load an existing dataset directory instead of generating


@dataclass
class KernelSection:
    recipe: str = "eq9prime"  # eq9prime | alg1
    alpha_prime: str = "plus1"  # plus1 (alpha + 1) | one
    overlap: str = "auto"  # auto | none | product


@dataclass
class EstimatorSection:
    alphas: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 3.0])
    lambdas: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    nus: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    bw_x: list = field(default_factory=lambda: [0.5, 1.0, 1.5])
    bw_z: list = field(default_factory=lambda: [1.0, 2.0, 3.0])
    base_rule: str = "fixed"  # fixed | rate
    base_value: float = 1e-2

    def grid(self, base_lambda, base_nu=None):
        return HparamGrid(tuple(self.alphas), tuple(self.lambdas), tuple(self.nus),
                          tuple(self.bw_x), tuple(self.bw_z), base_lambda,
                          base_lambda if base_nu is None else base_nu)


@dataclass
class SpectralSection:
    J_grid: list = field(default_factory=lambda: [10, 20, 30])
    hidden: list = field(default_factory=lambda: [50, 50, 50])
    dropout: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 512
    max_epochs: int = 200
    patience: int = 20
    cov_penalty: float = 0.0
    cov_split: float = 0.0

    def train_config(self, seed):
        return TrainConfig(tuple(self.J_grid), tuple(self.hidden), self.dropout, self.lr,
                           self.weight_decay, self.batch_size, self.max_epochs, self.patience,
                           self.cov_penalty, seed, self.cov_split)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    methods: list = field(default_factory=lambda: ["learned", "rbf"])
    data: DataSection = field(default_factory=DataSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)

    def to_dict(self):
        return asdict(self)

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        return _build(cls, doc or {})

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def with_env(self, environ=None):
        environ = os.environ if environ is None else environ
        if environ.get(SEED_ENV, "") != "":
            try:
                self.seed = int(environ[SEED_ENV])
            except ValueError as exc:
                raise InvalidInput(f"{SEED_ENV} must be an integer") from exc
        return self

    def validate(self):
        if self.data.dgp not in ("npiv", "proxy"):
            raise InvalidInput(f"unknown data-generating process {self.data.dgp!r}")
        if self.data.n < 4:
            raise InvalidInput("n must be at least 4")
        if not 0 < self.data.train_fraction < 1:
            raise InvalidInput("train_fraction must lie in (0, 1)")
        if self.kernel.recipe not in ("eq9prime", "alg1"):
            raise InvalidInput(f"unknown kernel recipe {self.kernel.recipe!r}")
        if self.kernel.alpha_prime not in ("plus1", "one"):
            raise InvalidInput("alpha_prime must be 'plus1' or 'one'")
        for m in self.methods:
            if m not in ("learned", "rbf"):
                raise InvalidInput(f"unknown method {m!r}")
        self.spectral.train_config(self.seed).validate()
        return self


def _build(cls, doc):
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise InvalidInput(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in doc.items():
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), value) if is_dataclass(current) else value
    return cls(**kwargs)
