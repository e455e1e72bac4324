"""Experiment configuration: strict JSON loading and variant resolution."""
import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

from . import data as D
from .continual import LOSS_TERMS, TrainConfig
from .errors import ConfigError

VARIANTS = {
    "full": (LOSS_TERMS, True),
    "ft": (("ce_n",), False),
    "ft_selfstyle": (("ce_n",), True),
    "no_kd_o": (("ce_n", "ce_o", "lws_n"), True),
    "no_style": (LOSS_TERMS, False),
}


def resolve_variant(name):
    """Return ``(loss terms, stylize)`` for a named variant or a loss mask.

    Masks join loss terms with ``+`` (``ce_n+lws_n``); a ``/nostyle`` suffix
    disables stylization.
    """
    if name in VARIANTS:
        terms, style = VARIANTS[name]
        return frozenset(terms), style
    body, _, suffix = name.partition("/")
    terms = [p.strip() for p in body.split("+") if p.strip()]
    bad = [p for p in terms if p not in LOSS_TERMS]
    if not terms or bad or suffix not in ("", "nostyle"):
        raise ConfigError(f"variant: unknown variant {name!r} (named: {sorted(VARIANTS)}, "
                          f"or a '+'-joined subset of {LOSS_TERMS})")
    if "ce_n" not in terms:
        raise ConfigError(f"variant: {name!r} must include ce_n")
    return frozenset(terms), suffix != "nostyle"


@dataclass
class ExperimentConfig:
    schedule: list = field(default_factory=lambda: [list(s) for s in D.DEFAULT_SCHEDULE.sets])
    domain_sequence: list = field(default_factory=lambda: [d.name for d in D.DEFAULT_DOMAINS])
    external_domain: object = D.EXTERNAL_DOMAIN.name
    h: int = 64
    w: int = 64
    n_train: int = 200
    n_eval: int = 50
    epochs: int = 15
    lr: float = 0.005
    beta: float = 0.01
    tau: float = 0.9
    topk_frac: float = 0.66
    lambdas: list = field(default_factory=lambda: [10.0, 10.0, 10.0])
    seed: int = 1234
    variant: str = "full"
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.schedule, list) or not self.schedule:
            raise ConfigError("schedule: expected a non-empty list of class lists")
        try:
            self.class_schedule()
        except ConfigError as exc:
            raise ConfigError(f"schedule: {exc}") from None
        if len(self.domain_sequence) != len(self.schedule):
            raise ConfigError(f"domain_sequence: length {len(self.domain_sequence)} != "
                              f"schedule length {len(self.schedule)}")
        for i, d in enumerate(self.domain_sequence):
            _domain(d, f"domain_sequence[{i}]")
        if self.external_domain is not None:
            _domain(self.external_domain, "external_domain")
        for name in ("h", "w"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 32 or v & (v - 1):
                raise ConfigError(f"{name}: must be a power of two >= 32, got {v!r}")
        for name in ("n_train", "n_eval", "epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {v!r}")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta: must lie in (0, 1), got {self.beta}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau: must lie in (0, 1], got {self.tau}")
        if not 0 <= self.topk_frac <= 1:
            raise ConfigError(f"topk_frac: must lie in [0, 1], got {self.topk_frac}")
        if self.lr < 0:
            raise ConfigError(f"lr: must be >= 0, got {self.lr}")
        if len(self.lambdas) != 3 or any(l < 0 for l in self.lambdas):
            raise ConfigError(f"lambdas: expected three nonnegative weights, got {self.lambdas}")
        resolve_variant(self.variant)

    def class_schedule(self):
        lookup = {v: k for k, v in D.CLASS_NAMES.items()}
        sets = []
        for s in self.schedule:
            ids = []
            for c in s:
                if isinstance(c, str):
                    if c not in lookup:
                        raise ConfigError(f"unknown class name {c!r}")
                    c = lookup[c]
                ids.append(int(c))
            sets.append(tuple(ids))
        sched = D.ClassSchedule(tuple(sets))
        missing = set(D.REAL_CLASSES) - set(sched.all_classes())
        if missing:
            raise ConfigError(f"classes {sorted(missing)} are generated but never scheduled")
        return sched

    def domains(self):
        return [_domain(d, "domain_sequence") for d in self.domain_sequence]

    def external(self):
        return None if self.external_domain is None else _domain(self.external_domain, "external_domain")

    def train_config(self, cache_views=False):
        terms, stylize = resolve_variant(self.variant)
        return TrainConfig(epochs=self.epochs, lr=self.lr, lambdas=tuple(self.lambdas),
                           losses=terms, stylize=stylize, tau=self.tau,
                           topk_frac=self.topk_frac, seed=self.seed, cache_views=cache_views)

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)


def _domain(d, path):
    if isinstance(d, D.DomainSpec):
        return d
    if isinstance(d, str):
        if d not in D.BUILTIN_DOMAINS:
            raise ConfigError(f"{path}: unknown domain {d!r} (built-in: {sorted(D.BUILTIN_DOMAINS)})")
        return D.BUILTIN_DOMAINS[d]
    if isinstance(d, dict):
        try:
            return D.DomainSpec.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad domain spec ({exc})") from None
    raise ConfigError(f"{path}: expected a domain name or object, got {type(d).__name__}")


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    return config_from_dict(d)


def default_config():
    text = resources.files("stylecl").joinpath("benchmark.json").read_text()
    return config_from_dict(json.loads(text))
