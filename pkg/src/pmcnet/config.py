"""Run configuration: a sectioned key-value text file with validation and a content digest.

Example::

    [data]
    source = builtin:ionosphere
    stratified = true

    [network]
    hidden_sizes = 5
    prior_variance = 1.0

    [sampler]
    variant = pmcnet
    M = 50
    K = 100
    T = 50
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .ais import PRESETS, SamplerConfig, constant_beta, harmonic_eta
from .errors import ConfigError

SOURCE_KINDS = ("control", "builtin", "libsvm", "csv")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class DataSection:
    source: str = "control"          # control | builtin:<name> | libsvm:<path> | csv:<path>
    n_features: int = 0              # libsvm only; 0 = infer
    target_column: str = "-1"        # csv only
    split_ratios: tuple[float, ...] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    stratified: bool = True
    standardize: bool = True
    control_n_train: int = 1600
    control_n_test: int = 400
    control_weight_std: float = 2.0
    control_labels: str = "threshold"
    control_input_dim: int = 3
    control_hidden: int = 3

    @property
    def kind(self) -> str:
        return self.source.split(":", 1)[0]

    @property
    def location(self) -> str:
        return self.source.split(":", 1)[1] if ":" in self.source else ""


@dataclass(frozen=True)
class NetworkSection:
    hidden_sizes: tuple[int, ...] = (3,)
    hidden_activation: str = "tanh"
    sigma: float = 1.0
    prior_variance: float = 1.0


@dataclass(frozen=True)
class InitSection:
    mode: str = "mle"
    epochs: int = 200
    step_size: float = 1e-2
    minibatch_size: int = 64


@dataclass(frozen=True)
class SamplerSection:
    variant: str = "pmcnet"
    M: int = 50
    K: int = 100
    T: int = 20
    sigma2: float = 1.0
    beta: float = 0.5
    eta: str = "harmonic"            # harmonic (1/t) or a constant in [0, 1]
    n_batches: int = 10
    max_trials: int = 20
    jitter_std: float = -1.0         # negative = default (0.05 * sigma)
    weight_normalization: str = "proposal"
    selection: str = "last_iteration"


@dataclass(frozen=True)
class TuningSection:
    log10_prior_variance: tuple[float, ...] = (-2.0, 2.0)
    golden_iterations: int = 6
    t_candidates: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70)
    tolerance: float = 0.005
    R: int = 100


@dataclass(frozen=True)
class EvaluationSection:
    R: int = 100
    ci_levels: tuple[float, ...] = (0.8, 0.95, 0.99)
    threshold: float = 0.5
    split: str = "test"
    histogram_samples: tuple[int, ...] = (0, 1, 2, 3)
    bins: int = 10


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    outdir: str = "runs"
    run_id: str = ""


SECTIONS = {"data": DataSection, "network": NetworkSection, "init": InitSection, "sampler": SamplerSection,
            "tuning": TuningSection, "evaluation": EvaluationSection, "run": RunSection}


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    init: InitSection = field(default_factory=InitSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    tuning: TuningSection = field(default_factory=TuningSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        validate(self)

    # -- digest -------------------------------------------------------------
    def training_dict(self) -> dict:
        """Fields that determine the trained posterior (evaluation and output location excluded)."""
        return {"data": asdict(self.data), "network": asdict(self.network), "init": asdict(self.init),
                "sampler": asdict(self.sampler), "seed": self.run.seed}

    @property
    def digest(self) -> str:
        blob = json.dumps(self.training_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def run_id(self) -> str:
        return self.run.run_id or f"{self.sampler.variant}-{self.digest}"

    def output_dir(self) -> Path:
        return Path(self.run.outdir) / self.run_id

    # -- conversions ----------------------------------------------------------
    def sampler_config(self, **overrides) -> SamplerConfig:
        s = self.sampler
        eta = harmonic_eta if s.eta == "harmonic" else _constant(float(s.eta))
        kw = dict(M=s.M, K=s.K, T=s.T, sigma2=s.sigma2, beta_schedule=constant_beta(s.beta), eta_schedule=eta,
                  n_batches=s.n_batches, max_trials=s.max_trials, seed=self.run.seed,
                  jitter_std=None if s.jitter_std < 0 else s.jitter_std,
                  weight_normalization=s.weight_normalization)
        kw.update(overrides)
        variant = kw.pop("variant", s.variant)
        return SamplerConfig.preset(variant, **kw)

    def with_updates(self, **sections) -> "RunConfig":
        """``with_updates(sampler={"T": 30})`` -> new validated config."""
        parts = {}
        for name, changes in sections.items():
            parts[name] = replace(getattr(self, name), **changes)
        return replace(self, **parts)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        lines = [f"# run configuration (digest {self.digest})"]
        import io

        buf = io.StringIO()
        cp.write(buf)
        return "\n".join(lines) + "\n" + buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())


class _constant:
    def __init__(self, value: float):
        self.value = value

    def __call__(self, t: int) -> float:
        return self.value


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(template, text: str):
    if isinstance(template, bool):
        return _bool(text)
    if isinstance(template, tuple):
        if template and isinstance(template[0], int):
            return _ints(text)
        return _floats(text)
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text.strip()


def from_ini_text(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    parts = {}
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = SECTIONS[name]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            try:
                kw[key] = _parse_value(getattr(defaults, key), raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{name}] {key}: {exc}") from None
        parts[name] = cls(**kw)
    return RunConfig(**parts)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return from_ini_text(text, str(path))


def validate(cfg: RunConfig) -> None:
    d, n, i, s, tu, ev = cfg.data, cfg.network, cfg.init, cfg.sampler, cfg.tuning, cfg.evaluation
    if d.kind not in SOURCE_KINDS:
        raise ConfigError(f"data source must start with one of {SOURCE_KINDS}, got {d.source!r}")
    if d.kind in ("builtin", "libsvm", "csv") and not d.location:
        raise ConfigError(f"data source {d.source!r} needs a name or path after ':'")
    if len(d.split_ratios) != 3 or any(r < 0 for r in d.split_ratios) or abs(sum(d.split_ratios) - 1) > 1e-9:
        raise ConfigError("split_ratios must be three non-negative numbers summing to 1")
    if d.control_labels not in ("threshold", "bernoulli"):
        raise ConfigError("control_labels must be 'threshold' or 'bernoulli'")
    if d.control_n_train < 1 or d.control_n_test < 1 or d.control_weight_std <= 0:
        raise ConfigError("control data set sizes must be positive and weight_std > 0")
    if n.hidden_activation not in ("tanh", "relu", "identity"):
        raise ConfigError("hidden_activation must be tanh, relu or identity")
    if any(h < 1 for h in n.hidden_sizes):
        raise ConfigError("hidden layer sizes must be positive")
    if n.sigma <= 0 or n.prior_variance <= 0:
        raise ConfigError("sigma and prior_variance must be positive")
    if i.mode not in ("mle", "map") or i.epochs < 1 or i.step_size <= 0 or i.minibatch_size < 1:
        raise ConfigError("init: mode must be mle/map and epochs, step_size, minibatch_size positive")
    if s.variant not in PRESETS:
        raise ConfigError(f"sampler variant must be one of {sorted(PRESETS)}")
    for name in ("M", "K", "T", "n_batches", "max_trials"):
        if getattr(s, name) < 1:
            raise ConfigError(f"sampler {name} must be a positive integer")
    if s.sigma2 <= 0 or not 0 < s.beta <= 1:
        raise ConfigError("sampler sigma2 must be positive and beta in (0, 1]")
    if s.eta != "harmonic":
        try:
            eta = float(s.eta)
        except ValueError:
            raise ConfigError("sampler eta must be 'harmonic' or a number in [0, 1]") from None
        if not 0 <= eta <= 1:
            raise ConfigError("sampler eta must lie in [0, 1]")
    if s.weight_normalization not in ("proposal", "global"):
        raise ConfigError("weight_normalization must be 'proposal' or 'global'")
    if s.selection not in ("last_iteration", "all_iterations"):
        raise ConfigError("selection must be last_iteration or all_iterations")
    if len(tu.log10_prior_variance) != 2 or tu.log10_prior_variance[0] >= tu.log10_prior_variance[1]:
        raise ConfigError("log10_prior_variance must be an increasing pair")
    if tu.golden_iterations < 0 or tu.tolerance < 0 or tu.R < 1:
        raise ConfigError("tuning: iterations and tolerance non-negative, R positive")
    if not tu.t_candidates or min(tu.t_candidates) < 1:
        raise ConfigError("t_candidates must be a non-empty list of positive integers")
    if ev.R < 1 or ev.bins < 1 or not 0 <= ev.threshold <= 1:
        raise ConfigError("evaluation: R and bins positive, threshold in [0, 1]")
    if any(not 0 < a < 1 for a in ev.ci_levels):
        raise ConfigError("ci_levels must lie in (0, 1)")
    if ev.split not in ("train", "validation", "test"):
        raise ConfigError("evaluation split must be train, validation or test")
