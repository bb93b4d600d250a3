"""Run configuration: one INI file with sections mirroring the experiment pieces.

Overrides use ``section.key=value``.  Validation raises ``ConfigError`` with a
one-line reason.
"""
import configparser
import dataclasses
import json
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .data import SeriesSpec, ToySpec
from .errors import ConfigError, FeasibilityError
from .processes import DiffusionConfig, Mode
from .scorenet import config_hash
from .variational import FKLossConfig, SAState

TASKS = ("toy", "gaussian", "series")
SAMPLER_NAMES = ("em", "aboba", "pf_euler", "pf_heun")


@dataclass
class RunSection:
    task: str = "toy"
    seed: int = 0
    out_dir: str = "runs/default"


@dataclass
class DiffusionSection:
    preset: str = ""
    mode: str = "CLD"
    beta: float = 5.0
    gamma: float = 2.0
    damping_ratio: float = 1.0
    horizon: float = 1.0
    grid_size: int = 125
    eps_feasible: float = 1e-3
    beta_schedule: str = "constant"
    beta_min: float = 0.1


@dataclass
class GaussianSection:
    variances: tuple = (1.0, 64.0)
    n_points: int = 10_000


@dataclass
class ScorenetSection:
    hidden: tuple = (128, 128, 128)
    n_time_features: int = 16
    score_lr: float = 3e-4
    batch_size: int = 256
    ema_beta: float = 0.9999
    weighting: str = "noise"
    stages: int = 10
    steps_per_stage: int = 1000


@dataclass
class SASection:
    eta0: float = 3e-6
    alpha: float = 0.75
    decay: float = 1.0
    zeta: float = 1.0
    estimator: str = "feynman_kac"
    samples_per_stage: int = 2048
    nodes_per_stage: int = 0
    sign: float = 1.0
    sampler: str = "em"


@dataclass
class SampleSection:
    sampler: str = "em"
    n_samples: int = 10_000
    keep_path: bool = False
    path_samples: int = 1000


@dataclass
class EvalSection:
    metrics: tuple = ("pmf_rmse",)
    n_reference: int = 100_000
    bins: int = 50
    axis: int = 0


@dataclass
class ForecastSection:
    encoder_hidden: int = 64
    encoder_out: int = 16
    n_paths: int = 100
    sampler: str = "pf_heun"
    n_origins: int = 10
    train_fraction: float = 0.8


SECTIONS = {
    "run": RunSection,
    "diffusion": DiffusionSection,
    "data": ToySpec,
    "gaussian": GaussianSection,
    "series": SeriesSpec,
    "scorenet": ScorenetSection,
    "sa": SASection,
    "sample": SampleSection,
    "eval": EvalSection,
    "forecast": ForecastSection,
}

# sections that determine the trained model (and therefore the checkpoint hash)
MODEL_SECTIONS = ("run", "diffusion", "data", "gaussian", "series", "scorenet", "sa", "forecast")


def _coerce(raw, default, name):
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(float(raw)) if float(raw).is_integer() else int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in str(raw).split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {name}={raw!r} as {type(default).__name__}") from None


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    data: ToySpec = field(default_factory=ToySpec)
    gaussian: GaussianSection = field(default_factory=GaussianSection)
    series: SeriesSpec = field(default_factory=SeriesSpec)
    scorenet: ScorenetSection = field(default_factory=ScorenetSection)
    sa: SASection = field(default_factory=SASection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    forecast: ForecastSection = field(default_factory=ForecastSection)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_mapping(cls, mapping, overrides=()):
        values = {name: {} for name in SECTIONS}
        for sec, items in mapping.items():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            values[sec].update(items)
        for ov in overrides:
            key, sep, val = ov.partition("=")
            sec, dot, opt = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {ov!r} must look like section.key=value")
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}] in override {ov!r}")
            values[sec][opt] = val
        built = {}
        for sec, klass in SECTIONS.items():
            defaults = klass()
            known = {f.name: f for f in fields(klass)}
            kw = {}
            for opt, raw in values[sec].items():
                if opt not in known:
                    raise ConfigError(f"unknown option {sec}.{opt}")
                kw[opt] = _coerce(raw, getattr(defaults, opt), f"{sec}.{opt}")
            built[sec] = dataclasses.replace(defaults, **kw) if kw else defaults
        cfg = cls(**built)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()):
        mapping = {}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}".splitlines()[0]) from exc
            mapping = {s: dict(parser.items(s)) for s in parser.sections()}
        return cls.from_mapping(mapping, overrides)

    # -- derived objects ---------------------------------------------------

    def diffusion_config(self):
        d = self.diffusion
        if d.preset:
            # explicit non-default fields override the preset
            defaults = DiffusionSection()
            kw = {f.name: getattr(d, f.name) for f in fields(d)
                  if f.name != "preset" and getattr(d, f.name) != getattr(defaults, f.name)}
            cfg = DiffusionConfig.preset(d.preset, **kw)
        else:
            kw = {f.name: getattr(d, f.name) for f in fields(d) if f.name != "preset"}
            cfg = DiffusionConfig(**kw)
        cfg.validate()
        return cfg

    def sa_state(self):
        return SAState(eta0=self.sa.eta0, alpha=self.sa.alpha, decay=self.sa.decay)

    def fk_config(self):
        return FKLossConfig(zeta=self.sa.zeta, estimator=self.sa.estimator,
                            samples_per_stage=self.sa.samples_per_stage,
                            nodes_per_stage=self.sa.nodes_per_stage, sign=self.sa.sign)

    # -- validation --------------------------------------------------------

    def validate(self):
        if self.run.task not in TASKS:
            raise ConfigError(f"run.task must be one of {TASKS} (got {self.run.task!r})")
        try:
            Mode(self.diffusion.mode)
        except ValueError:
            raise ConfigError(f"unknown diffusion mode {self.diffusion.mode!r}") from None
        try:
            self.diffusion_config()
        except (ValueError, FeasibilityError) as exc:
            raise ConfigError(str(exc)) from exc
        self.sa_state()
        self.fk_config()
        if self.run.task == "toy":
            self.data.validate()
        if self.run.task == "series":
            self.series.validate()
        if self.run.task == "gaussian":
            if not self.gaussian.variances or any(v <= 0 for v in self.gaussian.variances):
                raise ConfigError("gaussian.variances must be a nonempty list of positive numbers")
        for name, s in (("sample.sampler", self.sample.sampler), ("forecast.sampler", self.forecast.sampler)):
            if s not in SAMPLER_NAMES:
                raise ConfigError(f"{name} must be one of {SAMPLER_NAMES} (got {s!r})")
        if self.sa.sampler not in ("em", "aboba"):
            raise ConfigError(f"sa.sampler must be em or aboba (got {self.sa.sampler!r})")
        sn = self.scorenet
        if sn.weighting not in ("score", "noise"):
            raise ConfigError(f"scorenet.weighting must be score or noise (got {sn.weighting!r})")
        if not 0 <= sn.ema_beta < 1:
            raise ConfigError(f"scorenet.ema_beta must lie in [0, 1) (got {sn.ema_beta})")
        if sn.batch_size < 1 or sn.stages < 1 or sn.steps_per_stage < 0 or not sn.hidden:
            raise ConfigError("scorenet batch_size/stages must be >= 1, steps_per_stage >= 0, hidden nonempty")
        if not sn.score_lr >= 0:
            raise ConfigError("scorenet.score_lr must be >= 0")
        if self.sample.n_samples < 1:
            raise ConfigError("sample.n_samples must be >= 1")
        if self.forecast.n_paths < 1 or self.forecast.n_origins < 1:
            raise ConfigError("forecast.n_paths and forecast.n_origins must be >= 1")
        if not 0 < self.forecast.train_fraction < 1:
            raise ConfigError("forecast.train_fraction must lie in (0, 1)")
        return self

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec)}
        return out

    def model_hash(self):
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "out_dir"}
        return config_hash({k: d[k] for k in MODEL_SECTIONS})

    def write_ini(self, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name, items in self.to_dict().items():
            parser[name] = {k: ",".join(str(x) for x in v) if isinstance(v, list) else str(v) for k, v in items.items()}
        with open(path, "w") as fh:
            parser.write(fh)


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    if hasattr(v, "value"):
        return v.value
    return v


def version_string():
    """Package version, plus ``git describe`` when run inside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_manifest(out_dir, cfg):
    """Config snapshot, version string, seed and config hash for a run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_ini(out / "config.ini")
    manifest = {"version": version_string(), "seed": cfg.run.seed, "config_hash": cfg.model_hash(),
                "task": cfg.run.task}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
