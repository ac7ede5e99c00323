"""Experiment configuration: a sectioned key-value file mapped onto frozen dataclasses.

Every section and key is optional; missing values take the desk-scale
defaults.  Unknown sections or keys are rejected with the offending line.

.. code-block:: ini

    [schedule]
    beta_min = 0.1
    beta_max = 20.0

    [mixture]
    preset = ring          ; or "custom" with weights/means/variances/class_ids
    n_components = 8

    [distill]
    loss = direct
    solver = heun
    N = 50

    [guidance]
    omega = 4
"""

import configparser
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import re

from .distill import DistillConfig
from .errors import ConfigError, PfodeError
from .mixture import GaussianMixture, ring_mixture
from .schedule import NoiseSchedule

__all__ = [
    "MixtureConfig",
    "TeacherConfig",
    "EvalConfig",
    "RunConfig",
    "parse_config",
    "parse_config_text",
    "serialize_config",
]


def _floats(text):
    return tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _ints(text):
    return tuple(int(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _rows(text):
    return tuple(_floats(row) for row in text.split("|") if row.strip())


@dataclass(frozen=True)
class MixtureConfig:
    preset: str = "ring"
    n_components: int = 8
    radius: float = 2.0
    variance: float = 0.01
    n_classes: int = 2
    weights: tuple = ()
    means: tuple = ()
    variances: tuple = ()
    class_ids: tuple = ()

    def __post_init__(self):
        if self.preset not in ("ring", "custom"):
            raise ConfigError(f"mixture preset must be 'ring' or 'custom', got {self.preset!r}")

    def build(self):
        if self.preset == "ring":
            if self.n_components < 1 or self.n_classes < 1 or self.variance <= 0:
                raise ConfigError("ring mixture needs positive component count, class count and variance")
            return ring_mixture(self.n_components, self.radius, self.variance, self.n_classes)
        return GaussianMixture(self.weights, self.means, self.variances, self.class_ids)


@dataclass(frozen=True)
class TeacherConfig:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 1e-3
    hidden: tuple = (128, 128, 128)
    num_frequencies: int = 8
    p_uncond: float = 0.1
    prior_skip: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("teacher needs steps >= 0, batch_size >= 1 and lr > 0")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")


@dataclass(frozen=True)
class EvalConfig:
    n_ode: int = 2000
    n_samples: int = 5000
    projections: int = 128

    def __post_init__(self):
        if min(self.n_ode, self.n_samples, self.projections) < 1:
            raise ConfigError("evaluation counts must be positive")


@dataclass(frozen=True)
class RunConfig:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    omega: float = 8.0
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if not self.omega >= 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.omega}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def with_cell(self, **kw):
        """Copy with distill fields (loss, solver, N) and/or omega, seed replaced."""
        top = {k: kw.pop(k) for k in ("omega", "seed") if k in kw}
        return replace(self, distill=self.distill.with_(**kw), **top)

    def resolved(self):
        """Everything that determines a run's numbers (not where it is written)."""
        return {
            "schedule": asdict(self.schedule),
            "mixture": asdict(self.mixture),
            "teacher": asdict(self.teacher),
            "distill": _distill_dict(self.distill),
            "omega": self.omega,
            "eval": asdict(self.eval),
            "seed": self.seed,
        }

    def teacher_key(self):
        d = self.resolved()
        return _digest({k: d[k] for k in ("schedule", "mixture", "teacher", "seed")})

    @property
    def run_id(self):
        return _digest(self.resolved())


def _digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _distill_dict(d):
    return {
        "loss": d.loss.value, "solver": d.solver.value, "N": d.N, "steps": d.steps,
        "batch_size": d.batch_size, "lr": d.lr, "ema_decay": d.ema_decay,
        "distance": "squared_l2", "weighting": "constant",
    }


def _only(allowed):
    def check(text):
        v = text.strip().lower()
        if v not in allowed:
            raise ValueError(f"only {', '.join(allowed)} supported")
        return v
    return check


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (parser, target field)
_SCHEMA = {
    "schedule": {"beta_min": float, "beta_max": float, "T": float, "sigma_floor": float},
    "mixture": {"preset": str.strip, "n_components": int, "radius": float, "variance": float,
                "n_classes": int, "weights": _floats, "means": _rows, "variances": _rows,
                "class_ids": _ints},
    "teacher": {"steps": int, "batch_size": int, "lr": float, "hidden": _ints,
                "num_frequencies": int, "p_uncond": float, "prior_skip": _bool},
    "distill": {"loss": str.strip, "solver": str.strip, "N": int, "steps": int, "batch_size": int,
                "lr": float, "ema_decay": float, "distance": _only(("squared_l2",)),
                "weighting": _only(("constant",))},
    "guidance": {"omega": float},
    "eval": {"n_ode": int, "n_samples": int, "projections": int},
    "run": {"seed": int, "out": str.strip, "workers": int},
}
_KEYS = {s: {k.lower(): k for k in keys} for s, keys in _SCHEMA.items()}


def _line_index(text):
    """(section, lower-case key) -> 1-based line number, plus section header lines."""
    where, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        where.setdefault((section, key), no)
    return where


def parse_config_text(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"malformed line in {source}", line=line) from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], line=exc.lineno) from exc
    where = _line_index(text)
    values = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", line=where.get((section, None)))
        for key, raw in parser.items(section):
            line = where.get((section, key))
            if key not in _KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", line=line)
            name = _KEYS[section][key]
            try:
                values.setdefault(section, {})[name] = (_SCHEMA[section][name](raw), line)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{name}: {exc}", line=line) from exc
    return _assemble(values)


def _assemble(values):
    def build(section, cls, defaults=None, **extra):
        got = values.get(section, {})
        kwargs = {k: v for k, (v, _) in got.items()}
        kwargs.update(extra)
        try:
            return cls(**({**(defaults or {}), **kwargs}))
        except PfodeError as exc:
            raise ConfigError(f"[{section}] {exc}", line=_culprit(cls, got)) from exc

    schedule = build("schedule", NoiseSchedule)
    mixture = build("mixture", MixtureConfig)
    teacher = build("teacher", TeacherConfig)
    distill = build("distill", _distill_from)
    evalc = build("eval", EvalConfig)
    guidance = values.get("guidance", {})
    run = values.get("run", {})
    try:
        cfg = RunConfig(
            schedule=schedule, mixture=mixture, teacher=teacher, distill=distill,
            omega=guidance.get("omega", (8.0, None))[0], eval=evalc,
            seed=run.get("seed", (0, None))[0], out=run.get("out", ("runs", None))[0],
            workers=run.get("workers", (1, None))[0],
        )
        cfg.mixture.build()
    except PfodeError as exc:
        lines = [ln for sec in ("guidance", "run", "mixture") for _, ln in values.get(sec, {}).values() if ln]
        raise ConfigError(str(exc), line=min(lines, default=None)) from exc
    return cfg


def _culprit(cls, got):
    """Line of the first key that is invalid on its own, else of the section's first key."""
    for name, (value, line) in sorted(got.items(), key=lambda kv: kv[1][1] or 0):
        try:
            cls(**{name: value})
        except PfodeError:
            return line
    return min((ln for _, ln in got.values() if ln), default=None)


def _distill_from(distance="squared_l2", weighting="constant", **kw):
    return DistillConfig(**kw)


def parse_config(path):
    """Read and validate a config file; a missing path is a config error."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text, source=str(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return " | ".join(" ".join(_fmt(x) for x in row) for row in v)
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize_config(cfg):
    """Config text that parses back to an equal :class:`RunConfig`."""
    sections = {
        "schedule": asdict(cfg.schedule),
        "mixture": {k: v for k, v in asdict(cfg.mixture).items() if v != () and
                    (cfg.mixture.preset == "ring") == (k in ("preset", "n_components", "radius",
                                                              "variance", "n_classes"))
                    or k == "preset"},
        "teacher": asdict(cfg.teacher),
        "distill": _distill_dict(cfg.distill),
        "guidance": {"omega": float(cfg.omega)},
        "eval": asdict(cfg.eval),
        "run": {"seed": cfg.seed, "out": cfg.out, "workers": cfg.workers},
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items.items())
        out.append("")
    return "\n".join(out)

