"""Flat ``section.key = value`` run configuration.

Every recognised key is listed in :data:`SCHEMA` with its default; anything
else is an error so that a typo never silently falls back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .boss import BossConfig
from .core import ContractError


class ConfigError(ContractError):
    pass


def _opt_int(s):
    s = str(s).strip()
    return None if s.lower() in ("none", "full", "") else int(s)


def _int_list(s):
    if isinstance(s, (list, tuple)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)


def _float_list(s):
    if isinstance(s, (list, tuple)):
        return tuple(float(v) for v in s)
    return tuple(float(v) for v in str(s).replace(" ", "").split(",") if v)


def _str(s):
    return str(s).strip()


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key: (default, parser)
SCHEMA = {
    "task.id": ("neg-sphere-d8", _str),
    "data.n_raw": (1000, int),
    "data.keep_fraction": (0.4, float),
    "data.holdout_fraction": (0.2, float),
    "surrogate.hidden": ((64, 64), _int_list),
    "surrogate.activation": ("tanh", _str),
    "pretrain.epochs": (100, int),
    "pretrain.lr": (1e-2, float),
    "pretrain.batch_size": (64, _opt_int),
    "boss.mode": ("boss", _str),
    "boss.alpha": (0.1, float),
    "boss.lambda": (1e-3, float),
    "boss.m": (100, int),
    "boss.tau": (50, int),
    "boss.eta_omega": (1e-2, float),
    "boss.eta_phi": (1e-3, float),
    "boss.mu_init": (0.0, float),
    "boss.sigma_init": (1e-3, float),
    "boss.mu_lo": (-1e-3, float),
    "boss.mu_hi": (1e-3, float),
    "boss.sigma_lo": (1e-5, float),
    "boss.sigma_hi": (1e-2, float),
    "boss.delta_mode": ("taylor", _str),
    "boss.phi_grad_mode": ("taylor-hvp", _str),
    "boss.phi_epochs": (50, int),
    "boss.phi_lr": (1e-2, float),
    "boss.batch_size": (None, _opt_int),
    "boss.momentum": (0.0, float),
    "search.method": ("ga", _str),
    "search.K": (128, int),
    "search.steps": (50, int),
    "search.rel_step": (0.05, float),
    "search.ensemble_size": (2, int),
    "run.seeds": (tuple(range(8)), _int_list),
    "tune.key": ("boss.alpha", _str),
    "tune.values": ((0.01, 0.1, 1.0), _float_list),
}

_BOSS_KEYS = {
    "alpha": "alpha", "lambda": "lam", "m": "m", "tau": "tau", "eta_omega": "eta_omega",
    "eta_phi": "eta_phi", "mu_init": "mu_init", "sigma_init": "sigma_init", "mu_lo": "mu_lo",
    "mu_hi": "mu_hi", "sigma_lo": "sigma_lo", "sigma_hi": "sigma_hi", "mode": "mode",
    "delta_mode": "delta_mode", "phi_grad_mode": "phi_grad_mode", "phi_epochs": "phi_epochs",
    "phi_lr": "phi_lr", "batch_size": "batch_size", "momentum": "momentum",
}

SEARCH_METHODS = ("ga", "ens-min", "ens-mean")


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        resolved = {k: d for k, (d, _) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                resolved[k] = SCHEMA[k][1](v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k!r}: {v!r} ({exc})") from None
        object.__setattr__(self, "values", resolved)
        if resolved["search.method"] not in SEARCH_METHODS:
            raise ConfigError(f"search.method must be one of {SEARCH_METHODS}")
        if resolved["search.method"] != "ga" and resolved["search.ensemble_size"] < 2:
            raise ConfigError("search.ensemble_size must be >= 2 for ensemble search")
        if not resolved["run.seeds"]:
            raise ConfigError("run.seeds is empty")
        tk = resolved["tune.key"]
        if not tk.startswith("boss.") or SCHEMA.get(tk, (None, None))[1] not in (float, int):
            raise ConfigError(f"tune.key must name a numeric boss.* key, got {tk!r}")
        if not resolved["tune.values"]:
            raise ConfigError("tune.values is empty")
        self.boss  # validate

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **flat) -> "RunConfig":
        vals = dict(self.values)
        vals.update(flat)
        return RunConfig(vals)

    @property
    def boss(self) -> BossConfig:
        kw = {attr: self.values[f"boss.{k}"] for k, attr in _BOSS_KEYS.items()}
        return BossConfig(**kw)

    @property
    def seeds(self):
        return self.values["run.seeds"]

    def to_flat(self) -> dict:
        return {k: _fmt(v) for k, v in self.values.items()}

    def to_text(self) -> str:
        lines = []
        section = None
        for k, v in self.to_flat().items():
            sec = k.split(".")[0]
            if sec != section:
                if section is not None:
                    lines.append("")
                section = sec
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {k!r}")
        if k in out:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig(parse_config_text(fh.read()))
