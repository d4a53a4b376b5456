"""Run configuration: TOML file + ``--set key=value`` overrides.

Example::

    seed = 0

    [target]
    kind = "logistic"        # gaussian | logistic | probit | skewed | custom-grid
    n = 8                    # synthetic data when X is not given
    d = 1
    prior_precision = 1.0

    [method]
    name = "ep_classical"    # laplace | gvb | alpha | ep_classical | ep_smoothed
    schedule = "sequential"

    [engine]
    mode = "auto"
"""

from __future__ import annotations

import copy
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .approximators import Schedule, parse_method
from .engine import Engine
from .errors import ConfigError
from .gaussian import GaussianMoment
from .targets import (demo_logistic_data, factorize, make_gaussian_target, make_grid_target,
                      make_logistic_regression_target, make_probit_target, make_skewed_target, temper)

SEED_ENV = "SDI_SEED"

_SECTIONS = {
    "target": {"kind", "mu", "sigma", "n_sites", "X", "X_csv", "y", "y_csv", "n", "d", "theta_true",
               "prior_precision", "prior_site", "k_temper", "slopes", "offsets", "grid", "psi", "grid_csv",
               "convex"},
    "method": {"name", "alpha", "schedule", "subsets", "damping", "max_sweeps", "tol", "workers"},
    "init": {"mu", "sigma"},
    "engine": {"mode", "nodes", "order", "mc_seed", "mc_draws", "inflation", "refine_inflation", "budget"},
    "compare": {"methods"},
    "sweep": {"alphas", "tol"},
    "folk": {"k_list", "tol"},
    "output": {"kl", "timing"},
}
_TOP = {"seed", "output_dir"} | set(_SECTIONS)
_KINDS = ("gaussian", "logistic", "probit", "skewed", "custom-grid")


def _decode_error(exc, text: str) -> ConfigError:
    line = getattr(exc, "lineno", None)
    key = None
    if line:
        lines = text.splitlines()
        for ln in range(min(line, len(lines)) - 1, -1, -1):
            m = re.match(r"\s*([A-Za-z0-9_.\-\"']+)\s*=", lines[ln])
            if m:
                key = m.group(1).strip("\"'")
                break
    where = f" (key {key!r})" if key else ""
    return ConfigError(f"malformed TOML{where}: {exc}")


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as a TOML literal when possible."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(raw.strip())


def validate(data: dict) -> None:
    for k, v in data.items():
        if k not in _TOP:
            raise ConfigError(f"unknown top-level key {k!r}")
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"{k!r} must be a table")
            for sub in v:
                if sub not in _SECTIONS[k]:
                    raise ConfigError(f"unknown key {k}.{sub}")
    kind = data.get("target", {}).get("kind")
    if kind is None:
        raise ConfigError("missing key target.kind")
    if kind not in _KINDS:
        raise ConfigError(f"target.kind must be one of {_KINDS}, got {kind!r}")


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_text(cls, text: str, overrides=(), base_dir: Path | None = None) -> "RunConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise _decode_error(exc, text) from None
        for o in overrides:
            apply_override(data, o)
        if SEED_ENV in os.environ:
            try:
                data["seed"] = int(os.environ[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer") from None
        validate(data)
        return cls(data, base_dir or Path.cwd())

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, overrides, path.resolve().parent)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.data)

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    @property
    def seed(self) -> int:
        return int(self.data.get("seed", 0))

    def _get(self, sec: str, key: str, default=None, cast=None):
        v = self.section(sec).get(key, default)
        if cast is None or v is None:
            return v
        try:
            return cast(v)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {sec}.{key}: {v!r}") from None

    def _array(self, sec, key, ndim):
        v = self.section(sec).get(key)
        if v is None:
            return None
        try:
            a = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(f"{sec}.{key} must be numeric") from None
        if a.ndim != ndim:
            raise ConfigError(f"{sec}.{key} must be a {ndim}-d array")
        return a

    def _csv(self, key):
        rel = self.section("target").get(key)
        if rel is None:
            return None
        path = Path(rel)
        if not path.is_absolute():
            path = self.base_dir / path
        try:
            return np.atleast_1d(np.loadtxt(path, delimiter=",", ndmin=1))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load target.{key} from {path}: {exc}") from None

    # -------------------------------------------------------------- builders

    def engine(self) -> Engine:
        e = self.section("engine")
        try:
            return Engine(mode=e.get("mode", "auto"), nodes=int(e.get("nodes", 4097)), order=int(e.get("order", 32)),
                          mc_draws=int(e.get("mc_draws", 2 ** 16)), mc_seed=int(e.get("mc_seed", self.seed)),
                          inflation=float(e.get("inflation", 2.0)),
                          refine_inflation=float(e.get("refine_inflation", 1.0)),
                          node_cap=int(e.get("budget", 2 ** 21)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad engine block: {exc}") from None

    def method(self) -> tuple[str, float | None]:
        name = self._get("method", "name", "gvb")
        try:
            name, alpha = parse_method(str(name))
        except ValueError as exc:
            raise ConfigError(f"method.name: {exc}") from None
        if alpha is None:
            alpha = self._get("method", "alpha", None, float)
        if name == "alpha" and (alpha is None or not 0 < alpha < 1):
            raise ConfigError("method.alpha must lie in (0, 1) for method alpha")
        return name, alpha

    def schedule(self) -> Schedule:
        m = self.section("method")
        subsets = m.get("subsets")
        try:
            return Schedule(kind=m.get("schedule", "custom" if subsets else "sequential"),
                            max_sweeps=int(m.get("max_sweeps", 200)),
                            damping=None if m.get("damping") is None else float(m["damping"]),
                            tol=float(m.get("tol", 1e-8)),
                            subsets=tuple(tuple(s) for s in subsets) if subsets else None,
                            workers=int(m.get("workers", 1)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"method schedule: {exc}") from None

    def init(self, d: int) -> GaussianMoment | None:
        mu = self._array("init", "mu", 1)
        sigma = self._array("init", "sigma", 2)
        if mu is None and sigma is None:
            return None
        mu = np.zeros(d) if mu is None else mu
        sigma = np.eye(d) if sigma is None else sigma
        try:
            return GaussianMoment(mu, sigma)
        except Exception as exc:
            raise ConfigError(f"init: {exc}") from None

    def target(self):
        t = self.section("target")
        kind = t["kind"]
        try:
            if kind == "gaussian":
                mu, sigma = self._array("target", "mu", 1), self._array("target", "sigma", 2)
                if mu is None or sigma is None:
                    raise ConfigError("gaussian target needs target.mu and target.sigma")
                base = make_gaussian_target(mu, sigma)
                target = factorize(base, int(t.get("n_sites", 1)))
            elif kind in ("logistic", "probit"):
                X = self._array("target", "X", 2)
                if X is None:
                    X = self._csv("X_csv")
                    if X is not None and X.ndim == 1:
                        X = X[:, None]
                y = self._array("target", "y", 1)
                if y is None:
                    y = self._csv("y_csv")
                if X is None:
                    n, d = int(t.get("n", 8)), int(t.get("d", 1))
                    theta_true = self._array("target", "theta_true", 1)
                    X, y = demo_logistic_data(n, d, seed=self.seed, theta_true=theta_true)
                elif y is None:
                    raise ConfigError("target.y (or y_csv) is required when X is given")
                make = make_logistic_regression_target if kind == "logistic" else make_probit_target
                target = make(X, y, float(t.get("prior_precision", 1.0)), bool(t.get("prior_site", False)))
            elif kind == "skewed":
                target = make_skewed_target(t.get("slopes", (2.0, -1.0, 3.0)), t.get("offsets", (0.5, 1.0, -2.0)))
            else:
                grid, psi = self._array("target", "grid", 1), self._array("target", "psi", 1)
                if grid is None:
                    tab = self._csv("grid_csv")
                    if tab is None or tab.ndim != 2 or tab.shape[1] != 2:
                        raise ConfigError("custom-grid target needs grid/psi arrays or a two-column grid_csv")
                    grid, psi = tab[:, 0], tab[:, 1]
                target = factorize(make_grid_target(grid, psi, bool(t.get("convex", False))))
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"target ({kind}): {exc}") from None
        k = int(t.get("k_temper", 1))
        return temper(target, k) if k > 1 else target

    def output_dir(self, cli_value=None) -> Path:
        v = cli_value or self.data.get("output_dir") or "sdi-output"
        return Path(v)


def config_from_dict(data: dict) -> RunConfig:
    """Build a config from a Python dict (validated the same way as files)."""
    return RunConfig.from_text(tomli_w.dumps(copy.deepcopy(data)))
