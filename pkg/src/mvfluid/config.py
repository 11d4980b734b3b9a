"""Run configuration: TOML parsing, eager validation, environment
overrides, canonical serialization and the run manifest.

A configuration is a small tree of tables; every key has a default, so
an empty file is a valid (if uninteresting) run.  Environment variables
of the form ``MVF_<SECTION>_<KEY>`` override file values, and the
canonical serializer guarantees that parse -> serialize -> parse is the
identity on the resolved configuration.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

from .grid import MvfError

ENV_PREFIX = "MVF_"


class ConfigError(MvfError):
    """Invalid configuration; carries the offending key and, when the key
    can be located in the source text, its line number."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        loc = ""
        if line is not None:
            loc = f" (line {line})"
        elif key is not None:
            loc = f" (key {key})"
        super().__init__(message + loc)
        self.key = key
        self.line = line


# (type, default, validator) per key; validators raise ConfigError
def _pos(name):
    def check(v):
        if not v > 0:
            raise ConfigError(f"{name} must be positive, got {v}", key=name)
    return check


def _tol(name):
    def check(v):
        if not (0.0 < v < 1.0):
            raise ConfigError(f"{name} must lie in (0, 1), got {v}", key=name)
    return check


def _nonneg(name):
    def check(v):
        if v < 0:
            raise ConfigError(f"{name} must be nonnegative, got {v}", key=name)
    return check


_SCHEMA: dict[str, dict[str, tuple]] = {
    "grid": {
        "nx": (int, 32, _pos("grid.nx")),
        "ny": (int, 32, _pos("grid.ny")),
        "lx": (float, 1.0, _pos("grid.lx")),
        "ly": (float, 1.0, _pos("grid.ly")),
    },
    "time": {
        "T": (float, 0.1, _pos("time.T")),
        "dt": (float, 1e-3, _pos("time.dt")),
        "save_stride": (int, 1, _pos("time.save_stride")),
    },
    "params": {
        "nu": (float, 1.0, _pos("params.nu")),
        "kappa": (float, 1.0, _pos("params.kappa")),
        "alpha": (float, 1.0, _pos("params.alpha")),
    },
    "initial": {
        "preset": (str, "zero", None),
        "amplitude": (float, 0.5, None),
        "m_direction": (list, [0.0, 0.0, 1.0], None),
        "snapshot": (str, "", None),
    },
    "control": {
        "kind": (str, "field", None),
        "preset": (str, "zero", None),
        "constant": (list, [0.0, 0.0, 0.0], None),
        "amplitude": (float, 0.5, None),
        "samples": (str, "", None),
        "coil_basis": (str, "bumps", None),
        "coil_count": (int, 2, _pos("control.coil_count")),
        "coil_u0": (float, 0.0, None),
        "coil_lower": (float, -1.0, None),
        "coil_upper": (float, 1.0, None),
    },
    "cost": {
        "a1": (float, 0.0, _nonneg("cost.a1")),
        "a2": (float, 0.0, _nonneg("cost.a2")),
        "a3": (float, 0.0, _nonneg("cost.a3")),
        "lambda": (float, 1.0, _pos("cost.lambda")),
        "target_preset": (str, "zero", None),
        "m_target": (list, [0.0, 0.0, 1.0], None),
        "target_snapshot": (str, "", None),
    },
    "solver": {
        "poisson_tol": (float, 1e-10, _tol("solver.poisson_tol")),
        "max_cg_iters": (int, 20000, _pos("solver.max_cg_iters")),
    },
    "optimizer": {
        "max_iter": (int, 50, _pos("optimizer.max_iter")),
        "grad_tol": (float, 1e-6, _tol("optimizer.grad_tol")),
        "armijo_c": (float, 1e-4, _tol("optimizer.armijo_c")),
        "armijo_shrink": (float, 0.5, _tol("optimizer.armijo_shrink")),
        "step_init": (float, 1.0, _pos("optimizer.step_init")),
        "step_max": (float, 100.0, _pos("optimizer.step_max")),
    },
    "check": {
        "eps": (list, [1e-1, 1e-2, 1e-3, 1e-4], None),
        "directions": (int, 3, _pos("check.directions")),
        "amplitude": (float, 1.0, _pos("check.amplitude")),
        "slope_min": (float, 1.6, None),
        "slope_max": (float, 2.4, None),
        "corrupt_adjoint": (bool, False, None),
    },
    "stability": {
        "eps": (list, [1e-1, 1e-2, 1e-3], None),
        "amplitude": (float, 1.0, _pos("stability.amplitude")),
    },
    "report": {
        "trajectory_dir": (str, "", None),
    },
    "output": {
        "directory": (str, "out", None),
        "figures": (bool, True, None),
    },
}

_ROOT_KEYS = {"seed": (int, 42, _nonneg("seed"))}

_PATH_KEYS = (
    ("initial", "snapshot"),
    ("control", "samples"),
    ("cost", "target_snapshot"),
)


def _coerce(value, typ, keyname):
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is bool and isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    if typ is list and isinstance(value, list):
        return [float(v) if isinstance(v, (int, float)) and not isinstance(v, bool) else v
                for v in value]
    raise ConfigError(f"{keyname} expects {typ.__name__}, got {type(value).__name__}", key=keyname)


def _find_line(text: str | None, key: str) -> int | None:
    if text is None:
        return None
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if stripped.strip().startswith(key):
            return i
    return None


class RunConfig:
    """Validated configuration tree with attribute-style access per section."""

    def __init__(self, data: dict, source_text: str | None = None,
                 base_dir: str = "."):
        self._data: dict = {}
        self._base_dir = base_dir
        known = set(_SCHEMA) | set(_ROOT_KEYS)
        for section in data:
            if section not in known:
                raise ConfigError(f"unknown configuration section or key {section!r}",
                                  key=section, line=_find_line(source_text, section))
        for key, (typ, default, check) in _ROOT_KEYS.items():
            val = _coerce(data.get(key, default), typ, key)
            if check:
                check(val)
            self._data[key] = val
        for section, keys in _SCHEMA.items():
            raw = data.get(section, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"section {section!r} must be a table", key=section,
                                  line=_find_line(source_text, section))
            for k in raw:
                if k not in keys:
                    raise ConfigError(f"unknown key {section}.{k}", key=f"{section}.{k}",
                                      line=_find_line(source_text, k))
            table = {}
            for k, (typ, default, check) in keys.items():
                try:
                    val = _coerce(raw.get(k, default), typ, f"{section}.{k}")
                    if check:
                        check(val)
                except ConfigError as err:
                    if err.line is None:
                        err.line = _find_line(source_text, k)
                        raise ConfigError(str(err).split(" (key")[0], key=err.key,
                                          line=_find_line(source_text, k)) from None
                    raise
                table[k] = val
            self._data[section] = table
        self._cross_validate(source_text)

    def _cross_validate(self, source_text: str | None):
        t = self._data["time"]
        n = round(t["T"] / t["dt"])
        if abs(n * t["dt"] - t["T"]) > 1e-9 * max(t["T"], 1.0):
            raise ConfigError(
                f"time.T={t['T']} is not an integer multiple of time.dt={t['dt']}",
                key="time.T", line=_find_line(source_text, "T"))
        for section, key in _PATH_KEYS:
            path = self._data[section][key]
            if path and not os.path.exists(os.path.join(self._base_dir, path)):
                raise ConfigError(f"{section}.{key} references missing file {path!r}",
                                  key=f"{section}.{key}", line=_find_line(source_text, key))
        if self._data["control"]["kind"] not in ("field", "coils"):
            raise ConfigError("control.kind must be 'field' or 'coils'", key="control.kind",
                              line=_find_line(source_text, "kind"))
        if self._data["control"]["coil_lower"] > self._data["control"]["coil_upper"]:
            raise ConfigError("control.coil_lower must not exceed control.coil_upper",
                              key="control.coil_lower")

    def __getitem__(self, section: str):
        return self._data[section]

    @property
    def seed(self) -> int:
        return self._data["seed"]

    def resolve_path(self, path: str) -> str:
        return os.path.join(self._base_dir, path)

    @property
    def nsteps(self) -> int:
        return round(self._data["time"]["T"] / self._data["time"]["dt"])

    def as_dict(self) -> dict:
        return json.loads(json.dumps(self._data))

    # -- canonical serialization ------------------------------------------

    @staticmethod
    def _fmt_value(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (int,)):
            return str(v)
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(RunConfig._fmt_value(x) for x in v) + "]"
        raise ConfigError(f"cannot serialize value {v!r}")

    def serialize(self) -> str:
        lines = []
        for key in sorted(_ROOT_KEYS):
            lines.append(f"{key} = {self._fmt_value(self._data[key])}")
        for section in sorted(_SCHEMA):
            lines.append("")
            lines.append(f"[{section}]")
            for k in sorted(_SCHEMA[section]):
                lines.append(f"{k} = {self._fmt_value(self._data[section][k])}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


def apply_env_overrides(data: dict, environ=None) -> dict:
    """Fold MVF_SECTION_KEY environment variables into the raw config dict."""
    environ = os.environ if environ is None else environ
    sections = sorted(_SCHEMA, key=len, reverse=True)
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest in _ROOT_KEYS:
            data[rest] = _parse_env_value(raw)
            continue
        for section in sections:
            if rest.startswith(section + "_"):
                key = rest[len(section) + 1:]
                data.setdefault(section, {})[key] = _parse_env_value(raw)
                break
        else:
            raise ConfigError(f"environment override {name} matches no known section")
    return data


def _parse_env_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def load_config(path: str | os.PathLike | None, use_env: bool = True) -> RunConfig:
    """Read, override and validate a configuration file (or pure defaults)."""
    text = None
    data: dict = {}
    base = "."
    if path is not None:
        with open(path, "rb") as fh:
            raw = fh.read()
        text = raw.decode("utf-8")
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"config parse error: {err}") from err
        base = os.path.dirname(os.path.abspath(path))
    if use_env:
        data = apply_env_overrides(data)
    return RunConfig(data, source_text=text, base_dir=base)


def parse_config_text(text: str, base_dir: str = ".") -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"config parse error: {err}") from err
    return RunConfig(data, source_text=text, base_dir=base_dir)


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def write_manifest(outdir: str, config: RunConfig, artifacts: list[str],
                   status: str, started: float, version: str) -> str:
    """Atomically record what a run produced; every listed path must exist."""
    for rel in artifacts:
        if not os.path.exists(os.path.join(outdir, rel)):
            raise MvfError(f"manifest lists missing artifact {rel}")
    manifest = {
        "config_sha256": config.digest(),
        "tool_version": version,
        "started_unix": started,
        "finished_unix": time.time(),
        "artifacts": sorted(artifacts),
        "status": status,
    }
    path = os.path.join(outdir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def fmt_float(x: float) -> str:
    """Canonical CSV number format: 17 significant digits."""
    return f"{x:.17g}"
