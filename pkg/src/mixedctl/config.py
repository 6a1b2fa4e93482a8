"""Experiment configuration: YAML files with nested sections, validated in one pass.

Every section and its defaults are listed in ``DEFAULTS``; a minimal file only
needs ``kind``. Data entries are closed-form expressions in ``x`` and ``t``
(see :mod:`mixedctl.expressions`), plain numbers, or ``{csv: path}`` with a
``value`` column. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .expressions import Expression, ExpressionError

KINDS = ("operators", "elliptic", "parabolic", "spectrum", "control", "gradcheck", "sweep")
VERY_WEAK_S_MAX = 0.75

DEFAULTS = {
    "kind": None,
    "name": None,
    "seed": 0,
    "out": None,
    "s": 0.5,
    "geometry": {"x_left": 0.0, "x_right": 1.0, "n_interior": 64, "collar_width": 0.5},
    "time": {"T": 1.0, "n_steps": 50},
    "scheme": {"theta": 1.0},
    "data": {"f": "0", "g1": "0", "g2": "0", "psi0": "0", "eta": None},
    "cost": {"variant": "j1", "beta": 1.0, "target": "0"},
    "bounds": {"u1": [None, None], "u2": [None, None]},
    "solver": {"tol": 1e-8, "max_iters": 2000, "init": "zero"},
    "spectrum": {"k": 6, "trials": 100},
    "gradcheck": {"variants": ["j1", "j2"], "s_values": [0.25, 0.5, 0.75], "probes": 2,
                  "eps": 1e-5, "threshold": 1e-4},
    "output": {"trajectory_layout": "long", "export_matrices": False},
    "sweep": {"workers": 2, "experiments": []},
}


class ConfigError(ValueError):
    """All validation problems found in one config, one message per line."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    kind: str
    name: str | None
    seed: int
    out: str | None
    s: float
    geometry: dict
    time: dict
    scheme: dict
    data: dict
    cost: dict
    bounds: dict
    solver: dict
    spectrum: dict
    gradcheck: dict
    output: dict
    sweep: dict
    base_dir: str = "."
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {key: copy.deepcopy(getattr(self, key)) for key in DEFAULTS}

    def expression(self, section: str, key: str):
        """Parsed entry: an :class:`Expression`, a CSV path, or ``None``."""
        value = getattr(self, section)[key]
        if value is None:
            return None
        if isinstance(value, dict):
            return Path(self.base_dir) / value["csv"]
        return Expression(value)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class _Checker:
    def __init__(self, base_dir: Path):
        self.errors: list[str] = []
        self.base_dir = base_dir

    def number(self, where, value, lo=None, hi=None, lo_open=True, hi_open=True, integer=False):
        kind = "an integer" if integer else "a number"
        if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not isinstance(value, int)):
            self.errors.append(f"{where}: expected {kind}, got {value!r}")
            return
        if not math.isfinite(value):
            self.errors.append(f"{where}: must be finite, got {value!r}")
            return
        bad_lo = lo is not None and (value <= lo if lo_open else value < lo)
        bad_hi = hi is not None and (value >= hi if hi_open else value > hi)
        if bad_lo or bad_hi:
            left = "(" if lo_open else "["
            right = ")" if hi_open else "]"
            lo_s = "-inf" if lo is None else f"{lo:g}"
            hi_s = "inf" if hi is None else f"{hi:g}"
            self.errors.append(f"{where}: {value!r} outside admissible range {left}{lo_s}, {hi_s}{right}")

    def choice(self, where, value, options):
        if value not in options:
            self.errors.append(f"{where}: {value!r} is not one of {', '.join(map(str, options))}")

    def data(self, where, value, allow_none=False):
        if value is None:
            if not allow_none:
                self.errors.append(f"{where}: a value is required")
            return
        if isinstance(value, dict):
            if set(value) != {"csv"} or not isinstance(value["csv"], str):
                self.errors.append(f"{where}: a file reference must look like {{csv: path}}")
            elif not (self.base_dir / value["csv"]).is_file():
                self.errors.append(f"{where}: file {value['csv']!r} does not exist")
            return
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            self.errors.append(f"{where}: expected an expression string, number or {{csv: path}}")
            return
        if isinstance(value, str) and value.strip().endswith(".csv"):
            self.errors.append(f"{where}: file references are written {{csv: {value.strip()}}}")
            return
        try:
            Expression(value)
        except ExpressionError as exc:
            self.errors.append(f"{where}: {exc}")

    def bound_pair(self, where, value):
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            self.errors.append(f"{where}: expected [lower, upper] (null for unbounded)")
            return
        lo, hi = value
        for label, v in (("lower", lo), ("upper", hi)):
            if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                self.errors.append(f"{where}: {label} bound must be a number or null")
                return
        if lo is not None and hi is not None and lo > hi:
            self.errors.append(f"{where}: lower bound {lo} exceeds upper bound {hi}")


def _unknown_keys(raw: dict, template: dict, prefix: str) -> list[str]:
    errors = []
    for key, value in raw.items():
        where = f"{prefix}{key}"
        if key not in template:
            errors.append(f"{where}: unknown key")
        elif isinstance(template[key], dict) and key != "sweep":
            if not isinstance(value, dict):
                errors.append(f"{where}: expected a section (mapping)")
            else:
                errors.extend(_unknown_keys(value, template[key], where + "."))
    return errors


def _known(raw: dict, template: dict) -> dict:
    """``raw`` without unknown keys or malformed sections, so the remaining checks can still run."""
    out = {}
    for key, value in raw.items():
        if key not in template:
            continue
        if isinstance(template[key], dict):
            if not isinstance(value, dict):
                continue
            value = value if key == "sweep" else _known(value, template[key])
        out[key] = value
    return out


def validate(raw: dict, base_dir: Path | str = ".", prefix: str = "") -> ExperimentConfig:
    """Merge ``raw`` over the defaults and check everything, raising one :class:`ConfigError`."""
    base_dir = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError([f"{prefix or 'config'}: top level must be a mapping"])
    errors = _unknown_keys(raw, DEFAULTS, prefix)
    if isinstance(raw.get("sweep"), dict):
        errors.extend(f"{prefix}sweep.{k}: unknown key" for k in raw["sweep"] if k not in DEFAULTS["sweep"])
    cfg = _merge(DEFAULTS, _known(raw, DEFAULTS))
    chk = _Checker(base_dir)
    chk.errors.extend(errors)
    p = prefix

    if cfg["kind"] is None:
        chk.errors.append(f"{p}kind: required, one of {', '.join(KINDS)}")
    else:
        chk.choice(f"{p}kind", cfg["kind"], KINDS)
    if cfg["name"] is not None and not isinstance(cfg["name"], str):
        chk.errors.append(f"{p}name: expected a string")
    chk.number(f"{p}seed", cfg["seed"], lo=0, hi=2 ** 64, lo_open=False, integer=True)
    if cfg["out"] is not None and not isinstance(cfg["out"], str):
        chk.errors.append(f"{p}out: expected a directory path")
    chk.number(f"{p}s", cfg["s"], lo=0, hi=1)

    g = cfg["geometry"]
    chk.number(f"{p}geometry.x_left", g["x_left"])
    chk.number(f"{p}geometry.x_right", g["x_right"])
    ends = (g["x_left"], g["x_right"])
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in ends) and ends[1] <= ends[0]:
        chk.errors.append(f"{p}geometry.x_right: must exceed x_left ({ends[0]})")
    chk.number(f"{p}geometry.n_interior", g["n_interior"], lo=4, hi=None, lo_open=False, integer=True)
    chk.number(f"{p}geometry.collar_width", g["collar_width"], lo=0)
    chk.number(f"{p}time.T", cfg["time"]["T"], lo=0)
    chk.number(f"{p}time.n_steps", cfg["time"]["n_steps"], lo=1, lo_open=False, integer=True)
    chk.number(f"{p}scheme.theta", cfg["scheme"]["theta"], lo=0.5, hi=1, lo_open=False, hi_open=False)

    for key in ("f", "g1", "g2", "psi0"):
        chk.data(f"{p}data.{key}", cfg["data"][key])
    chk.data(f"{p}data.eta", cfg["data"]["eta"], allow_none=True)

    c = cfg["cost"]
    chk.choice(f"{p}cost.variant", c["variant"], ("j1", "j2"))
    chk.number(f"{p}cost.beta", c["beta"], lo=0)
    chk.data(f"{p}cost.target", c["target"])
    chk.bound_pair(f"{p}bounds.u1", cfg["bounds"]["u1"])
    chk.bound_pair(f"{p}bounds.u2", cfg["bounds"]["u2"])

    sv = cfg["solver"]
    chk.number(f"{p}solver.tol", sv["tol"], lo=0)
    chk.number(f"{p}solver.max_iters", sv["max_iters"], lo=0, lo_open=False, integer=True)
    chk.choice(f"{p}solver.init", sv["init"], ("zero", "random"))

    chk.number(f"{p}spectrum.k", cfg["spectrum"]["k"], lo=1, lo_open=False, integer=True)
    chk.number(f"{p}spectrum.trials", cfg["spectrum"]["trials"], lo=0, lo_open=False, integer=True)

    gc = cfg["gradcheck"]
    if not isinstance(gc["variants"], list) or not gc["variants"]:
        chk.errors.append(f"{p}gradcheck.variants: expected a non-empty list")
    else:
        for i, v in enumerate(gc["variants"]):
            chk.choice(f"{p}gradcheck.variants[{i}]", v, ("j1", "j2"))
    if not isinstance(gc["s_values"], list) or not gc["s_values"]:
        chk.errors.append(f"{p}gradcheck.s_values: expected a non-empty list")
    else:
        for i, v in enumerate(gc["s_values"]):
            chk.number(f"{p}gradcheck.s_values[{i}]", v, lo=0, hi=1)
    chk.number(f"{p}gradcheck.probes", gc["probes"], lo=1, lo_open=False, integer=True)
    chk.number(f"{p}gradcheck.eps", gc["eps"], lo=0)
    chk.number(f"{p}gradcheck.threshold", gc["threshold"], lo=0)

    chk.choice(f"{p}output.trajectory_layout", cfg["output"]["trajectory_layout"], ("long", "frames"))
    if not isinstance(cfg["output"]["export_matrices"], bool):
        chk.errors.append(f"{p}output.export_matrices: expected true or false")

    sw = cfg["sweep"]
    chk.number(f"{p}sweep.workers", sw["workers"], lo=1, lo_open=False, integer=True)
    if cfg["kind"] == "sweep":
        if not isinstance(sw["experiments"], list) or not sw["experiments"]:
            chk.errors.append(f"{p}sweep.experiments: a sweep needs a non-empty list of experiments")
        else:
            names = set()
            for i, exp in enumerate(sw["experiments"]):
                where = f"{p}sweep.experiments[{i}]"
                if not isinstance(exp, dict) or not isinstance(exp.get("name"), str):
                    chk.errors.append(f"{where}: each experiment needs a string 'name'")
                    continue
                if exp["name"] in names:
                    chk.errors.append(f"{where}.name: duplicate name {exp['name']!r}")
                names.add(exp["name"])
                if exp.get("kind") == "sweep":
                    chk.errors.append(f"{where}.kind: sweeps cannot nest")
                    continue
                try:
                    validate(_merge(_sweep_base(raw), exp), base_dir, prefix=where + ".")
                except ConfigError as exc:
                    chk.errors.extend(exc.errors)

    if chk.errors:
        raise ConfigError(chk.errors)
    warnings = []
    s_values = [cfg["s"]]
    if cfg["kind"] == "gradcheck":
        s_values = gc["s_values"]
    if any(s > VERY_WEAK_S_MAX for s in s_values):
        warnings.append(f"s > {VERY_WEAK_S_MAX}: outside the range where very-weak (transposition) "
                        "solutions are covered by the theory; results are reported without that guarantee")
    return ExperimentConfig(**cfg, base_dir=str(base_dir), warnings=warnings)


def _sweep_base(raw: dict) -> dict:
    return {k: v for k, v in raw.items() if k not in ("kind", "sweep", "name", "out")}


def sweep_members(cfg: ExperimentConfig) -> list[dict]:
    """Raw configs for each sweep member, shared sections merged under the member's overrides."""
    base = _sweep_base(cfg.to_dict())
    return [_merge(base, exp) for exp in cfg.sweep["experiments"]]


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    return validate(raw if raw is not None else {}, path.parent)
