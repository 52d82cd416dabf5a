"""
TOML experiment configs.

A config with a [sweep] section describes a SweepSpec; without one it
describes a single seeded estimation (EstimateRequest). Example:

    [scenario]
    M = 64
    N = 12
    K = 4
    snr_db = 0.0

    [sweep]
    variable = "snr_db"
    values = [-10.0, 0.0, 10.0]
    trials = 200
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple, Union

import toml

from kronsbl.channel_sim import TRANSFORM_GAIN, ChannelScenario
from kronsbl.errors import ConfigError, ParameterError
from kronsbl.estimators import ESTIMATORS, ConvergencePolicy, ESblHyper, SblHyper
from kronsbl.experiments import SweepSpec

REQUIRED = object()

# section -> key -> (expected kind, default)
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    "scenario": {
        "M": ("int", REQUIRED),
        "N": ("int", REQUIRED),
        "K": ("int", REQUIRED),
        "snr_db": ("float", REQUIRED),
        "Q": ("int", None),
        "scatterers": ("int", 3),
        "seed": ("int", 0),
        "carrier_freq": ("float", 30e9),
        "range_min": ("float", 100.0),
        "range_max": ("float", 500.0),
        "angular_spread": ("float", math.pi / 6),
        "transform_gain": ("float", TRANSFORM_GAIN),
    },
    "hyper": {
        "nu": ("float", 1.0),
        "theta": ("float", 1e-2),
        "phi": ("float", 1e-2),
        "alpha": ("float", 0.0),
        "beta": ("float", 0.0),
    },
    "policy": {
        "tol": ("float", 1e-6),
        "max_iter": ("int", 500),
        "track_objective": ("bool", False),
    },
    "sweep": {
        "variable": ("str", REQUIRED),
        "values": ("list[float]", REQUIRED),
        "trials": ("int", 1000),
        "estimators": ("list[str]", sorted(ESTIMATORS)),
        "workers": ("int", 1),
        "nmse_mode": ("str", "ratio_of_means"),
        "timing": ("bool", False),
    },
    "estimate": {
        "estimators": ("list[str]", sorted(ESTIMATORS)),
    },
}


@dataclass(frozen=True)
class EstimateRequest:
    """One seeded channel realization estimated by each listed estimator."""

    scenario: ChannelScenario
    estimators: Tuple[str, ...] = tuple(sorted(ESTIMATORS))
    sbl_hyper: SblHyper = SblHyper()
    esbl_hyper: ESblHyper = ESblHyper()
    policy: ConvergencePolicy = ConvergencePolicy()

    def __post_init__(self):
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ParameterError(f"unknown estimators {unknown}, expected {sorted(ESTIMATORS)}")
        object.__setattr__(self, "estimators", tuple(sorted(set(self.estimators))))


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(key: str, value: Any, kind: str) -> Any:
    if kind == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind == "float":
        if _is_number(value):
            return float(value)
    elif kind == "bool":
        if isinstance(value, bool):
            return value
    elif kind == "str":
        if isinstance(value, str):
            return value
    elif kind == "list[float]":
        if isinstance(value, list) and all(_is_number(v) for v in value):
            return [float(v) if isinstance(v, float) else v for v in value]
    elif kind == "list[str]":
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
    raise ConfigError(f"{key}: expected {kind}, got {type(value).__name__} {value!r}", key=key)


def _read_sections(doc: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    for name, section in doc.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section '{name}'", key=name)
        if not isinstance(section, dict):
            raise ConfigError(f"'{name}' must be a section", key=name)

    sections: Dict[str, Dict[str, Any]] = {}
    for name, keys in SCHEMA.items():
        present = name in doc
        raw = doc.get(name, {})
        for key in raw:
            if key not in keys:
                raise ConfigError(f"unknown key '{name}.{key}'", key=f"{name}.{key}")
        values = {}
        for key, (kind, default) in keys.items():
            dotted = f"{name}.{key}"
            if key in raw:
                values[key] = _coerce(dotted, raw[key], kind)
            elif default is REQUIRED and (present or name == "scenario"):
                raise ConfigError(f"missing required key '{dotted}'", key=dotted)
            else:
                values[key] = default
        sections[name] = values
    return sections


def _scenario(values: Dict[str, Any]) -> ChannelScenario:
    if values["K"] > values["N"]:
        raise ConfigError(
            f"scenario.K: pilot rows exceed pilot length (K={values['K']} > N={values['N']})",
            key="scenario.K",
        )
    try:
        return ChannelScenario(
            num_antennas=values["M"],
            num_users=values["K"],
            pilot_length=values["N"],
            snr_db=values["snr_db"],
            num_scatterers=values["scatterers"],
            transform_size=values["Q"],
            carrier_freq=values["carrier_freq"],
            range_min=values["range_min"],
            range_max=values["range_max"],
            angular_spread=values["angular_spread"],
            transform_gain=values["transform_gain"],
            seed=values["seed"],
        )
    except ParameterError as e:
        raise ConfigError(f"scenario: {e}", key="scenario") from e


def parse_config(text: str) -> Union[SweepSpec, EstimateRequest]:
    try:
        doc = toml.loads(text)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from e

    sections = _read_sections(doc)
    scenario = _scenario(sections["scenario"])

    hyper = sections["hyper"]
    policy = sections["policy"]
    try:
        sbl_hyper = SblHyper(alpha=hyper["alpha"], beta=hyper["beta"])
        esbl_hyper = ESblHyper(nu=hyper["nu"], theta=hyper["theta"], phi=hyper["phi"])
    except ParameterError as e:
        raise ConfigError(f"hyper: {e}", key="hyper") from e
    try:
        convergence = ConvergencePolicy(
            tol=policy["tol"],
            max_iter=policy["max_iter"],
            track_objective=policy["track_objective"],
        )
    except ParameterError as e:
        raise ConfigError(f"policy: {e}", key="policy") from e

    if "sweep" not in doc:
        try:
            return EstimateRequest(
                scenario,
                tuple(sections["estimate"]["estimators"]),
                sbl_hyper,
                esbl_hyper,
                convergence,
            )
        except ParameterError as e:
            raise ConfigError(f"estimate: {e}", key="estimate.estimators") from e

    if "estimate" in doc:
        raise ConfigError("[estimate] and [sweep] are mutually exclusive", key="estimate")
    sweep = sections["sweep"]
    try:
        return SweepSpec(
            base_scenario=scenario,
            sweep_variable=sweep["variable"],
            sweep_values=tuple(sweep["values"]),
            estimators=tuple(sweep["estimators"]),
            num_trials=sweep["trials"],
            sbl_hyper=sbl_hyper,
            esbl_hyper=esbl_hyper,
            policy=convergence,
            workers=sweep["workers"],
            nmse_mode=sweep["nmse_mode"],
            timing=sweep["timing"],
        )
    except ParameterError as e:
        raise ConfigError(f"sweep: {e}", key="sweep") from e


def _common_sections(
    scenario: ChannelScenario, sbl: SblHyper, esbl: ESblHyper, policy: ConvergencePolicy
) -> Dict[str, Dict[str, Any]]:
    scenario_section: Dict[str, Any] = {
        "M": scenario.num_antennas,
        "N": scenario.pilot_length,
        "K": scenario.num_users,
        "snr_db": float(scenario.snr_db),
        "scatterers": scenario.num_scatterers,
        "seed": scenario.seed,
        "carrier_freq": float(scenario.carrier_freq),
        "range_min": float(scenario.range_min),
        "range_max": float(scenario.range_max),
        "angular_spread": float(scenario.angular_spread),
        "transform_gain": float(scenario.transform_gain),
    }
    if scenario.transform_size is not None:
        scenario_section["Q"] = scenario.transform_size
    return {
        "scenario": scenario_section,
        "hyper": {
            "nu": esbl.nu,
            "theta": esbl.theta,
            "phi": esbl.phi,
            "alpha": sbl.alpha,
            "beta": sbl.beta,
        },
        "policy": {
            "tol": policy.tol,
            "max_iter": policy.max_iter,
            "track_objective": policy.track_objective,
        },
    }


def serialize_config(spec: Union[SweepSpec, EstimateRequest]) -> str:
    if isinstance(spec, SweepSpec):
        doc = _common_sections(spec.base_scenario, spec.sbl_hyper, spec.esbl_hyper, spec.policy)
        values: List[Any] = list(spec.sweep_values)
        doc["sweep"] = {
            "variable": spec.sweep_variable,
            "values": values,
            "trials": spec.num_trials,
            "estimators": list(spec.estimators),
            "workers": spec.workers,
            "nmse_mode": spec.nmse_mode,
            "timing": spec.timing,
        }
    else:
        doc = _common_sections(spec.scenario, spec.sbl_hyper, spec.esbl_hyper, spec.policy)
        doc["estimate"] = {"estimators": list(spec.estimators)}
    return toml.dumps(doc)
