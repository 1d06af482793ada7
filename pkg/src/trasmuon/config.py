"""Experiment configuration: TOML parsing, fail-closed validation, variant
presets, and deterministic per-run seed derivation.

Every knob of every module appears in the resolved config with its default,
so the config echoed into summary.json is a complete provenance record.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
import tomli

from .metrics import SpikeRule
from .optim import TrasMuonHyper, noclip
from .stress import BurstConfig

VARIANTS = (
    "adamw",
    "muon",
    "normuon",
    "trasmuon",
    "trasmuon-noclip",
    "trasmuon-clip-only",
    "trasmuon-clip-sf",
)


class ConfigError(ValueError):
    """Invalid or unknown configuration content; the message names the key."""


# section -> key -> (types, default). A None default with required=True is
# expressed by listing the key in _REQUIRED.
_SCHEMA = {
    "problem": {
        "d": ((int,), 64),
        "kappa": ((int, float), 1e4),
        "fix_v": ((bool,), True),
        "seed": ((int,), 1),
    },
    "optimizer": {
        "name": ((str,), "trasmuon"),
        "eta": ((int, float), 1e-3),
        "beta1": ((int, float), 0.95),
        "beta2": ((int, float), 0.95),
        "eps": ((int, float), 1e-8),
        "t_ns": ((int,), 5),
        "weight_decay": ((int, float), 0.0),
        "c_min": ((int, float), 0.1),
        "alpha": ((int, float), 3.0),
        "beta_e": ((int, float), 0.9),
        "beta_c": ((int, float), 0.7),
        "trigger": ((int, float, type(None)), 20.0),
        "gate_period": ((int,), 10),
        "warmup": ((int,), 50),
        "rho": ((int, float), 0.25),
        "gamma": ((int, float, type(None)), None),
    },
    "burst": {
        "enabled": ((bool,), True),
        "mode": ((str,), "momentum"),
        "period": ((int,), 100),
        "count": ((int,), 4),
        "amplitude": ((int, float), 30.0),
        "start_step": ((int,), 200),
        "seed": ((int,), 0),
        "cap": ((int, float, type(None)), None),
        "persist": ((bool,), True),
    },
    "run": {
        "total_steps": ((int,), 2000),
        "init_seed": ((int,), 0),
    },
    "spike": {
        "window": ((int,), 20),
        "factor": ((int, float), 2.0),
        "min_separation": ((int,), 10),
    },
    "output": {
        "directory": ((str,), "out"),
        "trace": ((bool,), True),
    },
}

# AdamW conventions differ from the Muon family; these apply only when the
# key is absent from the config file.
_ADAMW_DEFAULTS = {"beta1": 0.9, "beta2": 0.999}


@dataclass(frozen=True)
class ExperimentConfig:
    problem_d: int
    problem_kappa: float
    problem_fix_v: bool
    problem_seed: int
    optimizer_name: str
    hyper: TrasMuonHyper
    burst: Optional[BurstConfig]
    total_steps: int
    init_seed: int
    spike_rule: SpikeRule
    output_directory: str
    output_trace: bool

    def to_dict(self) -> dict:
        hyper = dataclasses.asdict(self.hyper)
        hyper["ns_coeffs"] = [list(c) for c in self.hyper.ns_coeffs]
        return {
            "problem": {
                "d": self.problem_d,
                "kappa": self.problem_kappa,
                "fix_v": self.problem_fix_v,
                "seed": self.problem_seed,
            },
            "optimizer": {"name": self.optimizer_name, **hyper},
            "burst": dataclasses.asdict(self.burst) if self.burst else {"enabled": False},
            "run": {"total_steps": self.total_steps, "init_seed": self.init_seed},
            "spike": dataclasses.asdict(self.spike_rule),
            "output": {"directory": self.output_directory, "trace": self.output_trace},
        }


def _validate_sections(raw: dict) -> dict:
    resolved: dict = {}
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
    for section, keys in _SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section [{section}] must be a table")
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
        out = {}
        for key, (types, default) in keys.items():
            value = given.get(key, default)
            if isinstance(value, bool) and bool not in types:
                raise ConfigError(f"[{section}].{key} has wrong type bool")
            if not isinstance(value, types):
                raise ConfigError(
                    f"[{section}].{key} has wrong type {type(value).__name__}")
            if float in types and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            out[key] = value
        out["_explicit"] = frozenset(given)
        resolved[section] = out
    return resolved


def resolve_variant(name: str, hyper: TrasMuonHyper) -> tuple[str, TrasMuonHyper]:
    """Map a variant name to (step-function name, effective hyper preset)."""
    if name == "adamw":
        return "adamw", hyper
    if name == "muon":
        return "muon", hyper
    if name in ("normuon", "trasmuon-noclip"):
        return "trasmuon", noclip(hyper)
    if name == "trasmuon-clip-only":
        return "trasmuon", dataclasses.replace(hyper, rho=0.0)
    if name == "trasmuon-clip-sf":
        rho = hyper.rho if hyper.rho > 0.0 else 0.25
        return "trasmuon", dataclasses.replace(hyper, rho=rho)
    if name == "trasmuon":
        return "trasmuon", hyper
    raise ConfigError(
        f"unknown optimizer name {name!r}; expected one of {', '.join(VARIANTS)}")


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    sections = _validate_sections(raw)

    opt = sections["optimizer"]
    name = opt["name"]
    if name not in VARIANTS:
        raise ConfigError(
            f"[optimizer].name {name!r} is invalid; expected one of "
            f"{', '.join(VARIANTS)}")
    explicit = opt["_explicit"]
    overrides = {}
    if name == "adamw":
        for key, value in _ADAMW_DEFAULTS.items():
            if key not in explicit:
                overrides[key] = value
    hyper_kwargs = {k: v for k, v in opt.items()
                    if k not in ("name", "_explicit")}
    hyper_kwargs.update(overrides)
    if hyper_kwargs.get("trigger") is not None:
        hyper_kwargs["trigger"] = float(hyper_kwargs["trigger"])
    if hyper_kwargs.get("gamma") is not None:
        hyper_kwargs["gamma"] = float(hyper_kwargs["gamma"])
    try:
        hyper = TrasMuonHyper(**hyper_kwargs)
    except ValueError as exc:
        raise ConfigError(f"[optimizer]: {exc}") from exc

    b = sections["burst"]
    burst = None
    if b["enabled"]:
        try:
            burst = BurstConfig(
                period=b["period"], count=b["count"], amplitude=b["amplitude"],
                mode=b["mode"], start_step=b["start_step"], seed=b["seed"],
                cap=None if b["cap"] is None else float(b["cap"]),
                persist=b["persist"],
            )
        except ValueError as exc:
            raise ConfigError(f"[burst]: {exc}") from exc

    s = sections["spike"]
    try:
        spike_rule = SpikeRule(window=s["window"], factor=s["factor"],
                               min_separation=s["min_separation"])
    except ValueError as exc:
        raise ConfigError(f"[spike]: {exc}") from exc

    p = sections["problem"]
    if p["d"] < 2:
        raise ConfigError("[problem].d must be >= 2")
    if p["kappa"] < 1:
        raise ConfigError("[problem].kappa must be >= 1")
    r = sections["run"]
    if r["total_steps"] < 1:
        raise ConfigError("[run].total_steps must be >= 1")

    o = sections["output"]
    return ExperimentConfig(
        problem_d=p["d"], problem_kappa=p["kappa"], problem_fix_v=p["fix_v"],
        problem_seed=p["seed"], optimizer_name=name, hyper=hyper, burst=burst,
        total_steps=r["total_steps"], init_seed=r["init_seed"],
        spike_rule=spike_rule, output_directory=o["directory"],
        output_trace=o["trace"],
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read().decode("utf-8"))


def derive_seed(base_seed: int, sweep_seed: int, stream: int) -> int:
    """Documented splitting rule for per-run RNG isolation: a SeedSequence
    over (base seed, sweep seed, stream index). Streams: 0 problem, 1 init,
    2 burst."""
    ss = np.random.SeedSequence([base_seed, sweep_seed, stream])
    return int(ss.generate_state(1)[0])


def config_for_run(cfg: ExperimentConfig, variant: str,
                   sweep_seed: int) -> ExperimentConfig:
    """Specialize a base config for one (variant, sweep seed) cell."""
    burst = cfg.burst
    if burst is not None:
        burst = dataclasses.replace(
            burst, seed=derive_seed(burst.seed, sweep_seed, 2))
    return dataclasses.replace(
        cfg,
        optimizer_name=variant,
        problem_seed=derive_seed(cfg.problem_seed, sweep_seed, 0),
        init_seed=derive_seed(cfg.init_seed, sweep_seed, 1),
        burst=burst,
    )
