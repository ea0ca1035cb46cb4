"""Problem instances: hub parameters, market profiles, scenario curves.

An instance is everything one scheduling day needs, bundled so that the
three levels, the baselines, and the CLI all read the same inputs.  On disk
it is a small directory: ``instance.json`` (hub hardware, demand and penalty
coefficients, ambiguity radii, file pointers), a profiles CSV, and a
scenario JSON with per-hour mean/sigma curves.

The repository ships one synthetic 24-hour instance with a two-peak
electricity price, a midday renewable peak, and a night-heavy heat load;
all recorded regression baselines refer to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .hub import (HubParams, MarketProfiles, read_profiles_csv,
                  write_profiles_csv)
from .uncertainty import AmbiguitySet, MomentInfo, ScenarioConfig

INSTANCE_FILE = "instance.json"

_PROFILE_ARRAYS = ("p_ie", "p_ig", "K_c", "K_H", "D_h_u", "MN")
_SCENARIO_ARRAYS = ("u_f_mean", "u_f_sigma", "d_e_u_mean", "d_e_u_sigma",
                    "p_c_mean", "p_c_sigma")


@dataclass(frozen=True)
class Instance:
    """One scheduling day: parameters, profiles, scenario, ambiguity radii."""

    name: str
    params: HubParams
    profiles: MarketProfiles
    scenario: ScenarioConfig
    gamma1: float = 0.12
    gamma2: float = 1.12
    epsilon: float = 0.05
    notes: str = ""

    def __post_init__(self):
        if self.profiles.horizon != self.scenario.horizon:
            raise ValueError("profiles and scenario curves disagree on the "
                             "horizon")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie strictly between 0 and 1")
        # radii validity is enforced once here instead of on every set
        AmbiguitySet(MomentInfo(0.0, 0.0), self.gamma1, self.gamma2)

    @property
    def horizon(self):
        return self.profiles.horizon

    def price_set(self, k, mean=None, sigma=None) -> AmbiguitySet:
        """Ambiguity set of the slot-k real-time price, supported on [0, inf).

        ``mean``/``sigma`` override the scenario curve; the hour-ahead level
        uses that to re-center on updated forecasts.
        """
        m = float(self.scenario.p_c_mean[k]) if mean is None else float(mean)
        s = float(self.scenario.p_c_sigma[k]) if sigma is None else float(sigma)
        return AmbiguitySet(MomentInfo(m, s * s), self.gamma1, self.gamma2,
                            support=(0.0, np.inf))

    def load_set(self, k, means=None, sigmas=None) -> AmbiguitySet:
        """Joint set for (renewable output, inelastic power demand) at slot k."""
        if means is None:
            means = (self.scenario.u_f_mean[k], self.scenario.d_e_u_mean[k])
        if sigmas is None:
            sigmas = (self.scenario.u_f_sigma[k], self.scenario.d_e_u_sigma[k])
        mu = np.asarray(means, float)
        cov = np.diag(np.square(np.asarray(sigmas, float)))
        return AmbiguitySet(MomentInfo(mu, cov), self.gamma1, self.gamma2)


def load_instance(path) -> Instance:
    """Read an instance from ``instance.json`` (or a directory holding one)."""
    path = Path(path)
    if path.is_dir():
        path = path / INSTANCE_FILE
    raw = json.loads(path.read_text())
    base = path.parent
    market = raw.get("market", {})
    profiles = read_profiles_csv(base / raw["files"]["profiles"], **market)
    scenario = ScenarioConfig.from_json(base / raw["files"]["scenario"])
    amb = raw.get("ambiguity", {})
    return Instance(
        name=raw.get("name", path.parent.name),
        params=HubParams.from_dict(raw["hub"]),
        profiles=profiles,
        scenario=scenario,
        gamma1=float(amb.get("gamma1", 0.12)),
        gamma2=float(amb.get("gamma2", 1.12)),
        epsilon=float(amb.get("epsilon", 0.05)),
        notes=raw.get("notes", ""),
    )


def save_instance(instance: Instance, directory) -> Path:
    """Write the three instance files into ``directory``; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_profiles_csv(directory / "profiles.csv", instance.profiles)
    scen = {name: [float(v) for v in getattr(instance.scenario, name)]
            for name in _SCENARIO_ARRAYS}
    (directory / "scenario.json").write_text(json.dumps(scen, indent=2) + "\n")
    market = {f.name: float(getattr(instance.profiles, f.name))
              for f in fields(MarketProfiles)
              if f.name not in _PROFILE_ARRAYS}
    doc = {
        "name": instance.name,
        "notes": instance.notes,
        "hub": instance.params.to_dict(),
        "market": market,
        "ambiguity": {"gamma1": instance.gamma1, "gamma2": instance.gamma2,
                      "epsilon": instance.epsilon},
        "files": {"profiles": "profiles.csv", "scenario": "scenario.json"},
    }
    out = directory / INSTANCE_FILE
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out


def bundled_instance() -> Instance:
    """The synthetic 24-hour instance shipped with the package."""
    with resources.as_file(resources.files("hubsched") / "data") as base:
        return load_instance(base)
