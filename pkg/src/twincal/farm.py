"""Lumped heat and moisture balance of a 1D slice through a tunnel farm.

Four thermal layers exchange heat with one another, with the deep soil
(fixed temperature) and with the outside air through ventilation:

    growing medium (mat)   vegetation   internal air   tunnel lining

Each layer obeys ``dT_j/dt = sum_i Q_ij / (m_j c_j)`` where ``Q_ij`` are
the heat flows in W (area times flux density).  The air moisture content
follows ``dC_a/dt = sum_k L_k / (h_fg V) - (N/3600)(C_a - C_w)`` with the
latent flows ``L_k`` from mat evaporation, crop transpiration and
condensation on the lining.  Both balances are advanced together with an
explicit Euler scheme using fluxes evaluated from the pre-step state.

Everything in the stepper is written with numpy broadcasting so a batch
of simulations (design runs, Morris trajectories) advances in one loop.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import psychrometrics as psy
from .errors import ConfigError, DataError, DegenerateGeometryError, NumericalInstabilityError

LAYERS = ("medium", "vegetation", "air", "lining")
MEDIUM, VEGETATION, AIR, LINING = range(4)

#: Uncertain parameters screened by the sensitivity analysis, with bounds.
PARAMETER_BOUNDS = {
    "AF_g": (0.25, 0.375),
    "IAS": (0.1, 0.85),
    "N": (1.0, 10.0),
    "f_heat": (0.7, 0.9),
    "T_al": (22.5, 27.5),
    "d_v": (0.01, 1.0),
    "d_m": (0.1, 1.0),
    "dsat": (0.4, 0.6),
}
CONFIG_PARAMETERS = ("AF_g", "f_heat", "T_al", "d_v", "d_m", "dsat")

# Chilton-Colburn factor Le^(2/3) for water vapour in air.
_LEWIS_FACTOR = 0.88 ** (2.0 / 3.0)
_RHO_CP_AIR = 1.2 * 1005.0


@dataclass(frozen=True)
class FarmConfig:
    """Physical constants of the simulated slice.

    Defaults describe a 1 m slice of a ~9 m diameter tunnel with two tiers
    of hydroponic trays.  They were chosen so that a 20-day run with
    N = 4 ACH and IAS = 0.3 m/s stays in a 60-95 %RH band with a clear
    lights-on / lights-off swing; the calibration experiments only rely
    on relative behaviour.
    """

    # geometry
    air_volume: float = 30.0  # m3
    tray_area: float = 6.0  # m2, growing medium surface
    lining_area: float = 28.0  # m2
    lamp_area: float = 1.2  # m2, convective surface of the light fittings
    # layer masses (kg) and specific heat capacities (J/(kg K))
    medium_mass: float = 60.0
    medium_cp: float = 3500.0
    vegetation_mass_per_area: float = 1.0  # kg per m2 of leaf
    vegetation_cp: float = 3800.0
    air_mass: float = 36.0
    air_cp: float = 1006.0
    lining_mass: float = 700.0
    lining_cp: float = 880.0
    # boundary conditions
    soil_temp: float = 14.0  # degC, deep soil
    ground_u: float = 10.0  # W/(m2 K), lining to deep soil
    # crop and lighting
    light_power: float = 1200.0  # W electrical
    lai_young: float = 1.0
    lai_mature: float = 4.0
    canopy_extinction: float = 0.4
    wall_light_fraction: float = 0.15
    stomatal_resistance_light: float = 400.0  # s/m
    stomatal_resistance_dark: float = 1500.0  # s/m
    medium_resistance: float = 200.0  # s/m, surface resistance of the wet mat
    lining_condensation: int = 0  # 1 to remove vapour on a lining below dew point
    # convection and radiation
    lining_char_dim: float = 0.3  # m
    lamp_char_dim: float = 0.05  # m
    radiative_coeff: float = 5.0  # W/(m2 K), linearised grey-body exchange
    view_factor: float = 1.0
    air_conductivity: float = 0.026  # W/(m K)
    air_viscosity: float = 1.5e-5  # m2/s
    prandtl: float = 0.71
    latent_heat: float = 2.45e6  # J/kg
    # uncertain parameters at their nominal values
    AF_g: float = 0.3125
    f_heat: float = 0.8
    T_al: float = 25.0  # degC
    d_v: float = 0.1  # m
    d_m: float = 0.5  # m
    dsat: float = 0.5
    # integration
    dt: float = 60.0  # s
    initial_temp: float = 18.0
    initial_rh: float = 70.0
    spinup_hours: int = 72

    def __post_init__(self):
        positive = (
            "air_volume", "tray_area", "lining_area", "lamp_area", "medium_mass",
            "medium_cp", "vegetation_mass_per_area", "vegetation_cp", "air_mass",
            "air_cp", "lining_mass", "lining_cp", "latent_heat", "air_conductivity",
            "air_viscosity", "prandtl", "dt",
        )
        for name in positive:
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be strictly positive, got {value!r}")
        for name in ("lining_char_dim", "lamp_char_dim", "d_v", "d_m"):
            if getattr(self, name) <= 0:
                raise DegenerateGeometryError(f"{name} must be > 0")
        if 3600.0 % self.dt:
            raise ConfigError("dt must divide one hour exactly")
        if self.spinup_hours < 0:
            raise ConfigError("spinup_hours must be >= 0")

    @property
    def substeps(self) -> int:
        return int(round(3600.0 / self.dt))

    def vegetation_area(self, AF_g=None):
        """Leaf area (m2) for a planted fraction approaching harvest."""
        af = self.AF_g if AF_g is None else AF_g
        lai = self.lai_young + (self.lai_mature - self.lai_young) * np.asarray(af)
        return self.tray_area * lai

    def with_parameters(self, **values) -> "FarmConfig":
        return dataclasses.replace(self, **values)

    def check_bounds(self):
        """Raise ConfigError if an uncertain parameter is outside its range."""
        for name in CONFIG_PARAMETERS:
            lo, hi = PARAMETER_BOUNDS[name]
            if not lo <= getattr(self, name) <= hi:
                raise ConfigError(f"{name}={getattr(self, name)} outside [{lo}, {hi}]")


_UNITS = {
    "air_volume": "m3", "tray_area": "m2", "lining_area": "m2", "lamp_area": "m2",
    "medium_mass": "kg", "medium_cp": "J/(kg K)", "vegetation_mass_per_area": "kg/m2",
    "vegetation_cp": "J/(kg K)", "air_mass": "kg", "air_cp": "J/(kg K)",
    "lining_mass": "kg", "lining_cp": "J/(kg K)", "soil_temp": "degC",
    "ground_u": "W/(m2 K)", "light_power": "W", "lai_young": "-", "lai_mature": "-",
    "canopy_extinction": "-", "wall_light_fraction": "-",
    "stomatal_resistance_light": "s/m", "stomatal_resistance_dark": "s/m", "medium_resistance": "s/m", "lining_condensation": "0/1",
    "lining_char_dim": "m", "lamp_char_dim": "m", "radiative_coeff": "W/(m2 K)",
    "view_factor": "-", "air_conductivity": "W/(m K)", "air_viscosity": "m2/s",
    "prandtl": "-", "latent_heat": "J/kg", "AF_g": "-", "f_heat": "-", "T_al": "degC",
    "d_v": "m", "d_m": "m", "dsat": "-", "dt": "s", "initial_temp": "degC",
    "initial_rh": "%", "spinup_hours": "h",
}


def save_config(cfg: FarmConfig, path) -> None:
    lines = ["[farm]"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}  # {_UNITS.get(f.name, '')}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path) -> FarmConfig:
    """Read a ``key = value`` config file (section ``[farm]``)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if "farm" not in parser:
        raise ConfigError(f"{path}: missing [farm] section")
    return config_from_mapping(parser["farm"])


def config_from_mapping(values: Mapping[str, str]) -> FarmConfig:
    types = {f.name: f.type for f in dataclasses.fields(FarmConfig)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown farm constant {key!r}")
        try:
            kwargs[key] = int(raw) if types[key] in (int, "int") else float(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return FarmConfig(**kwargs)


@dataclass(frozen=True)
class ScenarioStep:
    """Drivers held constant over one hour."""

    light_state: int
    ext_temp: float
    ext_moisture: float
    vent_ach: float
    ias: float

    def __post_init__(self):
        if self.light_state not in (0, 1):
            raise ConfigError(f"light_state must be 0 or 1, got {self.light_state!r}")
        if self.vent_ach < 0:
            raise ConfigError(f"ventilation rate must be >= 0, got {self.vent_ach}")
        if self.ias <= 0:
            raise ConfigError(f"internal air speed must be > 0, got {self.ias}")
        if self.ext_moisture < 0:
            raise ConfigError("external moisture content must be >= 0")


@dataclass
class Scenario:
    """Hourly driver table (columnar)."""

    timestamps: list
    light_state: np.ndarray
    ext_temp: np.ndarray
    ext_moisture: np.ndarray
    vent_ach: np.ndarray
    ias: np.ndarray

    def __post_init__(self):
        self.light_state = np.asarray(self.light_state, dtype=int)
        for name in ("ext_temp", "ext_moisture", "vent_ach", "ias"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = len(self.timestamps)
        for name in ("light_state", "ext_temp", "ext_moisture", "vent_ach", "ias"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"scenario column {name} has wrong length")
        if not np.isin(self.light_state, (0, 1)).all():
            raise DataError("light_state must be 0 or 1")
        if np.any(self.vent_ach < 0) or np.any(self.ias <= 0):
            raise DataError("ventilation must be >= 0 and air speed > 0")

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i) -> ScenarioStep:
        return ScenarioStep(
            int(self.light_state[i]), float(self.ext_temp[i]), float(self.ext_moisture[i]),
            float(self.vent_ach[i]), float(self.ias[i]),
        )

    def __iter__(self) -> Iterator[ScenarioStep]:
        for i in range(len(self)):
            yield self[i]

    def slice(self, start, stop) -> "Scenario":
        return Scenario(
            self.timestamps[start:stop], self.light_state[start:stop],
            self.ext_temp[start:stop], self.ext_moisture[start:stop],
            self.vent_ach[start:stop], self.ias[start:stop],
        )

    def with_theta(self, vent_ach=None, ias=None) -> "Scenario":
        n = len(self)
        return Scenario(
            list(self.timestamps), self.light_state.copy(), self.ext_temp.copy(),
            self.ext_moisture.copy(),
            self.vent_ach.copy() if vent_ach is None else np.broadcast_to(vent_ach, (n,)).astype(float),
            self.ias.copy() if ias is None else np.broadcast_to(ias, (n,)).astype(float),
        )

    @classmethod
    def from_steps(cls, timestamps: Sequence, steps: Sequence[ScenarioStep]) -> "Scenario":
        return cls(
            list(timestamps),
            [s.light_state for s in steps], [s.ext_temp for s in steps],
            [s.ext_moisture for s in steps], [s.vent_ach for s in steps],
            [s.ias for s in steps],
        )


SCENARIO_COLUMNS = ("timestamp", "light_state", "ext_temp_C", "ext_moisture_kgm3", "vent_ach", "ias_ms")
OUTPUT_COLUMNS = ("timestamp", "air_temp_C", "rh_percent")


def write_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCENARIO_COLUMNS)
        for i, ts in enumerate(scenario.timestamps):
            w.writerow([
                ts.isoformat(), int(scenario.light_state[i]), repr(float(scenario.ext_temp[i])),
                repr(float(scenario.ext_moisture[i])), repr(float(scenario.vent_ach[i])),
                repr(float(scenario.ias[i])),
            ])


def read_scenario(path) -> Scenario:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SCENARIO_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing scenario column(s) {', '.join(missing)}")
        rows = list(reader)
    cols = {c: [] for c in SCENARIO_COLUMNS}
    for lineno, row in enumerate(rows, start=2):
        try:
            cols["timestamp"].append(dt.datetime.fromisoformat(row["timestamp"]))
            cols["light_state"].append(int(row["light_state"]))
            for c in SCENARIO_COLUMNS[2:]:
                cols[c].append(float(row[c]))
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}", row=lineno) from exc
    return Scenario(
        cols["timestamp"], cols["light_state"], cols["ext_temp_C"],
        cols["ext_moisture_kgm3"], cols["vent_ach"], cols["ias_ms"],
    )


@dataclass
class FarmState:
    """Layer temperatures (degC), air moisture content (kg/m3), clock (h).

    ``temps`` has shape (4,) for a single run or (4, batch) for a batch.
    """

    temps: np.ndarray
    moisture: np.ndarray
    clock: float = 0.0

    @classmethod
    def uniform(cls, temp, moisture, batch=None, clock=0.0):
        shape = (4,) if batch is None else (4, batch)
        mshape = () if batch is None else (batch,)
        return cls(np.full(shape, float(temp)), np.full(mshape, float(moisture)), clock)

    @property
    def air_temp(self):
        return self.temps[AIR]

    @property
    def rh(self):
        return psy.relative_humidity(self.temps[AIR], self.moisture)

    def copy(self):
        return FarmState(self.temps.copy(), np.array(self.moisture, copy=True), self.clock)


def nusselt(air_speed, char_dim, cfg: FarmConfig):
    """Laminar flat-plate forced convection, Nu = 0.664 Re^0.5 Pr^(1/3)."""
    d = np.asarray(char_dim, dtype=float)
    if np.any(d <= 0):
        raise DegenerateGeometryError("characteristic dimension must be > 0")
    re = np.asarray(air_speed, dtype=float) * d / cfg.air_viscosity
    return 0.664 * np.sqrt(re) * cfg.prandtl ** (1.0 / 3.0)


def convective_flux(surface_temp, air_temp, area, char_dim, air_speed, cfg: FarmConfig, nu=None):
    """Heat flow from the air to a surface, ``A Nu lambda (T_air - T_s) / d`` (W).

    Positive when heat flows from the air into the surface.  ``nu`` may be
    passed to bypass the Nusselt correlation.
    """
    d = np.asarray(char_dim, dtype=float)
    if np.any(d <= 0):
        raise DegenerateGeometryError("characteristic dimension must be > 0")
    if nu is None:
        nu = nusselt(air_speed, d, cfg)
    return area * nu * cfg.air_conductivity * (np.asarray(air_temp) - np.asarray(surface_temp)) / d


def ventilation_flux(state: FarmState, step: ScenarioStep, cfg: FarmConfig, rho=None, cp=None):
    """Heat loss to the outside (W) and moisture exchange rate (kg/m3/s).

    The heat term is ``N/3600 V rho c (T_in - T_out)``; the moisture term is
    ``-(N/3600)(C_a - C_w)`` i.e. positive when outside air is moister.
    ``rho``/``cp`` default to the humid-air properties of the current state.
    """
    ta = state.temps[AIR]
    if rho is None:
        rho = psy.humid_air_density(ta, state.moisture)
    if cp is None:
        cp = psy.humid_air_heat_capacity(ta, state.moisture)
    rate = np.asarray(step.vent_ach, dtype=float) / 3600.0
    heat = rate * cfg.air_volume * rho * cp * (ta - step.ext_temp)
    moist = -rate * (state.moisture - step.ext_moisture)
    return heat, moist


def layer_increment(area, mass, cp, fluxes, dt):
    """Explicit Euler temperature increment ``A dt sum(q) / (m c)``."""
    return area * dt * np.sum(fluxes, axis=0) / (mass * cp)


@dataclass
class _Params:
    AF_g: np.ndarray
    f_heat: np.ndarray
    T_al: np.ndarray
    d_v: np.ndarray
    d_m: np.ndarray
    dsat: np.ndarray

    @classmethod
    def from_config(cls, cfg: FarmConfig, overrides: Mapping | None = None):
        overrides = overrides or {}
        vals = {}
        for name in CONFIG_PARAMETERS:
            vals[name] = np.asarray(overrides.get(name, getattr(cfg, name)), dtype=float)
        return cls(**vals)


@dataclass
class _Coefficients:
    """Quantities fixed over one hour (depend on drivers and parameters only)."""

    light: np.ndarray
    ext_temp: np.ndarray
    ext_moisture: np.ndarray
    vent_rate: np.ndarray  # 1/s
    g_va: np.ndarray  # W/K
    g_ma: np.ndarray
    g_la: np.ndarray
    g_lamp: np.ndarray
    heat: np.ndarray  # W of lamp heat
    t_lamp: np.ndarray
    veg_share: np.ndarray
    g_vl: float
    g_ml: float
    g_ground: float
    transp_cond: np.ndarray  # m3/s
    evap_cond: np.ndarray  # m3/s
    cond_cond: np.ndarray  # m3/s


def _coefficients(step, cfg: FarmConfig, par: _Params) -> _Coefficients:
    ias = np.asarray(step.ias, dtype=float)
    light = np.asarray(step.light_state, dtype=float)
    k = cfg.air_conductivity
    nu_v = nusselt(ias, par.d_v, cfg)
    nu_m = nusselt(ias, par.d_m, cfg)
    nu_l = nusselt(ias, cfg.lining_char_dim, cfg)
    nu_lamp = nusselt(ias, cfg.lamp_char_dim, cfg)
    h_v = nu_v * k / par.d_v
    h_m = nu_m * k / par.d_m
    h_l = nu_l * k / cfg.lining_char_dim
    h_lamp = nu_lamp * k / cfg.lamp_char_dim
    lai = cfg.lai_young + (cfg.lai_mature - cfg.lai_young) * par.AF_g
    a_v = cfg.tray_area * lai
    r_s = np.where(light > 0, cfg.stomatal_resistance_light, cfg.stomatal_resistance_dark)
    g_vb = h_v / (_RHO_CP_AIR * _LEWIS_FACTOR)
    g_mb = h_m / (_RHO_CP_AIR * _LEWIS_FACTOR)
    g_lb = h_l / (_RHO_CP_AIR * _LEWIS_FACTOR)
    return _Coefficients(
        light=light,
        ext_temp=np.asarray(step.ext_temp, dtype=float),
        ext_moisture=np.asarray(step.ext_moisture, dtype=float),
        vent_rate=np.asarray(step.vent_ach, dtype=float) / 3600.0,
        g_va=a_v * h_v,
        g_ma=cfg.tray_area * h_m,
        g_la=cfg.lining_area * h_l,
        g_lamp=light * cfg.lamp_area * h_lamp,
        heat=light * par.f_heat * cfg.light_power,
        t_lamp=par.T_al,
        veg_share=1.0 - np.exp(-cfg.canopy_extinction * lai),
        g_vl=cfg.radiative_coeff * cfg.view_factor * cfg.tray_area,
        g_ml=cfg.radiative_coeff * cfg.view_factor * cfg.tray_area,
        g_ground=cfg.ground_u * cfg.lining_area,
        transp_cond=a_v / (1.0 / g_vb + r_s),
        evap_cond=cfg.tray_area * par.dsat / (1.0 / g_mb + cfg.medium_resistance),
        cond_cond=cfg.lining_area * g_lb * float(cfg.lining_condensation),
    )


def _rates(temps, moisture, c: _Coefficients, cfg: FarmConfig):
    """Heat flows per layer (W, shape like temps) and dC_a/dt (kg/m3/s)."""
    tm, tv, ta, tl = temps
    csat_m = psy.saturation_moisture(tm)
    csat_v = psy.saturation_moisture(tv)
    csat_l = psy.saturation_moisture(tl)

    q_va = c.g_va * (ta - tv)
    q_ma = c.g_ma * (ta - tm)
    q_la = c.g_la * (ta - tl)
    q_lamp = np.minimum(c.g_lamp * (c.t_lamp - ta), c.heat)
    radiant = c.heat - q_lamp
    rad_wall = cfg.wall_light_fraction * radiant
    rad_crop = radiant - rad_wall
    q_vl = c.g_vl * (tv - tl)
    q_ml = c.g_ml * (tm - tl)
    q_ground = c.g_ground * (cfg.soil_temp - tl)

    evap = c.evap_cond * np.maximum(csat_m - moisture, 0.0)  # kg/s
    transp = c.transp_cond * np.maximum(csat_v - moisture, 0.0)
    cond = c.cond_cond * np.maximum(moisture - csat_l, 0.0)
    hfg = cfg.latent_heat

    rho = psy.humid_air_density(ta, moisture)
    cp = psy.humid_air_heat_capacity(ta, moisture)
    q_vent = c.vent_rate * cfg.air_volume * rho * cp * (ta - c.ext_temp)

    heat = np.empty_like(temps)
    heat[MEDIUM] = q_ma + (1.0 - c.veg_share) * rad_crop - q_ml - hfg * evap
    heat[VEGETATION] = q_va + c.veg_share * rad_crop - q_vl - hfg * transp
    heat[AIR] = q_lamp - q_va - q_ma - q_la - q_vent
    heat[LINING] = q_la + rad_wall + q_vl + q_ml + q_ground + hfg * cond
    dmoist = (evap + transp - cond) / cfg.air_volume - c.vent_rate * (moisture - c.ext_moisture)
    return heat, dmoist


def _capacities(cfg: FarmConfig, par: _Params):
    veg_mass = cfg.vegetation_mass_per_area * cfg.tray_area * (
        cfg.lai_young + (cfg.lai_mature - cfg.lai_young) * par.AF_g
    )
    return [
        cfg.medium_mass * cfg.medium_cp,
        veg_mass * cfg.vegetation_cp,
        cfg.air_mass * cfg.air_cp,
        cfg.lining_mass * cfg.lining_cp,
    ]


def _advance(state: FarmState, c: _Coefficients, caps, cfg: FarmConfig) -> FarmState:
    heat, dmoist = _rates(state.temps, state.moisture, c, cfg)
    if not np.all(np.isfinite(heat)):
        bad = int(np.argwhere(~np.isfinite(heat))[0][0])
        raise NumericalInstabilityError(
            f"non-finite heat flux in layer {LAYERS[bad]!r} at t={state.clock:.3f} h",
            layer=LAYERS[bad],
        )
    if not np.all(np.isfinite(dmoist)):
        raise NumericalInstabilityError(
            f"non-finite moisture flux at t={state.clock:.3f} h", layer="air"
        )
    temps = np.empty_like(state.temps)
    for j in range(4):
        temps[j] = state.temps[j] + heat[j] * cfg.dt / caps[j]
    moisture = np.maximum(state.moisture + dmoist * cfg.dt, 0.0)
    if not (np.all(np.isfinite(temps)) and np.all(np.abs(temps) < 200.0)):
        bad = int(np.argwhere(~(np.isfinite(temps) & (np.abs(temps) < 200.0)))[0][0])
        raise NumericalInstabilityError(
            f"layer {LAYERS[bad]!r} temperature diverged at t={state.clock:.3f} h",
            layer=LAYERS[bad],
        )
    return FarmState(temps, moisture, state.clock + cfg.dt / 3600.0)


def step(state: FarmState, step: ScenarioStep, cfg: FarmConfig, overrides: Mapping | None = None) -> FarmState:
    """Advance ``state`` by one explicit Euler substep of ``cfg.dt`` seconds."""
    par = _Params.from_config(cfg, overrides)
    return _advance(state, _coefficients(step, cfg, par), _capacities(cfg, par), cfg)


def layer_rates(state: FarmState, step: ScenarioStep, cfg: FarmConfig, overrides: Mapping | None = None):
    """Heat flow per layer (W) and moisture rate (kg/m3/s) at ``state``."""
    par = _Params.from_config(cfg, overrides)
    return _rates(state.temps, state.moisture, _coefficients(step, cfg, par), cfg)


@dataclass
class SimulationResult:
    timestamps: list
    air_temp: np.ndarray  # (hours,) or (batch, hours)
    rh: np.ndarray
    final_state: FarmState | None = field(default=None, repr=False)

    def write_csv(self, path, run=0):
        temp = self.air_temp if self.air_temp.ndim == 1 else self.air_temp[run]
        rh = self.rh if self.rh.ndim == 1 else self.rh[run]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(OUTPUT_COLUMNS)
            for ts, t, h in zip(self.timestamps, temp, rh):
                w.writerow([ts.isoformat(), f"{t:.10g}", f"{h:.10g}"])


class _HourDrivers:
    __slots__ = ("light_state", "ext_temp", "ext_moisture", "vent_ach", "ias")

    def __init__(self, light_state, ext_temp, ext_moisture, vent_ach, ias):
        self.light_state = light_state
        self.ext_temp = ext_temp
        self.ext_moisture = ext_moisture
        self.vent_ach = vent_ach
        self.ias = ias


def simulate_batch(cfg: FarmConfig, scenario: Scenario, params: Mapping | None = None) -> SimulationResult:
    """Run a batch of simulations sharing one scenario.

    ``params`` maps any of ``N``, ``IAS``, ``AF_g``, ``f_heat``, ``T_al``,
    ``d_v``, ``d_m``, ``dsat`` to 1-D arrays of equal length (the batch).
    ``N``/``IAS`` replace the scenario's hourly ventilation and air speed.
    Output row ``i`` is the state at the end of the hour driven by
    scenario row ``i``.  Returned arrays have shape (batch, hours).
    """
    params = dict(params or {})
    unknown = set(params) - set(PARAMETER_BOUNDS)
    if unknown:
        raise ConfigError(f"unknown simulation parameter(s): {sorted(unknown)}")
    sizes = {np.asarray(v).size for v in params.values()}
    if len(sizes) > 1:
        raise ConfigError("batched parameters must have equal length")
    batch = sizes.pop() if sizes else 1
    arrays = {k: np.broadcast_to(np.asarray(v, dtype=float).ravel(), (batch,)) for k, v in params.items()}
    par = _Params.from_config(cfg, {k: v for k, v in arrays.items() if k in CONFIG_PARAMETERS})
    par = _Params(*(np.broadcast_to(getattr(par, n), (batch,)) for n in CONFIG_PARAMETERS))
    caps = _capacities(cfg, par)

    n_hours = len(scenario)
    if n_hours == 0:
        raise ConfigError("scenario is empty")
    vent = scenario.vent_ach[None, :] if "N" not in arrays else np.repeat(arrays["N"][:, None], n_hours, 1)
    ias = scenario.ias[None, :] if "IAS" not in arrays else np.repeat(arrays["IAS"][:, None], n_hours, 1)
    vent = np.broadcast_to(vent, (batch, n_hours))
    ias = np.broadcast_to(ias, (batch, n_hours))
    if np.any(vent < 0) or np.any(ias <= 0):
        raise ConfigError("ventilation must be >= 0 and air speed > 0")

    c0 = psy.moisture_from_rh(cfg.initial_temp, cfg.initial_rh)
    state = FarmState.uniform(cfg.initial_temp, c0, batch=batch)

    def drivers(i):
        return _HourDrivers(
            int(scenario.light_state[i]), scenario.ext_temp[i], scenario.ext_moisture[i],
            vent[:, i], ias[:, i],
        )

    # spin-up cycles through the first day of the scenario
    cycle = min(24, n_hours)
    for h in range(cfg.spinup_hours):
        c = _coefficients(drivers(h % cycle), cfg, par)
        for _ in range(cfg.substeps):
            state = _advance(state, c, caps, cfg)
    state.clock = 0.0

    temp_out = np.empty((batch, n_hours))
    rh_out = np.empty((batch, n_hours))
    for i in range(n_hours):
        c = _coefficients(drivers(i), cfg, par)
        for _ in range(cfg.substeps):
            state = _advance(state, c, caps, cfg)
        temp_out[:, i] = state.temps[AIR]
        rh_out[:, i] = psy.relative_humidity(state.temps[AIR], state.moisture)
    ends = [t + dt.timedelta(hours=1) for t in scenario.timestamps]
    return SimulationResult(ends, temp_out, rh_out, state)


def simulate(cfg: FarmConfig, scenario: Scenario, theta=None) -> SimulationResult:
    """Hourly air temperature and RH for one run.

    ``theta`` is an optional ``(N, IAS)`` pair overriding the scenario's
    ventilation rate and internal air speed for the whole horizon.
    """
    params = None
    if theta is not None:
        n, ias = theta
        lo, hi = PARAMETER_BOUNDS["N"]
        if not lo <= n <= hi:
            raise ConfigError(f"N={n} outside [{lo}, {hi}]")
        lo, hi = PARAMETER_BOUNDS["IAS"]
        if not lo <= ias <= hi:
            raise ConfigError(f"IAS={ias} outside [{lo}, {hi}]")
        params = {"N": [n], "IAS": [ias]}
    res = simulate_batch(cfg, scenario, params)
    return SimulationResult(res.timestamps, res.air_temp[0], res.rh[0], res.final_state)
