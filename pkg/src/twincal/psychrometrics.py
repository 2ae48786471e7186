"""Moist-air property helpers (Magnus saturation pressure, ideal-gas vapour)."""

from __future__ import annotations

import numpy as np

from .errors import DomainError

R_VAPOUR = 461.5  # J/(kg K)
R_DRY_AIR = 287.05  # J/(kg K)
CP_DRY_AIR = 1005.0  # J/(kg K)
CP_VAPOUR = 1860.0  # J/(kg K)
P_ATM = 101325.0  # Pa

T_MIN = -20.0
T_MAX = 60.0


def _check_range(temp):
    t = np.asarray(temp, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t < T_MIN) or np.any(t > T_MAX):
        bad = t[~((t >= T_MIN) & (t <= T_MAX))]
        raise DomainError(
            f"temperature {bad.ravel()[0]!r} degC outside psychrometric range "
            f"[{T_MIN}, {T_MAX}]"
        )
    return t


def saturation_pressure(temp):
    """Saturation vapour pressure over water in Pa (Magnus form)."""
    t = _check_range(temp)
    return 610.94 * np.exp(17.625 * t / (t + 243.04))


def saturation_moisture(temp):
    """Saturation vapour density in kg/m^3 at ``temp`` degC."""
    t = _check_range(temp)
    es = 610.94 * np.exp(17.625 * t / (t + 243.04))
    return es / (R_VAPOUR * (t + 273.15))


def relative_humidity(temp, moisture):
    """Relative humidity in percent from temperature and vapour density.

    The result is clamped to [0, 100]; a supersaturated state reads 100 %.
    Raises DomainError when ``temp`` is outside -20..60 degC.
    """
    rh = 100.0 * np.asarray(moisture, dtype=float) / saturation_moisture(temp)
    rh = np.clip(rh, 0.0, 100.0)
    if rh.ndim == 0:
        return float(rh)
    return rh


def moisture_from_rh(temp, rh_percent):
    """Inverse of :func:`relative_humidity` (no clamping)."""
    return np.asarray(rh_percent, dtype=float) / 100.0 * saturation_moisture(temp)


def humid_air_density(temp, moisture):
    """Density of humid air (kg/m^3) at atmospheric pressure."""
    tk = np.asarray(temp, dtype=float) + 273.15
    e = np.asarray(moisture, dtype=float) * R_VAPOUR * tk
    return (P_ATM - e) / (R_DRY_AIR * tk) + np.asarray(moisture, dtype=float)


def humid_air_heat_capacity(temp, moisture):
    """Specific heat of humid air per kg of mixture, J/(kg K)."""
    rho = humid_air_density(temp, moisture)
    q = np.asarray(moisture, dtype=float) / rho
    return (1.0 - q) * CP_DRY_AIR + q * CP_VAPOUR
