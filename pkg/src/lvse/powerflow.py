"""Ground-truth AC power flow (polar Newton-Raphson) on the per-unit grid model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .grid import GridError, GridTopology

SQRT3 = math.sqrt(3.0)


class PowerFlowError(RuntimeError):
    """Newton-Raphson failed to converge or diverged."""

    def __init__(self, message: str, mismatch: float = float("nan"), timestep: int | None = None):
        super().__init__(message)
        self.mismatch = mismatch
        self.timestep = timestep


class NetworkModel:
    """Index maps and per-unit quantities derived once from a ``GridTopology``.

    Voltages are line-to-line, powers three-phase; the base current of a line is
    ``base_va / (sqrt(3) * V_n)``.
    """

    def __init__(self, grid: GridTopology):
        self.grid = grid
        self.base_va = grid.base_va
        self.n_bus = len(grid.buses)
        self.n_line = len(grid.lines)
        self.bus_ids = [b.id for b in grid.buses]
        self.line_ids = [ln.id for ln in grid.lines]
        self.slack = grid.bus_index[grid.slack_bus]
        self.non_slack = np.array([i for i in range(self.n_bus) if i != self.slack], dtype=int)

        self.v_base = np.array([b.nominal_voltage for b in grid.buses])
        self.f = np.array([grid.bus_index[ln.from_bus] for ln in grid.lines], dtype=int)
        self.t = np.array([grid.bus_index[ln.to_bus] for ln in grid.lines], dtype=int)
        z_base = self.v_base[self.f] ** 2 / self.base_va
        z = np.array([ln.impedance for ln in grid.lines], dtype=complex) / z_base
        if np.any(z == 0):
            bad = [self.line_ids[k] for k in np.flatnonzero(z == 0)]
            raise GridError(f"zero-impedance line(s) {bad}")
        self.y = 1.0 / z
        self.i_base = self.base_va / (SQRT3 * self.v_base[self.f])
        self.i_max_a = np.array([ln.thermal_current_limit for ln in grid.lines])

        # prosumer -> bus incidence
        self.prosumer_bus = np.array([grid.bus_index[p.bus] for p in grid.prosumers], dtype=int)
        self.ybus = build_ybus(grid, self)
        self.ybus_dense = self.ybus.toarray()

    def kw_to_pu(self, kw):
        return np.asarray(kw) * 1e3 / self.base_va

    def pu_to_kw(self, pu):
        return np.asarray(pu) * self.base_va / 1e3

    def current_to_amps(self, i_pu, lines=None):
        base = self.i_base if lines is None else self.i_base[lines]
        return np.asarray(i_pu) * base

    def current_to_pu(self, amps, lines=None):
        base = self.i_base if lines is None else self.i_base[lines]
        return np.asarray(amps) / base

    def bus_current_base(self, bus_idx):
        return self.base_va / (SQRT3 * self.v_base[bus_idx])

    def voltage_to_volts(self, v_pu):
        return np.asarray(v_pu) * self.v_base

    def voltage_to_pu(self, volts):
        return np.asarray(volts) / self.v_base


def build_ybus(grid: GridTopology, network: NetworkModel | None = None) -> sp.csr_matrix:
    """Bus admittance matrix in per unit (series branches only, no shunts)."""
    if network is None:
        network = grid.network
    f, t, y = network.f, network.t, network.y
    if not np.all(np.isfinite(y)):
        raise GridError("zero-impedance line in admittance matrix")
    n = network.n_bus
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    vals = np.concatenate([y, y, -y, -y])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


@dataclass(frozen=True)
class BranchFlows:
    """Complex bus voltages plus everything derived from them, in per unit."""

    v: np.ndarray  # complex bus voltages
    i_from: np.ndarray  # current entering each line at its from end
    i_to: np.ndarray  # current entering each line at its to end
    s_from: np.ndarray
    s_to: np.ndarray
    s_bus: np.ndarray  # net injection per bus (generator convention)

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def va(self) -> np.ndarray:
        return np.angle(self.v)

    @property
    def i_line(self) -> np.ndarray:
        """Per-line current magnitude; the larger of the two ends."""
        return np.maximum(np.abs(self.i_from), np.abs(self.i_to))

    @property
    def losses(self) -> np.ndarray:
        return self.s_from + self.s_to


def branch_flows(network: NetworkModel, v: np.ndarray) -> BranchFlows:
    """Derive line currents and powers from bus voltages.

    Shared by the power flow and the state estimator so truth and estimate are
    post-processed identically.
    """
    v = np.asarray(v, dtype=complex)
    vf, vt = v[network.f], v[network.t]
    i_from = network.y * (vf - vt)
    i_to = -i_from
    s_bus = v * np.conj(network.ybus @ v)
    return BranchFlows(v=v, i_from=i_from, i_to=i_to,
                       s_from=vf * np.conj(i_from), s_to=vt * np.conj(i_to), s_bus=s_bus)


@dataclass(frozen=True)
class PowerFlowSolution(BranchFlows):
    t: int = 0
    prosumer_s: np.ndarray = None  # per-prosumer injection, generator convention, pu
    iterations: int = 0
    max_mismatch: float = 0.0

    def line_current_amps(self, network: NetworkModel) -> np.ndarray:
        return network.current_to_amps(self.i_line)


def power_derivatives(ybus: np.ndarray, v: np.ndarray):
    """Partial derivatives of bus injections S = V conj(Y V) w.r.t. angle and magnitude."""
    vnorm = v / np.abs(v)
    ibus = ybus @ v
    ds_dva = 1j * v[:, None] * np.conj(np.diag(ibus) - ybus * v[None, :])
    ds_dvm = v[:, None] * np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(ibus) * vnorm)
    return ds_dva, ds_dvm


def solve_powerflow(grid: GridTopology, ybus, injections, slack_voltage: complex = 1.0,
                    tol: float = 1e-8, max_iter: int = 25) -> PowerFlowSolution:
    """Newton-Raphson from a flat start.

    ``injections`` is a complex per-unit vector (generator convention, P + jQ)
    over all buses; the slack entry is ignored.
    """
    network = grid.network
    y = ybus.toarray() if sp.issparse(ybus) else np.asarray(ybus)
    n = network.n_bus
    s_spec = np.asarray(injections, dtype=complex)
    if s_spec.shape != (n,):
        raise ValueError(f"expected {n} injections, got shape {s_spec.shape}")
    pq = network.non_slack
    npq = len(pq)

    v = np.ones(n, dtype=complex)
    v[network.slack] = slack_voltage
    va, vm = np.angle(v), np.abs(v)

    def mismatch(v):
        s = v * np.conj(y @ v)
        d = s[pq] - s_spec[pq]
        return np.concatenate([d.real, d.imag])

    f = mismatch(v)
    norm = float(np.max(np.abs(f))) if npq else 0.0
    history = [norm]
    it = 0
    while norm >= tol:
        if it >= max_iter:
            raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                                 f"(mismatch {norm:.3e})", norm)
        ds_dva, ds_dvm = power_derivatives(y, v)
        jac = np.block([
            [ds_dva[np.ix_(pq, pq)].real, ds_dvm[np.ix_(pq, pq)].real],
            [ds_dva[np.ix_(pq, pq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise PowerFlowError(f"singular power-flow Jacobian (mismatch {norm:.3e})", norm) from None
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        it += 1
        if not np.all(vm > 0):
            raise PowerFlowError(f"power flow diverged (voltage collapse after {it} iterations, "
                                 f"mismatch {norm:.3e})", norm)
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm = float(np.max(np.abs(f)))
        if not math.isfinite(norm):
            raise PowerFlowError("power flow diverged (non-finite mismatch)", norm)
        history.append(norm)
        if len(history) >= 4 and history[-1] > history[-2] > history[-3] > history[-4]:
            raise PowerFlowError(f"power flow diverging (mismatch {norm:.3e} grew for 3 iterations)", norm)

    flows = branch_flows(network, v)
    return PowerFlowSolution(**flows.__dict__, iterations=it, max_mismatch=norm)


def prosumer_injections(grid: GridTopology, t: int, profiles: np.ndarray | None = None) -> np.ndarray:
    """Per-prosumer complex injection (generator convention, pu) at timestep ``t``."""
    network = grid.network
    if profiles is None:
        profiles = grid.profile_array()
    pq_kw = profiles[:, t, :]
    return -network.kw_to_pu(pq_kw[:, 0] + 1j * pq_kw[:, 1])


def bus_injections(grid: GridTopology, prosumer_s: np.ndarray) -> np.ndarray:
    network = grid.network
    s = np.zeros(network.n_bus, dtype=complex)
    np.add.at(s, network.prosumer_bus, prosumer_s)
    return s


def check_profile_coverage(grid: GridTopology, steps: int) -> None:
    for p in grid.prosumers:
        n = len(grid.profiles[p.profile])
        if n < steps:
            raise GridError(f"profile {p.profile} covers {n} < {steps} steps")


def solve_timestep(grid: GridTopology, t: int, profiles: np.ndarray | None = None,
                   slack_voltage: complex = 1.0, tol: float = 1e-8, max_iter: int = 25) -> PowerFlowSolution:
    ps = prosumer_injections(grid, t, profiles)
    try:
        sol = solve_powerflow(grid, grid.network.ybus, bus_injections(grid, ps), slack_voltage, tol, max_iter)
    except PowerFlowError as exc:
        raise PowerFlowError(f"timestep {t}: {exc}", exc.mismatch, t) from exc
    return PowerFlowSolution(**{**sol.__dict__, "t": t, "prosumer_s": ps})


def run_timeseries(grid: GridTopology, timesteps: Sequence[int] | range, slack_voltage: complex = 1.0,
                   tol: float = 1e-8, max_iter: int = 25) -> list[PowerFlowSolution]:
    """One converged power flow per timestep, in the order given."""
    timesteps = list(timesteps)
    if timesteps:
        check_profile_coverage(grid, max(timesteps) + 1)
    profiles = grid.profile_array()
    return [solve_timestep(grid, t, profiles, slack_voltage, tol, max_iter) for t in timesteps]
