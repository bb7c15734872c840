"""Weighted-least-squares state estimation (Gauss-Newton on the normal equations).

State: voltage angle at every non-slack bus and voltage magnitude at every bus,
slack angle fixed at zero. Measurement functions and their Jacobian are
evaluated in polar coordinates from the dense bus admittance matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .allocation import Quantity
from .grid import GridTopology
from .measurements import Measurement
from .powerflow import BranchFlows, branch_flows

ZERO_INJECTION_SIGMA = 1e-5
MIN_CURRENT_PU = 1e-4

# row kinds
VM, P_INJ, Q_INJ, I_INJ, P_FLOW, Q_FLOW, I_FLOW = range(7)
KIND_NAMES = ("V_mag", "P_inj", "Q_inj", "I_inj", "P_flow", "Q_flow", "I_flow")


class ObservabilityError(ValueError):
    """Too few measurements (m < 2N - 1) or a singular gain matrix."""


@dataclass(frozen=True)
class StateVector:
    va: np.ndarray  # radians, slack entry is 0
    vm: np.ndarray  # per unit

    @classmethod
    def flat(cls, n_bus: int) -> "StateVector":
        return cls(np.zeros(n_bus), np.ones(n_bus))

    @classmethod
    def from_voltage(cls, v: np.ndarray, slack: int | None = None) -> "StateVector":
        va = np.angle(v)
        if slack is not None:
            va = va - va[slack]
        return cls(va, np.abs(v))

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


@dataclass
class MeasurementModel:
    grid: GridTopology
    kind: np.ndarray
    z: np.ndarray
    sigma: np.ndarray
    labels: list[str]
    bus: np.ndarray  # bus index for VM / injection rows, else -1
    flow_rows: np.ndarray  # row indices of flow measurements
    y_end: np.ndarray = field(repr=False)  # (n_flow, N) complex; I_end = y_end @ V
    end_bus: np.ndarray = field(repr=False)  # (n_flow,) bus index of the metered end

    @property
    def m(self) -> int:
        return len(self.z)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.sigma**2

    @property
    def n_state(self) -> int:
        return 2 * len(self.grid.buses) - 1

    def _state_to_v(self, va_ns: np.ndarray, vm: np.ndarray) -> np.ndarray:
        net = self.grid.network
        va = np.zeros(net.n_bus)
        va[net.non_slack] = va_ns
        return vm * np.exp(1j * va)

    def pack(self, state: StateVector) -> np.ndarray:
        net = self.grid.network
        return np.concatenate([state.va[net.non_slack], state.vm])

    def unpack(self, x: np.ndarray) -> StateVector:
        net = self.grid.network
        k = len(net.non_slack)
        va = np.zeros(net.n_bus)
        va[net.non_slack] = x[:k]
        return StateVector(va, np.array(x[k:]))

    def h(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x, jacobian=False)[0]

    def evaluate(self, x: np.ndarray, jacobian: bool = True):
        """Measurement functions h(x) and, optionally, their Jacobian."""
        net = self.grid.network
        n = net.n_bus
        k = len(net.non_slack)
        v = self._state_to_v(x[:k], x[k:])
        vnorm = v / np.abs(v)
        y = net.ybus_dense
        ibus = y @ v
        sbus = v * np.conj(ibus)

        h = np.empty(self.m)
        kind, bus = self.kind, self.bus
        sel = kind == VM
        h[sel] = np.abs(v[bus[sel]])
        sel = kind == P_INJ
        h[sel] = sbus[bus[sel]].real
        sel = kind == Q_INJ
        h[sel] = sbus[bus[sel]].imag
        sel = kind == I_INJ
        h[sel] = np.abs(ibus[bus[sel]])

        fr = self.flow_rows
        if len(fr):
            i_f = self.y_end @ v
            v_e = v[self.end_bus]
            s_f = v_e * np.conj(i_f)
            fk = kind[fr]
            h[fr[fk == P_FLOW]] = s_f[fk == P_FLOW].real
            h[fr[fk == Q_FLOW]] = s_f[fk == Q_FLOW].imag
            h[fr[fk == I_FLOW]] = np.abs(i_f[fk == I_FLOW])
        if not jacobian:
            return h, None

        # complex derivative rows w.r.t. all angles (dva) and magnitudes (dvm)
        dva = np.zeros((self.m, n))
        dvm = np.zeros((self.m, n))
        sel = np.flatnonzero(kind == VM)
        dvm[sel, bus[sel]] = 1.0

        inj = np.flatnonzero((kind == P_INJ) | (kind == Q_INJ))
        if len(inj):
            b = bus[inj]
            yb = y[b]
            ds_dva = 1j * v[b, None] * np.conj(-yb * v[None, :])
            ds_dva[np.arange(len(b)), b] += 1j * v[b] * np.conj(ibus[b])
            ds_dvm = v[b, None] * np.conj(yb * vnorm[None, :])
            ds_dvm[np.arange(len(b)), b] += np.conj(ibus[b]) * vnorm[b]
            isp = kind[inj] == P_INJ
            dva[inj] = np.where(isp[:, None], ds_dva.real, ds_dva.imag)
            dvm[inj] = np.where(isp[:, None], ds_dvm.real, ds_dvm.imag)

        sel = np.flatnonzero(kind == I_INJ)
        if len(sel):
            b = bus[sel]
            yb = y[b]
            i = ibus[b]
            dva[sel], dvm[sel] = _abs_grad(i, yb * (1j * v)[None, :], yb * vnorm[None, :])

        if len(fr):
            rows = np.arange(len(fr))
            e = self.end_bus
            dsf_dva = -1j * v_e[:, None] * np.conj(self.y_end * v[None, :])
            dsf_dva[rows, e] += 1j * np.conj(i_f) * v_e
            dsf_dvm = v_e[:, None] * np.conj(self.y_end * vnorm[None, :])
            dsf_dvm[rows, e] += np.conj(i_f) * vnorm[e]
            fk = kind[fr]
            for code, part in ((P_FLOW, np.real), (Q_FLOW, np.imag)):
                s = fk == code
                dva[fr[s]] = part(dsf_dva[s])
                dvm[fr[s]] = part(dsf_dvm[s])
            s = fk == I_FLOW
            if np.any(s):
                ye = self.y_end[s]
                dva[fr[s]], dvm[fr[s]] = _abs_grad(i_f[s], ye * (1j * v)[None, :], ye * vnorm[None, :])

        jac = np.hstack([dva[:, net.non_slack], dvm])
        return h, jac


def _abs_grad(i: np.ndarray, di_dva: np.ndarray, di_dvm: np.ndarray):
    """Gradient of |I| from the complex gradient of I; zero where |I| vanishes."""
    mag = np.abs(i)
    safe = np.where(mag > 1e-12, mag, np.inf)
    c = np.conj(i)[:, None]
    return (c * di_dva).real / safe[:, None], (c * di_dvm).real / safe[:, None]


def dedupe(measurements: Sequence[Measurement]) -> list[Measurement]:
    """Keep one measurement per (quantity, location): the one with the smallest sigma."""
    best: dict[tuple, Measurement] = {}
    for m in measurements:
        cur = best.get(m.key)
        if cur is None or m.sigma < cur.sigma:
            best[m.key] = m
    return list(best.values())


def build_model(grid: GridTopology, measurements: Sequence[Measurement],
                zero_injection_sigma: float = ZERO_INJECTION_SIGMA,
                min_current: float = MIN_CURRENT_PU) -> MeasurementModel:
    """Turn a measurement list into bus-level model rows.

    Per-prosumer injections at a bus are summed into one net-injection row
    (variances add) when every prosumer there is measured. Buses without any
    prosumer get zero-injection rows. Current magnitudes below ``min_current``
    are dropped.
    """
    net = grid.network
    ms = dedupe(measurements)
    rows: list[tuple[int, int, float, float, str, int, int]] = []  # kind, bus, z, sigma, label, line, end

    inj: dict[tuple[str, Quantity], Measurement] = {}
    for m in ms:
        if m.quantity is Quantity.VM:
            rows.append((VM, grid.bus_index[m.element], m.value, m.sigma, f"V_mag:{m.element}", -1, -1))
        elif m.quantity.is_flow:
            if m.quantity is Quantity.I_FLOW and abs(m.value) < min_current:
                continue
            code = {Quantity.P_FLOW: P_FLOW, Quantity.Q_FLOW: Q_FLOW, Quantity.I_FLOW: I_FLOW}[m.quantity]
            ln = grid.line(m.element)
            if m.end not in (ln.from_bus, ln.to_bus):
                raise ValueError(f"{m.location}: {m.end} is not an end of line {ln.id}")
            rows.append((code, -1, m.value, m.sigma, f"{m.quantity.value}:{m.location}",
                         grid.line_index[ln.id], grid.bus_index[m.end]))
        else:
            grid.prosumer(m.element)  # KeyError for unknown prosumers
            inj[(m.element, m.quantity)] = m

    for bus_id in (b.id for b in grid.buses):
        at_bus = grid.prosumers_at.get(bus_id, ())
        b = grid.bus_index[bus_id]
        if not at_bus:
            if b != net.slack:
                rows.append((P_INJ, b, 0.0, zero_injection_sigma, f"P_inj:{bus_id}(zero)", -1, -1))
                rows.append((Q_INJ, b, 0.0, zero_injection_sigma, f"Q_inj:{bus_id}(zero)", -1, -1))
            continue
        for q, code in ((Quantity.P_INJ, P_INJ), (Quantity.Q_INJ, Q_INJ)):
            parts = [inj.get((p.id, q)) for p in at_bus]
            if all(parts):
                z = sum(m.value for m in parts)
                s = float(np.sqrt(sum(m.sigma**2 for m in parts)))
                rows.append((code, b, z, s, f"{q.value}:{bus_id}", -1, -1))
        if len(at_bus) == 1:
            mi = inj.get((at_bus[0].id, Quantity.I_INJ))
            if mi is not None and abs(mi.value) >= min_current:
                rows.append((I_INJ, b, mi.value, mi.sigma, f"I_inj:{bus_id}", -1, -1))

    n = net.n_bus
    need = 2 * n - 1
    if len(rows) < need:
        raise ObservabilityError(
            f"not observable: {len(rows)} measurements < 2N-1 = {need} (deficit {need - len(rows)})")

    kind = np.array([r[0] for r in rows], dtype=int)
    flow_rows = np.flatnonzero(kind >= P_FLOW)
    y_end = np.zeros((len(flow_rows), n), dtype=complex)
    end_bus = np.zeros(len(flow_rows), dtype=int)
    for j, r in enumerate(flow_rows):
        line, e = rows[r][5], rows[r][6]
        other = net.t[line] if e == net.f[line] else net.f[line]
        y_end[j, e] = net.y[line]
        y_end[j, other] = -net.y[line]
        end_bus[j] = e

    return MeasurementModel(
        grid=grid,
        kind=kind,
        z=np.array([r[2] for r in rows], dtype=float),
        sigma=np.array([r[3] for r in rows], dtype=float),
        labels=[r[4] for r in rows],
        bus=np.array([r[1] for r in rows], dtype=int),
        flow_rows=flow_rows,
        y_end=y_end,
        end_bus=end_bus,
    )


@dataclass
class WlsSolution:
    state: StateVector
    objective: float
    residuals: np.ndarray
    iterations: int
    converged: bool
    gradient_norm: float
    initial_objective: float
    message: str = ""
    history: list[float] = field(default_factory=list)  # objective after each accepted step

    @property
    def v(self) -> np.ndarray:
        return self.state.v


def objective(model: MeasurementModel, x: np.ndarray) -> float:
    r = model.z - model.h(x)
    return float(np.sum(model.weights * r * r))


def wls_solve(model: MeasurementModel, initial: StateVector | None = None, tol: float = 1e-6,
              max_iter: int = 50, max_halvings: int = 10) -> WlsSolution:
    """Minimise sum(w_i (z_i - h_i(x))^2) by Gauss-Newton with step halving."""
    n = len(model.grid.buses)
    if model.m < 2 * n - 1:
        raise ObservabilityError(f"not observable: {model.m} measurements < 2N-1 = {2 * n - 1}")
    if initial is None:
        initial = StateVector.flat(n)
    if np.any(np.asarray(initial.vm) <= 0):
        raise ValueError("initial voltage magnitudes must be positive")
    w = model.weights
    x = model.pack(initial)
    h, H = model.evaluate(x)
    r = model.z - h
    J = float(np.sum(w * r * r))
    J0 = J
    history = [J]
    converged = False
    message = f"iteration limit {max_iter} reached"
    grad = np.inf
    it = 0
    while it < max_iter:
        g = H.T @ (w * r)
        grad = float(np.max(np.abs(g)))
        if grad < tol:
            converged, message = True, "gradient below tolerance"
            break
        gain = H.T @ (w[:, None] * H)
        try:
            dx = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gain), g)
        except (np.linalg.LinAlgError, ValueError):
            raise ObservabilityError("numerically unobservable: singular gain matrix") from None
        if not np.all(np.isfinite(dx)):
            raise ObservabilityError("numerically unobservable: non-finite state update")
        it += 1
        step = 1.0
        for _ in range(max_halvings + 1):
            xn = x + step * dx
            if np.all(xn[len(x) - n:] > 0):
                hn, Hn = model.evaluate(xn)
                rn = model.z - hn
                Jn = float(np.sum(w * rn * rn))
                if Jn <= J * (1 + 1e-12) + 1e-300:
                    break
            step *= 0.5
        else:
            # no descent along the Gauss-Newton direction: stationary to working precision
            converged = float(np.max(np.abs(dx))) < tol
            message = "no descent step found"
            break
        x, r, H, J = xn, rn, Hn, Jn
        history.append(J)
        if float(np.max(np.abs(step * dx))) < tol:
            converged, message = True, "state update below tolerance"
            break
    return WlsSolution(model.unpack(x), J, r, it, converged, grad, J0, message, history)


def derive_estimated_flows(grid: GridTopology, state: StateVector | WlsSolution | np.ndarray) -> BranchFlows:
    """Bus voltages, line currents and powers for an estimated state."""
    if isinstance(state, WlsSolution):
        v = state.v
    elif isinstance(state, StateVector):
        v = state.v
    else:
        v = np.asarray(state, dtype=complex)
    return branch_flows(grid.network, v)
