"""Forward models that advance a state window by one step.

A forward model consumes a window of the ``window_length`` most recent
states (oldest first) and an additive noise vector, and produces the next
state.  Built-in models only read the newest window row; the window is part
of the contract so that learned or external forecasters can use deeper
history.  ``ExternalModel`` adapts any subprocess speaking the line protocol
documented on the class.
"""

import os
import select
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ConfigError, DataError, ExternalModelError


class ForwardModel(Protocol):
    """Contract the filters rely on."""

    dim: int
    window_length: int

    def propagate(self, window: np.ndarray, noise: np.ndarray, step: int) -> np.ndarray:
        """Advance one member: (window_length, dim) window to the next state."""
        ...


def linear_step(window: np.ndarray, coefficient, noise: np.ndarray) -> np.ndarray:
    """Next state = coefficient * newest window row + noise.

    ``coefficient`` is a scalar or a (dim, dim) matrix.  ``window`` is
    (window_length, dim), or (members, window_length, dim) with a matching
    noise matrix for a whole-ensemble step.
    """
    window = np.asarray(window, dtype=float)
    last = window[..., -1, :]
    coefficient = np.asarray(coefficient, dtype=float)
    if coefficient.ndim == 0:
        return float(coefficient) * last + noise
    if coefficient.shape != (last.shape[-1], last.shape[-1]):
        raise ConfigError(
            f"linear coefficient must be scalar or {(last.shape[-1], last.shape[-1])}, "
            f"got shape {coefficient.shape}"
        )
    return last @ coefficient.T + noise


def _lorenz96_rhs(x: np.ndarray, forcing: float) -> np.ndarray:
    # Cyclic advection term (x_{i+1} - x_{i-2}) x_{i-1}, linear damping, forcing.
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def lorenz96_step(window: np.ndarray, forcing: float, dt: float, noise: np.ndarray) -> np.ndarray:
    """One fourth-order Runge-Kutta step of the cyclic Lorenz-96 system.

        dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + forcing

    Needs at least 4 components for the cyclic coupling to be well defined.
    The constant state x_i = forcing is an equilibrium: with zero noise it is
    reproduced exactly.
    """
    window = np.asarray(window, dtype=float)
    x = window[..., -1, :]
    if x.shape[-1] < 4:
        raise ConfigError(f"Lorenz-96 needs dim >= 4, got {x.shape[-1]}")
    if not dt > 0.0:
        raise ConfigError(f"dt must be positive, got {dt}")
    k1 = _lorenz96_rhs(x, forcing)
    k2 = _lorenz96_rhs(x + 0.5 * dt * k1, forcing)
    k3 = _lorenz96_rhs(x + 0.5 * dt * k2, forcing)
    k4 = _lorenz96_rhs(x + dt * k3, forcing)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4) + noise


@dataclass(frozen=True)
class SeasonalLoadParams:
    """Mean-reverting consumption dynamics around a daily profile.

    The per-component seasonal mean is

        m_i(t) = base_i + amplitude_i * sin(2 pi t / period + phase_i)

    and deviations from it decay geometrically with ``ar_coeff``.
    ``base``, ``amplitude`` and ``phase`` may be scalars or per-component
    arrays.  ``process_noise_std`` is the noise level used when a reference
    trajectory is simulated from this model.
    """

    base: float | np.ndarray = 2.0
    amplitude: float | np.ndarray = 1.0
    phase: float | np.ndarray = 0.0
    period: int = 24
    ar_coeff: float = 0.8
    process_noise_std: float = 0.05

    def __post_init__(self):
        if self.period < 2:
            raise ConfigError(f"period must be at least 2, got {self.period}")
        if not abs(self.ar_coeff) < 1.0:
            raise ConfigError(f"ar_coeff must satisfy |ar_coeff| < 1, got {self.ar_coeff}")
        if self.process_noise_std < 0.0:
            raise ConfigError(f"process_noise_std must be nonnegative, got {self.process_noise_std}")

    def mean(self, t: int) -> np.ndarray:
        return np.asarray(self.base, dtype=float) + np.asarray(self.amplitude, dtype=float) * np.sin(
            2.0 * np.pi * t / self.period + np.asarray(self.phase, dtype=float)
        )


def seasonal_load_step(
    window: np.ndarray, params: SeasonalLoadParams, t: int, noise: np.ndarray
) -> np.ndarray:
    """Advance the seasonal model from time t to t + 1.

    next_i = m_i(t+1) + ar_coeff * (x_i(t) - m_i(t)) + noise_i
    """
    window = np.asarray(window, dtype=float)
    x = window[..., -1, :]
    return params.mean(t + 1) + params.ar_coeff * (x - params.mean(t)) + noise


@dataclass(frozen=True)
class LinearModel:
    dim: int
    coefficient: float | np.ndarray = 0.9
    window_length: int = 4

    def propagate(self, window, noise, step):
        return linear_step(window, self.coefficient, noise)

    def propagate_batch(self, windows, noises, step):
        return linear_step(windows, self.coefficient, noises)


@dataclass(frozen=True)
class Lorenz96Model:
    dim: int = 40
    forcing: float = 8.0
    dt: float = 0.05
    window_length: int = 4

    def __post_init__(self):
        if self.dim < 4:
            raise ConfigError(f"Lorenz-96 needs dim >= 4, got {self.dim}")

    def propagate(self, window, noise, step):
        return lorenz96_step(window, self.forcing, self.dt, noise)

    def propagate_batch(self, windows, noises, step):
        # RK4 acts elementwise along the component axis, so the member batch
        # rides through the same vectorized arithmetic.
        return lorenz96_step(windows, self.forcing, self.dt, noises)


@dataclass(frozen=True)
class SeasonalLoadModel:
    dim: int
    params: SeasonalLoadParams = field(default_factory=SeasonalLoadParams)
    window_length: int = 4

    def propagate(self, window, noise, step):
        return seasonal_load_step(window, self.params, step, noise)

    def propagate_batch(self, windows, noises, step):
        return seasonal_load_step(windows, self.params, step, noises)


def _excerpt(text: str, limit: int = 160) -> str:
    text = text.strip()
    return text if len(text) <= limit else text[: limit - 3] + "..."


class ExternalModel:
    """Adapter around a forecasting subprocess speaking a line protocol.

    Protocol (all lines newline-terminated, numbers in full-precision
    decimal):

    * On startup the process writes one handshake line
      ``MODEL <dim> <window_length> <batch>`` with ``batch`` 0 or 1.
    * A request is ``PREDICT <m>`` followed by ``m * window_length`` state
      lines of ``dim`` space-separated numbers, windows member-major with
      the oldest row first.
    * The reply is ``m`` lines of ``dim`` numbers, one next-state per
      member, in request order.

    When the handshake advertises ``batch`` 1, all members of a forecast are
    sent in one request; otherwise the adapter loops one request per member.
    The adapter adds the caller's noise vector to each reply and enforces
    ``timeout`` seconds on every read.
    """

    def __init__(self, command: str | list[str], timeout: float = 30.0):
        if isinstance(command, str):
            command = shlex.split(command)
        if not command:
            raise ConfigError("external model command is empty")
        if not timeout > 0.0:
            raise ConfigError(f"timeout must be positive, got {timeout}")
        self.timeout = float(timeout)
        self._buf = b""
        try:
            self._proc = subprocess.Popen(
                command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
            )
        except OSError as exc:
            raise ExternalModelError(f"could not start external model {command!r}: {exc}") from exc
        handshake = self._read_line()
        parts = handshake.split()
        if len(parts) != 4 or parts[0] != "MODEL":
            raise ExternalModelError(
                f"bad handshake line, expected 'MODEL <dim> <window> <batch>', got {_excerpt(handshake)!r}"
            )
        try:
            self.dim = int(parts[1])
            self.window_length = int(parts[2])
            batch = int(parts[3])
        except ValueError as exc:
            raise ExternalModelError(f"non-integer handshake fields in {_excerpt(handshake)!r}") from exc
        if self.dim < 1 or self.window_length < 1 or batch not in (0, 1):
            raise ExternalModelError(f"handshake values out of range in {_excerpt(handshake)!r}")
        self.batch_mode = bool(batch)

    def _read_line(self) -> str:
        deadline = time.monotonic() + self.timeout
        fd = self._proc.stdout.fileno()
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ExternalModelError(
                    f"external model gave no reply within {self.timeout} s"
                )
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                raise ExternalModelError(
                    f"external model gave no reply within {self.timeout} s"
                )
            chunk = os.read(fd, 1 << 16)
            if not chunk:
                raise ExternalModelError(
                    "external model closed its output"
                    + (f"; partial reply {_excerpt(self._buf.decode(errors='replace'))!r}" if self._buf else "")
                )
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        return line.decode(errors="replace")

    def _write(self, text: str) -> None:
        try:
            self._proc.stdin.write(text.encode())
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExternalModelError(f"external model closed its input: {exc}") from exc

    def _parse_state_line(self, line: str) -> np.ndarray:
        parts = line.split()
        if len(parts) != self.dim:
            raise ExternalModelError(
                f"reply line has {len(parts)} values, expected {self.dim}: {_excerpt(line)!r}"
            )
        try:
            values = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise ExternalModelError(f"malformed number in reply line {_excerpt(line)!r}") from exc
        if not np.isfinite(values).all():
            raise ExternalModelError(f"non-finite value in reply line {_excerpt(line)!r}")
        return values

    def _request(self, windows: np.ndarray) -> np.ndarray:
        """Send one PREDICT request for (m, window_length, dim) windows."""
        m = windows.shape[0]
        lines = [f"PREDICT {m}\n"]
        for member in windows:
            for row in member:
                lines.append(" ".join(repr(float(v)) for v in row) + "\n")
        self._write("".join(lines))
        return np.stack([self._parse_state_line(self._read_line()) for _ in range(m)])

    def propagate(self, window, noise, step):
        window = np.asarray(window, dtype=float)
        self._check_window(window[None])
        return self._request(window[None])[0] + noise

    def propagate_batch(self, windows, noises, step):
        windows = np.asarray(windows, dtype=float)
        self._check_window(windows)
        if self.batch_mode:
            predictions = self._request(windows)
        else:
            predictions = np.concatenate([self._request(w[None]) for w in windows])
        return predictions + noises

    def _check_window(self, windows: np.ndarray) -> None:
        if windows.shape[1:] != (self.window_length, self.dim):
            raise ConfigError(
                f"window shape {windows.shape[1:]} does not match the handshake "
                f"({self.window_length}, {self.dim})"
            )
        if not np.isfinite(windows).all():
            raise DataError("window passed to external model has non-finite entries")

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        if self._proc.stdout is not None:
            self._proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def external_propagate(window: np.ndarray, model: ExternalModel, noise: np.ndarray) -> np.ndarray:
    """One-member forecast through an already-running external process."""
    return model.propagate(window, noise, step=0)
