"""Test signals with derivative channels for the dynamical experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import DomainError

KINDS = ("sine", "sawtooth", "square")


@dataclass(frozen=True)
class Waveform:
    kind: str
    t: np.ndarray
    signal: np.ndarray
    d1: np.ndarray  # first time derivative
    d2: np.ndarray  # second time derivative

    def orders(self, step: int, n: int) -> list[np.ndarray]:
        """The first ``n`` derivative channels at ``step`` as length-1 vectors."""
        chans = (self.signal, self.d1, self.d2)
        return [np.array([chans[k][step]]) for k in range(n)]


def synth_waveforms(kind: str, steps: int, dt: float, frequency: float = 1.0, amplitude: float = 1.0) -> Waveform:
    """Sample ``steps`` points of a periodic signal at spacing ``dt``.

    The sine carries exact derivatives. Sawtooth and square waves are not
    differentiable at their jumps, so their derivative channels are central
    differences of the sampled signal (one-sided at the ends).
    """
    if kind not in KINDS:
        raise DomainError(f"unknown waveform {kind!r}; expected one of {KINDS}")
    if steps < 2 or dt <= 0:
        raise DomainError("need at least two steps and a positive dt")
    t = np.arange(steps) * dt
    w = 2.0 * np.pi * frequency
    if kind == "sine":
        s = amplitude * np.sin(w * t)
        return Waveform(kind, t, s, amplitude * w * np.cos(w * t), -amplitude * w * w * np.sin(w * t))
    phase = (t * frequency) % 1.0
    if kind == "sawtooth":
        s = amplitude * (2.0 * phase - 1.0)
    else:
        s = amplitude * np.where(phase < 0.5, 1.0, -1.0)
    d1 = np.gradient(s, dt)
    return Waveform(kind, t, s, d1, np.gradient(d1, dt))
