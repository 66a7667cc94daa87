"""Single event neuron in isolation, for checking error retention directly.

The neuron computes ``g(x) = w . x`` followed by ``f`` and keeps the three
state variables a (accumulator), b (best estimate) and d (untransmitted
change). All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS: dict[str, Callable[[float], float]] = {
    "identity": lambda v: v,
    "relu": lambda v: v if v > 0.0 else 0.0,
}


@dataclass
class EventNeuron:
    weights: np.ndarray
    f: str = "identity"
    a: float = 0.0
    memory: bool = True
    b: float = field(init=False)
    d: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self._f = ACTIVATIONS[self.f]
        self.b = self._f(self.a)

    def receive(self, delta_in: Sequence[float]) -> None:
        """a <- a + g(delta); d <- d + f(a) - b; b <- f(a)."""
        self.a += float(self.weights @ np.asarray(delta_in, dtype=np.float64))
        fa = self._f(self.a)
        self.d += fa - self.b
        self.b = fa

    def transmit(self, fire: bool) -> float:
        """Send d if ``fire``; without memory the remainder is discarded either way."""
        out = self.d if fire else 0.0
        if fire or not self.memory:
            self.d = 0.0
        return out

    def step(self, delta_in: Sequence[float], threshold: float | None = None,
             fire: bool | None = None) -> float:
        if fire is None and threshold is None:
            raise ValueError("need a threshold or an explicit fire decision")
        self.receive(delta_in)
        if fire is None:
            fire = abs(self.d) > threshold
        return self.transmit(fire)


@dataclass
class ProbeResult:
    a_final: float
    d_final: float
    b_final: float
    a_expected: float
    d_expected: float
    sum_in: np.ndarray
    sum_out: float
    a_error: float
    d_error: float

    def holds(self, tol: float = 1e-6) -> bool:
        return self.a_error <= tol and self.d_error <= tol


def error_retention_probe(weights: Sequence[float], schedule: np.ndarray, a0: float = 0.0,
                          f: str = "identity", threshold: float | None = None,
                          fire_pattern: Sequence[bool] | None = None) -> ProbeResult:
    """Drive one neuron through ``schedule`` (T x n input deltas) and check the
    closed forms for the final a and d against instrumented sums.

    Firing follows ``fire_pattern`` when given, else ``|d| > threshold``.
    """
    schedule = np.asarray(schedule, dtype=np.float64)
    neuron = EventNeuron(weights, f=f, a=a0)
    f_fn = ACTIVATIONS[f]
    sum_in = np.zeros(schedule.shape[1])
    sum_out = 0.0
    for t, delta in enumerate(schedule):
        fire = None if fire_pattern is None else bool(fire_pattern[t])
        sum_out += neuron.step(delta, threshold=threshold, fire=fire)
        sum_in += delta
    a_expected = a0 + float(neuron.weights @ sum_in)
    d_expected = f_fn(neuron.a) - f_fn(a0) - sum_out
    return ProbeResult(neuron.a, neuron.d, neuron.b, a_expected, d_expected, sum_in, sum_out,
                       abs(neuron.a - a_expected), abs(neuron.d - d_expected))


def drift_scenario(targets: Sequence[float], threshold: float,
                   memory: bool = True) -> tuple[float, list[float]]:
    """Feed a sequence of activation values to one identity neuron starting at 0.

    Returns the final error (total transmitted minus actual change, so a
    neuron that never fires on a rise of 2 ends at -2) and the per-step
    transmitted deltas.
    """
    neuron = EventNeuron([1.0], a=0.0, memory=memory)
    prev = 0.0
    sent = []
    for value in targets:
        sent.append(neuron.step([value - prev], threshold=threshold))
        prev = value
    return sum(sent) - neuron.b, sent
