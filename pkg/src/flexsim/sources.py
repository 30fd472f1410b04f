"""Independent source waveforms and scheduled switching events."""

from __future__ import annotations

import bisect
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EventBoundaryError


@dataclass(frozen=True)
class SourceWaveform:
    """dc, sine (with optional harmonics) or step waveform.

    ``harmonics`` holds ``(multiple, amplitude, phase)`` triples added on top of
    the fundamental.
    """

    kind: str
    value: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0
    phase: float = 0.0
    offset: float = 0.0
    harmonics: tuple = ()
    before: float = 0.0
    after: float = 0.0
    at: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dc", "sine", "step"):
            raise ValueError(f"unknown waveform kind {self.kind!r}")
        if self.kind == "sine" and not self.frequency > 0:
            raise ValueError("sine frequency must be positive")

    @classmethod
    def dc(cls, value):
        return cls("dc", value=float(value))

    @classmethod
    def sine(cls, amplitude, frequency, phase=0.0, offset=0.0, harmonics=()):
        return cls("sine", amplitude=float(amplitude), frequency=float(frequency),
                   phase=float(phase), offset=float(offset),
                   harmonics=tuple(tuple(map(float, h)) for h in harmonics))

    @classmethod
    def step(cls, before, after, at):
        return cls("step", before=float(before), after=float(after), at=float(at))

    def discontinuities(self):
        return (self.at,) if self.kind == "step" else ()

    def coefficients(self, t: float, order: int, side: str | None = None) -> np.ndarray:
        """Normalized derivative stack ``u^(k)(t)/k!`` for ``k = 0..order``."""
        out = np.zeros(order + 1)
        if self.kind == "dc":
            out[0] = self.value
        elif self.kind == "step":
            if t == self.at and side is None:
                raise EventBoundaryError(f"step source evaluated at its jump t={t}")
            right = t > self.at or (t == self.at and side == "+")
            out[0] = self.after if right else self.before
        else:
            out[0] = self.offset
            tones = [(1.0, self.amplitude, self.phase)] + list(self.harmonics)
            for mult, amp, ph in tones:
                w = 2.0 * math.pi * self.frequency * mult
                arg = w * t + ph
                for k in range(order + 1):
                    out[k] += w**k * amp * math.sin(arg + k * math.pi / 2) / math.factorial(k)
        return out


@dataclass(frozen=True)
class SourceSet:
    """Ordered collection of waveforms forming the input vector ``u_1``."""

    names: tuple[str, ...] = ()
    waveforms: tuple[SourceWaveform, ...] = ()

    @classmethod
    def from_dict(cls, mapping):
        return cls(tuple(mapping), tuple(mapping.values()))

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def discontinuities(self):
        return sorted({t for w in self.waveforms for t in w.discontinuities()})


def u1_derivatives(sources: SourceSet, t: float, order: int, side: str | None = None) -> np.ndarray:
    """Coefficient matrix of shape ``(order + 1, len(sources))``."""
    out = np.zeros((order + 1, len(sources)))
    for j, w in enumerate(sources.waveforms):
        out[:, j] = w.coefficients(t, order, side)
    return out


@dataclass(frozen=True)
class Event:
    """Switch update at ``time``: bits in ``set_mask`` close, bits in ``clear_mask`` open.

    ``source_step`` marks a time where some step source jumps.
    """

    time: float
    set_mask: int = 0
    clear_mask: int = 0
    source_step: bool = False

    def apply(self, mask: int) -> int:
        return (mask | self.set_mask) & ~self.clear_mask


@dataclass(frozen=True)
class EventSchedule:
    events: tuple[Event, ...] = ()
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise ValueError("event schedule must be sorted by time")
        if len(set(times)) != len(times):
            raise ValueError("event times must be unique; merge simultaneous events")

    @property
    def times(self):
        return [e.time for e in self.events]

    def merged(self, other: "EventSchedule") -> "EventSchedule":
        return merge_events(list(self.events) + list(other.events),
                            warnings=self.warnings + other.warnings)

    def initial_mask(self, t_start: float, mask: int = 0) -> int:
        """Apply every event at or before ``t_start`` to ``mask``."""
        for e in self.events:
            if e.time <= t_start:
                mask = e.apply(mask)
        return mask

    def next_index(self, t: float) -> int:
        """Index of the first event strictly after ``t``."""
        return bisect.bisect_right(self.times, t)

    def restricted(self, t_start: float, t_end: float) -> "EventSchedule":
        return EventSchedule(tuple(e for e in self.events if t_start < e.time < t_end),
                             self.warnings)


def merge_events(events, warnings=()) -> EventSchedule:
    """Sort events and fold simultaneous ones into a single event."""
    by_time: dict[float, Event] = {}
    for e in sorted(events, key=lambda e: e.time):
        prev = by_time.get(e.time)
        if prev is None:
            by_time[e.time] = e
        else:
            # later entries win on conflicting bits
            set_mask = (prev.set_mask & ~e.clear_mask) | e.set_mask
            clear_mask = (prev.clear_mask & ~e.set_mask) | e.clear_mask
            by_time[e.time] = Event(e.time, set_mask, clear_mask,
                                    prev.source_step or e.source_step)
    return EventSchedule(tuple(by_time[t] for t in sorted(by_time)), tuple(warnings))


def step_events(sources: SourceSet, t_span) -> EventSchedule:
    t0, t1 = t_span
    return merge_events([Event(t, source_step=True)
                         for t in sources.discontinuities() if t0 < t < t1])


def pwm_schedule(carrier_freq: float, modulators, t_span) -> EventSchedule:
    """Regular-sampled PWM gate events.

    ``modulators`` maps ``(upper_bit, lower_bit)`` to a duty function of time.
    Duty is sampled at each carrier period start ``t_k``; the upper switch
    closes at ``t_k`` and opens at ``t_k + d*T``, the lower one is its
    complement (no dead time).  The first period always emits an event fixing
    both gates; later events are emitted only when a gate actually changes.
    """
    if not carrier_freq > 0:
        raise ValueError("carrier frequency must be positive")
    t0, t1 = map(float, t_span)
    period = 1.0 / carrier_freq
    if t1 - t0 < period * (1 - 1e-12):
        msg = f"span {t1 - t0:g} s shorter than one carrier period {period:g} s"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return EventSchedule((), (msg,))
    events = []
    for (upper, lower), duty_fn in modulators.items():
        up_bit, lo_bit = 1 << upper, 1 << lower
        on = lambda t: Event(t, set_mask=up_bit, clear_mask=lo_bit)
        off = lambda t: Event(t, set_mask=lo_bit, clear_mask=up_bit)
        state = None
        k = 0
        while (tk := t0 + k * period) < t1:
            k += 1
            d = float(duty_fn(tk))
            if not 0.0 <= d <= 1.0:
                raise ValueError(f"duty {d} outside [0, 1] at t={tk}")
            if d > 0.0:
                if state is not True:
                    events.append(on(tk))
                    state = True
                t_off = tk + d * period
                if d < 1.0 and t_off < t1:
                    events.append(off(t_off))
                    state = False
            elif state is not False:
                events.append(off(tk))
                state = False
    return merge_events(events)
