"""Test-time corruption harness: sensor malfunctions and repositioning.

Corruptions apply to raw test segments / the registry only; all
train-fitted statistics are reused unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .ingest import (CANVAS, ActivitySegment, Modality, RegistryEntry, SensorRegistry)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str                      # malfunction | reposition
    a_pct: float = 0.0             # fraction of segments touched, in percent
    b_pct: float = 0.0             # fraction of events replaced per segment, in percent
    variance: float = 0.0          # squared canvas-pixel units for reposition
    seed: int = 0

    def __post_init__(self):
        if self.kind == "malfunction":
            if not (0 < self.a_pct <= 100 and 0 < self.b_pct <= 100):
                raise ConfigError("malfunction percentages must lie in (0,100]")
        elif self.kind == "reposition":
            if self.variance <= 0:
                raise ConfigError("reposition variance must be > 0")
        else:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")

    def echo(self) -> dict:
        if self.kind == "malfunction":
            return {"kind": self.kind, "a": self.a_pct, "b": self.b_pct, "seed": self.seed}
        return {"kind": self.kind, "variance": self.variance, "seed": self.seed}


_DEFAULT_VALUE = {Modality.MOTION: "OFF", Modality.DOOR: "CLOSE", Modality.OTHER: "OFF"}


def _default_value(modality: Modality, temperature_minimum: Optional[float]) -> str:
    if modality is Modality.TEMPERATURE:
        if temperature_minimum is None:
            return "0"
        return repr(float(temperature_minimum))
    return _DEFAULT_VALUE[modality]


def corrupt_malfunction(segments, a_pct: float, b_pct: float, seed: int = 0,
                        temperature_minimum: Optional[float] = None):
    """Replace events with modality defaults in a deterministic random subset.

    Exactly round(a% * N) segments are picked; within each, exactly
    round(b% * n) events (at least 1) get their raw value replaced.
    Sequence lengths never change.
    """
    spec = CorruptionSpec(kind="malfunction", a_pct=a_pct, b_pct=b_pct, seed=seed)
    rng = np.random.default_rng(seed)
    n_pick = int(round(a_pct / 100.0 * len(segments)))
    picked = set(rng.choice(len(segments), size=n_pick, replace=False).tolist())
    out = []
    for si, segment in enumerate(segments):
        if si not in picked:
            out.append(segment)
            continue
        n_events = len(segment.events)
        n_replace = max(1, int(round(b_pct / 100.0 * n_events)))
        n_replace = min(n_replace, n_events)
        sub_rng = np.random.default_rng((seed, si))
        targets = set(sub_rng.choice(n_events, size=n_replace, replace=False).tolist())
        events = [
            replace(e, raw_value=_default_value(e.modality, temperature_minimum),
                    annotation=e.annotation)
            if ei in targets else e
            for ei, e in enumerate(segment.events)
        ]
        out.append(ActivitySegment(label=segment.label, events=events, span=segment.span))
    return out, spec


def perturb_positions(registry: SensorRegistry, variance: float, seed: int = 0):
    """Add independent zero-mean Gaussian noise (variance in pixel^2) to coordinates."""
    spec = CorruptionSpec(kind="reposition", variance=variance, seed=seed)
    rng = np.random.default_rng(seed)
    sigma = float(np.sqrt(variance))
    entries = []
    for entry in registry.entries:
        noise = rng.normal(0.0, sigma, size=2)
        u = float(np.clip(entry.coord[0] + noise[0], 0.0, CANVAS - 1e-6))
        v = float(np.clip(entry.coord[1] + noise[1], 0.0, CANVAS - 1e-6))
        entries.append(RegistryEntry(sensor_id=entry.sensor_id, modality=entry.modality,
                                     index=entry.index, coord=(u, v)))
    return SensorRegistry(entries=entries), spec
