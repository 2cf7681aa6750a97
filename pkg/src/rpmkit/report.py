import csv
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["FitReport", "NumericalAbort", "config_hash"]


def config_hash(config):
    """Stable short hash of a JSON-serialisable mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class NumericalAbort(FloatingPointError):
    """Fit loop hit a non-finite value; ``report`` holds the last good state."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class FitReport:
    """Free-energy trace and final metrics produced by a fit loop.

    Each trace row is ``(iteration, phase, value, seconds)`` with phase
    ``"E"`` or ``"M"`` and seconds measured from the start of the fit.
    """

    seed: object = None
    config_hash: str = ""
    trace: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    status: str = "ok"
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, iteration, phase, value):
        value = float(value)
        self.trace.append((int(iteration), phase, value, time.perf_counter() - self._t0))
        return value

    @property
    def free_energy(self):
        return np.array([row[2] for row in self.trace])

    def phase_values(self, phase):
        return np.array([row[2] for row in self.trace if row[1] == phase])

    def to_dict(self, wall_clock=True):
        out = {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "status": self.status,
            "final_free_energy": self.trace[-1][2] if self.trace else None,
            "metrics": self.metrics,
            "notes": self.notes,
            "warnings": self.warnings,
        }
        if wall_clock:
            out["seconds"] = self.trace[-1][3] if self.trace else 0.0
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "phase", "value", "seconds"])
            for it, phase, value, sec in self.trace:
                w.writerow([it, phase, repr(value), f"{sec:.6f}"])
