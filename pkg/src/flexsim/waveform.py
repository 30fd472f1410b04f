"""Uniformly sampled simulation output and its CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Waveform:
    t: np.ndarray
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.columns = {k: np.asarray(v, dtype=float) for k, v in self.columns.items()}
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("waveform times must be strictly increasing")
        for k, v in self.columns.items():
            if v.shape != self.t.shape:
                raise ValueError(f"column {k!r} length differs from the time grid")

    @property
    def names(self):
        return list(self.columns)

    def __getitem__(self, name):
        return self.columns[name]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + self.names)
            cols = [self.t] + [self.columns[n] for n in self.names]
            for row in zip(*cols):
                w.writerow([f"{float(v):.17g}" for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        data = np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))
        return cls(data[:, 0], {n: data[:, j + 1] for j, n in enumerate(header[1:])})
