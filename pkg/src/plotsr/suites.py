"""Dataset ingestion, benchmark suites and the noise model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .expr import parse_candidate
from .numfit import Dataset


class MalformedCsv(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyData(ValueError):
    pass


class UnknownSuite(KeyError):
    pass


def load_dataset(path) -> Dataset:
    """Read ``x,y`` or ``x1,...,xd,y`` columns with a header row."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [(k + 1, r) for k, r in enumerate(rows) if any(c.strip() for c in r)]
    if not rows:
        raise EmptyData(f"{path} is empty")
    (_, header), body = rows[0], rows[1:]
    width = len(header)
    if width < 2:
        raise MalformedCsv("need at least one input column and a target column", rows[0][0])
    if not body:
        raise EmptyData(f"{path} has a header but no data rows")
    values = np.empty((len(body), width))
    for k, (line, row) in enumerate(body):
        if len(row) != width:
            raise MalformedCsv(f"expected {width} columns, found {len(row)}", line)
        try:
            values[k] = [float(c) for c in row]
        except ValueError:
            raise MalformedCsv(f"non-numeric cell in {row!r}", line) from None
        if not np.all(np.isfinite(values[k])):
            raise MalformedCsv("non-finite value", line)
    if len(body) < 2:
        raise EmptyData("need at least two data rows")
    return Dataset(values[:, :-1], values[:, -1])


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    source: str  # target as expression text over x (or x, y, z)
    ranges: tuple[tuple[float, float], ...]
    n_points: int
    grid: str = "linspace"  # or "uniform" for random draws
    seed: int = 0

    @property
    def d(self) -> int:
        return len(self.ranges)

    def target(self):
        return parse_candidate(self.source, self.d)

    def dataset(self) -> Dataset:
        if self.grid == "linspace":
            if self.d != 1:
                raise ValueError("evenly spaced grids are univariate")
            lo, hi = self.ranges[0]
            X = np.linspace(lo, hi, self.n_points)[:, None]
        else:
            rng = np.random.default_rng(self.seed)
            lo = np.array([r[0] for r in self.ranges])
            hi = np.array([r[1] for r in self.ranges])
            X = lo + (hi - lo) * rng.random((self.n_points, self.d))
        y = self.target().compile()(X, np.zeros(0))
        return Dataset(X, y, self.ranges)


TABLE1 = (
    "np.sqrt(np.abs(np.sin(x)))",
    "np.exp(1.83169 - 3.35509 / x)",
    "x ** 3",
    "(np.sqrt(x) + 1.44439) * (np.log(x) + np.pi)",
    "3.09529 * x ** 3",
    "(x ** 3 + np.pi) ** 2",
    "51.2288 * np.cos(1.18219 * x)",
    "-55.0512 * (np.sqrt(x) + 1.0)",
    "x",
    "np.exp(np.cos(x)) - 0.0126997",
    "1.54251 - x",
    "np.exp(2 * x)",
    "4.01209 + np.exp(x)",
    "0.729202 * np.sqrt(x) - np.pi",
    "-3 * x ** 3 + x + 1.99594",
    "np.log(x + 1)",
    "np.sin(np.log(4.1746 / x))",
    "np.cos(np.exp(x)) + 4.67315",
    "2 * np.exp(-3 * x) + np.exp(-x)",
    "(x + 4.11509) / x ** 3",
)

XVALS1 = ((-3.0, 3.0), 100)
XVALS2 = ((-10.0, 10.0), 500)


def _table1():
    return [SuiteEntry(f"f{k + 1:02d}", src, ((0.1, 5.0),), 100) for k, src in enumerate(TABLE1)]


def _special():
    out = []
    for name, src in (("erf", "scipy.special.erf(x)"), ("j0", "scipy.special.jv(0, x)")):
        for grid, (rng, n) in (("xvals1", XVALS1), ("xvals2", XVALS2)):
            out.append(SuiteEntry(f"{name}_{grid}", src, (rng,), n))
    return out


def _multivar():
    return [
        SuiteEntry("example1", "np.exp(np.sin(np.pi * x) + y ** 2)", ((-1.0, 1.0),) * 2, 10_000, "uniform", 1),
        SuiteEntry("example2", "x * y", ((1.0, 2.0),) * 2, 10_000, "uniform", 2),
        SuiteEntry("example3", "x * y / z", ((0.5, 3.0),) * 3, 10_000, "uniform", 3),
    ]


_SUITES = {"table1": _table1, "special": _special, "multivar": _multivar}
NOISE_FUNCTIONS = ("f03", "f07", "f09", "f13")


def builtin_suites() -> dict[str, list[SuiteEntry]]:
    return {name: make() for name, make in _SUITES.items()}


def get_suite(name: str) -> list[SuiteEntry]:
    if name not in _SUITES:
        raise UnknownSuite(f"unknown suite {name!r}; choose from {sorted(_SUITES)}")
    return _SUITES[name]()


def find_entry(name: str) -> SuiteEntry:
    """``suite/entry`` or a bare entry name searched across all suites."""
    if "/" in name:
        suite, entry = name.split("/", 1)
        entries = get_suite(suite)
    else:
        entry = name
        entries = [e for es in builtin_suites().values() for e in es]
    for e in entries:
        if e.name == entry:
            return e
    raise UnknownSuite(f"no suite entry named {name!r}")


@dataclass(frozen=True)
class NoiseSpec:
    epsilon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0 or math.isinf(self.epsilon):
            raise ValueError("epsilon must be finite and >= 0")


def noise_sigma(data: Dataset, spec: NoiseSpec) -> float:
    return spec.epsilon * float(np.max(np.abs(data.targets)))


def add_noise(data: Dataset, spec: NoiseSpec) -> Dataset:
    """y + xi with xi ~ Normal(0, (epsilon * max|y|)^2); epsilon = 0 returns ``data``."""
    if spec.epsilon == 0:
        return data
    rng = np.random.default_rng(spec.seed)
    xi = rng.normal(0.0, noise_sigma(data, spec), size=data.n)
    return Dataset(data.inputs, data.targets + xi, data.input_ranges)
