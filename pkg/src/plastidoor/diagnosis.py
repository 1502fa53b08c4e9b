"""Intervention rankings, pathological vectors, PD and the SCC pattern.

Rank 1 is best. Weight magnitude and sharpness are better when smaller;
effective rank is better when larger.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .interventions import CombinationSpec, make_config
from .pathology import PathologySeries

log = logging.getLogger(__name__)

CHARACTERISTICS = ("weight_magnitude", "effective_rank_ratio", "sharpness")
DIRECTIONS = {
    "weight_magnitude": "smaller",
    "effective_rank_ratio": "larger",
    "sharpness": "smaller",
}

SWEEPERS = ("sp", "wc", "redo")
CONVERTERS = ("sn", "wd", "ln")
CONNECTORS = ("sam",)

_ALIASES = {
    "shrinkperturb": "sp", "shrink&perturb": "sp", "sp": "sp",
    "weightclipping": "wc", "wc": "wc",
    "spectralnorm": "sn", "sn": "sn",
    "weightdecay": "wd", "wd": "wd",
    "layernorm": "ln", "ln": "ln",
    "redo": "redo",
    "sam": "sam",
}

MAD_SCALE = 1.4826
MAD_EPS = 1e-12


def intervention_key(name: str) -> str:
    """Map a display or config name ("WeightClipping", "wc") to its config key."""
    key = _ALIASES.get(name.replace(" ", "").replace("_", "").lower())
    if key is None:
        raise ValueError(f"unknown intervention {name!r}")
    return key


def rank_interventions(values: Sequence[float], direction: str = "smaller") -> np.ndarray:
    """Competition ranks with average ties; rank 1 is the best value.

    Non-finite values are ranked after every finite one (tied among
    themselves) and logged.
    """
    if direction not in ("smaller", "larger"):
        raise ValueError("direction must be 'smaller' or 'larger'")
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("need at least two interventions to rank")
    bad = ~np.isfinite(x)
    if bad.any():
        log.warning("ranking %d non-finite value(s) last", int(bad.sum()))
    key = -x if direction == "larger" else x.copy()
    key[bad] = np.inf
    return rankdata(key, method="average")


@dataclass(frozen=True)
class PathologicalVector:
    intervention: str
    components: tuple

    def __post_init__(self):
        if len(self.components) != 3:
            raise ValueError("a pathological vector has three components")
        for c in self.components:
            if c is not None and not 1.0 <= c <= 8.0:
                raise ValueError(f"component {c} of {self.intervention} outside [1, 8]")

    @property
    def complete(self) -> bool:
        return all(c is not None for c in self.components)

    def array(self) -> np.ndarray:
        if not self.complete:
            raise ValueError(f"vector for {self.intervention} is incomplete")
        return np.array(self.components, dtype=float)


def load_reference_vectors(path=None) -> dict[str, PathologicalVector]:
    """Reference vectors keyed by intervention config key; partial ones keep None gaps."""
    if path is None:
        text = resources.files("plastidoor").joinpath("data/reference_vectors.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    out = {}
    for section in ("vectors", "partial"):
        for k, comps in raw.get(section, {}).items():
            out[k] = PathologicalVector(k, tuple(None if c is None else float(c) for c in comps))
    return out


def _as_array(v) -> np.ndarray:
    return v.array() if isinstance(v, PathologicalVector) else np.asarray(v, dtype=float)


def pairwise_distance(v_i, v_j) -> float:
    return float(np.linalg.norm(_as_array(v_i) - _as_array(v_j)))


def pathological_diagnosis(members: Iterable) -> float:
    """Sum of Euclidean distances over unordered member pairs."""
    vs = [_as_array(m) for m in members]
    if not vs:
        raise ValueError("PD needs at least one member")
    return float(sum(pairwise_distance(a, b) for a, b in itertools.combinations(vs, 2)))


def scc_compose(sweeper: str, converter: str, connector: str,
                vectors: Mapping[str, PathologicalVector | Sequence[float]] | None = None):
    """Build a Sweeper-Converter-Connector combination.

    Returns ``(CombinationSpec, pd)``; ``pd`` is None when ``vectors`` does
    not hold complete vectors for all three members.
    """
    roles = (("sweeper", sweeper, SWEEPERS), ("converter", converter, CONVERTERS),
             ("connector", connector, CONNECTORS))
    keys = []
    for role, name, allowed in roles:
        try:
            key = intervention_key(name)
        except ValueError:
            raise ValueError(f"{role}: unknown intervention {name!r}") from None
        if key not in allowed:
            raise ValueError(f"{role}: {name!r} cannot act as {role}; choose from {allowed}")
        keys.append(key)
    spec = CombinationSpec("SCC(" + "+".join(keys) + ")", tuple(make_config(k) for k in keys))
    pd = None
    if vectors is not None:
        try:
            pd = pathological_diagnosis(vectors[k] for k in keys)
        except (KeyError, ValueError) as exc:
            log.info("PD unavailable for %s: %s", spec.name, exc)
    return spec, pd


@dataclass(frozen=True)
class AnomalyReport:
    flags: tuple[int, ...]
    z_scores: tuple[float, ...]
    window: int
    threshold: float
    steps: tuple[int, ...] = ()

    def __len__(self):
        return len(self.flags)


def robust_z(values: np.ndarray, window: int) -> np.ndarray:
    """Centered rolling |x - median| / (1.4826 MAD + eps); NaN where the window is incomplete."""
    x = np.asarray(values, dtype=float)
    half = window // 2
    z = np.full(x.shape, np.nan)
    if x.size < window:
        return z
    win = np.lib.stride_tricks.sliding_window_view(x, window)
    med = np.median(win, axis=1)
    mad = np.median(np.abs(win - med[:, None]), axis=1)
    centre = x[half:x.size - half]
    z[half:x.size - half] = np.abs(centre - med) / (MAD_SCALE * mad + MAD_EPS)
    return z


def detect_sharpness_anomaly(series: PathologySeries | Sequence[float], window: int = 11,
                             z_threshold: float = 6.0) -> AnomalyReport:
    """Flag sharpness spikes or drops against a centered rolling median."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and at least 3")
    if isinstance(series, PathologySeries):
        values, steps = series.values("sharpness"), series.steps
    else:
        values = np.asarray(series, dtype=float)
        steps = np.arange(values.size)
    z = robust_z(values, window)
    idx = np.flatnonzero(np.nan_to_num(z, nan=-math.inf) >= z_threshold)
    return AnomalyReport(tuple(int(i) for i in idx), tuple(float(z[i]) for i in idx), window,
                         float(z_threshold), tuple(int(steps[i]) for i in idx))
