"""Plain-text model files.

One ``key = value`` pair per line; vectors are space-separated.  Every real
is written with 17 significant digits, so reading a file back reproduces the
fitted parameters exactly.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import StandardizationRecord
from .em import CrowdParams

FORMAT = "crowdsparse-model/1"
METHODS = ("em", "em-sparse", "majority", "oracle")


class ModelFileError(ValueError):
    """Malformed or inconsistent model file."""


@dataclass(frozen=True, eq=False)
class SavedModel:
    """A fitted classifier plus what is needed to apply it to raw features.

    Logistic baselines store their coefficients in ``params.beta`` with zero
    ``alpha`` and ``gamma``, so votes passed at prediction time have no effect.
    """

    params: CrowdParams
    lam: float
    method: str = "em"
    flipped: bool = False
    standardization: Optional[StandardizationRecord] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ModelFileError(f"unknown method {self.method!r}")
        if self.standardization is not None and self.standardization.mean.size != self.params.k:
            raise ModelFileError("standardization record does not match the feature count")

    def prepare(self, features: np.ndarray) -> np.ndarray:
        """Raw features on the scale the model was fitted on."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.params.k:
            raise ModelFileError(f"model expects {self.params.k} feature columns")
        return x if self.standardization is None else self.standardization.transform(x)


def _vec(v) -> str:
    return " ".join(format(float(x), ".17g") for x in np.asarray(v).ravel())


def dumps(model: SavedModel) -> str:
    p = model.params
    lines = [f"# {FORMAT}",
             f"format = {FORMAT}",
             f"method = {model.method}",
             f"d = {p.d}",
             f"k = {p.k}",
             f"lambda = {model.lam:.17g}",
             f"flipped = {'true' if model.flipped else 'false'}",
             f"alpha = {_vec(p.alpha)}",
             f"gamma = {_vec(p.gamma)}",
             f"beta = {_vec(p.beta)}"]
    if model.standardization is None:
        lines.append("standardized = false")
    else:
        lines += ["standardized = true",
                  f"standardization_mean = {_vec(model.standardization.mean)}",
                  f"standardization_scale = {_vec(model.standardization.scale)}"]
    return "\n".join(lines) + "\n"


def save(model: SavedModel, path) -> Path:
    path = Path(path)
    path.write_text(dumps(model))
    return path


def _parse_vec(text: str, n: int, key: str) -> np.ndarray:
    parts = text.split()
    if len(parts) != n:
        raise ModelFileError(f"{key}: expected {n} values, found {len(parts)}")
    try:
        out = np.array([float(t) for t in parts], dtype=np.float64)
    except ValueError as exc:
        raise ModelFileError(f"{key}: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise ModelFileError(f"{key}: non-finite value")
    return out


def _parse_bool(text: str, key: str) -> bool:
    if text not in ("true", "false"):
        raise ModelFileError(f"{key}: expected true or false")
    return text == "true"


def loads(text: str) -> SavedModel:
    kv = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ModelFileError(f"line {i}: expected 'key = value'")
        key = key.strip()
        if key in kv:
            raise ModelFileError(f"line {i}: duplicate key {key!r}")
        kv[key] = value.strip()
    required = ("format", "method", "d", "k", "lambda", "flipped", "alpha", "gamma", "beta",
                "standardized")
    missing = [k for k in required if k not in kv]
    if missing:
        raise ModelFileError(f"missing key(s): {', '.join(missing)}")
    if kv["format"] != FORMAT:
        raise ModelFileError(f"unsupported format {kv['format']!r}")
    try:
        d, k = int(kv["d"]), int(kv["k"])
        lam = float(kv["lambda"])
    except ValueError as exc:
        raise ModelFileError(str(exc)) from None
    if d < 0 or k < 1:
        raise ModelFileError("d must be non-negative and k positive")
    params = CrowdParams(_parse_vec(kv["alpha"], d, "alpha"), _parse_vec(kv["gamma"], k, "gamma"),
                         _parse_vec(kv["beta"], k + 1, "beta"))
    record = None
    if _parse_bool(kv["standardized"], "standardized"):
        for key in ("standardization_mean", "standardization_scale"):
            if key not in kv:
                raise ModelFileError(f"missing key {key}")
        record = StandardizationRecord(_parse_vec(kv["standardization_mean"], k, "standardization_mean"),
                                       _parse_vec(kv["standardization_scale"], k, "standardization_scale"))
    return SavedModel(params, lam, kv["method"], _parse_bool(kv["flipped"], "flipped"), record)


def load(path) -> SavedModel:
    return loads(Path(path).read_text())
