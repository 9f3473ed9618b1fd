"""Synthetic features, latent labels and expert votes.

Four vote regimes are supported. ``ConstantError`` uses error rates that ignore
the features. ``ModelBased`` draws flips from the model's own expert mechanism,
and ``ModelBasedSquared`` applies that mechanism to squared covariates, which the
model cannot represent. ``HarmonicError`` gives experts that err independently
of each other yet in a feature-dependent way.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml
from scipy.special import expit, ndtr

from .data import Dataset, load_features_csv, save_csv
from .data import _parse_labels as _load_labels


class ConfigError(ValueError):
    """Invalid simulation configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, path=None, line: Optional[int] = None,
                 key: Optional[str] = None):
        self.message, self.path, self.line, self.key = message, path, line, key
        where = f"{path}:{line}: " if path is not None and line else (f"{path}: " if path else "")
        super().__init__(where + message)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class ConstantError:
    error: tuple

    name = "constant"

    @property
    def d(self) -> int:
        return len(self.error)


@dataclass(frozen=True)
class ModelBased:
    alpha: tuple
    gamma: tuple

    name = "model"

    @property
    def d(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True)
class ModelBasedSquared(ModelBased):
    name = "model_squared"


@dataclass(frozen=True)
class HarmonicError:
    """Expert ``r`` (1-based) errs with probability ``base + amplitude*cos(2*pi*r*U)``.

    ``U`` is the normal CDF of the standardized feature ``feature``.  The
    conditional error curves are orthogonal in ``U``, so errors of different
    experts are uncorrelated while each expert's errors track the feature.
    """

    d: int
    base: float
    amplitude: float
    feature: int = 0

    name = "harmonic"


VoteScheme = Union[ConstantError, ModelBased, ModelBasedSquared, HarmonicError]


@dataclass(frozen=True)
class FeatureSpec:
    """Informative multivariate-normal block followed by independent N(0,1) noise columns.

    Alternatively ``csv`` names an external feature file; its labels then come
    from ``labels_csv`` instead of the logistic generator.
    """

    mean: tuple = ()
    cov: tuple = ()
    noise: int = 0
    csv: Optional[str] = None
    labels_csv: Optional[str] = None

    @property
    def informative(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class SimulationConfig:
    n: int
    seed: int
    features: FeatureSpec
    beta: tuple
    votes: VoteScheme
    vote_seed: Optional[int] = None
    subsample: Optional[int] = None

    def __post_init__(self):
        validate(self)

    @property
    def k(self) -> int:
        return self.features.informative + self.features.noise

    @property
    def eps_bar(self) -> Optional[float]:
        """Mean expert error rate when it is known in closed form."""
        if isinstance(self.votes, ConstantError):
            return float(np.mean(self.votes.error))
        if isinstance(self.votes, HarmonicError):
            return float(self.votes.base)
        return None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["votes"] = {"scheme": self.votes.name, **asdict(self.votes)}
        return out


def validate(cfg: SimulationConfig):
    def fail(msg, key):
        raise ConfigError(msg, key=key)

    fs = cfg.features
    if fs.csv is None:
        if cfg.n < 1:
            fail("n must be a positive integer", "n")
        m = fs.informative
        cov = np.asarray(fs.cov, dtype=float)
        if m == 0:
            fail("features.mean must list at least one value", "features.mean")
        if cov.shape != (m, m):
            fail(f"features.cov must be {m}x{m}", "features.cov")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            fail("features.cov must be symmetric", "features.cov")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            fail("features.cov must be positive definite", "features.cov")
        if fs.noise < 0:
            fail("features.noise must be non-negative", "features.noise")
        if len(cfg.beta) != m + fs.noise + 1:
            fail(f"beta must have {m + fs.noise + 1} entries (intercept + one per feature); "
                 "noise columns take zero coefficients", "beta")
        n_inf = m
    else:
        if fs.labels_csv is None:
            fail("external features need features.labels_csv", "features.csv")
        n_inf = None
    v = cfg.votes
    if isinstance(v, ConstantError):
        if v.d < 1 or any(not 0.0 <= e <= 1.0 for e in v.error):
            fail("votes.error entries must lie in [0, 1]", "votes.error")
    elif isinstance(v, ModelBased):
        if v.d < 1:
            fail("votes.alpha must list one offset per expert", "votes.alpha")
        if n_inf is not None and len(v.gamma) != n_inf:
            fail(f"votes.gamma has {len(v.gamma)} entries but there are {n_inf} informative "
                 "features", "votes.gamma")
    elif isinstance(v, HarmonicError):
        if v.d < 1:
            fail("votes.d must be positive", "votes.d")
        if not 0.0 <= v.amplitude <= min(v.base, 1.0 - v.base):
            fail("votes.amplitude must be in [0, min(base, 1 - base)]", "votes.amplitude")
        if n_inf is not None and not 0 <= v.feature < n_inf:
            fail("votes.feature must index an informative feature", "votes.feature")
    if cfg.subsample is not None and not 1 <= cfg.subsample <= v.d:
        fail(f"subsample must be between 1 and {v.d}", "subsample")


def _node_lines(node, prefix="", out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}{k.value}"
            out[key] = k.start_mark.line + 1
            _node_lines(v, key + ".", out)
    return out


def _scheme_from_dict(raw: dict, fail) -> VoteScheme:
    scheme = raw.get("scheme")
    try:
        if scheme == "constant":
            return ConstantError(tuple(float(e) for e in raw["error"]))
        if scheme in ("model", "model_squared"):
            cls = ModelBased if scheme == "model" else ModelBasedSquared
            alpha = tuple(float(a) for a in raw["alpha"])
            gamma = tuple(float(g) for g in raw["gamma"])
            if "experts" in raw and int(raw["experts"]) != len(alpha):
                fail(f"votes.experts is {raw['experts']} but alpha has {len(alpha)} entries",
                     "votes.experts")
            return cls(alpha, gamma)
        if scheme == "harmonic":
            return HarmonicError(int(raw["d"]), float(raw["base"]), float(raw["amplitude"]),
                                 int(raw.get("feature", 0)))
    except KeyError as exc:
        fail(f"votes scheme {scheme!r} needs key {exc.args[0]!r}", "votes")
    fail(f"unknown votes.scheme {scheme!r} (constant, model, model_squared, harmonic)",
         "votes.scheme" if "scheme" in raw else "votes")


def config_from_dict(raw: dict, lines: Optional[dict] = None, path=None,
                     base_dir=None) -> SimulationConfig:
    lines = lines or {}

    def fail(msg, key):
        raise ConfigError(msg, path, lines.get(key))

    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping", path, 1)
    known = {"n", "seed", "features", "beta", "votes", "vote_seed", "subsample"}
    for key in raw:
        if key not in known:
            fail(f"unknown key {key!r}", key)
    for key in ("seed", "features", "votes"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}", path)
    fraw = raw["features"]
    if not isinstance(fraw, dict):
        fail("features must be a mapping", "features")
    base_dir = Path(base_dir) if base_dir is not None else Path(".")
    if "csv" in fraw:
        csv_path = str(base_dir / fraw["csv"])
        labels = fraw.get("labels_csv")
        fs = FeatureSpec(csv=csv_path, labels_csv=None if labels is None else str(base_dir / labels))
    else:
        try:
            fs = FeatureSpec(tuple(float(m) for m in fraw["mean"]),
                             tuple(tuple(float(c) for c in row) for row in fraw["cov"]),
                             int(fraw.get("noise", 0)))
        except KeyError as exc:
            fail(f"features needs key {exc.args[0]!r}", "features")
        except (TypeError, ValueError):
            fail("features.mean/cov must be numeric", "features")
    vraw = raw["votes"]
    if not isinstance(vraw, dict):
        fail("votes must be a mapping", "votes")
    scheme = _scheme_from_dict(vraw, fail)
    beta = raw.get("beta")
    if beta is None:
        if fs.csv is None:
            raise ConfigError("missing required key 'beta'", path)
        beta = ()
    try:
        beta = tuple(float(b) for b in beta)
    except (TypeError, ValueError):
        fail("beta must be a list of numbers", "beta")
    if fs.csv is None and "n" not in raw:
        raise ConfigError("missing required key 'n'", path)
    try:
        return SimulationConfig(
            n=int(raw.get("n", 0)), seed=int(raw["seed"]), features=fs, beta=beta,
            votes=scheme,
            vote_seed=None if raw.get("vote_seed") is None else int(raw["vote_seed"]),
            subsample=None if raw.get("subsample") is None else int(raw["subsample"]))
    except ConfigError as exc:
        raise ConfigError(exc.message, path, lines.get(exc.key)) from None


def load_config(path) -> SimulationConfig:
    """Parse a YAML simulation config; errors name the offending line."""
    path = Path(path)
    text = path.read_text()
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            raw = loader.construct_document(node) if node is not None else None
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", path,
                          None if mark is None else mark.line + 1) from None
    if node is None:
        raise ConfigError("empty configuration", path)
    return config_from_dict(raw, _node_lines(node), path, base_dir=path.parent)


# -- sampling -----------------------------------------------------------------


def sample_mvnormal(mean, cov, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. rows ``mean + L e`` with ``L`` the lower Cholesky factor of ``cov``."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (mean.size, mean.size) or not np.allclose(cov, cov.T):
        raise ValueError("covariance must be a symmetric matrix matching the mean")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return mean + rng.standard_normal((n, mean.size)) @ chol.T


def _streams(cfg: SimulationConfig):
    vote_seed = cfg.seed if cfg.vote_seed is None else cfg.vote_seed
    return (np.random.default_rng([cfg.seed, 0]), np.random.default_rng([cfg.seed, 1]),
            np.random.default_rng([vote_seed, 2]))


def _draw_features(cfg: SimulationConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    fs = cfg.features
    inform = sample_mvnormal(fs.mean, fs.cov, n, rng)
    if fs.noise:
        return np.hstack([inform, rng.standard_normal((n, fs.noise))])
    return inform


def expert_error_prob(cfg: SimulationConfig, features: np.ndarray) -> np.ndarray:
    """n x d matrix of P(vote differs from the true label)."""
    v = cfg.votes
    n = features.shape[0]
    if isinstance(v, ConstantError):
        return np.broadcast_to(np.asarray(v.error, dtype=float), (n, v.d)).copy()
    if isinstance(v, ModelBased):
        g = np.asarray(v.gamma)
        if g.size > features.shape[1]:
            raise ValueError(f"gamma has {g.size} entries but only {features.shape[1]} features")
        x = features[:, : g.size]
        if isinstance(v, ModelBasedSquared):
            x = x ** 2
        return expit(-(np.asarray(v.alpha)[None, :] + (x @ g)[:, None]))
    if isinstance(v, HarmonicError):
        col = features[:, v.feature]
        if cfg.features.csv is None:
            u = ndtr((col - cfg.features.mean[v.feature]) / np.sqrt(cfg.features.cov[v.feature][v.feature]))
        else:
            u = (np.argsort(np.argsort(col)) + 0.5) / col.size
        r = np.arange(1, v.d + 1)
        return v.base + v.amplitude * np.cos(2 * np.pi * r[None, :] * u[:, None])
    raise TypeError(f"unknown vote scheme {v!r}")


def truth_prob(cfg: SimulationConfig, features: np.ndarray) -> np.ndarray:
    beta = np.asarray(cfg.beta)
    return expit(beta[0] + features @ beta[1:])


@dataclass(frozen=True, eq=False)
class Scenario:
    dataset: Dataset
    generator: SimulationConfig
    bayes_risk: Optional[float] = None
    full_votes: Optional[np.ndarray] = field(default=None, repr=False)


def generate(cfg: SimulationConfig, bayes_mc: int = 0) -> Scenario:
    """Draw features, true labels and votes.

    Features and labels use streams derived from ``seed``; votes use a stream
    derived from ``vote_seed`` (default ``seed``), so changing only the vote
    seed leaves features and labels unchanged.  With ``subsample`` the labels
    are replaced by the majority vote of all generated experts and only a
    random subset of experts is kept as the observed votes.
    """
    feat_rng, label_rng, vote_rng = _streams(cfg)
    if cfg.features.csv is not None:
        x = load_features_csv(cfg.features.csv)
        z = _load_labels(cfg.features.labels_csv).astype(np.int8)
        if z.size != x.shape[0]:
            raise ConfigError(f"{z.size} labels for {x.shape[0]} feature rows")
    else:
        x = _draw_features(cfg, cfg.n, feat_rng)
        z = (label_rng.random(cfg.n) < truth_prob(cfg, x)).astype(np.int8)
    err = expert_error_prob(cfg, x)
    flips = vote_rng.random(err.shape) < err
    votes = np.where(flips, 1 - z[:, None], z[:, None]).astype(np.int8)
    full = None
    if cfg.subsample is not None:
        full = votes
        z = (2 * votes.sum(axis=1) >= votes.shape[1]).astype(np.int8)
        keep = np.sort(vote_rng.choice(votes.shape[1], cfg.subsample, replace=False))
        votes = votes[:, keep]
    bayes = estimate_bayes_risk(cfg, bayes_mc) if bayes_mc and cfg.features.csv is None else None
    return Scenario(Dataset(x, votes, z), cfg, bayes, full)


def estimate_bayes_risk(cfg: SimulationConfig, mc_n: int = 1_000_000,
                        chunk: int = 200_000) -> float:
    """Monte-Carlo mean of ``min(p, 1 - p)`` over fresh feature draws."""
    if cfg.features.csv is not None:
        raise ValueError("Bayes risk needs a known feature generator")
    rng = np.random.default_rng([cfg.seed, 3])
    total, done = 0.0, 0
    while done < mc_n:
        m = min(chunk, mc_n - done)
        p = truth_prob(cfg, _draw_features(cfg, m, rng))
        total += float(np.minimum(p, 1 - p).sum())
        done += m
    return total / mc_n


def write_scenario(scn: Scenario, out_dir, extra: Optional[dict] = None) -> dict:
    paths = save_csv(scn.dataset, out_dir)
    manifest = {"generator": scn.generator.to_dict(),
                "seeds": {"seed": scn.generator.seed, "vote_seed": scn.generator.vote_seed,
                          "streams": {"features": [scn.generator.seed, 0],
                                      "labels": [scn.generator.seed, 1],
                                      "votes": [scn.generator.seed if scn.generator.vote_seed is None
                                                else scn.generator.vote_seed, 2]}},
                "n": scn.dataset.n, "d": scn.dataset.d, "k": scn.dataset.k,
                "bayes_risk": scn.bayes_risk}
    if extra:
        manifest.update(extra)
    paths["generator"] = Path(out_dir) / "generator.json"
    paths["generator"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths
