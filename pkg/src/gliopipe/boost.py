"""AdaBoost with exhaustive decision stumps over flattened CNN features.

Labels are encoded LGG -> -1, HGG -> +1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volcore import Grade

EPS_CLAMP = 1e-10
TIE_TOL = 1e-12
DEFAULT_ROUNDS = 50


def encode_labels(y):
    """Grades or ±1 numbers -> float array of ±1."""
    out = []
    for v in y:
        if isinstance(v, str):
            out.append(1.0 if Grade(v) is Grade.HGG else -1.0)
        else:
            if v not in (-1, 1):
                raise ValueError(f"numeric labels must be -1 or +1, got {v!r}")
            out.append(float(v))
    return np.array(out)


@dataclass(frozen=True)
class DecisionStump:
    """Predicts ``polarity`` where ``x[feature] >= threshold``, else ``-polarity``."""

    feature: int
    threshold: float
    polarity: int = 1

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise ValueError("polarity must be +1 or -1")

    def predict(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        return np.where(Z[:, self.feature] >= self.threshold, self.polarity, -self.polarity).astype(np.float64)


def weighted_error(stump, Z, y, w):
    w = np.asarray(w, dtype=np.float64)
    return float(w[stump.predict(Z) != y].sum() / w.sum())


def _feature_errors(z, y, w):
    """Weighted error of polarity +1 at every candidate threshold of one feature.

    Candidates are -inf followed by midpoints of consecutive unique values.
    """
    order = np.argsort(z, kind="stable")
    zs, ys, ws = z[order], y[order], w[order]
    uniq = np.unique(zs)
    thresholds = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0])
    # samples strictly below each threshold
    below = np.concatenate([[0], np.searchsorted(zs, uniq[:-1], side="right")])
    pos = np.concatenate([[0.0], np.cumsum(np.where(ys > 0, ws, 0.0))])
    neg = np.concatenate([[0.0], np.cumsum(np.where(ys < 0, ws, 0.0))])
    err_plus = pos[below] + (neg[-1] - neg[below])
    return thresholds, err_plus


def fit_stump(Z, y, w) -> DecisionStump:
    """Exhaustive search over features x thresholds x polarities.

    Ties go to the lowest feature index, then the lowest threshold, then
    polarity +1.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] == 0 or Z.shape[1] == 0:
        raise ValueError("fit_stump needs a non-empty [n, F] feature matrix")
    if y.shape != (Z.shape[0],) or w.shape != (Z.shape[0],):
        raise ValueError("labels and weights must have one entry per sample")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    total = w.sum()
    per_feature = []
    best = np.inf
    for f in range(Z.shape[1]):
        thr, ep = _feature_errors(Z[:, f], y, w)
        em = total - ep
        per_feature.append((thr, ep, em))
        best = min(best, ep.min(), em.min())
    tol = TIE_TOL * total
    for f, (thr, ep, em) in enumerate(per_feature):
        for j in range(len(thr)):
            if ep[j] <= best + tol:
                return DecisionStump(f, float(thr[j]), 1)
            if em[j] <= best + tol:
                return DecisionStump(f, float(thr[j]), -1)
    raise AssertionError("unreachable: no stump attains the minimum")


def alpha_from_error(eps):
    eps = min(max(eps, EPS_CLAMP), 1.0 - EPS_CLAMP)
    return 0.5 * np.log((1.0 - eps) / eps)


@dataclass
class StumpEnsemble:
    """Ordered (stump, alpha) pairs plus the per-round raw errors."""

    stumps: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    n_features: int | None = None

    def __len__(self):
        return len(self.stumps)

    def decision_function(self, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        m = np.zeros(Z.shape[0])
        for s, a in zip(self.stumps, self.alphas):
            m += a * s.predict(Z)
        return m

    def predict_sign(self, Z):
        """±1 predictions; a zero margin counts as HGG (+1)."""
        return np.where(self.decision_function(Z) >= 0, 1.0, -1.0)

    def truncated(self, rounds):
        return StumpEnsemble(self.stumps[:rounds], self.alphas[:rounds], self.errors[:rounds], self.n_features)

    def to_text(self):
        lines = ["# stump ensemble v1", "# classes LGG=-1 HGG=+1"]
        if self.n_features is not None:
            lines.append(f"n_features {self.n_features}")
        lines.append("# feature threshold polarity alpha")
        for s, a in zip(self.stumps, self.alphas):
            lines.append(f"{s.feature} {float(s.threshold)!r} {s.polarity} {float(a)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        e = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "n_features" and len(parts) == 2:
                e.n_features = int(parts[1])
                continue
            if len(parts) != 4:
                raise ValueError(f"line {lineno}: expected 'feature threshold polarity alpha'")
            e.stumps.append(DecisionStump(int(parts[0]), float(parts[1]), int(parts[2])))
            e.alphas.append(float(parts[3]))
        return e


def adaboost_fit(Z, y, rounds=DEFAULT_ROUNDS, on_round=None) -> StumpEnsemble:
    """Discrete AdaBoost with stump weak learners.

    ``on_round(t, stump, eps, alpha, weights)`` is called after every
    reweighting, with the normalised weights for the next round.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = encode_labels(y)
    n = len(y)
    if n < 2 or Z.shape[0] != n:
        raise ValueError("need at least two samples with matching labels")
    if not ((y > 0).any() and (y < 0).any()):
        raise ValueError("both classes must be present")
    w = np.full(n, 1.0 / n)
    ens = StumpEnsemble(n_features=Z.shape[1])
    for t in range(rounds):
        stump = fit_stump(Z, y, w)
        h = stump.predict(Z)
        eps = float(w[h != y].sum() / w.sum())
        alpha = alpha_from_error(eps)
        w = w * np.exp(-alpha * y * h)
        w = w / w.sum()
        ens.stumps.append(stump)
        ens.alphas.append(float(alpha))
        ens.errors.append(eps)
        if on_round is not None:
            on_round(t, stump, eps, alpha, w.copy())
        if eps <= EPS_CLAMP:
            break
    return ens


def adaboost_predict(e: StumpEnsemble, z):
    """Return (Grade, margin) for one feature vector."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if e.n_features is not None and z.size != e.n_features:
        raise ValueError(f"feature vector has length {z.size}, ensemble expects {e.n_features}")
    if e.stumps and max(s.feature for s in e.stumps) >= z.size:
        raise ValueError(f"feature vector of length {z.size} too short for this ensemble")
    margin = float(e.decision_function(z[None, :])[0])
    return (Grade.HGG if margin >= 0 else Grade.LGG), margin
