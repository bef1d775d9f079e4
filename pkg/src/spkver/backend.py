"""Detection metrics (EER, minDCF, actDCF), logistic-regression calibration and score fusion.

Threshold convention: a trial is accepted when ``score >= t``. Candidate
thresholds are -inf, the midpoints between consecutive distinct scores, and
+inf, so ties never split. EER interpolates linearly between the two
adjacent ROC points where P_miss - P_fa changes sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, FitError
from .scoring import ScoreSet


@dataclass(frozen=True)
class DcfParams:
    p_targets: tuple = (0.01, 0.005)
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not self.p_targets or any(not 0.0 < p < 1.0 for p in self.p_targets):
            raise ValueError(f"target priors must lie in (0, 1), got {self.p_targets}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


def _split(scores, labels=None):
    if isinstance(scores, ScoreSet):
        labels = scores.labels
        scores = scores.scores
    if labels is None:
        raise ValueError("metrics need labelled trials")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    tar, non = scores[labels], scores[~labels]
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return tar, non


def error_rates(tar: np.ndarray, non: np.ndarray):
    """(thresholds, P_miss, P_fa) over the candidate threshold set, thresholds ascending."""
    distinct = np.unique(np.concatenate([tar, non]))
    thresholds = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]])
    tar_sorted, non_sorted = np.sort(tar), np.sort(non)
    misses = np.searchsorted(tar_sorted, thresholds, side="left")
    false_alarms = len(non) - np.searchsorted(non_sorted, thresholds, side="left")
    return thresholds, misses / len(tar), false_alarms / len(non)


def eer_from_rates(p_miss, p_fa) -> float:
    """Equal error rate on a monotone ROC sampled at ascending thresholds."""
    k = int(np.argmax(np.asarray(p_miss) >= np.asarray(p_fa)))
    if p_miss[k] == p_fa[k]:
        return float(p_miss[k])
    d0 = p_fa[k - 1] - p_miss[k - 1]
    d1 = p_fa[k] - p_miss[k]
    alpha = d0 / (d0 - d1)
    return float(p_miss[k - 1] + alpha * (p_miss[k] - p_miss[k - 1]))


def compute_eer(scores, labels=None) -> float:
    tar, non = _split(scores, labels)
    _, p_miss, p_fa = error_rates(tar, non)
    return eer_from_rates(p_miss, p_fa)


def normalized_dcf(p_miss, p_fa, p_target, c_miss=1.0, c_fa=1.0):
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return cost / min(c_miss * p_target, c_fa * (1.0 - p_target))


def compute_min_dcf(scores, params: DcfParams = DcfParams(), labels=None) -> float:
    tar, non = _split(scores, labels)
    _, p_miss, p_fa = error_rates(tar, non)
    vals = [float(np.min(normalized_dcf(p_miss, p_fa, p, params.c_miss, params.c_fa))) for p in params.p_targets]
    return sum(vals) / len(vals)


def bayes_threshold(p_target, c_miss=1.0, c_fa=1.0) -> float:
    return math.log(c_fa * (1.0 - p_target) / (c_miss * p_target))


def compute_act_dcf(scores, params: DcfParams = DcfParams(), labels=None) -> float:
    """Normalised DCF at the Bayes threshold; scores must be calibrated LLRs."""
    tar, non = _split(scores, labels)
    vals = []
    for p in params.p_targets:
        t = bayes_threshold(p, params.c_miss, params.c_fa)
        p_miss = np.count_nonzero(tar < t) / len(tar)
        p_fa = np.count_nonzero(non >= t) / len(non)
        vals.append(float(normalized_dcf(p_miss, p_fa, p, params.c_miss, params.c_fa)))
    return sum(vals) / len(vals)


# -- calibration -------------------------------------------------------------------


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass
class CalibrationModel:
    a: float = 1.0
    b: float = 0.0
    prior: float = 0.5
    iterations: int = 0
    grad_norm: float = 0.0

    def __call__(self, scores):
        return self.a * np.asarray(scores, dtype=np.float64) + self.b

    def apply(self, scores: ScoreSet) -> ScoreSet:
        return ScoreSet(list(scores.trials), self(scores.scores))


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def calibrate_fit(dev, prior: float = 0.5, labels=None, tol: float = 1e-8, max_iter: int = 100) -> CalibrationModel:
    """Prior-weighted logistic regression so that ``a * s + b`` is a log-likelihood ratio.

    Targets are weighted by prior / N_tar and nontargets by (1 - prior) / N_non;
    the logistic argument is ``a * s + b + logit(prior)``. Newton's method with
    step halving, stopping once the gradient norm is at most ``tol``.
    """
    tar, non = _split(dev, labels)
    s = np.concatenate([tar, non])
    if np.ptp(s) == 0.0:
        raise FitError("all calibration scores are identical")
    y = np.concatenate([np.ones(len(tar)), np.zeros(len(non))])
    w = np.where(y == 1, prior / len(tar), (1.0 - prior) / len(non))
    offset = logit(prior)
    X = np.stack([s, np.ones_like(s)], axis=1)

    def objective(theta):
        z = X @ theta + offset
        return float(np.sum(w * np.where(y == 1, _log1pexp(-z), _log1pexp(z))))

    theta = np.zeros(2)
    f = objective(theta)
    gnorm = math.inf
    for it in range(1, max_iter + 1):
        z = X @ theta + offset
        p = 1.0 / (1.0 + np.exp(-z))
        grad = X.T @ (w * (p - y))
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return CalibrationModel(float(theta[0]), float(theta[1]), prior, it - 1, gnorm)
        H = (X * (w * p * (1.0 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as err:
            raise FitError(f"singular Hessian at iteration {it}: {err}") from err
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            fc = objective(cand)
            if fc <= f:
                break
            t *= 0.5
        theta, f = cand, fc
    raise FitError(f"calibration did not converge in {max_iter} iterations (|grad|={gnorm:.3g}, a={theta[0]:.4g}, b={theta[1]:.4g})")


# -- fusion ------------------------------------------------------------------------


def fuse(score_sets: list[ScoreSet]) -> ScoreSet:
    """Equal-weight per-trial mean over systems scored on the same trial list."""
    if not score_sets:
        raise ValueError("nothing to fuse")
    keys = score_sets[0].keys
    for i, ss in enumerate(score_sets[1:], 1):
        if ss.keys != keys:
            raise AlignmentError(f"system {i} is not aligned with system 0")
    fused = np.mean([ss.scores for ss in score_sets], axis=0)
    return ScoreSet(list(score_sets[0].trials), fused)


def evaluate(scores: ScoreSet, params: DcfParams = DcfParams()) -> dict:
    return {
        "eer": compute_eer(scores),
        "min_dcf": compute_min_dcf(scores, params),
        "act_dcf": compute_act_dcf(scores, params),
        "n_target": int(scores.labels.sum()),
        "n_nontarget": int((~scores.labels).sum()),
    }


def format_report(results: dict) -> str:
    """Plain-text table followed by a key=value block."""
    lines = [f"{'system':<20} {'EER%':>8} {'minDCF':>8} {'actDCF':>8}"]
    for name, r in results.items():
        lines.append(f"{name:<20} {100 * r['eer']:>8.3f} {r['min_dcf']:>8.4f} {r['act_dcf']:>8.4f}")
    lines.append("")
    for name, r in results.items():
        lines.extend(f"{name}.{k}={v!r}" for k, v in r.items())
    return "\n".join(lines) + "\n"
