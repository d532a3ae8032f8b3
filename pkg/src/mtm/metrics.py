"""Classification metrics and the Welch two-sample t-test."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class TestError(ValueError):
    __test__ = False


def _ranks(x):
    """1-based ranks, ties sharing their average rank."""
    uniq, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts - 1) / 2.0
    return avg[inv]


def auroc(scores, labels):
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    r = _ranks(scores)
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Average precision: sum over descending thresholds of dRecall * Precision."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]   # end of each tie block
    total = 0.0
    prev_tp = 0
    for k in last:
        gain = int(tp[k]) - prev_tp
        if gain:
            total += gain * (int(tp[k]) / (int(tp[k]) + int(fp[k])))
        prev_tp = int(tp[k])
    return float(total / n_pos)


def confusion_matrix(preds, labels, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def macro_prf(preds, labels, n_classes):
    """Unweighted mean over classes of precision, recall and F1 (0 for 0/0)."""
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    prec = np.divide(tp, pred_tot, out=np.zeros(n_classes), where=pred_tot > 0)
    rec = np.divide(tp, true_tot, out=np.zeros(n_classes), where=true_tot > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(n_classes), where=denom > 0)
    return float(prec.mean()), float(rec.mean()), float(f1.mean())


# Welch t-test -------------------------------------------------------------------------

def _betacf(a, b, x, max_iter=500, eps=1e-16):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularised incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass
class WelchResult:
    t: float
    df: float
    p_value: float


def welch_ttest(a, b):
    """Two-sided Welch t-test for a difference in means."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise TestError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0.0:
        raise TestError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return WelchResult(float(t), float(df), float(min(1.0, p)))


# report -----------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_samples: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: list
    auroc: float | None = None
    auprc: float | None = None
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def selection_score(self):
        """AUPRC for binary tasks, macro-F1 otherwise."""
        return self.auprc if self.auprc is not None else self.f1

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))


def classification_report(probs, labels, config_hash="", seed=0):
    """Metrics from class probabilities (N, M) and integer labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    M = probs.shape[1]
    preds = probs.argmax(axis=1)
    prec, rec, f1 = macro_prf(preds, labels, M)
    rep = MetricsReport(
        n_samples=int(len(labels)),
        accuracy=float(np.mean(preds == labels)) if len(labels) else 0.0,
        precision=prec, recall=rec, f1=f1,
        confusion=confusion_matrix(preds, labels, M).tolist(),
        config_hash=config_hash, seed=int(seed),
    )
    if M == 2 and 0 < labels.sum() < len(labels):
        rep.auroc = auroc(probs[:, 1], labels)
        rep.auprc = auprc(probs[:, 1], labels)
    return rep


def format_mean_std(values, scale=100.0):
    """``"88.0 ±1.0"`` style summary (values scaled, one decimal)."""
    v = np.asarray(values, dtype=np.float64) * scale
    sd = v.std(ddof=1) if len(v) > 1 else 0.0
    return f"{v.mean():.1f} ±{sd:.1f}"
