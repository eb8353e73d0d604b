"""One-vs-rest voxel metrics, fold aggregation, and Welch's t-test."""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

N_CLASSES = 4
CLASS_NAMES = ("BG", "LT", "VAT", "SAT")
TISSUE = (1, 2, 3)  # LT, VAT, SAT: classes in the macro Dice
METRICS = ("sensitivity", "specificity", "precision", "accuracy", "dice")


def _ratio(num, den):
    return None if den == 0 else num / den


@dataclass
class MetricsReport:
    counts: dict  # class name -> {"tp", "tn", "fp", "fn"}
    per_class: dict  # class name -> metric -> float | None (None = undefined)
    accuracy: float  # multi-class voxel accuracy
    fold: int | None = None
    database: str = ""
    extra: dict = field(default_factory=dict)

    def dice(self, cls) -> float | None:
        name = cls if isinstance(cls, str) else CLASS_NAMES[cls]
        return self.per_class[name]["dice"]

    def macro_dice(self, classes=TISSUE) -> float:
        vals = [self.dice(c) for c in classes]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        """Flat (class, metric, value) rows; undefined values are None."""
        out = [("all", "accuracy", self.accuracy)]
        for name in CLASS_NAMES:
            for m in METRICS:
                out.append((name, m, self.per_class[name][m]))
        return out


def confusion_matrix(pred, truth, n_classes=N_CLASSES) -> np.ndarray:
    """``M[t, p]`` = voxels with truth t predicted as p."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for what, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{what} contains a class outside 0..{n_classes - 1}")
    idx = truth.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def evaluate_mask(pred, truth, fold=None, database="") -> MetricsReport:
    """Per-class one-vs-rest counts and metrics. Accepts arrays or LabelMasks."""
    pred = getattr(pred, "labels", pred)
    truth = getattr(truth, "labels", truth)
    m = confusion_matrix(pred, truth)
    total = int(m.sum())
    counts, per_class = {}, {}
    for c, name in enumerate(CLASS_NAMES):
        tp = int(m[c, c])
        fn = int(m[c].sum()) - tp
        fp = int(m[:, c].sum()) - tp
        tn = total - tp - fn - fp
        counts[name] = dict(tp=tp, tn=tn, fp=fp, fn=fn)
        per_class[name] = dict(
            sensitivity=_ratio(tp, tp + fn),
            specificity=_ratio(tn, tn + fp),
            precision=_ratio(tp, tp + fp),
            accuracy=_ratio(tp + tn, total),
            dice=_ratio(2 * tp, 2 * tp + fp + fn),
        )
    acc = _ratio(int(np.trace(m)), total)
    return MetricsReport(counts, per_class, acc if acc is not None else float("nan"), fold, database)


def aggregate_cv(reports) -> dict:
    """``{(class, metric): (mean, std, n)}`` with sample std (n - 1).
    Undefined entries are skipped; a metric defined in fewer than two
    reports gets std None."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two fold reports")
    values: dict = {}
    for r in reports:
        for cls, metric, v in r.rows():
            values.setdefault((cls, metric), []).append(v)
    out = {}
    for key, vs in values.items():
        vs = [float(v) for v in vs if v is not None]
        if not vs:
            out[key] = (None, None, 0)
            continue
        # statistics works in exact rationals: order-free, identical folds give std 0
        std = statistics.stdev(vs) if len(vs) > 1 else None
        out[key] = (statistics.mean(vs), std, len(vs))
    return out


# ------------------------------------------------------------ Welch test ---

def _betacf(a, b, x, max_iter=300, eps=3e-16):
    """Continued fraction for the incomplete beta (modified Lentz)."""
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
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    bt = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc_reg(df / 2.0, 0.5, df / (df + t * t)))


def welch_t(a, b) -> tuple[float, float, float]:
    """Unpaired Welch test: returns ``(t, df, two-sided p)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0:
        if ma == mb:
            return 0.0, float("nan"), 1.0
        raise ValueError("both samples have zero variance but different means")
    t = float((ma - mb) / math.sqrt(se2))
    df = float(se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)))
    return t, df, t_two_sided_p(t, df)
