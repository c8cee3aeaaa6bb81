"""Training losses (focal, Jaccard) and evaluation metrics.

Multiclass reduction: overlap scores are computed per class and
macro-averaged over foreground classes (1..K-1). Empty-vs-empty overlap
scores as 1.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad

PROB_EPS = 1e-7
JACCARD_SMOOTH = 1e-6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


# ---------------------------------------------------------------------------
# losses (differentiable)
# ---------------------------------------------------------------------------

def _check_same_shape(p, y):
    if tuple(p.shape) != tuple(np.shape(getattr(y, "values", y))):
        raise ValueError(f"prediction shape {tuple(p.shape)} != target shape {np.shape(getattr(y, 'values', y))}")


def focal_loss(p, y, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Mean binary focal loss over every element of ``p``.

    -alpha (1-p)^g y log p - (1-alpha) p^g (1-y) log(1-p), with ``p``
    clamped to [eps, 1-eps].
    """
    p = ad.as_tensor(p)
    _check_same_shape(p, y)
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    pc = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    one_m = 1.0 - pc
    pos = ad.power(one_m, gamma) * ad.log(pc) * (alpha * y)
    negative = ad.power(pc, gamma) * ad.log(one_m) * ((1.0 - alpha) * (1.0 - y))
    return -ad.mean(pos + negative)


def jaccard_loss(p, y, classes=None, smooth=JACCARD_SMOOTH):
    """Soft Jaccard loss, averaged over ``classes`` along axis 1.

    ``p`` and ``y`` are [N, K, ...]; sums run over batch and space.
    ``classes`` defaults to the foreground classes 1..K-1.
    """
    p = ad.as_tensor(p)
    _check_same_shape(p, y)
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    k = p.shape[1]
    classes = list(range(1, k)) if classes is None else list(classes)
    axes = (0,) + tuple(range(2, p.ndim))
    inter = ad.tsum(p * y, axis=axes)
    total = ad.tsum(p, axis=axes) + y.sum(axis=axes)
    union = total - inter
    per_class = 1.0 - (inter + smooth) / (union + smooth)
    return ad.mean(per_class[np.array(classes)])


def total_loss(p, y, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    return focal_loss(p, y, alpha, gamma) + jaccard_loss(p, y)


def cross_entropy(logits, onehot):
    """Mean categorical cross-entropy from logits [N, K] and one-hot targets."""
    logits = ad.as_tensor(logits)
    _check_same_shape(logits, onehot)
    onehot = np.asarray(onehot, dtype=np.float64)
    return -ad.mean(ad.tsum(ad.log_softmax(logits, axis=1) * onehot, axis=1))


def one_hot(labels, k):
    """[N, ...] integer labels -> [N, K, ...] float one-hot."""
    labels = np.asarray(labels)
    out = (labels[:, None] == np.arange(k).reshape((1, k) + (1,) * (labels.ndim - 1)))
    return out.astype(np.float64)


# ---------------------------------------------------------------------------
# overlap metrics
# ---------------------------------------------------------------------------

def _labels(m):
    return np.asarray(getattr(m, "labels", m))


def _pair(pred, truth):
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ValueError(f"mask dims differ: {p.shape} vs {t.shape}")
    return p, t


def dice(pred, truth, c) -> float:
    p, t = _pair(pred, truth)
    vp, vg = p == c, t == c
    denom = int(vp.sum()) + int(vg.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((vp & vg).sum()) / denom


def iou(pred, truth, c) -> float:
    p, t = _pair(pred, truth)
    vp, vg = p == c, t == c
    union = int((vp | vg).sum())
    if union == 0:
        return 1.0
    return int((vp & vg).sum()) / union


def _foreground(pred, truth, n_classes):
    if n_classes is None:
        n_classes = len(getattr(truth, "class_names", ())) or int(max(_labels(pred).max(), _labels(truth).max())) + 1
    return range(1, n_classes)


def macro_dice(pred, truth, n_classes=None) -> float:
    cls = _foreground(pred, truth, n_classes)
    return float(np.mean([dice(pred, truth, c) for c in cls]))


def macro_iou(pred, truth, n_classes=None) -> float:
    cls = _foreground(pred, truth, n_classes)
    return float(np.mean([iou(pred, truth, c) for c in cls]))


def mean_iou(cases, n_classes=None) -> float:
    """Average over cases of per-case macro IoU; ``cases`` is [(pred, truth), ...]."""
    cases = list(cases)
    if not cases:
        raise ValueError("mean_iou needs at least one case")
    return float(np.mean([macro_iou(p, t, n_classes) for p, t in cases]))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

CLASS_ORDER = ("LGG", "HGG")  # row/column order; HGG is the positive class


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts, rows = actual, columns = predicted, order (LGG, HGG)."""

    counts: tuple

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (2, 2) or (arr < 0).any():
            raise ValueError("confusion matrix must be 2x2 with non-negative counts")
        object.__setattr__(self, "counts", tuple(map(tuple, arr.tolist())))

    @classmethod
    def from_labels(cls, actual, predicted):
        """Labels are 'LGG'/'HGG' strings or -1/+1."""
        m = np.zeros((2, 2), dtype=np.int64)
        for a, p in zip(actual, predicted):
            m[_cls_index(a), _cls_index(p)] += 1
        return cls(m)

    @classmethod
    def from_counts(cls, tp, tn, fp, fn):
        return cls([[tn, fp], [fn, tp]])

    @property
    def tn(self):
        return self.counts[0][0]

    @property
    def fp(self):
        return self.counts[0][1]

    @property
    def fn(self):
        return self.counts[1][0]

    @property
    def tp(self):
        return self.counts[1][1]

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def to_csv(self):
        rows = ["actual\\predicted," + ",".join(CLASS_ORDER)]
        for name, row in zip(CLASS_ORDER, self.counts):
            rows.append(name + "," + ",".join(str(v) for v in row))
        return "\n".join(rows) + "\n"


def _cls_index(label):
    if isinstance(label, str):
        return CLASS_ORDER.index(getattr(label, "value", label))
    return 1 if label > 0 else 0


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def classification_metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, precision, recall and F1 with HGG positive.

    Zero denominators give 0 and are listed under ``undefined``.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    flags = []
    acc = (cm.tp + cm.tn) / cm.total
    prec = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    rec = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    f1 = _ratio(2 * prec * rec, prec + rec, "f1", flags)
    return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1, "undefined": flags}


# ---------------------------------------------------------------------------
# per-epoch records
# ---------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    focal: float | None = None
    jaccard: float | None = None
    dice: float | None = None
    iou: float | None = None
    mean_iou: float | None = None
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    lr: float | None = None

    RATES = ("dice", "iou", "mean_iou", "accuracy", "precision", "recall", "f1")

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")
        for name in self.RATES:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_dict(self):
        return asdict(self)


CSV_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def records_to_jsonl(records) -> str:
    return "".join(json.dumps(r.as_dict(), sort_keys=False) + "\n" for r in records)


def read_metrics_csv(text, required=("epoch", "split", "loss")):
    """Parse metrics CSV text into a list of dicts; missing columns raise ValueError."""
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for col in required:
        if col not in header:
            raise ValueError(f"metrics CSV is missing required column {col!r}")
    rows = []
    for lineno, row in enumerate(reader, 2):
        parsed = {}
        for k, v in row.items():
            if k == "split":
                parsed[k] = v
            elif v is None or v == "":
                parsed[k] = None
            else:
                try:
                    parsed[k] = int(v) if k == "epoch" else float(v)
                except ValueError:
                    raise ValueError(f"line {lineno}: column {k!r} is not numeric: {v!r}") from None
                if k != "epoch" and not math.isfinite(parsed[k]):
                    raise ValueError(f"line {lineno}: column {k!r} is not finite")
        rows.append(parsed)
    return rows
