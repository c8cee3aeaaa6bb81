"""Training orchestration shared by the three frameworks.

Plain SGD, seeded split and shuffling, learning-rate reduction on a
validation-loss plateau, and per-epoch metric records.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .boost import StumpEnsemble, adaboost_fit, adaboost_predict, encode_labels
from .config import RunConfig, TrainConfig
from .metrics import (
    ConfusionMatrix,
    MetricsRecord,
    classification_metrics,
    cross_entropy,
    focal_loss,
    jaccard_loss,
    macro_dice,
    macro_iou,
    one_hot,
    records_to_csv,
    records_to_jsonl,
)
from .models import build_model
from .plots import render_svg
from .preprocess import crop_labels, enhance, preprocess_pipeline
from .volcore import Grade

log = logging.getLogger("gliopipe.train")

CHECKPOINT_NAME = "model.ckpt"
CONFIG_NAME = "config.json"
ENSEMBLE_NAME = "ensemble.txt"


class TrainingError(FloatingPointError):
    """Non-finite loss or gradient during training."""


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Network-ready arrays: x [n, C, D, H, W], labels [n, D, H, W]."""

    case_ids: list
    x: np.ndarray
    labels: np.ndarray
    grades: list = field(default_factory=list)

    def __len__(self):
        return len(self.case_ids)

    def subset(self, idx):
        idx = list(idx)
        return Dataset(
            [self.case_ids[i] for i in idx],
            self.x[idx],
            self.labels[idx],
            [self.grades[i] for i in idx] if self.grades else [],
        )


def prepare_case(case, run: RunConfig, task: str):
    """CaseRecord -> (x [C, D, H, W], labels [D, H, W])."""
    vols = [case.modalities[m] for m in run.modalities]
    if run.model.input_mode == "fused":
        x = preprocess_pipeline(vols, run.preprocess).data[None]
    else:
        x = np.stack([enhance(v, run.preprocess).data for v in vols])
    labels = crop_labels(case.mask.labels, run.preprocess)
    if task == "classify":
        # grading looks at the tumour only
        x = x * (labels > 0)
    return np.ascontiguousarray(x), np.ascontiguousarray(labels)


def prepare_dataset(cases, run: RunConfig, task: str) -> Dataset:
    """``cases`` is an iterable of (case_id, CaseRecord)."""
    ids, xs, ys, grades = [], [], [], []
    for cid, case in cases:
        x, y = prepare_case(case, run, task)
        ids.append(cid)
        xs.append(x)
        ys.append(y)
        grades.append(case.grade)
    if not ids:
        raise ValueError("dataset is empty")
    return Dataset(ids, np.stack(xs), np.stack(ys), grades)


def split_indices(n, ratio, seed, strata=None):
    """Seeded disjoint train/val split; ``strata`` keeps class proportions."""
    n_train = int(math.floor(n * ratio + 0.5))
    if n < 2 or n_train < 1 or n_train >= n:
        raise ValueError(f"cannot split {n} case(s) at ratio {ratio}: need at least one case on each side")
    rng = np.random.default_rng([seed, 11])
    if strata is None:
        perm = rng.permutation(n)
        return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())
    strata = list(strata)
    train, val = [], []
    for key in sorted(set(strata)):
        members = np.array([i for i, s in enumerate(strata) if s == key])
        members = members[rng.permutation(len(members))]
        k = int(math.floor(len(members) * ratio + 0.5))
        k = min(max(k, 1), len(members) - 1) if len(members) > 1 else len(members)
        train += members[:k].tolist()
        val += members[k:].tolist()
    if not train or not val:
        raise ValueError(f"cannot split {n} case(s) at ratio {ratio}")
    return sorted(train), sorted(val)


# ---------------------------------------------------------------------------
# state and plateau rule
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    lr: float
    epoch: int = 0
    best_loss: float = math.inf
    counter: int = 0
    rng: np.random.Generator = None

    @classmethod
    def initial(cls, cfg: TrainConfig):
        return cls(lr=cfg.lr, rng=np.random.default_rng([cfg.seed, 13]))


def plateau_step(state: TrainState, val_loss: float, patience: int, factor: float) -> TrainState:
    """Reset the counter on improvement, else count; at ``patience`` divide lr by ``factor``."""
    if not math.isfinite(val_loss):
        raise ValueError(f"validation loss must be finite, got {val_loss}")
    if val_loss < state.best_loss:
        return replace(state, best_loss=val_loss, counter=0)
    c = state.counter + 1
    if c >= patience:
        return replace(state, lr=state.lr / factor, counter=0)
    return replace(state, counter=c)


# ---------------------------------------------------------------------------
# epoch / evaluation
# ---------------------------------------------------------------------------

def _batches(n, size, order=None):
    order = np.arange(n) if order is None else order
    for s in range(0, n, size):
        yield order[s:s + size]


def _seg_losses(model, x, labels, cfg: TrainConfig):
    out = model(x)
    target = one_hot(labels, out.probabilities.shape[1])
    f = focal_loss(out.probabilities, target, cfg.focal_alpha, cfg.focal_gamma)
    j = jaccard_loss(out.probabilities, target)
    return out, f, j


def _grade_targets(grades):
    return one_hot((encode_labels(grades) > 0).astype(int), 2)


def _overlap(pred, labels, k):
    """Pooled macro Dice / IoU over the batch plus per-case macro IoU."""
    return (
        macro_dice(pred, labels, k),
        macro_iou(pred, labels, k),
        [macro_iou(p, t, k) for p, t in zip(pred, labels)],
    )


def random_flips(x, rng, labels=None):
    """Flip each sample along a random subset of its three spatial axes."""
    x = x.copy()
    labels = None if labels is None else labels.copy()
    for i in range(x.shape[0]):
        axes = [a for a in range(3) if rng.random() < 0.5]
        if axes:
            x[i] = np.flip(x[i], [a + 1 for a in axes])
            if labels is not None:
                labels[i] = np.flip(labels[i], axes)
    return x, labels


def train_epoch(model, data: Dataset, cfg: TrainConfig, state: TrainState, task: str) -> MetricsRecord:
    if len(data) == 0:
        raise ValueError("training data is empty")
    model.train()
    params = model.parameters()
    order = state.rng.permutation(len(data))
    tot = {"loss": 0.0, "focal": 0.0, "jaccard": 0.0}
    preds, seg_truth = [], []
    for b, idx in enumerate(_batches(len(data), cfg.batch_size, order)):
        x, labels = data.x[idx], data.labels[idx]
        if cfg.augment:
            x, labels = random_flips(x, state.rng, labels)
        try:
            if task == "classify":
                logits = model.logits(x)
                loss = cross_entropy(logits, _grade_targets([data.grades[i] for i in idx]))
                preds.append(np.argmax(logits.values, axis=1))
            else:
                out, f, j = _seg_losses(model, x, labels, cfg)
                loss = f + j
                tot["focal"] += f.item() * len(idx)
                tot["jaccard"] += j.item() * len(idx)
                preds.append(np.argmax(out.probabilities.values, axis=1))
                seg_truth.append(labels)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss {lv}")
            ad.backward(loss)
        except (ad.NonFiniteError, TrainingError) as exc:
            raise TrainingError(f"epoch {state.epoch + 1}, batch {b}: {exc}") from exc
        ad.sgd_step(params, state.lr)
        tot["loss"] += lv * len(idx)
    n = len(data)
    rec = MetricsRecord(epoch=state.epoch + 1, split="train", loss=tot["loss"] / n, lr=state.lr)
    pred = np.concatenate(preds)
    if task == "classify":
        truth = (encode_labels([data.grades[i] for i in order]) > 0).astype(int)
        rec.accuracy = float(np.mean(pred == truth))
    else:
        k = model.profile.n_classes
        rec.focal, rec.jaccard = tot["focal"] / n, tot["jaccard"] / n
        rec.dice, rec.iou, per_case = _overlap(pred, np.concatenate(seg_truth), k)
        rec.mean_iou = float(np.mean(per_case))
    return rec


def predict(model, data: Dataset, task: str, batch_size=4):
    """Eval-mode forward over ``data``; returns (per-batch outputs, losses are the caller's)."""
    model.eval()
    with ad.no_grad():
        for idx in _batches(len(data), batch_size):
            if task == "classify":
                yield idx, model.logits(data.x[idx])
            else:
                yield idx, model(data.x[idx])


def evaluate(model, data: Dataset, cfg: TrainConfig, task: str, epoch=0):
    """Validation record plus per-case rows (dicts)."""
    if len(data) == 0:
        raise ValueError("evaluation data is empty")
    n = len(data)
    rows = []
    if task == "classify":
        loss, pred = 0.0, np.zeros(n, dtype=int)
        for idx, logits in predict(model, data, task, cfg.batch_size):
            tgt = _grade_targets([data.grades[i] for i in idx])
            loss += cross_entropy(logits, tgt).item() * len(idx)
            pred[idx] = np.argmax(logits.values, axis=1)
        truth = (encode_labels(data.grades) > 0).astype(int)
        rec = MetricsRecord(epoch=epoch, split="val", loss=loss / n, accuracy=float(np.mean(pred == truth)))
        for i, cid in enumerate(data.case_ids):
            rows.append({"case_id": cid, "grade": Grade(data.grades[i]).value,
                         "aux_prediction": "HGG" if pred[i] else "LGG"})
        return rec, rows
    k = model.profile.n_classes
    tot = {"loss": 0.0, "focal": 0.0, "jaccard": 0.0}
    pred = np.zeros(data.labels.shape, dtype=np.uint8)
    for idx, out in predict(model, data, task, cfg.batch_size):
        target = one_hot(data.labels[idx], k)
        f = focal_loss(out.probabilities, target, cfg.focal_alpha, cfg.focal_gamma).item()
        j = jaccard_loss(out.probabilities, target).item()
        tot["loss"] += (f + j) * len(idx)
        tot["focal"] += f * len(idx)
        tot["jaccard"] += j * len(idx)
        pred[idx] = np.argmax(out.probabilities.values, axis=1)
    dice, iou, per_case = _overlap(pred, data.labels, k)
    rec = MetricsRecord(epoch=epoch, split="val", loss=tot["loss"] / n, focal=tot["focal"] / n,
                        jaccard=tot["jaccard"] / n, dice=dice, iou=iou, mean_iou=float(np.mean(per_case)))
    for i, cid in enumerate(data.case_ids):
        rows.append({"case_id": cid, "dice": macro_dice(pred[i], data.labels[i], k), "iou": per_case[i]})
    return rec, rows


# ---------------------------------------------------------------------------
# boosting stage
# ---------------------------------------------------------------------------

def extract_features(model, data: Dataset, batch_size=4):
    model.eval()
    feats = []
    with ad.no_grad():
        for idx in _batches(len(data), batch_size):
            feats.append(model.features(data.x[idx]).values)
    return np.concatenate(feats)


def boost_evaluate(ensemble: StumpEnsemble, Z, grades, case_ids):
    rows, predicted = [], []
    for cid, z, g in zip(case_ids, Z, grades):
        pg, margin = adaboost_predict(ensemble, z)
        predicted.append(pg.value)
        rows.append({"case_id": cid, "grade": Grade(g).value, "predicted": pg.value, "margin": margin})
    cm = ConfusionMatrix.from_labels([Grade(g).value for g in grades], predicted)
    return cm, classification_metrics(cm), rows


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    records: list
    state: TrainState
    train_ids: list
    val_ids: list
    ensemble: StumpEnsemble | None = None
    confusion: ConfusionMatrix | None = None
    summary: dict = field(default_factory=dict)
    per_case: list = field(default_factory=list)


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_per_case(path, rows):
    if not rows:
        return
    cols = list(rows[0])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in (r[c] for c in cols)))
    _write(path, "\n".join(lines) + "\n")


def init_head_prior(model, labels, n_classes, floor=1e-3):
    """Set the segmentation head bias to log class frequencies of the training
    labels so the untrained network already predicts the label prior."""
    freq = np.bincount(np.asarray(labels).ravel(), minlength=n_classes)[:n_classes] / np.asarray(labels).size
    model.head[1].values[:] = np.log(np.maximum(freq, floor))


def run_training(task, dataset: Dataset, run: RunConfig, out_dir=None, on_epoch=None) -> TrainResult:
    """Split, train for ``run.train.epochs`` epochs, optionally boost, and write artifacts.

    Files written to ``out_dir`` (if given): metrics.csv, metrics.jsonl,
    curves.svg, model.ckpt, config.json, val_cases.csv and, for
    classification, ensemble.txt, confusion.csv and summary.json.
    """
    cfg = run.train
    strata = [Grade(g).value for g in dataset.grades] if task == "classify" else None
    tr_idx, va_idx = split_indices(len(dataset), cfg.split, cfg.seed, strata)
    train_set, val_set = dataset.subset(tr_idx), dataset.subset(va_idx)
    if task == "classify":
        if len({Grade(g) for g in train_set.grades}) < 2:
            raise ValueError("classification needs both grades in the training split")
    model = build_model(task, run.model)
    if task != "classify":
        init_head_prior(model, train_set.labels, run.model.n_classes)
    state = TrainState.initial(cfg)
    records = []
    for e in range(cfg.epochs):
        tr = train_epoch(model, train_set, cfg, state, task)
        va, per_case = evaluate(model, val_set, cfg, task, epoch=e + 1)
        va.lr = state.lr
        records += [tr, va]
        state = plateau_step(replace(state, epoch=e + 1), va.loss, cfg.patience, cfg.lr_factor)
        log.info("epoch %d train_loss=%.5f val_loss=%.5f val_dice=%s lr=%g",
                 e + 1, tr.loss, va.loss, "-" if va.dice is None else f"{va.dice:.4f}", va.lr)
        if on_epoch is not None:
            on_epoch(tr, va)

    result = TrainResult(model, records, state, train_set.case_ids, val_set.case_ids, per_case=per_case)
    if task == "classify":
        z_train = extract_features(model, train_set, cfg.batch_size)
        z_val = extract_features(model, val_set, cfg.batch_size)
        ens = adaboost_fit(z_train, train_set.grades, rounds=cfg.boost_rounds)
        cm, scores, rows = boost_evaluate(ens, z_val, val_set.grades, val_set.case_ids)
        result.ensemble, result.confusion, result.per_case = ens, cm, rows
        result.summary = {"boost_rounds": len(ens), **scores, "confusion": [list(r) for r in cm.counts],
                          "n_train": len(train_set), "n_val": len(val_set)}
        log.info("boosted validation: %s", json.dumps(scores))

    if out_dir is not None:
        save_run(result, run, task, out_dir)
    return result


def save_run(result: TrainResult, run: RunConfig, task, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "metrics.csv"), records_to_csv(result.records))
    _write(os.path.join(out_dir, "metrics.jsonl"), records_to_jsonl(result.records))
    _write(os.path.join(out_dir, "curves.svg"), render_svg([r.as_dict() for r in result.records]))
    result.model.save(os.path.join(out_dir, CHECKPOINT_NAME))
    cfg = run.to_dict()
    cfg["task"] = task
    cfg["split"] = {"train": result.train_ids, "val": result.val_ids}
    _write(os.path.join(out_dir, CONFIG_NAME), json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    write_per_case(os.path.join(out_dir, "val_cases.csv"), result.per_case)
    if result.ensemble is not None:
        _write(os.path.join(out_dir, ENSEMBLE_NAME), result.ensemble.to_text())
        _write(os.path.join(out_dir, "confusion.csv"), result.confusion.to_csv())
        _write(os.path.join(out_dir, "summary.json"), json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
