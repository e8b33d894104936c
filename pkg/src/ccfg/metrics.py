"""Accuracy, macro-F1, per-class accuracy histograms and confusion reports."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import image_tensor

BIN_EDGES = tuple(range(0, 101, 10))


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_accuracy: np.ndarray
    per_class_f1: np.ndarray
    confusion: np.ndarray  # rows: true class, cols: predicted class
    num_samples: int
    predictions: list = field(default_factory=list)  # (sample_id, predicted, true)

    @property
    def num_classes(self):
        return self.confusion.shape[0]

    def confusion_counts(self):
        """Sparse ``{(true, predicted): count}`` view of the nonzero cells."""
        t, p = np.nonzero(self.confusion)
        return {(int(a), int(b)): int(self.confusion[a, b]) for a, b in zip(t, p)}


def metrics_from_predictions(y_true, y_pred, num_classes, sample_ids=None):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if len(y_true) == 0:
        raise ValueError("no samples to score")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    per_class_acc = np.divide(tp, support, out=np.zeros(num_classes), where=support > 0)
    denom = support + predicted
    # zero support and zero predictions: F1 defined as 0
    f1 = np.divide(2 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    ids = sample_ids if sample_ids is not None else [str(i) for i in range(len(y_true))]
    return MetricsReport(
        accuracy=float(tp.sum() / len(y_true)),
        macro_f1=float(f1.mean()),
        per_class_accuracy=per_class_acc,
        per_class_f1=f1,
        confusion=confusion,
        num_samples=int(len(y_true)),
        predictions=[(sid, int(p), int(t)) for sid, p, t in zip(ids, y_pred, y_true)],
    )


@torch.no_grad()
def predict_images(model, images, batch_size=256):
    """Predicted classes for a uint8 (N, 3, H, W) tensor, no augmentation."""
    was_training = model.training
    model.eval()
    preds = []
    for i in range(0, len(images), batch_size):
        preds.append(model.predict(images[i:i + batch_size].float() / 255)[1])
    model.train(was_training)
    return torch.cat(preds).numpy()


def evaluate(model, dataset, split, images=None, batch_size=256):
    """Score ``model`` (or a checkpoint path) on one split of ``dataset``."""
    if split not in ("train", "val", "test"):
        raise ValueError(f"split must be train, val or test, got {split!r}")
    if isinstance(model, (str, Path)):
        from .model import load_checkpoint

        model, _ = load_checkpoint(model)
    if model.num_classes != dataset.num_classes:
        raise ValueError(f"model has {model.num_classes} classes, dataset has {dataset.num_classes}")
    samples = dataset.subset(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    if images is None:
        images = image_tensor(samples, model.spec.input_size[:2])
    pred = predict_images(model, images, batch_size)
    return metrics_from_predictions([s.class_id for s in samples], pred, dataset.num_classes,
                                    [s.sample_id for s in samples])


@dataclass
class AccuracyHistogram:
    bin_edges: tuple
    bin_counts: list


def accuracy_bin(acc):
    """Decile index; an exact edge goes to the upper bin, 100% stays in the top bin."""
    return min(int(np.floor(round(acc * 10, 9))), 9)


def per_class_histogram(report):
    counts = [0] * 10
    for acc in report.per_class_accuracy:
        counts[accuracy_bin(float(acc))] += 1
    return AccuracyHistogram(BIN_EDGES, counts)


def top_confused_pairs(report, k):
    """``(true, predicted, count)`` for the ``k`` largest off-diagonal cells."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cells = [(-n, t, p) for (t, p), n in report.confusion_counts().items() if t != p]
    return [(t, p, -n) for n, t, p in sorted(cells)[:k]]


def misclassification_report(report, k):
    """Misclassified samples belonging to the ``k`` most confused class pairs.

    Returns ``(sample_id, predicted, true)`` tuples ordered by pair rank, then
    sample id.
    """
    rank = {(t, p): i for i, (t, p, _) in enumerate(top_confused_pairs(report, k))}
    hits = [row for row in report.predictions if (row[2], row[1]) in rank]
    return sorted(hits, key=lambda r: (rank[(r[2], r[1])], r[0]))


def write_report(report, out_dir, tag, class_names=None):
    """Emit ``metrics_<tag>.txt``, ``per_class_<tag>.csv`` and ``histogram_<tag>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names or [str(c) for c in range(report.num_classes)]
    support = report.confusion.sum(axis=1)
    lines = [
        f"accuracy: {report.accuracy:.6f}",
        f"macro_f1: {report.macro_f1:.6f}",
        f"num_samples: {report.num_samples}",
        f"num_classes: {report.num_classes}",
        "",
        "class_id\tclass_name\tsupport\taccuracy\tf1",
    ]
    lines += [f"{c}\t{names[c]}\t{support[c]}\t{report.per_class_accuracy[c]:.6f}\t{report.per_class_f1[c]:.6f}"
              for c in range(report.num_classes)]
    (out / f"metrics_{tag}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out / f"per_class_{tag}.csv", "w", encoding="utf-8") as fh:
        fh.write("class_id,class_name,accuracy\n")
        for c in range(report.num_classes):
            fh.write(f"{c},{names[c]},{report.per_class_accuracy[c]:.6f}\n")
    write_histogram(per_class_histogram(report), out / f"histogram_{tag}.csv")


def write_histogram(hist, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_edge,count\n")
        for edge, count in zip(hist.bin_edges[:-1], hist.bin_counts):
            fh.write(f"{edge},{count}\n")


def read_metrics(path):
    """Key/value header of a ``metrics_<tag>.txt`` file."""
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            break
        key, _, value = line.partition(":")
        values[key.strip()] = float(value)
    return values


def read_per_class(path):
    with open(path, encoding="utf-8") as fh:
        next(fh)
        return np.array([float(line.rstrip("\n").rsplit(",", 1)[1]) for line in fh])
