"""Dataset manifests, confusion matrices, and fold bookkeeping.

A manifest is a CSV with header `image,label,landmarks` (landmarks
optional per row) pointing at PNG images and pts files. Evaluation runs
a classifier over every readable entry, optionally aligning faces first,
and reports the confusion matrix plus one prediction record per image.
Fold splitting emits manifests for external trainers; nothing here
trains.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import facealign, imaging
from .gateway import Classifier, predict_batch

log = logging.getLogger(__name__)


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    image: str
    label: str
    landmarks: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.classes:
            self.classes = sorted({e.label for e in self.entries})
        missing = {e.label for e in self.entries} - set(self.classes)
        if missing:
            raise ManifestError(f"labels {sorted(missing)} missing from class list {self.classes}")

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "image" not in reader.fieldnames or "label" not in reader.fieldnames:
            raise ManifestError(f"{path}: manifest needs an 'image,label[,landmarks]' header")
        for row in reader:
            image = (row.get("image") or "").strip()
            label = (row.get("label") or "").strip()
            if not image or not label:
                raise ManifestError(f"{path}: row with empty image or label: {row}")
            lm = (row.get("landmarks") or "").strip() or None
            entries.append(ManifestEntry(image=image, label=label, landmarks=lm))
    return DatasetManifest(entries=entries)


def save_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "label", "landmarks"])
        for e in manifest.entries:
            writer.writerow([e.image, e.label, e.landmarks or ""])


@dataclass
class PredictionRecord:
    image: str
    label: str
    probs: np.ndarray
    pred: str  # argmax label, ties toward the lowest class index


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) ints, rows = true, columns = predicted
    classes: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class EvaluationResult:
    matrix: ConfusionMatrix
    records: list[PredictionRecord]
    skipped: list[tuple[str, str]]  # (image path, reason)


def evaluate(
    manifest: DatasetManifest,
    classifier: Classifier,
    preprocessing: bool = False,
    jobs: int = 1,
) -> EvaluationResult:
    """Classify every manifest entry once.

    Unreadable images are skipped with a warning and recorded; with
    preprocessing on, every row must carry a landmark path and faces are
    aligned to the classifier input size before inference. Records come
    back in manifest order.
    """
    classes = classifier.classes
    unknown = {e.label for e in manifest.entries} - set(classes)
    if unknown:
        raise ManifestError(f"manifest labels {sorted(unknown)} unknown to the classifier {classes}")
    if preprocessing:
        missing = [e.image for e in manifest.entries if not e.landmarks]
        if missing:
            raise ManifestError(f"preprocessing needs landmarks; missing for {missing[:3]}...")

    w, h = classifier.input_size

    def load(idx: int):
        entry = manifest.entries[idx]
        try:
            img = imaging.read_png(entry.image)
            if preprocessing:
                pts = facealign.parse_pts(entry.landmarks)
                img = facealign.align_face(img, pts, out_side=max(w, h)).image
            if img.shape[0] != h or img.shape[1] != w:
                img = imaging.resize_bilinear(img, w, h)
            return idx, img, None
        except (OSError, ValueError) as exc:
            return idx, None, f"{type(exc).__name__}: {exc}"

    indices = range(len(manifest.entries))
    if jobs <= 1:
        loaded = [load(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            loaded = list(pool.map(load, indices))

    skipped = []
    ok = []
    for idx, img, err in loaded:
        if err is not None:
            entry = manifest.entries[idx]
            log.warning("skipping %s: %s", entry.image, err)
            skipped.append((entry.image, err))
        else:
            ok.append((idx, img))

    probs = predict_batch(classifier, [img for _, img in ok]) if ok else np.zeros((0, len(classes)))
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    records = []
    for (idx, _), p in zip(ok, probs):
        entry = manifest.entries[idx]
        pred_idx = int(np.argmax(p))
        counts[classes.index(entry.label), pred_idx] += 1
        records.append(PredictionRecord(image=entry.image, label=entry.label,
                                        probs=p, pred=classes[pred_idx]))
    return EvaluationResult(matrix=ConfusionMatrix(counts=counts, classes=list(classes)),
                            records=records, skipped=skipped)


@dataclass
class Metrics:
    accuracy: float
    recall: dict[str, float]
    predicted_share: dict[str, float]
    empty_rows: list[str]  # classes with no ground-truth items (recall forced to 0)
    total: int


def metrics(cm: ConfusionMatrix) -> Metrics:
    """accuracy = trace/total; recall over rows; predicted share over columns."""
    total = cm.total
    if total < 1:
        raise ValueError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    row_sums = counts.sum(axis=1)
    col_sums = counts.sum(axis=0)
    recall = {}
    empty = []
    for i, name in enumerate(cm.classes):
        if row_sums[i] == 0:
            recall[name] = 0.0
            empty.append(name)
        else:
            recall[name] = float(counts[i, i] / row_sums[i])
    share = {name: float(col_sums[i] / total) for i, name in enumerate(cm.classes)}
    return Metrics(
        accuracy=float(np.trace(counts) / total),
        recall=recall,
        predicted_share=share,
        empty_rows=empty,
        total=total,
    )


def kfold_split(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[DatasetManifest]:
    """Seed-deterministic shuffle into k disjoint folds, sizes within 1."""
    n = len(manifest)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds manifest size {n}")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    pos = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        idx = sorted(order[pos:pos + size])
        folds.append(DatasetManifest(entries=[manifest.entries[j] for j in idx],
                                     classes=list(manifest.classes)))
        pos += size
    return folds


# ---------------------------------------------------------------------------
# On-disk formats.
# ---------------------------------------------------------------------------


def write_records_jsonl(path: str | Path, records: list[PredictionRecord]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({
                "image": r.image, "label": r.label,
                "probs": [float(p) for p in r.probs], "pred": r.pred,
            }) + "\n")


def read_records_jsonl(path: str | Path) -> list[PredictionRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(PredictionRecord(
                image=obj["image"], label=obj["label"],
                probs=np.asarray(obj["probs"], dtype=np.float64), pred=obj["pred"],
            ))
    return records


def write_confusion_csv(path: str | Path, cm: ConfusionMatrix) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\pred"] + cm.classes)
        for i, name in enumerate(cm.classes):
            writer.writerow([name] + [int(v) for v in cm.counts[i]])


def write_metrics_json(path: str | Path, m: Metrics, extra: dict | None = None) -> None:
    payload = {
        "accuracy": m.accuracy,
        "recall": m.recall,
        "predicted_share": m.predicted_share,
        "empty_rows": m.empty_rows,
        "total": m.total,
    }
    payload.update(extra or {})
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
