"""Evaluation protocols: cross-modality accuracy, pair distances, probes, retrieval, segmentation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .datasets import PART_SETS, EvalPairSet, GeneratedStore
from .encoders import EncoderParams, forward_fusion, forward_image, forward_point
from .errors import ConfigError, SizeError
from .trainer import ProbeConfig, train_linear_probe

DEFAULT_TOP_K = (1, 5, 10, 20, 50)


@dataclass(frozen=True)
class EvalConfig:
    test_views: int = 1
    top_k: tuple[int, ...] = DEFAULT_TOP_K
    threshold: float = 0.5

    def __post_init__(self):
        if self.test_views < 1:
            raise ConfigError("test_views must be at least 1")


# ------------------------------------------------------------------ features

def image_features(params: EncoderParams, views: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode F_img features for [N, H, W] (or [N, 1, H, W]) views."""
    views = np.asarray(views, dtype=params.dtype)
    if views.ndim == 3:
        views = views[:, None]
    with no_grad():
        return np.concatenate([forward_image(params, views[s:s + batch_size], "eval").data
                               for s in range(0, len(views), batch_size)])


def point_features(params: EncoderParams, clouds: np.ndarray, batch_size: int = 64) -> np.ndarray:
    clouds = np.asarray(clouds, dtype=params.dtype)
    with no_grad():
        return np.concatenate([forward_point(params, clouds[s:s + batch_size], "eval")[1].data
                               for s in range(0, len(clouds), batch_size)])


def multiview_feature(features: np.ndarray) -> np.ndarray:
    """Elementwise max over the per-view features [v, D] of one object."""
    features = np.asarray(features)
    if features.ndim != 2 or len(features) == 0:
        raise SizeError("multiview_feature needs a non-empty [v, D] stack")
    return features.max(axis=0)


def object_image_features(params: EncoderParams, store: GeneratedStore, objects: np.ndarray, v: int) -> np.ndarray:
    """Max-pooled feature over the first ``v`` rendered views of each object."""
    if not 1 <= v <= store.view_count:
        raise ConfigError(f"v={v} must lie in [1, {store.view_count}]")
    views = store.views[objects, :v]
    feats = image_features(params, views.reshape(-1, *views.shape[2:]))
    return feats.reshape(len(objects), v, -1).max(axis=1)


# ------------------------------------------------------------------ pair protocols

def _pair_members(pairs: EvalPairSet):
    members = {m for a, b, _ in pairs.pairs for m in (a, b)}
    views = sorted(m for m in members if m[1] >= 0)
    clouds = sorted({m[0] for m in members if m[1] < 0})
    return views, clouds


def cross_modality_accuracy(params: EncoderParams, store: GeneratedStore, pairs: EvalPairSet,
                            threshold: float = 0.5) -> float:
    """Fraction of (view, cloud) pairs whose same-object probability falls on the correct side of ``threshold``."""
    if pairs.kind != "2D-3D":
        raise ConfigError("cross-modality accuracy needs a 2D-3D pair set")
    if not pairs.pairs:
        raise SizeError("empty pair set")
    probs = fusion_probabilities(params, store, pairs)
    return float(np.mean((probs > threshold) == (pairs.labels == 1)))


def fusion_probabilities(params: EncoderParams, store: GeneratedStore, pairs: EvalPairSet) -> np.ndarray:
    views, clouds = _pair_members(pairs)
    vf = image_features(params, np.stack([store.views[o, v] for o, v in views]))
    cf = point_features(params, store.clouds[clouds])
    vrow = {m: i for i, m in enumerate(views)}
    crow = {o: i for i, o in enumerate(clouds)}
    fi = vf[[vrow[a] for a, _, _ in pairs.pairs]]
    fp = cf[[crow[b[0]] for _, b, _ in pairs.pairs]]
    with no_grad():
        return forward_fusion(params, Tensor(fi), Tensor(fp)).data


@dataclass(frozen=True)
class PairStats:
    positive_mpd: float
    positive_std: float
    negative_mpd: float
    negative_std: float


def pair_distances(params: EncoderParams, store: GeneratedStore, pairs: EvalPairSet) -> np.ndarray:
    if pairs.kind != "2D-2D":
        raise ConfigError("pair distances need a 2D-2D pair set")
    views, _ = _pair_members(pairs)
    feats = image_features(params, np.stack([store.views[o, v] for o, v in views]))
    row = {m: i for i, m in enumerate(views)}
    a = feats[[row[p[0]] for p in pairs.pairs]]
    b = feats[[row[p[1]] for p in pairs.pairs]]
    return np.linalg.norm(a - b, axis=1)


def pair_distance_stats(params: EncoderParams, store: GeneratedStore, pairs: EvalPairSet) -> PairStats:
    d = pair_distances(params, store, pairs)
    y = pairs.labels
    if not (y == 1).any() or not (y == 0).any():
        raise SizeError("pair set needs both positive and negative pairs")
    pos, neg = d[y == 1], d[y == 0]
    return PairStats(float(pos.mean()), float(pos.std()), float(neg.mean()), float(neg.std()))


# ------------------------------------------------------------------ recognition and retrieval

def recognition_probe(train_features: np.ndarray, train_labels: np.ndarray, test_features: np.ndarray,
                      test_labels: np.ndarray, config: ProbeConfig = ProbeConfig()) -> float:
    """Test accuracy of a linear SVM trained on frozen features."""
    missing = set(np.unique(test_labels)) - set(np.unique(train_labels))
    if missing:
        raise ConfigError(f"classes {sorted(missing)} absent from the probe's training features")
    num_classes = int(max(train_labels.max(), test_labels.max())) + 1
    probe = train_linear_probe(train_features, train_labels, num_classes, config)
    return float(np.mean(probe.predict(test_features) == test_labels))


def retrieval_topk(query: np.ndarray, gallery: np.ndarray | None, query_labels: np.ndarray,
                   gallery_labels: np.ndarray | None = None, ks=DEFAULT_TOP_K) -> dict[int, float]:
    """Hit rate at each k: a query hits when any of its k nearest gallery items shares its class.

    With ``gallery`` None the query set is its own gallery, each query excluded (leave-one-out).
    """
    query = np.asarray(query, dtype=np.float64)
    loo = gallery is None
    gallery = query if loo else np.asarray(gallery, dtype=np.float64)
    gallery_labels = query_labels if gallery_labels is None else gallery_labels
    size = len(gallery) - (1 if loo else 0)
    if size < 1:
        raise SizeError("empty retrieval gallery")
    if max(ks) > size:
        raise SizeError(f"k={max(ks)} exceeds the gallery size {size}")
    d = (np.sum(query ** 2, 1)[:, None] + np.sum(gallery ** 2, 1)[None, :] - 2 * query @ gallery.T)
    if loo:
        np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :max(ks)]
    match = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    first = np.where(match.any(1), match.argmax(1), np.iinfo(np.int64).max)
    return {int(k): float(np.mean(first < k)) for k in ks}


# ------------------------------------------------------------------ segmentation

@dataclass(frozen=True)
class SegMetrics:
    overall_accuracy: float
    class_miou: float
    instance_miou: float


def shape_iou(pred: np.ndarray, label: np.ndarray, parts) -> float:
    """Mean IoU over a category's parts; a part absent from both prediction and label scores 1."""
    ious = []
    for p in parts:
        inter = np.sum((pred == p) & (label == p))
        union = np.sum((pred == p) | (label == p))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))


def segmentation_metrics(predictions: np.ndarray, labels: np.ndarray, categories,
                         part_sets: dict[str, tuple[int, ...]] = PART_SETS) -> SegMetrics:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or len(categories) != len(labels):
        raise SizeError("predictions, labels and categories must align")
    per_cat: dict[str, list[float]] = {}
    for pred, lab, cat in zip(predictions, labels, categories):
        parts = part_sets[cat]
        if not np.isin(lab, parts).all():
            raise SizeError(f"label outside the part set of category {cat!r}")
        per_cat.setdefault(cat, []).append(shape_iou(pred, lab, parts))
    shape_ious = [v for vs in per_cat.values() for v in vs]
    return SegMetrics(float(np.mean(predictions == labels)),
                      float(np.mean([np.mean(v) for v in per_cat.values()])),
                      float(np.mean(shape_ious)))


# ------------------------------------------------------------------ reports

def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if hasattr(value, "__dataclass_fields__"):
        return _plain(asdict(value))
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def write_report(metrics: dict, path: str | Path) -> None:
    """Named scalar fields as an indented JSON document."""
    Path(path).write_text(json.dumps(_plain(metrics), indent=2, sort_keys=True) + "\n")


def flatten_metrics(metrics: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in _plain(metrics).items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten_metrics(v, key + "."))
        else:
            out[key] = v
    return out


def append_csv_row(metrics: dict, path: str | Path) -> None:
    """Append one flattened row; the header is written when the file is new."""
    flat = flatten_metrics(metrics)
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(flat))
        if new:
            w.writeheader()
        w.writerow(flat)
