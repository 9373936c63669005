"""Metrics: support-weighted F1, imputation MSE at missing positions, the
constant mean-fill comparator, and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .convgraph import build_graph
from .dataio import MODALITIES


@dataclass
class Metrics:
    waf: float
    per_class_f1: list
    accuracy: float
    support: list


@dataclass
class EvalResult:
    metrics: Metrics
    imputation_mse: dict     # modality -> float, or None when nothing was missing
    predictions: list = field(default_factory=list)  # (conversation id, index, label, prediction)


def weighted_f1(predictions, labels, num_classes=None) -> Metrics:
    """Per-class F1 averaged with class-support weights, plus accuracy.

    For class k: precision = TP/(TP+FP), recall = TP/(TP+FN), F1 = 2PR/(P+R)
    with F1 = 0 when P + R = 0; waf = sum_k (support_k / N) * F1_k.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("weighted_f1 needs at least one prediction")
    if num_classes is None:
        num_classes = int(max(predictions.max(), labels.max())) + 1
    per_class_f1, support = [], []
    for k in range(num_classes):
        tp = int(np.sum((predictions == k) & (labels == k)))
        fp = int(np.sum((predictions == k) & (labels != k)))
        fn = int(np.sum((predictions != k) & (labels == k)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class_f1.append(f1)
        support.append(tp + fn)
    total = labels.size
    waf = sum(s / total * f for s, f in zip(support, per_class_f1))
    accuracy = float(np.mean(predictions == labels))
    return Metrics(waf=waf, per_class_f1=per_class_f1, accuracy=accuracy,
                   support=support)


def imputation_mse(reconstructions: dict, features: dict, bits: dict, validity):
    """Mean of (x_hat - x)^2 over missing, valid feature scalars per modality.

    A modality with no missing scalars reports None rather than 0.
    """
    validity = np.asarray(validity, dtype=np.float64)
    result = {}
    for m in MODALITIES:
        miss = (1.0 - np.asarray(bits[m], dtype=np.float64)) * validity
        rec = np.asarray(reconstructions[m], dtype=np.float64)
        truth = np.asarray(features[m], dtype=np.float64)
        count = miss.sum() * truth.shape[1]
        if count == 0:
            result[m] = None
        else:
            sq = ((rec - truth) ** 2) * miss[:, None]
            result[m] = float(sq.sum() / count)
    return result


def _combine_mse(sums, counts):
    return {m: (float(sums[m] / counts[m]) if counts[m] else None) for m in MODALITIES}


def mean_imputation_baseline(train_dataset, train_masks):
    """Per-modality mean over observed training rows; fills every missing row
    with that constant vector."""
    sums = {m: None for m in MODALITIES}
    counts = {m: 0 for m in MODALITIES}
    for conv, mask in zip(train_dataset.conversations, train_masks):
        for m in MODALITIES:
            bits = np.asarray(mask.bits[m], dtype=bool)
            observed = conv.features[m][bits]
            if observed.size:
                sums[m] = observed.sum(axis=0) if sums[m] is None else sums[m] + observed.sum(axis=0)
                counts[m] += observed.shape[0]
    means = {}
    for m in MODALITIES:
        if counts[m] == 0:
            raise ValueError(f"modality {m!r} has no observed training rows")
        means[m] = sums[m] / counts[m]
    return means


def baseline_imputation_mse(means: dict, dataset, masks):
    """Evaluate the constant-fill comparator on a split."""
    sq_sums = {m: 0.0 for m in MODALITIES}
    counts = {m: 0 for m in MODALITIES}
    for conv, mask in zip(dataset.conversations, masks):
        for m in MODALITIES:
            miss = ~np.asarray(mask.bits[m], dtype=bool)
            if miss.any():
                diff = conv.features[m][miss] - means[m]
                sq_sums[m] += float((diff ** 2).sum())
                counts[m] += diff.size
    return {m: (sq_sums[m] / counts[m] if counts[m] else None) for m in MODALITIES}


def evaluate(model_config, params, dataset, masks) -> EvalResult:
    """Deterministic inference pass (dropout off) over a split."""
    from . import model as model_mod
    if dict(model_config.modality_dims) != dict(dataset.manifest.modality_dims) \
            or model_config.num_classes != dataset.manifest.num_classes \
            or model_config.num_speakers != dataset.manifest.num_speakers:
        raise ValueError("checkpoint config does not match dataset manifest")
    all_preds, all_labels, records = [], [], []
    mse_sums = {m: 0.0 for m in MODALITIES}
    mse_counts = {m: 0 for m in MODALITIES}
    for conv, mask in zip(dataset.conversations, masks):
        graph = build_graph(conv.speakers, model_config.window,
                            model_config.num_speakers)
        out = model_mod.forward(conv, mask, graph, model_config, params,
                                training=False)
        preds = np.argmax(out.probs.data, axis=1)  # lowest index wins ties
        all_preds.extend(int(p) for p in preds)
        all_labels.extend(conv.labels)
        records.extend((conv.id, i, conv.labels[i], int(preds[i]))
                       for i in range(conv.length))
        for m in MODALITIES:
            miss = ~np.asarray(mask.bits[m], dtype=bool)
            if miss.any():
                diff = out.reconstructions[m].data[miss] - conv.features[m][miss]
                mse_sums[m] += float((diff ** 2).sum())
                mse_counts[m] += diff.size
    metrics = weighted_f1(all_preds, all_labels,
                          num_classes=model_config.num_classes)
    return EvalResult(metrics=metrics,
                      imputation_mse=_combine_mse(mse_sums, mse_counts),
                      predictions=records)


def export_embeddings(model_config, params, dataset, masks, path) -> int:
    """CSV of fused per-utterance representations: id, index, label, D floats."""
    from . import model as model_mod
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["conversation_id", "utterance_index", "label"]
                        + [f"q{k}" for k in range(model_config.latent_dim)])
        for conv, mask in zip(dataset.conversations, masks):
            graph = build_graph(conv.speakers, model_config.window,
                                model_config.num_speakers)
            out = model_mod.forward(conv, mask, graph, model_config, params,
                                    training=False)
            for i in range(conv.length):
                writer.writerow([conv.id, i, conv.labels[i]]
                                + [repr(v) for v in out.fused.data[i]])
                rows += 1
    return rows
