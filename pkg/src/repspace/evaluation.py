"""Full metric row for a trained model on the synthetic train/val splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from repspace import metrics, synthetic
from repspace.contrastive import Model
from repspace.embio import EmbeddedEvalSet, EmbeddingMatrix, LabelVector, build_eval_set, embed_eval_set


@dataclass(frozen=True)
class EvalSettings:
    samples_per_class: int = 50
    aug_preset: str = "baseline"  # eval views always use a fixed augmentation
    eval_seed: int = 0
    k_max: int = 101
    uniformity_t: float = 2.0
    probe_epochs: int = 100
    probe_lr: float = 0.5
    probe_batch: int = 64
    probe_seed: int = 0

    def errors(self) -> list[str]:
        errs = []
        if self.samples_per_class < 2:
            errs.append("samples_per_class must be >= 2")
        if self.aug_preset not in synthetic.AUG_PRESETS:
            errs.append(f"aug_preset must be one of {sorted(synthetic.AUG_PRESETS)}")
        if self.k_max < 1 or self.k_max % 2 == 0:
            errs.append("k_max must be a positive odd number")
        if not self.uniformity_t > 0:
            errs.append("uniformity_t must be > 0")
        if self.probe_epochs < 0 or self.probe_batch < 1 or not self.probe_lr > 0:
            errs.append("probe settings must have epochs >= 0, batch >= 1, lr > 0")
        return errs


@dataclass(frozen=True)
class Evaluation:
    report: metrics.MetricsReport
    embedded: EmbeddedEvalSet
    pca: np.ndarray


def evaluate(model: Model, train: synthetic.Dataset, val: synthetic.Dataset, settings: EvalSettings,
             key: str = "") -> Evaluation:
    """Backbone metrics: pretext metrics on the val EvalSet, label metrics train -> val."""
    if model.in_width != val.dim:
        raise ValueError(f"model input width {model.in_width} != dataset dim {val.dim}")
    eval_set = build_eval_set(val, synthetic.aug_preset(settings.aug_preset), settings.eval_seed,
                              settings.samples_per_class)
    emb = embed_eval_set(model.embed, eval_set)
    views = emb.stacked_views()
    align = metrics.alignment(emb.positive_pairs(), views)
    uni = metrics.uniformity(emb.anchors, settings.uniformity_t)
    intra = metrics.intra_class_alignment(emb.anchors, emb.labels)
    inst = 0.5 * (metrics.inst_disc_accuracy(emb.anchors, emb.view1)
                  + metrics.inst_disc_accuracy(emb.anchors, emb.view2))

    train_emb = EmbeddingMatrix.from_raw(model.embed(train.features))
    val_emb = EmbeddingMatrix.from_raw(model.embed(val.features))
    train_lab, val_lab = LabelVector(train.labels), LabelVector(val.labels)
    nn_acc, nn_k = metrics.best_nn(train_emb, train_lab, val_emb, val_lab, settings.k_max)
    probe = metrics.linear_probe(train_emb, train_lab, val_emb, val_lab, settings.probe_epochs,
                                 settings.probe_lr, settings.probe_batch, seed=settings.probe_seed)
    report = metrics.MetricsReport(key, inst, align, intra, metrics.tolerance(intra), uni, nn_acc, nn_k, probe)
    try:
        pca = metrics.pca_2d(emb.anchors)
    except ValueError:
        # collapsed embeddings have no second axis; plot them at the origin
        pca = np.zeros((len(emb.anchors.vectors), 2))
    return Evaluation(report, emb, pca)
