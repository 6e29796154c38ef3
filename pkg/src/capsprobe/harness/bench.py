"""Affine-robustness and patch-robustness benchmarks producing line-delimited reports."""

from dataclasses import dataclass

import numpy as np

from .. import attack as A
from ..nn import component_rng
from .affine import apply_affine
from .report import Report

RESNET_NOTE = "the ResNet comparator is represented by the plain convnet baseline at desk scale"


class UntrainedModel(RuntimeError):
    pass


def _require_trained(name, model):
    base = getattr(model, "base", model)
    if not getattr(base, "trained", False):
        raise UntrainedModel(f"model {name!r} has not been trained or loaded")


def _accuracy(model, images, labels):
    correct = int(np.sum(model.predict(images) == labels))
    return correct / len(labels), correct, len(labels)


def affine_benchmark(models, dataset, param_grid, seed=0):
    """Accuracy of each model on the clean split and on every affine-transformed copy of it."""
    rep = Report()
    rep.note("affine benchmark: models trained on untransformed data")
    rep.note("transformation grid is a desk-scale stand-in, not the original protocol")
    rep.note(f"seed={seed} images={len(dataset)}")
    splits = [(p.label, apply_affine(dataset.images, p)) for p in param_grid]
    for name, model in models.items():
        _require_trained(name, model)
        acc, c, n = _accuracy(model, dataset.images, dataset.labels)
        rep.add("accuracy", name, "clean", acc, n)
        total_c = total_n = 0
        for label, imgs in splits:
            acc, c, n = _accuracy(model, imgs, dataset.labels)
            rep.add("accuracy", name, label, acc, n)
            total_c += c
            total_n += n
        if splits:
            rep.add("accuracy", name, "transformed-all", total_c / total_n, total_n)
        rep.add("params", name, "total", model.num_parameters(), 1)
        if hasattr(model, "transform_params"):
            rep.add("params", name, "transform", model.transform_params(), 1)
    return rep


@dataclass(frozen=True)
class PatchBudget:
    steps: int = A.PATCH_STEPS
    lr: float = A.PATCH_STEP

    @property
    def label(self):
        return f"steps{self.steps}"


def _assign(n, k, seed):
    return component_rng(seed, "patch-positions").integers(0, k, size=n)


def _grouped(fn, images, labels, specs, assign):
    out = np.empty_like(images)
    for k, spec in enumerate(specs):
        idx = np.flatnonzero(assign == k)
        if len(idx):
            out[idx] = fn(images[idx], labels[idx], spec)
    return out


def patch_benchmark(models, dataset, patch_specs, budgets, seed=0, severities=(1, 2, 3, 4, 5),
                    kinds=("gaussian-noise", "mean-shift"), position_budget=None):
    """Clean accuracy, accuracy under patch corruption, patch-attack success, per-position success.

    Each image gets one patch position drawn from ``patch_specs`` (the same
    draw for every model). The position grid attacks every image at every
    slot with ``position_budget`` (defaults to the first budget).
    """
    rep = Report()
    rep.note(RESNET_NOTE)
    rep.note(f"seed={seed} images={len(dataset)} positions={len(patch_specs)}")
    images, labels = dataset.images, dataset.labels
    specs = list(patch_specs)
    assign = _assign(len(labels), len(specs), seed) if specs else None
    pos_budget = position_budget or (budgets[0] if budgets else None)
    for name, model in models.items():
        _require_trained(name, model)
        acc, c, n = _accuracy(model, images, labels)
        rep.add("accuracy", name, "clean", acc, n)
        if not specs:
            continue
        for kind in kinds:
            for sev in severities:
                s = int(component_rng(seed, f"corrupt-{kind}-{sev}").integers(2**31))
                corrupted = _grouped(lambda x, y, sp: A.patch_corrupt(x, sp, kind, sev, s), images, labels, specs, assign)
                acc, c, n = _accuracy(model, corrupted, labels)
                rep.add("corrupt-accuracy", name, f"{kind}-s{sev}", acc, n)
        for b in budgets:
            adv = _grouped(lambda x, y, sp: A.patch_attack(model, x, y, sp, b.steps, b.lr), images, labels, specs, assign)
            rate, k, d = A.success_rate(model, images, labels, adv)
            rep.add("patch-success", name, b.label, rate, d)
        if pos_budget is not None:
            rates = []
            for sp in specs:
                adv = A.patch_attack(model, images, labels, sp, pos_budget.steps, pos_budget.lr)
                rate, k, d = A.success_rate(model, images, labels, adv)
                rates.append(rate)
                rep.add("position-success", name, f"r{sp.row}c{sp.col}", rate, d)
            rep.add("position-variance", name, pos_budget.label, float(np.var(rates)), len(rates))
    return rep


def corruption_drop(report, model, severity, kinds=("gaussian-noise", "mean-shift")):
    clean, _ = report.get("accuracy", model, "clean")
    accs = [report.get("corrupt-accuracy", model, f"{k}-s{severity}")[0] for k in kinds]
    return clean - float(np.mean(accs))
