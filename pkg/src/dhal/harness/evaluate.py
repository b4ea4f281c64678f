"""Mode-identification accuracy and prediction reports."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from dhal import dha as dha_mod
from dhal.envs.dataset import Dataset
from dhal.errors import ConfigError, DataError

MAX_MATCH_MODES = 6


@dataclass
class ModeAccuracyReport:
    confusion: np.ndarray  # (K_pred, K_true)
    permutation: tuple  # predicted mode i is read as true mode permutation[i]
    accuracy: float
    recall: list
    histogram: list
    count: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "count": self.count,
            "confusion": self.confusion.astype(int).tolist(),
            # 1-based labels on the way out
            "permutation": [p + 1 for p in self.permutation],
            "recall": self.recall,
            "histogram": self.histogram,
        }


def confusion_matrix(pred, true, k_pred: int, k_true: int) -> np.ndarray:
    conf = np.zeros((k_pred, k_true), dtype=np.int64)
    np.add.at(conf, (np.asarray(pred, dtype=np.int64), np.asarray(true, dtype=np.int64)), 1)
    return conf


def best_permutation(conf: np.ndarray) -> tuple[tuple, int]:
    """Exhaustive search for the relabeling with the largest matched count.

    The matrix is zero-padded to square so unequal mode counts work; padded
    predicted labels map to no true class. Ties keep the first permutation in
    lexicographic order.
    """
    kp, kt = conf.shape
    m = max(kp, kt)
    if m > MAX_MATCH_MODES:
        raise ConfigError(f"exhaustive matching supports at most {MAX_MATCH_MODES} modes, got {m}")
    sq = np.zeros((m, m), dtype=np.int64)
    sq[:kp, :kt] = conf
    best, best_score = None, -1
    for perm in itertools.permutations(range(m)):
        score = int(sq[np.arange(m), perm].sum())
        if score > best_score:
            best, best_score = perm, score
    return tuple(best[:kp]), best_score


def mode_accuracy(pred, true, k_pred: int, k_true: int) -> ModeAccuracyReport:
    pred, true = np.asarray(pred), np.asarray(true)
    conf = confusion_matrix(pred, true, k_pred, k_true)
    perm, matched = best_permutation(conf)
    n = len(pred)
    recall = []
    for j in range(k_true):
        total = conf[:, j].sum()
        hits = sum(conf[i, j] for i in range(k_pred) if perm[i] == j)
        recall.append(float(hits / total) if total else None)
    return ModeAccuracyReport(
        confusion=conf,
        permutation=perm,
        accuracy=float(matched / n) if n else float("nan"),
        recall=recall,
        histogram=np.bincount(pred, minlength=k_pred).tolist(),
        count=n,
    )


def settled_mask(true_mode: np.ndarray, starts: np.ndarray, window: int) -> np.ndarray:
    """Steps whose history window contains no true-mode switch.

    The window covers the current step and the ``window - 1`` before it,
    clipped at the segment start, so the first steps of an episode count as
    settled while every step since the start shares one mode.
    """
    n = len(true_mode)
    out = np.zeros(n, dtype=bool)
    run = seg = 0
    for i in range(n):
        if starts[i]:
            run = seg = 0
        else:
            seg += 1
            run = 0 if true_mode[i] != true_mode[i - 1] else run + 1
        out[i] = run >= window - 1 or run == seg
    return out


def switch_mask(true_mode: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Steps where the mode differs from the previous step of the same segment."""
    sw = np.zeros(len(true_mode), dtype=bool)
    sw[1:] = true_mode[1:] != true_mode[:-1]
    sw[starts] = False
    return sw


def num_true_modes(ds: Dataset) -> int:
    return int(ds.true_mode.max()) + 1


def eval_mode_accuracy(model: dha_mod.DhaModel, ds: Dataset) -> dict:
    if not ds.labeled:
        raise DataError("mode accuracy needs a dataset with true_mode labels")
    dha_mod.check_dataset(model, ds)
    pred, _, _ = dha_mod.predict_dataset(model, dha_mod.dataset_windows(ds, model.cfg.window))
    k_true = num_true_modes(ds)
    starts = ds.segment_starts()
    settled = settled_mask(ds.true_mode, starts, model.cfg.window)
    out = {"num_modes": model.num_modes, "true_modes": k_true}
    for name, sel in (("settled", settled), ("switch_adjacent", ~settled), ("all", np.ones(len(ds), bool))):
        out[name] = mode_accuracy(pred[sel], ds.true_mode[sel], model.num_modes, k_true).to_dict()
    return out


def eval_prediction_report(model: dha_mod.DhaModel, ds: Dataset) -> tuple[dict, dict]:
    """Summary dict plus per-step traces for external plotting."""
    if len(ds) == 0:
        raise DataError("empty dataset")
    sq, bce, modes, obs_hat = dha_mod.prediction_errors(model, ds)
    report = dha_mod.summarize_errors(sq, bce, modes, model.num_modes)
    starts = ds.segment_starts()
    labels = ds.true_mode if ds.labeled else modes
    sw = switch_mask(labels, starts)
    report["switch_steps"] = int(sw.sum())
    report["switch_mse"] = float(sq[sw].mean()) if sw.any() else None
    report["nonswitch_mse"] = float(sq[~sw].mean()) if (~sw).any() else None
    report["switch_labels"] = "true" if ds.labeled else "predicted"
    traces = {"step": np.arange(len(ds)), "mode": modes + 1, "true_mode": np.where(ds.true_mode >= 0, ds.true_mode + 1, 0)}
    for d in range(ds.obs_dim):
        traces[f"actual_{d}"] = ds.next_obs[:, d]
        traces[f"pred_{d}"] = obs_hat[:, d]
    return report, traces
