"""Extrapolation and model-selection metrics, plus report writers."""
from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

MAPE_EPS = 1e-8


def _pair(true, pred) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(true, dtype=np.float64).ravel()
    p = np.asarray(pred, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {len(y)} true values vs {len(p)} predictions")
    if len(y) == 0:
        raise ValueError("need at least one value")
    return y, p


def mape_flagged(true, pred) -> tuple[float, bool]:
    """MAPE and whether the ``|y| >= 1e-8`` denominator guard kicked in."""
    y, p = _pair(true, pred)
    denom = np.abs(y)
    guarded = bool(np.any(denom < MAPE_EPS))
    return float(np.mean(np.abs(y - p) / np.maximum(denom, MAPE_EPS))), guarded


def mape(true, pred) -> float:
    return mape_flagged(true, pred)[0]


def rmse(true, pred) -> float:
    y, p = _pair(true, pred)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def regret_and_ranking(
    predicted: Mapping[str, float], actual: Mapping[str, float], maximize: bool = True, return_pick: bool = False
):
    """Regret and 1-based true rank of the configuration the predictor picks.

    The pick is the best predicted optimum, ties going to the smallest
    trial_id.  The rank counts trials whose true optimum is strictly better,
    so tied trials share a rank.  With ``return_pick`` the picked trial_id is
    returned as a third element.
    """
    if not predicted:
        raise ValueError("no trials to rank")
    if set(predicted) != set(actual):
        raise ValueError("predicted and actual optima cover different trial ids")
    sign = 1.0 if maximize else -1.0
    ids = sorted(predicted)
    pick = min(ids, key=lambda k: (-sign * predicted[k], k))
    best_true = max(sign * actual[k] for k in ids)
    picked = sign * actual[pick]
    regret = best_true - picked
    rank = 1 + sum(1 for k in ids if sign * actual[k] > picked)
    if return_pick:
        return float(regret), rank, pick
    return float(regret), rank


def pearson(x, y) -> float | None:
    x, y = _pair(x, y)
    if len(x) < 2:
        raise ValueError("need at least two values")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def kendall_tau(x, y) -> float | None:
    """Kendall tau-b (tie-corrected); ``None`` when either input is constant."""
    x, y = _pair(x, y)
    if len(x) < 2:
        raise ValueError("need at least two values")
    i, j = np.triu_indices(len(x), k=1)
    sx = np.sign(x[i] - x[j]).astype(np.int64)
    sy = np.sign(y[i] - y[j]).astype(np.int64)
    s = int(np.sum(sx * sy))
    untied_x = int(np.count_nonzero(sx))
    untied_y = int(np.count_nonzero(sy))
    if untied_x == 0 or untied_y == 0:
        return None
    return s / math.sqrt(untied_x * untied_y)


def rank_correlation(true_scores, pred_scores) -> tuple[float | None, float | None]:
    return pearson(true_scores, pred_scores), kendall_tau(true_scores, pred_scores)


def speedup(full_sgd_time: float, cond_sgd_time: float, inference_time: float) -> float:
    """Full-training runtime over (partial-training runtime + inference time)."""
    return full_sgd_time / (cond_sgd_time + inference_time)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    metric: str
    condition_length: int
    rows: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial_id", "metric", "pred_len", "mape", "rmse"])
            for r in self.rows:
                w.writerow([r["trial_id"], r["metric"], r["pred_len"], repr(r["mape"]), repr(r["rmse"])])

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "condition_length": self.condition_length,
            "aggregates": self.aggregates,
            **self.extra,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_curves(
    trial_ids: Sequence[str],
    truth: np.ndarray,
    predictions: np.ndarray,
    condition_length: int,
    pred_lens: Sequence[int],
    metric: str,
) -> EvalReport:
    """Per-trial MAPE/RMSE for epochs ``n+1..L`` at each horizon ``L``.

    ``truth`` holds full curves ``(trials, m)``; ``predictions`` covers epochs
    ``n+1..m``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    n = condition_length
    m = truth.shape[1]
    if predictions.shape != (truth.shape[0], m - n):
        raise ValueError(f"predictions shape {predictions.shape} does not match {(truth.shape[0], m - n)}")
    report = EvalReport(metric, n)
    for L in pred_lens:
        if not n < L <= m:
            raise ValueError(f"prediction length {L} must lie in ({n}, {m}]")
        mapes, rmses, flagged = [], [], []
        for tid, y, p in zip(trial_ids, truth, predictions):
            value, guard = mape_flagged(y[n:L], p[: L - n])
            err = rmse(y[n:L], p[: L - n])
            mapes.append(value)
            rmses.append(err)
            if guard:
                flagged.append(tid)
            report.rows.append({"trial_id": tid, "metric": metric, "pred_len": L, "mape": value, "rmse": err})
        report.aggregates[str(L)] = {
            "mape": float(np.mean(mapes)),
            "rmse": float(np.mean(rmses)),
            "trials": len(mapes),
            "mape_guarded_trials": flagged,
        }
    return report
