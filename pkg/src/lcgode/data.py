"""Learning-curve datasets: synthetic generation, normalization, JSONL I/O.

Synthetic curves come from gradient flow on a diagonal quadratic loss
``L(theta) = 1/2 sum_k lam_k theta_k^2``, where ``theta_k(t) =
theta_k(0) exp(-lam_k t)`` in closed form.  One slow eigenvalue is tied to
the architecture graph and one fast eigenvalue to the learning rate, so the
observed prefix pins down the early drop while the graph decides the tail.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ArchitectureGraph, node_features

log = logging.getLogger(__name__)

METRICS = ("test_loss", "test_accuracy")
MIN_TRIALS = 4

# appendix sampling table: (low, high, log-scale)
HYPERPARAM_RANGES = {
    "batch_size": (16, 512, True),
    "learning_rate": (1e-4, 1e-1, True),
    "weight_decay": (1e-5, 0.1, False),
    "num_layers": (1, 5, False),
    "units_per_layer": (16, 1024, True),
    "dropout": (0.0, 1.0, False),
}


class DatasetError(ValueError):
    pass


@dataclass
class LearningCurve:
    metric: str
    values: np.ndarray
    t_max: float = 1.0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.t_max = float(self.t_max)
        if self.metric not in METRICS:
            raise DatasetError(f"unknown metric {self.metric!r}")
        if self.values.ndim != 1 or len(self.values) == 0:
            raise DatasetError("curve values must be a non-empty 1-d array")
        if not np.all(np.isfinite(self.values)):
            raise DatasetError("curve values must be finite")
        if self.metric == "test_accuracy" and np.any((self.values < 0) | (self.values > 1)):
            raise DatasetError("accuracy values must lie in [0, 1]")
        if self.metric == "test_loss" and np.any(self.values < 0):
            raise DatasetError("loss values must be non-negative")

    @property
    def m(self) -> int:
        return len(self.values)

    @property
    def dt(self) -> float:
        return self.t_max / self.m

    @property
    def times(self) -> np.ndarray:
        return time_grid(self.m, self.t_max)

    def to_json(self) -> dict:
        return {"m": self.m, "t_max": self.t_max, "values": self.values.tolist()}


def time_grid(m: int, t_max: float) -> np.ndarray:
    """Epoch clock ``t_i = i * t_max / m`` for ``i = 1..m``."""
    return np.arange(1, m + 1) * (t_max / m)


@dataclass(eq=False)
class Trial:
    trial_id: str
    graph: ArchitectureGraph
    hyperparams: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.trial_id == other.trial_id
            and self.graph == other.graph
            and self.hyperparams == other.hyperparams
            and self.curves.keys() == other.curves.keys()
            and all(
                self.curves[k].t_max == other.curves[k].t_max
                and np.array_equal(self.curves[k].values, other.curves[k].values)
                for k in self.curves
            )
        )


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationParams:
    """Squashing map onto [0, 1] for curves with known hard and soft bounds.

    ``d`` carries a negative sign so that ``g(l_hard) = 0`` and
    ``g(u_hard) = 1`` hold exactly for the closed-form ``c``.
    """

    minimize: bool
    l_hard: float
    u_hard: float
    l_soft: float
    u_soft: float

    def __post_init__(self) -> None:
        if not self.l_hard < self.u_hard:
            raise ValueError("need l_hard < u_hard")
        if not self.l_soft < self.u_soft:
            raise ValueError("need l_soft < u_soft")

    @property
    def a(self) -> float:
        return 2.0 / (self.u_soft - self.l_soft)

    @property
    def b(self) -> float:
        return -(self.u_soft + self.l_soft) / (self.u_soft - self.l_soft)

    @property
    def c(self) -> float:
        a, b = self.a, self.b
        e_u = math.exp(-a * (self.u_hard - b))
        e_l = math.exp(-a * (self.l_hard - b))
        e_ul = math.exp(-a * (self.u_hard + self.l_hard - 2.0 * b))
        return (1.0 + e_u + e_l + e_ul) / (e_l - e_u)

    @property
    def d(self) -> float:
        return -self.c / (1.0 + math.exp(-self.a * (self.l_hard - self.b)))


ACCURACY_NORMALIZATION = NormalizationParams(False, 0.0, 1.0, 0.0, 1.0)


def loss_normalization(first_epoch_max: float) -> NormalizationParams:
    """Bounds used for log-loss curves: hard [0, log 10], soft [0, max y_0]."""
    return NormalizationParams(True, 0.0, math.log(10.0), 0.0, float(first_epoch_max))


def _flip(y, params: NormalizationParams):
    return 1.0 - y if params.minimize else y


def normalize_curve(values, params: NormalizationParams) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(~((x >= params.l_hard) & (x <= params.u_hard)))
    if len(bad):
        i = int(bad[0])
        raise ValueError(f"value {x.flat[i]!r} at index {i} outside [{params.l_hard}, {params.u_hard}]")
    y = params.c / (1.0 + np.exp(-params.a * (x - params.b))) + params.d
    return _flip(y, params)


def denormalize_curve(values, params: NormalizationParams) -> np.ndarray:
    y = np.asarray(values, dtype=np.float64)
    bad = np.flatnonzero(~((y > 0.0) & (y < 1.0)))
    if len(bad):
        i = int(bad[0])
        raise ValueError(f"value {y.flat[i]!r} at index {i} outside the open interval (0, 1)")
    inner = _flip(y, params) - params.d
    return params.b - np.log((params.c - inner) / inner) / params.a


# ---------------------------------------------------------------------------
# configuration sampling


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def sample_hyperparams(rng: np.random.Generator, unit_range: tuple[int, int] | None = None) -> dict:
    """One MLP training configuration drawn from the appendix ranges.

    ``unit_range`` narrows the per-layer width range (it must stay inside
    [16, 1024]); layer widths are drawn independently per layer.
    """
    lo_u, hi_u, _ = HYPERPARAM_RANGES["units_per_layer"]
    if unit_range is not None:
        if unit_range[0] < lo_u or unit_range[1] > hi_u or unit_range[0] > unit_range[1]:
            raise ValueError(f"unit_range must lie within [{lo_u}, {hi_u}]")
        lo_u, hi_u = unit_range
    batch = int(round(_log_uniform(rng, 16, 512)))
    lr = _log_uniform(rng, 1e-4, 1e-1)
    wd = float(rng.uniform(1e-5, 0.1))
    layers = int(rng.integers(1, 6))
    units = [int(round(_log_uniform(rng, lo_u, hi_u))) for _ in range(layers)]
    dropout = float(rng.uniform(0.0, 1.0))
    return {
        "batch_size": batch,
        "learning_rate": lr,
        "weight_decay": wd,
        "num_layers": layers,
        "units_per_layer": units,
        "dropout": dropout,
    }


def hyperparams_to_graph(hyperparams: dict, input_width: int = 6, output_width: int = 2) -> ArchitectureGraph:
    """Fully connected layered DAG with one node per neuron."""
    widths = [input_width, *hyperparams["units_per_layer"], output_width]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    src, dst = [], []
    for k in range(len(widths) - 1):
        a = np.arange(offsets[k], offsets[k + 1])
        b = np.arange(offsets[k + 1], offsets[k + 2])
        src.append(np.repeat(a, len(b)))
        dst.append(np.tile(b, len(a)))
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    return ArchitectureGraph(int(offsets[-1]), src, dst, np.ones(len(src), dtype=np.int8), "mlp")


# ---------------------------------------------------------------------------
# gradient-flow curves


@dataclass
class GradientFlowTask:
    eigenvalues: np.ndarray
    theta0: np.ndarray
    noise: float = 0.0

    def __post_init__(self) -> None:
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        if np.any(self.eigenvalues <= 0):
            raise ValueError("eigenvalues must be strictly positive")
        if self.eigenvalues.shape != self.theta0.shape:
            raise ValueError("eigenvalues and theta0 differ in shape")

    def theta(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)[..., None]
        return self.theta0 * np.exp(-self.eigenvalues * t)

    def loss(self, t) -> np.ndarray:
        return 0.5 * np.sum(self.eigenvalues * self.theta(t) ** 2, axis=-1)

    def grad_norm_sq(self, t) -> np.ndarray:
        """``|dL/dtheta|^2``, which equals ``-dL/dt`` along the flow."""
        return np.sum((self.eigenvalues * self.theta(t)) ** 2, axis=-1)


def gradient_flow_curve(
    task: GradientFlowTask, m: int, t_max: float = 1.0, rng: np.random.Generator | None = None
) -> LearningCurve:
    """Loss along the flow on the epoch grid, with optional log-normal noise."""
    values = task.loss(time_grid(m, t_max))
    if task.noise > 0 and rng is not None:
        values = values * np.exp(task.noise * rng.standard_normal(m))
    return LearningCurve("test_loss", values, t_max)


def accuracy_from_loss(loss, a_max: float = 0.95, kappa: float = 0.3) -> np.ndarray:
    """Monotone map ``a_max * (1 - exp(-kappa / L))``; L -> 0 gives a_max."""
    loss = np.asarray(loss, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return a_max * -np.expm1(-kappa / loss)


def mean_node_feature(graph: ArchitectureGraph) -> float:
    return float(node_features(graph).X.mean())


def mean_degree(graph: ArchitectureGraph) -> float:
    return int(np.count_nonzero(graph.label)) / graph.num_nodes


@dataclass(frozen=True)
class GraphLink:
    """Map a graph statistic to the slow eigenvalue of the task.

    The statistic is placed on a log scale between ``stat_range`` and mapped
    to ``eigen_range`` (log-linear).  With the default statistic, the mean of
    the node features (``1/N`` for any graph with edges), bigger networks get
    a larger slow eigenvalue and so a lower final loss.
    """

    statistic: Callable[[ArchitectureGraph], float] = mean_node_feature
    stat_range: tuple[float, float] = (1.0 / 5128, 1.0 / 24)
    eigen_range: tuple[float, float] = (2.0, 0.3)

    def __call__(self, graph: ArchitectureGraph) -> float:
        lo, hi = np.log(self.stat_range)
        stat = max(self.statistic(graph), 1e-12)
        r = float(np.clip((np.log(stat) - lo) / (hi - lo), 0.0, 1.0))
        e_lo, e_hi = np.log(self.eigen_range)
        return float(np.exp(e_lo + r * (e_hi - e_lo)))


@dataclass(frozen=True)
class SyntheticConfig:
    m: int = 200
    t_max: float = 1.0
    noise: float = 0.02
    input_width: int = 6
    output_width: int = 2
    unit_range: tuple[int, int] = (16, 1024)
    fast_range: tuple[float, float] = (4.0, 16.0)
    fast_amplitude: tuple[float, float] = (0.5, 1.0)
    slow_amplitude: tuple[float, float] = (0.3, 0.6)
    a_max: float = 0.95
    kappa: float = 0.3


def make_task(graph: ArchitectureGraph, hyperparams: dict, rng: np.random.Generator, config: SyntheticConfig, link) -> GradientFlowTask:
    lr_lo, lr_hi, _ = HYPERPARAM_RANGES["learning_rate"]
    r = np.log(hyperparams["learning_rate"] / lr_lo) / np.log(lr_hi / lr_lo)
    fast = config.fast_range[0] + r * (config.fast_range[1] - config.fast_range[0])
    slow = link(graph)
    eig = np.array([fast, slow])
    amp = np.array([rng.uniform(*config.fast_amplitude), rng.uniform(*config.slow_amplitude)])
    # amplitude is the loss share 1/2 lam theta0^2 of each mode
    return GradientFlowTask(eig, np.sqrt(2.0 * amp / eig), config.noise)


def make_trial(index: int, seed: int, config: SyntheticConfig, link) -> Trial:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, index]))
    hp = sample_hyperparams(rng, config.unit_range)
    graph = hyperparams_to_graph(hp, config.input_width, config.output_width)
    task = make_task(graph, hp, rng, config, link)
    loss = gradient_flow_curve(task, config.m, config.t_max, rng)
    acc = accuracy_from_loss(loss.values, config.a_max, config.kappa)
    return Trial(
        f"trial-{index:05d}",
        graph,
        hp,
        {
            "test_loss": loss,
            "test_accuracy": LearningCurve("test_accuracy", acc, config.t_max),
        },
    )


def generate_synthetic_dataset(
    num_trials: int,
    seed: int,
    config: SyntheticConfig | None = None,
    link: Callable[[ArchitectureGraph], float] | None = None,
    threads: int = 1,
) -> list[Trial]:
    """``num_trials`` trials; trial ``i`` uses its own stream ``(seed, i)``."""
    if num_trials < MIN_TRIALS:
        raise DatasetError(f"need at least {MIN_TRIALS} trials to split, got {num_trials}")
    config = config or SyntheticConfig()
    link = link or GraphLink()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: make_trial(i, seed, config, link), range(num_trials)))
    return [make_trial(i, seed, config, link) for i in range(num_trials)]


# ---------------------------------------------------------------------------
# JSONL I/O


def trial_to_json(trial: Trial) -> dict:
    return {
        "trial_id": trial.trial_id,
        "arch": trial.graph.to_json(),
        "hyperparams": trial.hyperparams,
        "curves": {k: c.to_json() for k, c in trial.curves.items()},
    }


_TRIAL_KEYS = {"trial_id", "arch", "hyperparams", "curves"}


def trial_from_json(doc: dict, lineno: int = 0) -> Trial:
    where = f"line {lineno}"
    if not isinstance(doc, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    tid = doc.get("trial_id")
    if not isinstance(tid, str):
        raise DatasetError(f"{where}: missing or non-string 'trial_id'")
    where = f"{where} (trial {tid!r})"
    for key in ("arch", "curves"):
        if key not in doc:
            raise DatasetError(f"{where}: missing {key!r}")
    for key in sorted(set(doc) - _TRIAL_KEYS):
        log.warning("%s: ignoring unknown key %r", where, key)
    try:
        graph = ArchitectureGraph.from_json(doc["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: bad 'arch': {exc}") from None
    curves = {}
    for metric, c in doc["curves"].items():
        try:
            values = c["values"]
            curve = LearningCurve(metric, values, c.get("t_max", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: bad curve {metric!r}: {exc}") from None
        if "m" in c and c["m"] != curve.m:
            raise DatasetError(f"{where}: curve {metric!r} declares m={c['m']} but has {curve.m} values")
        curves[metric] = curve
    return Trial(tid, graph, doc.get("hyperparams", {}), curves)


def save_dataset(path, trials: list[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(json.dumps(trial_to_json(t), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path) -> list[Trial]:
    trials = []
    lengths: dict[str, tuple[int, str]] = {}
    with open(Path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON: {exc.msg}") from None
            trial = trial_from_json(doc, lineno)
            for metric, curve in trial.curves.items():
                m, first = lengths.setdefault(metric, (curve.m, trial.trial_id))
                if curve.m != m:
                    raise DatasetError(
                        f"line {lineno} (trial {trial.trial_id!r}): {metric} has {curve.m} epochs, "
                        f"trial {first!r} has {m}"
                    )
            trials.append(trial)
    return trials


def split(trials: list[Trial], test_fraction: float, rng: np.random.Generator) -> tuple[list[Trial], list[Trial]]:
    """Shuffle whole trials and hold out ``round(test_fraction * n)`` of them."""
    if not trials:
        raise DatasetError("cannot split an empty dataset")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    order = rng.permutation(len(trials))
    n_test = int(round(test_fraction * len(trials)))
    n_test = min(max(n_test, 1), len(trials) - 1)
    test = [trials[i] for i in sorted(order[:n_test])]
    train = [trials[i] for i in sorted(order[n_test:])]
    return train, test
