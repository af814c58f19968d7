"""Testing-phase metrics: cluster-to-label matching, accuracy, weighting and
cluster-count sweeps, and the K-means baseline on cascaded raw features."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import Posterior, WvaeModel, conditional_entropy
from .simdata import MultiViewDataset
from .training import TrainConfig, model_from_report, run_trials


@dataclass
class LabelMatching:
    """Bijection cluster index -> label index and the accuracy it achieves."""

    permutation: np.ndarray
    matched_accuracy: float

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=int)
        if sorted(perm.tolist()) != list(range(perm.size)):
            raise ValueError("permutation must be a bijection on [k]")
        self.permutation = perm


@dataclass
class ClusterSweepResult:
    """Loss per tried cluster count; detected_k is None when no sharp
    transition exists in the range."""

    z_values: list[int]
    losses: list[float]
    detected_k: int | None


def contingency(pred, truth, k: int) -> np.ndarray:
    """k x k count matrix with rows indexed by cluster, columns by label."""
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must align")
    if pred.size == 0:
        raise ValueError("need at least one sample")
    if min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= k:
        raise ValueError(f"indices must lie in [0, {k})")
    table = np.zeros((k, k), dtype=int)
    np.add.at(table, (pred, truth), 1)
    return table


def match_labels(pred, truth, k: int) -> LabelMatching:
    """Optimal one-to-one cluster-to-label assignment.

    Solved as a rectangular assignment problem on the contingency matrix; the
    optimum matches an exhaustive search over all k! label permutations at
    polynomial cost.
    """
    table = contingency(pred, truth, k)
    rows, cols = linear_sum_assignment(table, maximize=True)
    perm = np.empty(k, dtype=int)
    perm[rows] = cols
    matched = table[rows, cols].sum() / table.sum()
    return LabelMatching(permutation=perm, matched_accuracy=float(matched))


def accuracy(posterior: Posterior, truth, matching: LabelMatching) -> float:
    """Fraction of samples whose matched argmax cluster equals the label.

    Argmax ties resolve to the lowest cluster index.
    """
    truth = np.asarray(truth, dtype=int)
    pred = posterior.assignments()
    if pred.shape != truth.shape:
        raise ValueError("posterior and truth must align")
    if matching.permutation.size != posterior.responsibilities.shape[1]:
        raise ValueError("matching size does not fit the posterior")
    return float(np.mean(matching.permutation[pred] == truth))


# --- K-means baseline ------------------------------------------------------------


@dataclass
class KmeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    objective_trace: list[float]


def _sq_dists(x, centroids):
    # ||x - c||^2 expanded; clip tiny negatives from cancellation.
    d2 = (
        (x**2).sum(axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + (centroids**2).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = x[rng.integers(n)]
            continue
        centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(x, k, rng, max_iter):
    centroids = _kmeanspp_init(x, k, rng)
    d2 = _sq_dists(x, centroids)
    assign = d2.argmin(axis=1)
    trace = [float(d2[np.arange(x.shape[0]), assign].sum())]
    for _ in range(max_iter):
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # Reseed an empty cluster at the worst-fit point.
                worst = d2[np.arange(x.shape[0]), assign].argmax()
                centroids[j] = x[worst]
        d2 = _sq_dists(x, centroids)
        new_assign = d2.argmin(axis=1)
        trace.append(float(d2[np.arange(x.shape[0]), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return KmeansResult(assign, centroids, trace[-1], trace)


def kmeans(features, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> KmeansResult:
    """Lloyd's algorithm with k-means++ seeding and several restarts.

    Iteration stops when assignments are fixed or max_iter is hit; the best
    restart by within-cluster sum of squares wins.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k must lie in [1, {x.shape[0]}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    best: KmeansResult | None = None
    for _ in range(restarts):
        result = _lloyd(x, k, rng, max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


def kmeans_predict(features, centroids) -> np.ndarray:
    return _sq_dists(np.asarray(features, dtype=float), centroids).argmin(axis=1)


def cascade_features(dataset: MultiViewDataset) -> np.ndarray:
    """Raw multi-view input for the baseline: views concatenated columnwise."""
    return np.hstack(dataset.matrices())


def baseline_kmeans(
    train: MultiViewDataset, test: MultiViewDataset, k: int, seed: int = 0
) -> dict:
    """Fit K-means on cascaded training features, assign the test split to the
    nearest centroids and report the label-matched test accuracy."""
    if test.labels is None:
        raise ValueError("baseline evaluation needs test labels")
    fit = kmeans(cascade_features(train), k, seed=seed)
    pred = kmeans_predict(cascade_features(test), fit.centroids)
    # the matching table must cover both index ranges (k may undershoot them)
    k_match = max(k, int(test.labels.max()) + 1)
    matching = match_labels(pred, test.labels, k_match)
    return {
        "accuracy": float(np.mean(matching.permutation[pred] == test.labels)),
        "matching": matching,
        "inertia": fit.inertia,
    }


# --- model evaluation --------------------------------------------------------------


def evaluate_model(model: WvaeModel, dataset: MultiViewDataset) -> dict:
    """Matched accuracy, posterior entropy and the matched confusion matrix."""
    if dataset.labels is None:
        raise ValueError("evaluation needs labels")
    k = int(dataset.labels.max()) + 1
    if model.z_card != k:
        raise ValueError(
            f"model has |Z|={model.z_card} but the dataset has {k} classes"
        )
    posterior = model.posterior(dataset.matrices())
    pred = posterior.assignments()
    matching = match_labels(pred, dataset.labels, k)
    matched_pred = matching.permutation[pred]
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (dataset.labels, matched_pred), 1)
    return {
        "accuracy": float(np.mean(matched_pred == dataset.labels)),
        "entropy": conditional_entropy(posterior),
        "matching": matching,
        "confusion": confusion,
    }


# --- sweeps ------------------------------------------------------------------------


def detect_knee(z_values, losses, slope_ratio: float = 0.25) -> int | None:
    """Locate the sharp loss transition: the interior point maximizing the
    discrete second difference, accepted only if the drop before it is steep
    (negative) and the slope after it is below slope_ratio times the one
    before. Returns the cluster count at the knee, or None."""
    z = list(z_values)
    loss = np.asarray(losses, dtype=float)
    if len(z) != loss.size:
        raise ValueError("z_values and losses must align")
    if len(z) < 3:
        raise ValueError("need at least three cluster counts")
    if any(b <= a for a, b in zip(z, z[1:])):
        raise ValueError("z_values must be strictly increasing")
    second = loss[2:] - 2.0 * loss[1:-1] + loss[:-2]
    j = int(second.argmax()) + 1
    pre = loss[j] - loss[j - 1]
    post = loss[j + 1] - loss[j]
    if pre >= 0.0 or abs(post) >= slope_ratio * abs(pre):
        return None
    return z[j]


def detect_clusters(
    dataset: MultiViewDataset,
    z_values,
    config: TrainConfig,
    workers: int = 1,
) -> ClusterSweepResult:
    """Train reduced-trial unsupervised models across cluster counts and find
    the loss-transition knee."""
    z_values = [int(z) for z in z_values]
    if len(z_values) < 3:
        raise ValueError("cluster-count range must cover at least three values")
    losses = []
    for z in z_values:
        cfg = replace(config, z_card=z, regime="unsupervised")
        reports, selected = run_trials(cfg, dataset, workers=workers)
        losses.append(reports[selected].final_loss)
    return ClusterSweepResult(
        z_values=z_values,
        losses=losses,
        detected_k=detect_knee(z_values, losses),
    )


def alpha_vector(alpha_first: float, n_views: int) -> tuple[float, ...]:
    """Weight vector giving `alpha_first` to view 0 and splitting the rest."""
    if not 0.0 < alpha_first < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if n_views < 2:
        raise ValueError("weighting needs at least two views")
    rest = (1.0 - alpha_first) / (n_views - 1)
    return (alpha_first,) + (rest,) * (n_views - 1)


def sweep_alpha(
    dataset: MultiViewDataset,
    test_dataset: MultiViewDataset,
    config: TrainConfig,
    grid,
    workers: int = 1,
):
    """Full train+select+evaluate per grid point; returns (rows, best_alpha)
    with one (alpha, matched accuracy) row per grid value."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("alpha grid must be nonempty")
    rows = []
    for a in grid:
        cfg = replace(config, alphas=alpha_vector(a, len(dataset.views)))
        reports, selected = run_trials(
            cfg, dataset, test_dataset=test_dataset, workers=workers
        )
        model = model_from_report(cfg, dataset, reports[selected])
        rows.append((a, evaluate_model(model, test_dataset)["accuracy"]))
    best = rows[int(np.argmax([acc for _, acc in rows]))][0]
    return rows, best


METRICS_HEADER = "experiment,pnr_db,regime,alpha_traffic,accuracy,loss"


def write_metrics_csv(path, rows: list[dict]) -> None:
    """One row per (experiment, PNR, regime, alpha, accuracy, loss)."""
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(
                f"{row['experiment']},{row['pnr_db']!r},{row['regime']},"
                f"{row['alpha_traffic']!r},{row['accuracy']!r},{row['loss']!r}\n"
            )
