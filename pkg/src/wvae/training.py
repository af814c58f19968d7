"""Trial runner: epoch/minibatch loop with ADAM updates, multi-trial restarts
and model selection.

Every random choice is derived from the master seed: trial seeds come from
(master seed, trial index), the per-trial parameter init and the per-epoch
shuffles from the trial seed. Two runs with the same (config, dataset, seed)
therefore produce identical numbers, regardless of how many workers execute
the trials.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import ViewSpec, WvaeModel, loss_and_grad
from .nn import AdamState, adam_step
from .simdata import MultiViewDataset

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - soft dependency
    from contextlib import nullcontext

    def threadpool_limits(limits=None):
        return nullcontext()


REGIMES = ("unsupervised", "supervised", "semisupervised")

# SeedSequence stream tags.
_TAG_TRIAL = 101
_TAG_MASK = 102
_TAG_INIT = 0
_TAG_SHUFFLE = 1


@dataclass
class TrainConfig:
    """Knobs of one training run; `trials=None` resolves per regime."""

    regime: str = "unsupervised"
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    trials: int | None = None
    z_card: int = 10
    alphas: tuple[float, ...] | None = None
    label_fraction: float = 1.0
    seed: int = 0
    widths: tuple[int, ...] = (64, 128)
    leaky_slope: float = 0.01
    families: tuple[str, ...] | None = None  # None: use the dataset's tags

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if min(self.epochs, self.batch_size, self.z_card) < 1:
            raise ValueError("epochs, batch_size and z_card must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.trials is not None and self.trials < 1:
            raise ValueError("trials must be positive")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in [0, 1]")

    @property
    def resolved_trials(self) -> int:
        if self.trials is not None:
            return self.trials
        return 25 if self.regime == "supervised" else 40


@dataclass
class TrainReport:
    """Outcome of one trial: loss trajectory, final parameters and the
    selection metric (held-out accuracy when supervised, else final loss)."""

    trajectory: np.ndarray
    params: np.ndarray
    trial_seed: int
    metric: float
    trial_index: int = 0

    @property
    def final_loss(self) -> float:
        return float(self.trajectory[-1])


def trial_seed(master_seed: int, index: int) -> int:
    """Stable per-trial seed derived from the master seed and trial index."""
    return int(np.random.SeedSequence([master_seed, _TAG_TRIAL, index]).generate_state(1)[0])


def make_model(config: TrainConfig, dataset: MultiViewDataset) -> WvaeModel:
    """Build the model the config describes for this dataset's views."""
    families = config.families or tuple(dataset.families)
    if len(families) != len(dataset.views):
        raise ValueError("families override must name every view")
    if config.alphas is None:
        weights = [1.0] * len(families)
    else:
        if len(config.alphas) != len(families):
            raise ValueError("alphas must have one entry per view")
        weights = list(config.alphas)
    specs = [
        ViewSpec(fam, mat.shape[1], w)
        for fam, (_, mat), w in zip(families, dataset.views, weights)
    ]
    return WvaeModel(
        config.z_card, specs, widths=config.widths, slope=config.leaky_slope, seed=None
    )


def label_mask(dataset: MultiViewDataset, fraction: float, seed: int) -> np.ndarray:
    """Seeded stratified mask marking round(fraction * n_c) samples per class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if dataset.labels is None:
        raise ValueError("dataset has no labels to mask")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_MASK]))
    mask = np.zeros(dataset.n, dtype=bool)
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        n_pick = int(np.floor(fraction * idx.size + 0.5))
        mask[rng.choice(idx, size=n_pick, replace=False)] = True
    return mask


def _check_labels_available(config: TrainConfig, dataset: MultiViewDataset) -> None:
    if config.regime in ("supervised", "semisupervised") and dataset.labels is None:
        raise ValueError(f"{config.regime} training requires a labeled dataset")


def run_trial(
    config: TrainConfig,
    dataset: MultiViewDataset,
    seed: int,
    test_dataset: MultiViewDataset | None = None,
    labeled_mask: np.ndarray | None = None,
    trial_index: int = 0,
) -> TrainReport:
    """Train one model: epochs x ceil(n/batch) seeded-shuffle minibatch steps.

    The last partial batch is kept; the recorded per-epoch loss is the
    per-sample mean over the epoch.
    """
    _check_labels_available(config, dataset)
    if config.regime == "supervised" and test_dataset is None:
        raise ValueError("supervised selection needs a held-out dataset")
    model = make_model(config, dataset)
    model.init_params(np.random.SeedSequence([seed, _TAG_INIT]))
    bound = model.bind(dataset.matrices())
    labels = dataset.labels
    if config.regime == "semisupervised" and labeled_mask is None:
        labeled_mask = label_mask(dataset, config.label_fraction, config.seed)

    state = AdamState.for_params(model.params, learning_rate=config.learning_rate)
    grad_buf = model.layout.zeros()
    n = bound.n
    bs = config.batch_size
    trajectory = np.empty(config.epochs)
    with threadpool_limits(limits=1):
        for epoch in range(config.epochs):
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, _TAG_SHUFFLE, epoch])
            )
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                idx = order[start : start + bs]
                batch = bound.subset(idx)
                kw = {}
                if config.regime == "supervised":
                    kw["labels"] = labels[idx]
                elif config.regime == "semisupervised":
                    kw["labels"] = labels[idx]
                    kw["labeled_mask"] = labeled_mask[idx]
                loss, grad = loss_and_grad(
                    model, batch, config.regime, grad_out=grad_buf, **kw
                )
                adam_step(state, model.params, grad)
                total += loss * idx.size
            trajectory[epoch] = total / n

        if config.regime == "supervised":
            metric = _heldout_accuracy(model, test_dataset)
        else:
            metric = float(trajectory[-1])
    return TrainReport(
        trajectory=trajectory,
        params=model.params.copy(),
        trial_seed=seed,
        metric=metric,
        trial_index=trial_index,
    )


def _heldout_accuracy(model: WvaeModel, dataset: MultiViewDataset) -> float:
    """Plain argmax accuracy; supervised heads are already label-aligned."""
    if dataset.labels is None:
        raise ValueError("held-out accuracy needs labels")
    pred = model.posterior(dataset.matrices()).assignments()
    return float(np.mean(pred == dataset.labels))


_WORKER: dict = {}


def _init_worker(config, dataset, test_dataset, mask):
    _WORKER.update(
        config=config, dataset=dataset, test_dataset=test_dataset, mask=mask
    )


def _run_indexed(args):
    index, seed = args
    report = run_trial(
        _WORKER["config"],
        _WORKER["dataset"],
        seed,
        test_dataset=_WORKER["test_dataset"],
        labeled_mask=_WORKER["mask"],
        trial_index=index,
    )
    return index, report


def run_trials(
    config: TrainConfig,
    dataset: MultiViewDataset,
    test_dataset: MultiViewDataset | None = None,
    workers: int = 1,
):
    """Run the configured number of independently seeded trials and select one.

    Supervised runs keep the trial with the highest held-out accuracy;
    unsupervised and semi-supervised runs keep the lowest final training loss.
    Returns (reports, selected_index).
    """
    _check_labels_available(config, dataset)
    n_trials = config.resolved_trials
    seeds = [(i, trial_seed(config.seed, i)) for i in range(n_trials)]
    mask = None
    if config.regime == "semisupervised":
        mask = label_mask(dataset, config.label_fraction, config.seed)

    reports: list[TrainReport | None] = [None] * n_trials
    if workers > 1 and n_trials > 1:
        with ProcessPoolExecutor(
            max_workers=min(workers, n_trials),
            initializer=_init_worker,
            initargs=(config, dataset, test_dataset, mask),
        ) as pool:
            for index, report in pool.map(_run_indexed, seeds):
                reports[index] = report
    else:
        for index, seed in seeds:
            reports[index] = run_trial(
                config,
                dataset,
                seed,
                test_dataset=test_dataset,
                labeled_mask=mask,
                trial_index=index,
            )
    selected = select_report(config.regime, reports)
    return reports, selected


def select_report(regime: str, reports: list[TrainReport]) -> int:
    """Index of the kept trial; ties resolve to the lowest trial index."""
    metrics = np.array([r.metric for r in reports])
    return int(np.argmax(metrics) if regime == "supervised" else np.argmin(metrics))


def model_from_report(
    config: TrainConfig, dataset: MultiViewDataset, report: TrainReport
) -> WvaeModel:
    """Rebuild the trained model a report refers to."""
    model = make_model(config, dataset)
    if model.params.shape != report.params.shape:
        raise ValueError("report parameters do not match the config's model")
    model.params[...] = report.params
    return model


def write_trajectory_csv(path, report: TrainReport) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(report.trajectory):
            fh.write(f"{epoch},{loss!r}\n")


def write_selection_json(path, config: TrainConfig, reports, selected: int) -> None:
    import json

    payload = {
        "regime": config.regime,
        "trials": len(reports),
        "selected_index": selected,
        "selected_metric": reports[selected].metric,
        "selected_final_loss": reports[selected].final_loss,
        "per_trial": [
            {
                "index": r.trial_index,
                "seed": r.trial_seed,
                "metric": r.metric,
                "final_loss": r.final_loss,
            }
            for r in reports
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
