"""The multi-view clustering model: probing stack, per-view likelihood heads,
common-information encoder, and the unsupervised/supervised/semi-supervised
losses with exact reverse-mode gradients.

Cluster identities are probed with one-hot vectors: a shared dense stack maps
each probe to a hidden vector, and one linear projection per view maps the
hidden vector to that view's likelihood-head parameters. The posterior over
clusters is a (weighted) softmax of the summed per-view log-likelihoods, with
the marginal over clusters fixed uniform.

Head likelihood tables are evaluated through per-view sufficient statistics,
so a minibatch step costs a few small matrix products per view.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from . import nn
from .expfamily import (
    LOGVAR_MAX,
    LOGVAR_MIN,
    BernoulliParams,
    GaussianDiagParams,
    GaussianFullParams,
    sigmoid,
    softplus,
)

_LOG_TWO_PI = float(np.log(2.0 * np.pi))
_EXP_ETA_FLOOR = 1e-8  # keeps the exponential head's natural param strictly negative

FAMILIES = ("gaussian-diag", "gaussian-full", "bernoulli", "poisson", "exponential")


@dataclass
class ViewSpec:
    """Distribution family, feature length and relative weight of one view."""

    family: str
    dim: int
    weight: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; known: {FAMILIES}")
        if self.dim < 1:
            raise ValueError("view dim must be positive")
        if not self.weight > 0:
            raise ValueError("view weight must be positive")


def head_param_size(spec: ViewSpec) -> int:
    """Raw output length of the head projection for one cluster."""
    d = spec.dim
    if spec.family == "gaussian-diag":
        return 2 * d
    if spec.family == "gaussian-full":
        return d + d * (d + 1) // 2
    return d  # bernoulli / poisson / exponential: one natural parameter per coordinate


# --- per-family table kernels ------------------------------------------------
#
# Each kernel evaluates the (batch x |Z|) log-likelihood table from the raw
# head outputs and backpropagates a table gradient to them. `stats` holds the
# per-sample arrays precomputed once per dataset.


def _bind_view(spec: ViewSpec, data: np.ndarray) -> dict:
    x = np.asarray(data, dtype=float)
    if x.ndim != 2 or x.shape[1] != spec.dim:
        raise ValueError(
            f"view data must be (n, {spec.dim}) for family {spec.family}, got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("view data contains non-finite entries")
    if spec.family == "bernoulli" and not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("bernoulli view data must be 0/1 valued")
    if spec.family in ("poisson", "exponential") and np.any(x < 0):
        raise ValueError(f"{spec.family} view data must be nonnegative")
    stats: dict = {"x": x}
    if spec.family == "gaussian-diag":
        stats["x2"] = x**2
    elif spec.family == "poisson":
        stats["base"] = -gammaln(x + 1.0).sum(axis=1)
    return stats


def _subset_stats(stats: dict, idx: np.ndarray) -> dict:
    return {k: v[idx] for k, v in stats.items()}


def _diag_transform(raw: np.ndarray, d: int):
    mean = raw[:, :d]
    nu = np.clip(raw[:, d:], LOGVAR_MIN, LOGVAR_MAX)
    inv_var = np.exp(-nu)
    return mean, nu, inv_var


def _table_gaussian_diag(raw, stats, d):
    mean, nu, inv_var = _diag_transform(raw, d)
    a = -0.5 * inv_var
    b = mean * inv_var
    c = -0.5 * (nu.sum(axis=1) + (mean * b).sum(axis=1) + d * _LOG_TWO_PI)
    return stats["x2"] @ a.T + stats["x"] @ b.T + c


def _back_gaussian_diag(raw, stats, dtab, d):
    mean, nu, inv_var = _diag_transform(raw, d)
    da = dtab.T @ stats["x2"]
    db = dtab.T @ stats["x"]
    r = dtab.sum(axis=0)[:, None]
    dmean = inv_var * (db - r * mean)
    dnu = 0.5 * inv_var * da - mean * inv_var * db - 0.5 * r * (1.0 - mean**2 * inv_var)
    # No gradient where the clamp is active.
    dnu *= (raw[:, d:] > LOGVAR_MIN) & (raw[:, d:] < LOGVAR_MAX)
    return np.concatenate([dmean, dnu], axis=1)


def _full_factor(raw_z, d, tril_idx):
    g = np.zeros((d, d))
    g[tril_idx] = raw_z[d:]
    diag_raw = np.diag(g).copy()
    np.fill_diagonal(g, softplus(diag_raw))
    return g, diag_raw


def _table_gaussian_full(raw, stats, d):
    x = stats["x"]
    z_card = raw.shape[0]
    tril_idx = np.tril_indices(d)
    out = np.empty((x.shape[0], z_card))
    for z in range(z_card):
        g, _ = _full_factor(raw[z], d, tril_idx)
        u = solve_triangular(g, (x - raw[z, :d]).T, lower=True)
        log_det = 2.0 * np.sum(np.log(np.diag(g)))
        out[:, z] = -0.5 * (d * _LOG_TWO_PI + log_det) - 0.5 * (u**2).sum(axis=0)
    return out


def _back_gaussian_full(raw, stats, dtab, d):
    x = stats["x"]
    z_card = raw.shape[0]
    tril_idx = np.tril_indices(d)
    out = np.zeros_like(raw)
    for z in range(z_card):
        g, diag_raw = _full_factor(raw[z], d, tril_idx)
        u = solve_triangular(g, (x - raw[z, :d]).T, lower=True)  # (d, n)
        w = solve_triangular(g.T, u, lower=False)
        dz = dtab[:, z]
        out[z, :d] = w @ dz
        dg = (w * dz) @ u.T
        dg -= dz.sum() * np.diag(1.0 / np.diag(g))
        dg[np.diag_indices(d)] *= sigmoid(diag_raw)
        out[z, d:] = dg[tril_idx]
    return out


def _table_bernoulli(raw, stats):
    return stats["x"] @ raw.T - softplus(raw).sum(axis=1)


def _back_bernoulli(raw, stats, dtab):
    return dtab.T @ stats["x"] - dtab.sum(axis=0)[:, None] * sigmoid(raw)


def _table_poisson(raw, stats):
    return stats["x"] @ raw.T - np.exp(raw).sum(axis=1) + stats["base"][:, None]


def _back_poisson(raw, stats, dtab):
    return dtab.T @ stats["x"] - dtab.sum(axis=0)[:, None] * np.exp(raw)


def _table_exponential(raw, stats):
    eta = -(softplus(raw) + _EXP_ETA_FLOOR)
    return stats["x"] @ eta.T + np.log(-eta).sum(axis=1)


def _back_exponential(raw, stats, dtab):
    eta = -(softplus(raw) + _EXP_ETA_FLOOR)
    deta = dtab.T @ stats["x"] + dtab.sum(axis=0)[:, None] / eta
    return deta * (-sigmoid(raw))


def _view_table(spec: ViewSpec, raw, stats):
    if spec.family == "gaussian-diag":
        return _table_gaussian_diag(raw, stats, spec.dim)
    if spec.family == "gaussian-full":
        return _table_gaussian_full(raw, stats, spec.dim)
    if spec.family == "bernoulli":
        return _table_bernoulli(raw, stats)
    if spec.family == "poisson":
        return _table_poisson(raw, stats)
    return _table_exponential(raw, stats)


def _view_backward(spec: ViewSpec, raw, stats, dtab):
    if spec.family == "gaussian-diag":
        return _back_gaussian_diag(raw, stats, dtab, spec.dim)
    if spec.family == "gaussian-full":
        return _back_gaussian_full(raw, stats, dtab, spec.dim)
    if spec.family == "bernoulli":
        return _back_bernoulli(raw, stats, dtab)
    if spec.family == "poisson":
        return _back_poisson(raw, stats, dtab)
    return _back_exponential(raw, stats, dtab)


# --- typed containers ---------------------------------------------------------


@dataclass
class LoglikTable:
    """values[n, i, z] = log-likelihood of sample n's view i under cluster z."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ValueError("log-likelihood table must be (n, views, z)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("log-likelihood table contains non-finite entries")


@dataclass
class Posterior:
    """Row-stochastic cluster responsibilities, one row per sample."""

    responsibilities: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.responsibilities, dtype=float)
        if q.ndim != 2:
            raise ValueError("responsibilities must be a 2-D matrix")
        if np.any(q < 0):
            raise ValueError("responsibilities must be nonnegative")
        if np.max(np.abs(q.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("responsibility rows must sum to 1")
        self.responsibilities = q

    @property
    def n(self) -> int:
        return self.responsibilities.shape[0]

    def assignments(self) -> np.ndarray:
        """Hard cluster per row; ties resolve to the lowest index."""
        return np.argmax(self.responsibilities, axis=1)


class BoundBatch:
    """A multi-view batch with per-view sufficient statistics precomputed."""

    def __init__(self, specs: list[ViewSpec], views: list[np.ndarray]):
        if len(views) != len(specs):
            raise ValueError(f"expected {len(specs)} views, got {len(views)}")
        self.specs = specs
        self.stats = [_bind_view(spec, v) for spec, v in zip(specs, views)]
        sizes = {s["x"].shape[0] for s in self.stats}
        if len(sizes) > 1:
            raise ValueError("views disagree on the number of samples")
        self.n = self.stats[0]["x"].shape[0] if self.stats else 0
        if self.n == 0:
            raise ValueError("batch must contain at least one sample")

    def subset(self, idx: np.ndarray) -> "BoundBatch":
        out = object.__new__(BoundBatch)
        out.specs = self.specs
        out.stats = [_subset_stats(s, idx) for s in self.stats]
        out.n = len(idx)
        return out


# --- the model ---------------------------------------------------------------


class WvaeModel:
    """Shared probing stack plus one likelihood head per view.

    Parameters live in a single flat float64 vector; layer objects are views
    into it. The cluster prior is fixed uniform over `z_card` probes.
    """

    def __init__(
        self,
        z_card: int,
        view_specs: list[ViewSpec],
        widths: tuple[int, ...] = (64, 128),
        slope: float = nn.DEFAULT_LEAKY_SLOPE,
        seed: int | None = 0,
    ):
        if z_card < 1:
            raise ValueError("z_card must be at least 1")
        if not view_specs:
            raise ValueError("at least one view is required")
        if not widths:
            raise ValueError("the probing stack needs at least one layer")
        self.z_card = int(z_card)
        self.view_specs = list(view_specs)
        self.widths = tuple(int(w) for w in widths)
        self.slope = float(slope)

        total = sum(s.weight for s in self.view_specs)
        self.alphas = np.array([s.weight / total for s in self.view_specs])

        shapes: list[tuple[str, tuple[int, ...]]] = []
        fan_in = self.z_card
        for li, width in enumerate(self.widths):
            shapes.append((f"probe.{li}.w", (width, fan_in)))
            shapes.append((f"probe.{li}.b", (width,)))
            fan_in = width
        for vi, spec in enumerate(self.view_specs):
            p = head_param_size(spec)
            shapes.append((f"head.{vi}.w", (p, fan_in)))
            shapes.append((f"head.{vi}.b", (p,)))
        self.layout = nn.ParamLayout(shapes)
        self.params = self.layout.zeros()
        self._eye = np.eye(self.z_card)
        # Layers hold views into the flat parameter vector, so they are built
        # once; the vector's buffer must be written in place, never rebound.
        self._stack = nn.Stack(
            [
                nn.DenseLayer(
                    self.layout.view(self.params, f"probe.{li}.w"),
                    self.layout.view(self.params, f"probe.{li}.b"),
                )
                for li in range(len(self.widths))
            ],
            self.slope,
        )
        self._heads = [
            nn.DenseLayer(
                self.layout.view(self.params, f"head.{vi}.w"),
                self.layout.view(self.params, f"head.{vi}.b"),
            )
            for vi in range(len(self.view_specs))
        ]
        if seed is not None:
            self.init_params(seed)

    # -- parameters ----------------------------------------------------------

    @property
    def n_views(self) -> int:
        return len(self.view_specs)

    @property
    def param_count(self) -> int:
        return self.layout.size

    def per_view_head_size(self, view_index: int) -> int:
        """Parameter count of one head projection (weights plus bias)."""
        p = head_param_size(self.view_specs[view_index])
        return p * self.widths[-1] + p

    def init_params(self, seed) -> None:
        """Glorot-uniform weights, zero biases, drawn in declaration order.

        `seed` may be an int or a SeedSequence.
        """
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        rng = np.random.default_rng(seed)
        for name in self.layout.names:
            view = self.layout.view(self.params, name)
            if name.endswith(".w"):
                view[...] = nn.glorot_uniform(view.shape, rng)
            else:
                view[...] = 0.0

    def _probe_stack(self) -> nn.Stack:
        return self._stack

    def _head_layer(self, vi: int) -> nn.DenseLayer:
        return self._heads[vi]

    # -- forward -------------------------------------------------------------

    def bind(self, views: list[np.ndarray]) -> BoundBatch:
        """Validate raw view matrices against the specs and precompute statistics."""
        return BoundBatch(self.view_specs, views)

    def _forward_heads(self):
        """Probe every cluster; returns (probe tape, hidden (|Z|, h), raw head outputs)."""
        stack = self._probe_stack()
        hidden, tape = stack.forward(self._eye)
        raws = [self._head_layer(vi).forward(hidden) for vi in range(self.n_views)]
        return stack, tape, hidden, raws

    def head_raw(self) -> list[np.ndarray]:
        """Raw head-parameter matrix (|Z|, p_i) per view for the current params."""
        return self._forward_heads()[3]

    def head_params(self, z: int):
        """Typed likelihood-head parameters of every view for cluster z."""
        if not 0 <= z < self.z_card:
            raise ValueError(f"cluster index {z} out of range [0, {self.z_card})")
        raws = self.head_raw()
        out = []
        for spec, raw in zip(self.view_specs, raws):
            out.append(_unpack_head(spec, raw[z]))
        return out

    def tables(self, bound: BoundBatch) -> list[np.ndarray]:
        """Per-view (n, |Z|) log-likelihood tables for a bound batch."""
        raws = self.head_raw()
        return [
            _view_table(spec, raw, stats)
            for spec, raw, stats in zip(self.view_specs, raws, bound.stats)
        ]

    def loglik_table(self, views: list[np.ndarray]) -> LoglikTable:
        bound = self.bind(views)
        return LoglikTable(np.stack(self.tables(bound), axis=1))

    def posterior(self, views: list[np.ndarray], alpha: np.ndarray | None = None) -> Posterior:
        """Cluster responsibilities for raw view matrices under the current params."""
        table = self.loglik_table(views)
        return common_encoder(table, self.alphas if alpha is None else alpha)

    # -- checkpointing ---------------------------------------------------------

    def save(self, out_dir) -> None:
        """Write the parameter blob plus a structured-text manifest."""
        os.makedirs(out_dir, exist_ok=True)
        arrays = [self.layout.view(self.params, name) for name in self.layout.names]
        nn.save_blob(os.path.join(out_dir, "params.bin"), self.z_card, self.n_views, arrays)
        manifest = {
            "z_card": self.z_card,
            "widths": list(self.widths),
            "slope": self.slope,
            "views": [
                {"family": s.family, "dim": s.dim, "weight": float(a)}
                for s, a in zip(self.view_specs, self.alphas)
            ],
        }
        with open(os.path.join(out_dir, "model.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, in_dir) -> "WvaeModel":
        with open(os.path.join(in_dir, "model.json")) as fh:
            manifest = json.load(fh)
        specs = [
            ViewSpec(v["family"], v["dim"], v["weight"]) for v in manifest["views"]
        ]
        model = cls(
            manifest["z_card"],
            specs,
            widths=tuple(manifest["widths"]),
            slope=manifest["slope"],
            seed=None,
        )
        z_card, n_views, arrays = nn.load_blob(os.path.join(in_dir, "params.bin"))
        if z_card != model.z_card or n_views != model.n_views:
            raise ValueError(
                f"checkpoint blob (|Z|={z_card}, views={n_views}) does not match "
                f"manifest (|Z|={model.z_card}, views={model.n_views})"
            )
        if len(arrays) != len(model.layout.names):
            raise ValueError("checkpoint array count does not match the layout")
        for name, arr in zip(model.layout.names, arrays):
            view = model.layout.view(model.params, name)
            if view.shape != arr.shape:
                raise ValueError(f"checkpoint array {name} has shape {arr.shape}")
            view[...] = arr
        return model


def _unpack_head(spec: ViewSpec, raw_z: np.ndarray):
    d = spec.dim
    if spec.family == "gaussian-diag":
        return GaussianDiagParams(mean=raw_z[:d], logvar=raw_z[d:])
    if spec.family == "gaussian-full":
        factor = np.zeros((d, d))
        factor[np.tril_indices(d)] = raw_z[d:]
        return GaussianFullParams(mean=raw_z[:d], factor_raw=factor)
    if spec.family == "bernoulli":
        return BernoulliParams(logits=raw_z)
    if spec.family == "poisson":
        return raw_z.copy()
    return -(softplus(raw_z) + _EXP_ETA_FLOOR)


# --- encoders and entropy ------------------------------------------------------


def _check_alpha(alpha, n_views: int) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if a.shape != (n_views,):
        raise ValueError(f"alpha must have length {n_views}")
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError("alpha must be nonnegative and sum to 1")
    return a


def weighted_logits(table: LoglikTable, alpha) -> np.ndarray:
    """Softmax input: the view count times the alpha-weighted log-likelihood sum."""
    values = table.values
    a = _check_alpha(alpha, values.shape[1])
    v = values.shape[1]
    return v * np.einsum("nvz,v->nz", values, a)


def common_encoder(table: LoglikTable, alpha) -> Posterior:
    """Weighted-softmax posterior; with uniform alpha this is the plain softmax
    of the summed per-view log-likelihoods."""
    return Posterior(nn.stable_softmax(weighted_logits(table, alpha)))


def marginal_encoder(table: LoglikTable, prior) -> Posterior:
    """Posterior by direct marginalization against an explicit cluster prior."""
    values = table.values
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (values.shape[2],):
        raise ValueError(f"prior must have length {values.shape[2]}")
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
        raise ValueError("prior must be a probability vector")
    with np.errstate(divide="ignore"):
        logits = values.sum(axis=1) + np.log(prior)
    if np.any(np.all(np.isneginf(logits), axis=1)):
        raise ValueError("zero normalizer: all clusters have -inf log-probability")
    return Posterior(nn.stable_softmax(logits))


def conditional_entropy(posterior: Posterior) -> float:
    """Batch-mean Shannon entropy of the responsibility rows (0 log 0 := 0)."""
    q = posterior.responsibilities
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0.0, q * np.log(q), 0.0)
    return float(-terms.sum(axis=1).mean())


# --- losses --------------------------------------------------------------------


def _aggregate(model: WvaeModel, tables: list[np.ndarray], alpha) -> np.ndarray:
    a = _check_alpha(alpha, model.n_views)
    v = model.n_views
    s = np.zeros_like(tables[0])
    for weight, tab in zip(a, tables):
        if weight != 0.0:
            s += (v * weight) * tab
    return s


def _log_softmax(s: np.ndarray):
    top = s.max(axis=1, keepdims=True)
    lse = np.log(np.exp(s - top).sum(axis=1, keepdims=True)) + top
    logq = s - lse
    return logq, np.exp(logq)


def _unsup_rows(s, logq, q):
    # Per-sample negative reward: -(entropy + expected weighted log-likelihood).
    return -((q * (s - logq)).sum(axis=1))


def _sup_rows(s, logq, labels):
    rows = np.arange(s.shape[0])
    return -logq[rows, labels] - s[rows, labels]


def _check_labels(labels, n: int, z_card: int, mask=None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},)")
    relevant = labels if mask is None else labels[mask]
    if relevant.size and (relevant.min() < 0 or relevant.max() >= z_card):
        raise ValueError(f"labels must lie in [0, {z_card})")
    return labels.astype(int)


def _as_bound(model: WvaeModel, batch) -> BoundBatch:
    return batch if isinstance(batch, BoundBatch) else model.bind(batch)


def unsupervised_loss(model: WvaeModel, batch, alpha=None) -> float:
    """Negative clustering reward: minus the mean posterior entropy minus the
    posterior-weighted per-view log-likelihoods."""
    bound = _as_bound(model, batch)
    alpha = model.alphas if alpha is None else alpha
    s = _aggregate(model, model.tables(bound), alpha)
    logq, q = _log_softmax(s)
    return float(_unsup_rows(s, logq, q).mean())


def supervised_loss(model: WvaeModel, batch, labels, alpha=None) -> float:
    """Cross-entropy to the one-hot labels minus the label-conditioned
    weighted log-likelihoods, averaged over the batch."""
    bound = _as_bound(model, batch)
    alpha = model.alphas if alpha is None else alpha
    labels = _check_labels(labels, bound.n, model.z_card)
    s = _aggregate(model, model.tables(bound), alpha)
    logq, _ = _log_softmax(s)
    return float(_sup_rows(s, logq, labels).mean())


def semisup_loss(model: WvaeModel, batch, labels, labeled_mask, alpha=None) -> float:
    """Mixed objective: labeled rows contribute the supervised terms (with the
    posterior substituted by the one-hot ground truth), unlabeled rows the
    unsupervised ones."""
    bound = _as_bound(model, batch)
    alpha = model.alphas if alpha is None else alpha
    mask = np.asarray(labeled_mask, dtype=bool)
    if mask.shape != (bound.n,):
        raise ValueError(f"labeled mask must have shape ({bound.n},)")
    labels = _check_labels(labels, bound.n, model.z_card, mask=mask)
    s = _aggregate(model, model.tables(bound), alpha)
    logq, q = _log_softmax(s)
    rows = _unsup_rows(s, logq, q)
    if mask.any():
        idx = np.flatnonzero(mask)
        rows = rows.copy()
        rows[idx] = -logq[idx, labels[idx]] - s[idx, labels[idx]]
    return float(rows.mean())


def loss_and_grad(
    model: WvaeModel,
    batch,
    regime: str,
    labels=None,
    labeled_mask=None,
    alpha=None,
    grad_out: np.ndarray | None = None,
):
    """Loss value and its gradient w.r.t. the flat parameter vector.

    The gradient of every regime's loss passes through the softmax posterior;
    for a batch row the upstream table gradient is q - 2*onehot(label) for
    supervised/labeled rows and -q for unsupervised ones, scaled by 1/n.
    """
    bound = _as_bound(model, batch)
    alpha = model.alphas if alpha is None else _check_alpha(alpha, model.n_views)
    stack, tape, hidden, raws = model._forward_heads()
    tables = [
        _view_table(spec, raw, stats)
        for spec, raw, stats in zip(model.view_specs, raws, bound.stats)
    ]
    v = model.n_views
    s = np.zeros_like(tables[0])
    for weight, tab in zip(alpha, tables):
        if weight != 0.0:
            s += (v * weight) * tab
    logq, q = _log_softmax(s)
    n = bound.n

    if regime == "unsupervised":
        loss = float(_unsup_rows(s, logq, q).mean())
        ds = -q / n
    elif regime == "supervised":
        labels = _check_labels(labels, n, model.z_card)
        loss = float(_sup_rows(s, logq, labels).mean())
        ds = q.copy()
        ds[np.arange(n), labels] -= 2.0
        ds /= n
    elif regime == "semisupervised":
        mask = np.asarray(labeled_mask, dtype=bool)
        labels = _check_labels(labels, n, model.z_card, mask=mask)
        rows = _unsup_rows(s, logq, q)
        ds = -q.copy()
        idx = np.flatnonzero(mask)
        if idx.size:
            rows = rows.copy()
            rows[idx] = -logq[idx, labels[idx]] - s[idx, labels[idx]]
            ds[idx] = q[idx]
            ds[idx, labels[idx]] -= 2.0
        loss = float(rows.mean())
        ds /= n
    else:
        raise ValueError(f"unknown regime {regime!r}")

    if grad_out is None:
        grad = model.layout.zeros()
    else:
        grad = grad_out
        grad[...] = 0.0
    d_hidden = np.zeros_like(hidden)
    for vi, (spec, raw, stats) in enumerate(zip(model.view_specs, raws, bound.stats)):
        weight = v * alpha[vi]
        if weight == 0.0:
            continue
        draw = _view_backward(spec, raw, stats, ds) * weight
        head = model._head_layer(vi)
        dh, dw, db = head.backward(hidden, draw)
        d_hidden += dh
        model.layout.view(grad, f"head.{vi}.w")[...] = dw
        model.layout.view(grad, f"head.{vi}.b")[...] = db
    _, layer_grads = stack.backward(tape, d_hidden)
    for li, (dw, db) in enumerate(layer_grads):
        model.layout.view(grad, f"probe.{li}.w")[...] = dw
        model.layout.view(grad, f"probe.{li}.b")[...] = db
    return loss, grad
