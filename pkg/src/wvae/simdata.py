"""Synthetic two-layer fingerprint dataset: simulated CSI via least-squares
channel estimation over a perturbed channel, plus a class-conditioned binary
traffic-state generator.

Every random quantity is derived from a master seed through SeedSequence
spawning keyed by (purpose, class id, sample index), so generation is
deterministic, order-independent and parallelizable per sample. Complex
Gaussian draws use one N(0, var) draw per real and per imaginary component;
all `*_var` parameters below are per-component variances.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

# SeedSequence stream tags.
_TAG_CHANNEL = 1
_TAG_PROFILE = 2
_TAG_PILOT = 3
_TAG_SAMPLE = 4

TRAIN_SPLIT = 0
TEST_SPLIT = 1

_QPSK_PHASES = np.pi / 4.0 + np.pi / 2.0 * np.arange(4)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


@dataclass
class CsiConfig:
    """Channel-simulation knobs; `pnr` is perturb_var / noise_var."""

    pilot_snr_db: float = 10.0
    noise_var: float = 16.0
    perturb_var: float = 1.0
    m: int = 72

    def __post_init__(self):
        if self.noise_var <= 0:
            raise ValueError("noise_var must be positive")
        if self.perturb_var < 0:
            raise ValueError("perturb_var must be nonnegative")
        if self.m < 1:
            raise ValueError("m must be at least 1")

    @property
    def pnr(self) -> float:
        return self.perturb_var / self.noise_var

    @classmethod
    def from_pnr_db(cls, pnr_db: float, noise_var: float = 16.0, **kw) -> "CsiConfig":
        return cls(noise_var=noise_var, perturb_var=pnr_from_db(pnr_db) * noise_var, **kw)


@dataclass
class ChannelClass:
    """Frozen per-class mean channel."""

    mean_channel: np.ndarray
    class_id: int

    def __post_init__(self):
        h = np.asarray(self.mean_channel, dtype=complex)
        if h.ndim != 1:
            raise ValueError("mean_channel must be a complex vector")
        self.mean_channel = h


@dataclass
class TrafficClassProfile:
    """Per-position activity rates of one class's traffic states."""

    rate_profile: np.ndarray
    class_id: int

    def __post_init__(self):
        p = np.asarray(self.rate_profile, dtype=float)
        if p.ndim != 1:
            raise ValueError("rate_profile must be a vector")
        if np.any(p < 0.02) or np.any(p > 0.98):
            raise ValueError("rates must stay in [0.02, 0.98]")
        self.rate_profile = p


@dataclass
class MultiViewDataset:
    """Aligned per-view matrices with optional labels and a seed record."""

    views: list[tuple[str, np.ndarray]]
    labels: np.ndarray | None
    split: str
    seed_info: dict

    def __post_init__(self):
        sizes = {mat.shape[0] for _, mat in self.views}
        if len(sizes) != 1:
            raise ValueError("views disagree on the number of samples")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.n,):
                raise ValueError("labels must align with the views")

    @property
    def n(self) -> int:
        return self.views[0][1].shape[0]

    @property
    def families(self) -> list[str]:
        return [fam for fam, _ in self.views]

    def matrices(self) -> list[np.ndarray]:
        return [mat for _, mat in self.views]


def pnr_from_db(db: float) -> float:
    """Decibel value to power ratio."""
    return float(10.0 ** (db / 10.0))


def pnr_to_db(ratio: float) -> float:
    """Power ratio to decibels; the ratio must be positive."""
    if ratio <= 0:
        raise ValueError("power ratio must be positive")
    return float(10.0 * np.log10(ratio))


def gen_class_channel(seed, m: int) -> np.ndarray:
    """Draw a class mean channel: m complex taps with standard-normal parts."""
    if m < 1:
        raise ValueError("m must be at least 1")
    draws = _rng(seed).standard_normal((m, 2))
    return draws[:, 0] + 1j * draws[:, 1]


def perturb_channel(h, perturb_var: float, seed) -> np.ndarray:
    """Per-draw channel h' = h + eps with N(0, perturb_var) real/imag parts."""
    if perturb_var < 0:
        raise ValueError("perturb_var must be nonnegative")
    h = np.asarray(h, dtype=complex)
    if perturb_var == 0.0:
        return h.copy()
    eps = np.sqrt(perturb_var) * _rng(seed).standard_normal((h.shape[0], 2))
    return h + eps[:, 0] + 1j * eps[:, 1]


def ls_estimate(pilots, y, noise_cov=None) -> np.ndarray:
    """Weighted least-squares channel estimate from received pilot symbols.

    Solves the normal equations of the generalized LS problem by factorization
    (never an explicit inverse); `noise_cov=None` means identity weighting.
    """
    x = np.asarray(pilots, dtype=complex)
    y = np.asarray(y, dtype=complex)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError("pilot matrix must be square")
    if y.shape != (x.shape[0],):
        raise ValueError("received vector length must match the pilot matrix")
    if noise_cov is None:
        ci_x, ci_y = x, y
    else:
        c = np.asarray(noise_cov, dtype=complex)
        if c.shape != x.shape:
            raise ValueError("noise covariance must match the pilot matrix shape")
        lo = np.linalg.cholesky(c)
        ci_x = _cho_solve(lo, x)
        ci_y = _cho_solve(lo, y)
    a = x.conj().T @ ci_x
    b = x.conj().T @ ci_y
    try:
        out = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as err:
        raise ValueError(f"rank-deficient pilot matrix: {err}") from None
    if not np.all(np.isfinite(out.view(float))):
        raise ValueError("least-squares solve produced non-finite values")
    return out


def _cho_solve(lo, rhs):
    from scipy.linalg import solve_triangular

    tmp = solve_triangular(lo, rhs, lower=True)
    return solve_triangular(lo.conj().T, tmp, lower=False)


def gen_traffic(profile: TrafficClassProfile, seed) -> np.ndarray:
    """Independent Bernoulli activity states drawn from the class profile."""
    u = _rng(seed).random(profile.rate_profile.shape[0])
    return (u < profile.rate_profile).astype(float)


def make_channels(seed: int, k: int, m: int = 72) -> list[ChannelClass]:
    """One frozen mean channel per class."""
    return [
        ChannelClass(
            gen_class_channel(np.random.SeedSequence([seed, _TAG_CHANNEL, c]), m), c
        )
        for c in range(k)
    ]


def make_profiles(
    seed: int,
    k: int,
    length: int = 400,
    band_rate: float = 0.8,
    base_rate: float = 0.05,
    band_width: int | None = None,
) -> list[TrafficClassProfile]:
    """Class traffic profiles: a high-activity contiguous band on a low base rate.

    The k bands tile the sequence at disjoint slots; which slot each class
    occupies is a seeded permutation, so profiles are exchangeable across
    class ids.
    """
    if band_width is None:
        band_width = length // k
    if band_width < 1 or band_width > length // k:
        raise ValueError("band_width must be in [1, length // k]")
    slot_of = _rng(np.random.SeedSequence([seed, _TAG_PROFILE])).permutation(k)
    out = []
    for c in range(k):
        rates = np.full(length, base_rate)
        start = int(slot_of[c]) * (length // k)
        rates[start : start + band_width] = band_rate
        out.append(TrafficClassProfile(rates, c))
    return out


def make_pilots(seed: int, csi: CsiConfig) -> np.ndarray:
    """Diagonal pilot matrix of constant-modulus QPSK symbols.

    Per-symbol power is pilot_snr relative to a unit complex noise power, so
    the per-component estimation noise is noise_var / (2 * pilot_snr) and
    vanishes in the noiseless limit noise_var -> 0.
    """
    power = pnr_from_db(csi.pilot_snr_db) * 2.0
    phases = _rng(np.random.SeedSequence([seed, _TAG_PILOT])).choice(_QPSK_PHASES, size=csi.m)
    return np.diag(np.sqrt(power) * np.exp(1j * phases))


def _sample_csi(chan: ChannelClass, csi: CsiConfig, pilots, sample_ss) -> np.ndarray:
    perturb_ss, noise_ss = sample_ss.spawn(2)
    h_prime = perturb_channel(chan.mean_channel, csi.perturb_var, perturb_ss)
    w = np.sqrt(csi.noise_var) * _rng(noise_ss).standard_normal((csi.m, 2))
    y = pilots @ h_prime + w[:, 0] + 1j * w[:, 1]
    h_hat = ls_estimate(pilots, y)
    return np.concatenate([h_hat.real, h_hat.imag])


def _class_counts(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def _build_split(
    split_tag: int,
    split_name: str,
    n: int,
    channels: list[ChannelClass],
    profiles: list[TrafficClassProfile],
    csi: CsiConfig,
    pilots,
    seed: int,
) -> MultiViewDataset:
    k = len(channels)
    counts = _class_counts(n, k)
    traffic = np.empty((n, profiles[0].rate_profile.shape[0]))
    feats = np.empty((n, 2 * csi.m))
    labels = np.empty(n, dtype=np.int32)
    row = 0
    for chan, prof, count in zip(channels, profiles, counts):
        for j in range(count):
            ss = np.random.SeedSequence(
                [seed, _TAG_SAMPLE, split_tag, chan.class_id, j]
            )
            csi_ss, traffic_ss = ss.spawn(2)
            feats[row] = _sample_csi(chan, csi, pilots, csi_ss)
            traffic[row] = gen_traffic(prof, traffic_ss)
            labels[row] = chan.class_id
            row += 1
    return MultiViewDataset(
        views=[("bernoulli", traffic), ("gaussian-diag", feats)],
        labels=labels,
        split=split_name,
        seed_info={"seed": seed, "split_tag": split_tag},
    )


def assemble_dataset(
    k: int = 10,
    n_train: int = 2557,
    n_test: int = 638,
    csi: CsiConfig | None = None,
    seed: int = 0,
    channels: list[ChannelClass] | None = None,
    profiles: list[TrafficClassProfile] | None = None,
    traffic_length: int = 400,
    band_rate: float = 0.8,
    base_rate: float = 0.05,
    band_width: int | None = None,
):
    """Build the (train, test) dataset pair.

    View 1 holds binary traffic states, view 2 the channel estimate split into
    real and imaginary halves. Class counts are uniform within +-1 per split.
    """
    if n_train < k or n_test < k:
        raise ValueError("need at least one sample per class in each split")
    csi = csi if csi is not None else CsiConfig()
    if channels is None:
        channels = make_channels(seed, k, csi.m)
    if profiles is None:
        profiles = make_profiles(
            seed, k, traffic_length, band_rate, base_rate, band_width
        )
    if len(channels) != k or len(profiles) != k:
        raise ValueError("channels and profiles must have one entry per class")
    pilots = make_pilots(seed, csi)
    train = _build_split(
        TRAIN_SPLIT, "train", n_train, channels, profiles, csi, pilots, seed
    )
    test = _build_split(
        TEST_SPLIT, "test", n_test, channels, profiles, csi, pilots, seed
    )
    return train, test


# --- dataset files -------------------------------------------------------------


def _write_matrix(path, mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def _read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        n, d = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(8 * n * d), dtype="<f8").astype(float)
    return data.reshape(n, d)


def _write_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", labels.shape[0]))
        fh.write(labels.tobytes())


def _read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        return np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int32)


def save_dataset(
    out_dir,
    train: MultiViewDataset,
    test: MultiViewDataset,
    csi: CsiConfig,
    pilots: np.ndarray,
    extra: dict | None = None,
) -> None:
    """Write the manifest plus per-view binaries and labels for both splits."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format_version": 1,
        "k": int(train.labels.max()) + 1 if train.labels is not None else None,
        "splits": {
            "train": {"n": train.n, "seed_info": train.seed_info},
            "test": {"n": test.n, "seed_info": test.seed_info},
        },
        "views": [
            {"family": fam, "dim": int(mat.shape[1])} for fam, mat in train.views
        ],
        "csi": asdict(csi),
        "pilot_matrix": {
            "kind": "diagonal",
            "entries": [[float(v.real), float(v.imag)] for v in np.diag(pilots)],
        },
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split_name, ds in (("train", train), ("test", test)):
        for vi, (_, mat) in enumerate(ds.views):
            _write_matrix(os.path.join(out_dir, f"{split_name}_view{vi}.bin"), mat)
        if ds.labels is not None:
            _write_labels(os.path.join(out_dir, f"{split_name}_labels.bin"), ds.labels)


def load_dataset(in_dir):
    """Read a dataset directory; returns (train, test, manifest)."""
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for split_name in ("train", "test"):
        views = []
        for vi, spec in enumerate(manifest["views"]):
            mat = _read_matrix(os.path.join(in_dir, f"{split_name}_view{vi}.bin"))
            if mat.shape[1] != spec["dim"]:
                raise ValueError(
                    f"{split_name} view {vi} has dim {mat.shape[1]}, "
                    f"manifest says {spec['dim']}"
                )
            views.append((spec["family"], mat))
        label_path = os.path.join(in_dir, f"{split_name}_labels.bin")
        labels = _read_labels(label_path) if os.path.exists(label_path) else None
        out.append(
            MultiViewDataset(
                views=views,
                labels=labels,
                split=split_name,
                seed_info=manifest["splits"][split_name]["seed_info"],
            )
        )
    return out[0], out[1], manifest
