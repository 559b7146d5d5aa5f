"""Localiser variants: supervised nets, autoencoders, channel charts, the
TAoA-trained upper bound, and the classical peak-picking baseline.

Ten configurations are constructible; everything else is rejected.  Chart
variants canonicalise raw CSI/PER inputs to their reduced feature form.
Feature standardisation statistics and the chart normalisation exponent
are captured from the training dataset at fit time and reused verbatim at
prediction time, so shifted-scene evaluation never peeks at test data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .channel_sim import angle_bin_to_direction_cosine, csi_to_periodogram
from .errors import (
    ConfigurationError,
    DomainError,
    EstimationError,
    ShapeError,
)
from .geometry import (
    SPEED_OF_LIGHT,
    MleConfig,
    TaoaTriple,
    joint_mle_estimate,
)
from . import nn_core
from .nn_core import Mlp, Tensor, forward, mse_loss, recon_loss, triplet_loss

_INPUTS = ("CSI", "PER", "TAoA", "ReducedCsi", "ReducedPer")
_OUTPUTS = ("Position", "TAoA", "Latent", "Chart")
_FAMILIES = ("Supervised", "Autoencoder", "ChannelChart", "Classical")


@dataclass(frozen=True)
class VariantSpec:
    input: str
    output: str
    family: str
    latent_dim: int = 32
    chart_dim: int = 2

    def __post_init__(self):
        if self.input not in _INPUTS:
            raise ConfigurationError(f"input must be one of {_INPUTS}")
        if self.output not in _OUTPUTS:
            raise ConfigurationError(f"output must be one of {_OUTPUTS}")
        if self.family not in _FAMILIES:
            raise ConfigurationError(f"family must be one of {_FAMILIES}")
        if self.latent_dim < 1:
            raise ConfigurationError("latent_dim must be >= 1")
        if self.chart_dim not in (2, 3):
            raise ConfigurationError("chart_dim must be 2 or 3")

    def to_dict(self) -> dict:
        return {
            "input": self.input, "output": self.output, "family": self.family,
            "latent_dim": self.latent_dim, "chart_dim": self.chart_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariantSpec":
        return cls(**d)


# name -> canonical (input, output, family)
CANONICAL_VARIANTS = {
    "CSI2Pos": ("CSI", "Position", "Supervised"),
    "PER2Pos": ("PER", "Position", "Supervised"),
    "CSI2TAoA": ("CSI", "TAoA", "Supervised"),
    "PER2TAoA": ("PER", "TAoA", "Supervised"),
    "TAoA2Pos": ("TAoA", "Position", "Supervised"),
    "CSI-AE": ("CSI", "Latent", "Autoencoder"),
    "PER-AE": ("PER", "Latent", "Autoencoder"),
    "CSI-CC": ("ReducedCsi", "Chart", "ChannelChart"),
    "PER-CC": ("ReducedPer", "Chart", "ChannelChart"),
    "Classical": ("CSI", "Position", "Classical"),
}

# chart variants also accept the raw input name and canonicalise it
_CHART_ALIASES = {"CSI": "ReducedCsi", "PER": "ReducedPer"}


def _canonicalise(spec: VariantSpec) -> tuple[str, VariantSpec]:
    probe = spec
    if spec.family == "ChannelChart" and spec.input in _CHART_ALIASES:
        probe = replace(spec, input=_CHART_ALIASES[spec.input])
    key = (probe.input, probe.output, probe.family)
    for name, combo in CANONICAL_VARIANTS.items():
        if combo == key:
            return name, probe
    raise ConfigurationError(
        f"({spec.input} -> {spec.output}, {spec.family}) is not a listed variant: "
        "allowed are CSI/PER -> Position|TAoA and TAoA -> Position (Supervised), "
        "CSI/PER -> Latent (Autoencoder), reduced CSI/PER -> Chart (ChannelChart), "
        "and CSI -> Position (Classical)"
    )


@dataclass(frozen=True)
class ChartNormConfig:
    pathloss_exponent: float
    n_antennas: int

    def __post_init__(self):
        if self.pathloss_exponent <= 0:
            raise ConfigurationError("pathloss exponent must be positive")
        if self.n_antennas < 1:
            raise ConfigurationError("n_antennas must be >= 1")


def normalize_channel(csi_per_locator, cfg: ChartNormConfig) -> np.ndarray:
    """Path-loss normalisation B^(beta-1) * H / ||H||_F^beta."""
    h = np.asarray(csi_per_locator, dtype=np.complex128)
    norm = np.linalg.norm(h)
    if norm == 0.0 or not np.isfinite(norm):
        raise DomainError("cannot normalise a zero or non-finite channel")
    beta = cfg.pathloss_exponent
    return (cfg.n_antennas ** (beta - 1.0) / norm**beta) * h


# ---------------------------------------------------------------------------
# Featurisation


def _csi_features(dataset) -> np.ndarray:
    flat = dataset.csi.reshape(len(dataset), -1).astype(np.complex128)
    return np.concatenate([flat.real, flat.imag], axis=1)


def _per_features(dataset) -> np.ndarray:
    return dataset.per.reshape(len(dataset), -1).astype(np.float64)


def _taoa_features(dataset) -> np.ndarray:
    return dataset.taoa.reshape(len(dataset), -1).astype(np.float64)


def _reduced_csi_features(dataset, norm_cfg: ChartNormConfig) -> np.ndarray:
    # subcarrier-averaged magnitude per (locator, antenna) after path-loss
    # normalisation
    n, L = len(dataset), dataset.n_locators
    out = np.empty((n, L * dataset.radio.n_antennas_per_locator))
    for i in range(n):
        feats = []
        for m in range(L):
            h = normalize_channel(dataset.csi[i, m], norm_cfg)
            feats.append(np.abs(h).mean(axis=1))
        out[i] = np.concatenate(feats)
    return out


def _reduced_per_features(dataset, norm_cfg: ChartNormConfig) -> np.ndarray:
    # delay-averaged periodogram per (locator, angle bin) of the
    # normalised channel
    n, L = len(dataset), dataset.n_locators
    out = np.empty((n, L * dataset.radio.n_angle_bins))
    for i in range(n):
        feats = []
        for m in range(L):
            h = normalize_channel(dataset.csi[i, m], norm_cfg)
            feats.append(csi_to_periodogram(h, dataset.radio).mean(axis=0))
        out[i] = np.concatenate(feats)
    return out


# ---------------------------------------------------------------------------
# The variant object


class ModelVariant:
    """One Tab-style localiser configuration with its nets and feature state."""

    def __init__(self, spec: VariantSpec, radio, hidden=(64, 64)):
        name, spec = _canonicalise(spec)
        self.name = name
        self.spec = spec
        self.radio = radio
        self.hidden = tuple(int(h) for h in hidden)
        self.nets: dict[str, Mlp] = {}
        self.feat_mean = None
        self.feat_std = None
        self.norm_cfg: ChartNormConfig | None = None
        self.mle_cfg: MleConfig | None = None
        self._triplet_pairs = None

    # -- features

    def raw_features(self, dataset) -> np.ndarray:
        kind = self.spec.input
        if kind == "CSI":
            return _csi_features(dataset)
        if kind == "PER":
            return _per_features(dataset)
        if kind == "TAoA":
            return _taoa_features(dataset)
        if self.norm_cfg is None:
            raise ConfigurationError("chart variants must be fitted first")
        if kind == "ReducedCsi":
            return _reduced_csi_features(dataset, self.norm_cfg)
        return _reduced_per_features(dataset, self.norm_cfg)

    def features(self, dataset, idx=None) -> np.ndarray:
        x = self.raw_features(dataset)
        if idx is not None:
            x = x[np.asarray(idx, dtype=np.int64)]
        if self.feat_mean is None:
            raise ConfigurationError("variant must be fitted before inference")
        return (x - self.feat_mean) / self.feat_std

    def labels(self, dataset) -> np.ndarray:
        if self.spec.output == "Position":
            return dataset.positions.copy()
        if self.spec.output == "TAoA":
            return dataset.taoa.reshape(len(dataset), -1).copy()
        raise ConfigurationError(f"{self.name} has no supervised labels")

    # -- fitting

    def _init_nets(self, feat_dim: int, label_dim: int | None, seed: int):
        h = list(self.hidden)
        if self.spec.family == "Supervised":
            self.nets = {"net": Mlp.create([feat_dim, *h, label_dim], seed=seed)}
        elif self.spec.family == "Autoencoder":
            m = self.spec.latent_dim
            self.nets = {
                "encoder": Mlp.create([feat_dim, *h, m], seed=seed),
                "decoder": Mlp.create([m, *h[::-1], feat_dim], seed=seed + 1),
            }
        elif self.spec.family == "ChannelChart":
            self.nets = {
                "net": Mlp.create([feat_dim, *h, self.spec.chart_dim], seed=seed)
            }

    def _make_triplet_pairs(self, dataset, idx_groups, seed,
                            pos_window=15, neg_gap=80):
        """Static per-anchor (positive, negative) picks by time proximity.

        Each group (train, val, ...) draws partners from within itself so
        validation anchors never pair with training samples.
        """
        t = dataset.time_index.astype(np.int64)
        rng = np.random.default_rng([seed, 3])
        pos_pick = np.arange(len(dataset), dtype=np.int64)
        neg_pick = np.arange(len(dataset), dtype=np.int64)
        for group in idx_groups:
            pool = np.asarray(group, dtype=np.int64)
            t_pool = t[pool]
            for i in pool:
                gaps = np.abs(t_pool - t[i])
                near = pool[(gaps >= 1) & (gaps <= pos_window)]
                far = pool[gaps >= neg_gap]
                if len(far) == 0:
                    far = pool[np.argsort(gaps)[-max(1, len(pool) // 4):]]
                pos_pick[i] = near[rng.integers(len(near))] if len(near) else i
                neg_pick[i] = far[rng.integers(len(far))]
        self._triplet_pairs = (pos_pick, neg_pick)

    def fit(self, dataset, train_idx, val_idx, cfg: nn_core.TrainConfig,
            margin: float = 1.0):
        """Train on the given index split; returns the loss history."""
        if self.spec.family == "Classical":
            self.mle_cfg = classical_mle_config(dataset.n_locators)
            return nn_core.TrainHistory()
        train_idx = np.asarray(train_idx, dtype=np.int64)
        val_idx = np.asarray(val_idx, dtype=np.int64)
        if self.spec.family == "ChannelChart":
            self.norm_cfg = ChartNormConfig(
                pathloss_exponent=dataset.scene.pathloss_exponent,
                n_antennas=dataset.radio.n_antennas_per_locator,
            )
        raw = self.raw_features(dataset)
        mean = raw[train_idx].mean(axis=0)
        std = raw[train_idx].std(axis=0)
        self.feat_mean = mean
        self.feat_std = np.where(std > 1e-8, std, 1.0)
        feats = (raw - mean) / self.feat_std

        label_dim = None
        if self.spec.family == "Supervised":
            labels = self.labels(dataset)
            label_dim = labels.shape[1]
        self._init_nets(feats.shape[1], label_dim, seed=cfg.seed)

        if self.spec.family == "Supervised":
            net = self.nets["net"]

            def loss_fn(m, idx):
                return mse_loss(forward(m, feats[idx]), labels[idx])

            trainable = net
        elif self.spec.family == "Autoencoder":
            enc, dec = self.nets["encoder"], self.nets["decoder"]

            def loss_fn(m, idx):
                return recon_loss(enc, dec, feats[idx])

            trainable = Mlp(layers=enc.layers + dec.layers, seed=cfg.seed)
        else:
            self._make_triplet_pairs(dataset, (train_idx, val_idx), cfg.seed)
            pos_pick, neg_pick = self._triplet_pairs
            net = self.nets["net"]

            def loss_fn(m, idx):
                a = forward(m, feats[idx])
                p = forward(m, feats[pos_pick[idx]])
                n = forward(m, feats[neg_pick[idx]])
                return triplet_loss(a, p, n, margin=margin)

            trainable = net

        _, history = nn_core.train(trainable, loss_fn, (train_idx, val_idx), cfg)
        return history

    # -- inference

    def _require_fitted(self):
        if self.spec.family != "Classical" and not self.nets:
            raise ConfigurationError(f"{self.name} is not fitted")

    def predict(self, dataset, idx=None) -> np.ndarray:
        """Network outputs: positions, flattened TAoA, latent, or chart."""
        self._require_fitted()
        if self.spec.family == "Classical":
            return classical_positions(dataset, idx, self.mle_cfg)
        x = self.features(dataset, idx)
        if self.spec.family == "Autoencoder":
            return forward(self.nets["encoder"], x).values
        return forward(self.nets["net"], x).values

    def embed(self, dataset, idx=None) -> np.ndarray:
        """Backbone representation: AE latent, chart point, or supervised output."""
        if self.spec.family == "Classical":
            raise ConfigurationError("the classical baseline has no embedding")
        return self.predict(dataset, idx)

    def reconstruct(self, dataset, idx=None) -> np.ndarray:
        if self.spec.family != "Autoencoder":
            raise ConfigurationError("reconstruct() is autoencoder-only")
        self._require_fitted()
        x = self.features(dataset, idx)
        z = forward(self.nets["encoder"], x)
        return forward(self.nets["decoder"], z).values

    def clone(self) -> "ModelVariant":
        """Deep copy: nets and feature state duplicated, nothing shared."""
        dup = ModelVariant(self.spec, self.radio, hidden=self.hidden)
        dup.nets = {k: net.copy() for k, net in self.nets.items()}
        if self.feat_mean is not None:
            dup.feat_mean = self.feat_mean.copy()
            dup.feat_std = self.feat_std.copy()
        dup.norm_cfg = self.norm_cfg
        dup.mle_cfg = self.mle_cfg
        if self._triplet_pairs is not None:
            dup._triplet_pairs = tuple(p.copy() for p in self._triplet_pairs)
        return dup

    def training_objective(self, dataset):
        """The fitted model and its loss as a (model, loss_fn) pair.

        loss_fn(model, idx) reproduces the loss fit() minimised on the
        given dataset, so landscape tools can perturb the same parameters
        training touched.  The autoencoder model chains encoder and
        decoder layers; its parameters are shared with the variant's nets.
        """
        if self.spec.family == "Classical":
            raise ConfigurationError("the classical baseline has no loss surface")
        self._require_fitted()
        feats = self.features(dataset)
        if self.spec.family == "Supervised":
            labels = self.labels(dataset)

            def loss_fn(m, idx):
                return mse_loss(forward(m, feats[idx]), labels[idx])

            return self.nets["net"], loss_fn
        if self.spec.family == "Autoencoder":
            enc, dec = self.nets["encoder"], self.nets["decoder"]
            combined = Mlp(layers=enc.layers + dec.layers, seed=enc.seed)

            def loss_fn(m, idx):
                return mse_loss(forward(m, feats[idx]), feats[idx])

            return combined, loss_fn
        if self._triplet_pairs is None:
            raise ConfigurationError(
                "chart objectives need the triplet picks made during fit()"
            )
        pos_pick, neg_pick = self._triplet_pairs

        def loss_fn(m, idx):
            a = forward(m, feats[idx])
            p = forward(m, feats[pos_pick[idx]])
            n = forward(m, feats[neg_pick[idx]])
            return triplet_loss(a, p, n)

        return self.nets["net"], loss_fn


def build_variant(spec: VariantSpec, radio, hidden=(64, 64)) -> ModelVariant:
    """Instantiate one of the ten allowed configurations."""
    return ModelVariant(spec, radio, hidden=hidden)


def variant_by_name(name: str, radio, hidden=(64, 64), latent_dim: int = 32,
                    chart_dim: int = 2) -> ModelVariant:
    if name not in CANONICAL_VARIANTS:
        raise ConfigurationError(
            f"unknown variant {name!r}; known: {sorted(CANONICAL_VARIANTS)}"
        )
    inp, out, fam = CANONICAL_VARIANTS[name]
    return build_variant(
        VariantSpec(input=inp, output=out, family=fam, latent_dim=latent_dim,
                    chart_dim=chart_dim),
        radio, hidden=hidden,
    )


def save_variant(variant: ModelVariant, path) -> None:
    """Write a fitted variant to a model checkpoint.

    The nets are stored as one parameter chain (autoencoders concatenate
    encoder and decoder and record the split); the variant spec, radio,
    feature statistics, and chart normalisation ride along in the JSON
    header under a "variant" key.  The classical baseline stores its
    locator count and rebuilds default weights on load.
    """
    extra = {
        "variant": variant.spec.to_dict(),
        "radio": variant.radio.to_dict(),
        "hidden": list(variant.hidden),
        "feat_mean": None if variant.feat_mean is None else list(
            np.asarray(variant.feat_mean, dtype=float)
        ),
        "feat_std": None if variant.feat_std is None else list(
            np.asarray(variant.feat_std, dtype=float)
        ),
        "norm_cfg": None if variant.norm_cfg is None else {
            "pathloss_exponent": variant.norm_cfg.pathloss_exponent,
            "n_antennas": variant.norm_cfg.n_antennas,
        },
    }
    if variant.spec.family == "Classical":
        extra["classical_n_locators"] = (
            None if variant.mle_cfg is None else len(variant.mle_cfg.toa_sigmas)
        )
        model = Mlp.create([1, 1], seed=0)
    elif variant.spec.family == "Autoencoder":
        enc, dec = variant.nets["encoder"], variant.nets["decoder"]
        extra["encoder_layers"] = len(enc.layers)
        model = Mlp(layers=enc.layers + dec.layers, seed=enc.seed)
    else:
        if "net" not in variant.nets:
            raise ConfigurationError("cannot save an unfitted variant")
        model = variant.nets["net"]
    nn_core.save_checkpoint(model, path, extra=extra)


def load_variant(path) -> ModelVariant:
    """Rebuild a variant from a checkpoint written by save_variant."""
    model, extra = nn_core.load_checkpoint(path)
    if "variant" not in extra:
        raise ConfigurationError(f"{path}: checkpoint has no variant spec")
    from .channel_sim import RadioConfig

    spec = VariantSpec.from_dict(extra["variant"])
    radio = RadioConfig.from_dict(extra["radio"])
    variant = ModelVariant(spec, radio, hidden=tuple(extra["hidden"]))
    if extra["feat_mean"] is not None:
        variant.feat_mean = np.asarray(extra["feat_mean"], dtype=np.float64)
        variant.feat_std = np.asarray(extra["feat_std"], dtype=np.float64)
    if extra["norm_cfg"] is not None:
        variant.norm_cfg = ChartNormConfig(**extra["norm_cfg"])
    if spec.family == "Classical":
        n_loc = extra.get("classical_n_locators")
        if n_loc is not None:
            variant.mle_cfg = classical_mle_config(int(n_loc))
    elif spec.family == "Autoencoder":
        k = int(extra["encoder_layers"])
        variant.nets = {
            "encoder": Mlp(layers=model.layers[:k], seed=model.seed),
            "decoder": Mlp(layers=model.layers[k:], seed=model.seed),
        }
    else:
        variant.nets = {"net": model}
    return variant


# ---------------------------------------------------------------------------
# Classical baseline


def _log_parabola_offset(ym1: float, y0: float, yp1: float) -> float:
    """Parabola-vertex offset on log-power; y0 is the local max."""
    floor = 1e-30 * max(y0, 1e-300)
    lm1, l0, lp1 = (math.log(max(v, floor)) for v in (ym1, y0, yp1))
    denom = 2.0 * (2.0 * l0 - lp1 - lm1)
    if denom <= 0.0:
        return 0.0
    return float(np.clip((lp1 - lm1) / denom, -0.5, 0.5))


def _sinc_peak_offset(xm1: complex, x0: complex, xp1: complex) -> float:
    """Fractional peak offset from three complex delay bins.

    The 3-point interpolation ratio R = (x[-1]-x[+1]) / (2x[0]-x[-1]-x[+1])
    equals -delta/(1-2 delta^2) exactly when the bins sample a shifted sinc
    pulse; inverting that relation gives the offset without the ~0.2-bin
    bias a power-parabola vertex would carry.
    """
    den = 2.0 * x0 - xm1 - xp1
    if abs(den) < 1e-300:
        return 0.0
    r = float(np.real((xm1 - xp1) / den))
    if abs(r) < 1e-12:
        return -r
    delta = (1.0 - math.sqrt(1.0 + 8.0 * r * r)) / (4.0 * r)
    return float(np.clip(delta, -0.5, 0.5))


def _sinc_edge_offset(x0: complex, xp1: complex) -> float:
    """Right-sided offset estimate when the peak sits in the first bin.

    Bin -1 falls in the zero-padded region of the impulse response, so
    the symmetric 3-point form is unusable; the adjacent-bin ratio
    x[+1]/x[0] = delta/(1-delta) is still exact for a sinc pulse.
    """
    if abs(x0) < 1e-300:
        return 0.0
    r = float(np.real(xp1 / x0))
    if r <= 0.0:
        return 0.0
    return float(np.clip(r / (1.0 + r), 0.0, 0.5))


def classical_taoa(csi_for_locator, radio) -> TaoaTriple:
    """Peak-picked periodogram TAoA with 3-point refinement per axis.

    The argmax bin of the periodogram (ties resolve to the lowest delay
    bin, then the lowest angle bin) is refined by quadratic interpolation
    of the 3-point neighbourhood: the delay axis interpolates the complex
    delay-domain bins (exact for a sinc-shaped pulse), the angle axis the
    log-power.  Elevation is reported as 0 because a linear array cannot
    observe it; a peak in the first delay bin falls back to a one-sided
    adjacent-bin ratio because bin -1 lies in the zero-padded region.
    """
    csi = np.asarray(csi_for_locator, dtype=np.complex128)
    per = csi_to_periodogram(csi, radio)
    if per.max() == per.min():
        raise EstimationError("flat periodogram has no unique peak")
    d, a = np.unravel_index(int(np.argmax(per)), per.shape)
    nd, na = per.shape

    taps = np.fft.ifft(csi, axis=1) * radio.n_subcarriers
    spatial = np.fft.fft(taps, n=4 * csi.shape[0], axis=0).T  # (delay, angle)
    col = spatial[:, a]
    if d == 0:
        p_d = _sinc_edge_offset(col[0], col[1])
    else:
        p_d = _sinc_peak_offset(col[d - 1], col[d], col[(d + 1) % nd])
    p_a = _log_parabola_offset(per[d, (a - 1) % na], per[d, a], per[d, (a + 1) % na])

    delay = (d + p_d) * radio.sample_period_s
    nu = angle_bin_to_direction_cosine(a + p_a, radio.n_angle_bins)
    azimuth = math.asin(min(1.0, max(-1.0, nu)))
    return TaoaTriple(
        azimuth=azimuth, elevation=0.0, range=delay * SPEED_OF_LIGHT
    )


def classical_mle_config(n_locators: int) -> MleConfig:
    """Measurement weights matched to periodogram-derived TAoA quality.

    Interpolated ranges are near exact in line of sight, so the distance
    noise stays tight; the angle term gets a low concentration because a
    linear array never observes elevation and the reported 0 would
    otherwise drag estimates toward the locator plane.
    """
    return MleConfig.defaults(n_locators, sigma=0.05, kappa=2.0)


def classical_localise(dataset, sample_idx: int, mle_cfg: MleConfig | None = None):
    """One sample through per-locator TAoA extraction and the joint MLE.

    The search is confined to the scene bounds, which removes the
    far-field ray ambiguity a free transmit time would otherwise allow.
    """
    poses = list(dataset.scene.locators)
    if len(poses) < 2:
        raise ConfigurationError("classical localisation needs >= 2 locators")
    taoas = [
        classical_taoa(dataset.csi[sample_idx, m].astype(np.complex128), dataset.radio)
        for m in range(len(poses))
    ]
    cfg = mle_cfg if mle_cfg is not None else classical_mle_config(len(poses))
    return joint_mle_estimate(taoas, poses, cfg, bounds=dataset.scene.bounds)


def classical_positions(dataset, idx=None, mle_cfg=None) -> np.ndarray:
    ids = np.arange(len(dataset)) if idx is None else np.asarray(idx, dtype=np.int64)
    out = np.empty((len(ids), 3))
    for row, i in enumerate(ids):
        out[row] = classical_localise(dataset, int(i), mle_cfg).position
    return out


def grid_averaged_errors(estimates: np.ndarray, truths: np.ndarray,
                         cell_labels: np.ndarray) -> np.ndarray:
    """Average the estimates of each grid cell before scoring.

    Returns one error per occupied cell: distance between the mean
    estimate and the mean true position of that cell.
    """
    if len(estimates) != len(truths) or len(truths) != len(cell_labels):
        raise ShapeError("estimates, truths, and labels must align")
    errors = []
    for cell in np.unique(cell_labels):
        mask = cell_labels == cell
        err = np.linalg.norm(estimates[mask].mean(axis=0) - truths[mask].mean(axis=0))
        errors.append(err)
    return np.array(errors)


# ---------------------------------------------------------------------------
# Position scoring across output conventions


def taoa_rows_to_positions(dataset, taoa_rows: np.ndarray,
                           mle_cfg: MleConfig | None = None) -> np.ndarray:
    """Feed per-locator (az, el, range) rows through the joint MLE."""
    poses = list(dataset.scene.locators)
    cfg = mle_cfg if mle_cfg is not None else MleConfig.defaults(len(poses))
    n_loc = len(poses)
    rows = np.asarray(taoa_rows, dtype=np.float64).reshape(len(taoa_rows), n_loc, 3)
    out = np.empty((len(rows), 3))
    for i, row in enumerate(rows):
        taoas = [
            TaoaTriple(
                azimuth=float(np.clip(r[0], -math.pi + 1e-12, math.pi)),
                elevation=float(np.clip(r[1], -math.pi / 2, math.pi / 2)),
                range=float(max(r[2], 0.0)),
            )
            for r in row
        ]
        out[i] = joint_mle_estimate(
            taoas, poses, cfg, bounds=dataset.scene.bounds
        ).position
    return out


def predict_positions(variant: ModelVariant, dataset, idx=None,
                      mle_cfg=None) -> np.ndarray:
    """Positions from any position-capable variant.

    TAoA-output models are scored by converting their predicted triples
    through the same MLE the classical pipeline uses.
    """
    if variant.spec.output == "Position" or variant.spec.family == "Classical":
        return variant.predict(dataset, idx)
    if variant.spec.output == "TAoA":
        rows = variant.predict(dataset, idx)
        return taoa_rows_to_positions(dataset, rows, mle_cfg)
    raise ConfigurationError(
        f"{variant.name} does not produce positions (output {variant.spec.output})"
    )


def position_errors(variant: ModelVariant, dataset, idx=None,
                    mle_cfg=None) -> np.ndarray:
    ids = np.arange(len(dataset)) if idx is None else np.asarray(idx, dtype=np.int64)
    pred = predict_positions(variant, dataset, ids, mle_cfg)
    return np.linalg.norm(pred - dataset.positions[ids], axis=1)


# ---------------------------------------------------------------------------
# Frozen-backbone heads


@dataclass(frozen=True)
class HeadSpec:
    hidden: int = 64
    train: nn_core.TrainConfig = None

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigurationError("head hidden width must be >= 1")
        if self.train is None:
            object.__setattr__(
                self,
                "train",
                nn_core.TrainConfig(learning_rate=1e-2, batch_size=32, epochs=150,
                                    seed=0),
            )


class IdentityBackbone:
    """Passes raw input features straight through; attach_head then
    standardises them, which reduces a headed identity backbone to a plain
    supervised regressor."""

    def __init__(self, variant: ModelVariant):
        self._variant = variant
        self.name = f"identity({variant.spec.input})"

    def embed(self, dataset, idx=None) -> np.ndarray:
        x = self._variant.raw_features(dataset)
        return x if idx is None else x[np.asarray(idx, dtype=np.int64)]

    def parameters(self):
        return []


class HeadModel:
    """A small regressor trained on a frozen backbone's embedding."""

    def __init__(self, backbone, head: Mlp, emb_mean, emb_std, history=None):
        self.backbone = backbone
        self.head = head
        self.emb_mean = emb_mean
        self.emb_std = emb_std
        self.history = history

    def predict(self, dataset, idx=None) -> np.ndarray:
        z = (self.backbone.embed(dataset, idx) - self.emb_mean) / self.emb_std
        return forward(self.head, z).values

    def position_errors(self, dataset, idx=None) -> np.ndarray:
        ids = np.arange(len(dataset)) if idx is None else np.asarray(idx, np.int64)
        return np.linalg.norm(
            self.predict(dataset, ids) - dataset.positions[ids], axis=1
        )


def _param_fingerprint(backbone) -> list:
    if hasattr(backbone, "nets"):
        return [p.values.copy() for net in backbone.nets.values()
                for p in net.parameters()]
    return [p.values.copy() for p in backbone.parameters()]


def attach_head(frozen_backbone, head_spec: HeadSpec, labelled_samples):
    """Train a 2-layer position head on a frozen backbone.

    labelled_samples is (dataset, train_indices, val_indices).  The
    backbone is never touched by the optimiser; a parameter snapshot
    asserts it stayed bit-identical.
    """
    dataset, train_idx, val_idx = labelled_samples
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    before = _param_fingerprint(frozen_backbone)

    emb = frozen_backbone.embed(dataset)
    mean = emb[train_idx].mean(axis=0)
    std = emb[train_idx].std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    z = (emb - mean) / std
    labels = dataset.positions

    head = Mlp.create([z.shape[1], head_spec.hidden, 3], seed=head_spec.train.seed)

    def loss_fn(m, idx):
        return mse_loss(forward(m, z[idx]), labels[idx])

    _, history = nn_core.train(head, loss_fn, (train_idx, val_idx), head_spec.train)

    after = _param_fingerprint(frozen_backbone)
    for a, b in zip(before, after):
        if not np.array_equal(a, b):
            raise AssertionError("backbone parameters changed during head training")
    return HeadModel(frozen_backbone, head, mean, std, history=history)
