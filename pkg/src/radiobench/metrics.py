"""Evaluation metrics: error CDFs, neighbourhood-preservation scores for
chart embeddings, sliced Wasserstein distances between latent sets, and
loss-landscape slices with a sharpness summary.

All metrics are pure functions; randomness (projection directions,
landscape directions) is drawn from explicit seeds and reductions run in
fixed order, so results are bit-reproducible.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError

# ---------------------------------------------------------------------------
# Error CDFs


@dataclass(frozen=True)
class ErrorCdf:
    """Sorted nonnegative errors with interpolated percentile queries."""

    errors: np.ndarray

    def __post_init__(self):
        e = np.sort(np.asarray(self.errors, dtype=np.float64).ravel())
        if e.size == 0:
            raise ConfigurationError("an error CDF needs at least one sample")
        if not np.all(np.isfinite(e)) or e[0] < 0:
            raise NumericError("errors must be finite and nonnegative")
        object.__setattr__(self, "errors", e)
        self.errors.setflags(write=False)

    def __len__(self) -> int:
        return len(self.errors)

    def percentile(self, p: float) -> float:
        """Linear-interpolation percentile, p in [0, 100]."""
        return float(np.percentile(self.errors, p))

    @property
    def median(self) -> float:
        return self.percentile(50.0)

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    def to_dict(self) -> dict:
        return {
            "count": int(len(self.errors)),
            "mean": self.mean,
            "median": self.median,
            "p90": self.percentile(90.0),
            "p99": self.percentile(99.0),
            "max": float(self.errors[-1]),
        }


def error_cdf(estimates, truths) -> ErrorCdf:
    """Euclidean errors for 2-D inputs, absolute errors for 1-D inputs."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ShapeError(f"estimate/truth shapes differ: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise ConfigurationError("an error CDF needs at least one sample")
    if est.ndim == 1:
        errs = np.abs(est - tru)
    elif est.ndim == 2:
        errs = np.linalg.norm(est - tru, axis=1)
    else:
        raise ShapeError("expected 1-D values or 2-D coordinate rows")
    return ErrorCdf(errors=errs)


# ---------------------------------------------------------------------------
# Continuity / trustworthiness


@dataclass(frozen=True)
class ChartScore:
    continuity: float
    trustworthiness: float
    k: int

    def __post_init__(self):
        for v in (self.continuity, self.trustworthiness):
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError("chart scores live in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "continuity": self.continuity,
            "trustworthiness": self.trustworthiness,
            "k": self.k,
        }


def _neighbour_order(points: np.ndarray) -> np.ndarray:
    """Row i lists the other points sorted by distance from i.

    Distance ties resolve by index order (stable sort over an index-tagged
    key), so duplicated points are handled deterministically.
    """
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, : len(points) - 1]


def _check_rank_inputs(high, emb, k: int):
    high = np.asarray(high, dtype=np.float64)
    emb = np.asarray(emb, dtype=np.float64)
    if high.ndim != 2 or emb.ndim != 2 or len(high) != len(emb):
        raise ShapeError("need two 2-D point sets of equal length")
    n = len(high)
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if not n > 1.5 * k + 1:
        raise ConfigurationError(
            f"n={n} too small for k={k}: need n > 3k/2 + 1"
        )
    return high, emb, n


def trustworthiness(high_dim_points, embeddings, k: int) -> float:
    """Penalty for embedded neighbours that are not true neighbours.

    1 - 2/(n k (2n - 3k - 1)) * sum_i sum_{j in U_k(i)} (rank_high(i,j) - k)
    where U_k(i) holds the points inside i's embedded k-neighbourhood but
    outside its high-dimensional one, and ranks count nearest = 1.
    """
    high, emb, n = _check_rank_inputs(high_dim_points, embeddings, k)
    high_order = _neighbour_order(high)
    emb_order = _neighbour_order(emb)
    high_rank = np.empty((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), n - 1)
    high_rank[rows, high_order.ravel()] = np.tile(np.arange(1, n), n)
    total = 0
    for i in range(n):
        high_knn = set(high_order[i, :k].tolist())
        for j in emb_order[i, :k]:
            if int(j) not in high_knn:
                total += int(high_rank[i, j]) - k
    value = 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * total
    return float(min(1.0, max(0.0, value)))


def continuity(high_dim_points, embeddings, k: int) -> float:
    """Penalty for true neighbours lost from the embedded neighbourhood;
    the same rank sum as trustworthiness with the two spaces swapped."""
    return trustworthiness(embeddings, high_dim_points, k)


def chart_score(high_dim_points, embeddings, k: int) -> ChartScore:
    return ChartScore(
        continuity=continuity(high_dim_points, embeddings, k),
        trustworthiness=trustworthiness(high_dim_points, embeddings, k),
        k=k,
    )


# ---------------------------------------------------------------------------
# Sliced Wasserstein-2


def _w2_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Exact 1-D W2 between empirical distributions (any sizes).

    Both quantile functions are step functions; integrate their squared
    difference over the merged break points.
    """
    x = np.sort(x)
    y = np.sort(y)
    n, m = len(x), len(y)
    if n == m:
        return math.sqrt(float(np.mean((x - y) ** 2)))
    edges = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    widths = np.diff(edges)
    mids = (edges[:-1] + edges[1:]) / 2.0
    xi = x[np.minimum((mids * n).astype(np.int64), n - 1)]
    yi = y[np.minimum((mids * m).astype(np.int64), m - 1)]
    return math.sqrt(float(np.sum(widths * (xi - yi) ** 2)))


def wasserstein_distance(latents_a, latents_b, n_projections: int = 128,
                         seed: int = 0) -> float:
    """Sliced Wasserstein-2 between two point sets.

    1-D inputs use the exact quantile coupling directly; higher dimensions
    average squared 1-D distances over seeded random unit projections and
    take the square root, which preserves the mean-shift scaling
    ||delta|| / sqrt(d).
    """
    a = np.asarray(latents_a, dtype=np.float64)
    b = np.asarray(latents_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"point sets must share a dimension: {a.shape} vs {b.shape}")
    if len(a) == 0 or len(b) == 0:
        raise ConfigurationError("both point sets must be non-empty")
    d = a.shape[1]
    if d == 1:
        return _w2_1d(a[:, 0], b[:, 0])
    if n_projections < 1:
        raise ConfigurationError("need at least one projection")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        total += _w2_1d(a @ u, b @ u) ** 2
    return math.sqrt(total / n_projections)


# ---------------------------------------------------------------------------
# Wasserstein matrix over a frozen latent space


@dataclass(frozen=True)
class WassersteinMatrix:
    """Pairwise latent-shift distances, cell-averaged over the spatial grid.

    values is (D, D) or, per locator, (D, D, L); names label the datasets.
    """

    values: np.ndarray
    names: tuple
    per_locator: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < -1e-12):
            raise NumericError("distances must be nonnegative")
        object.__setattr__(self, "values", v)

    def to_csv(self) -> str:
        """Dataset-by-dataset matrix; per-locator values are averaged."""
        v = self.values.mean(axis=2) if self.per_locator else self.values
        buf = io.StringIO()
        buf.write("," + ",".join(self.names) + "\n")
        for name, row in zip(self.names, v):
            buf.write(name + "," + ",".join(f"{x:.9g}" for x in row) + "\n")
        return buf.getvalue()


def _per_locator_masked_features(variant, dataset, locator: int) -> np.ndarray:
    """Standardised features with every other locator's block zeroed.

    Zero equals the training mean after standardisation, so the encoder
    sees one locator's information against an average background.
    """
    feats = variant.features(dataset)
    n_loc = dataset.n_locators
    block = feats.shape[1] // n_loc
    masked = np.zeros_like(feats)
    kind = variant.spec.input
    if kind == "CSI":
        # layout: [real of (L, B, N) flattened, imag of the same]
        half = feats.shape[1] // 2
        per = half // n_loc
        sl = slice(locator * per, (locator + 1) * per)
        masked[:, sl] = feats[:, sl]
        sl2 = slice(half + locator * per, half + (locator + 1) * per)
        masked[:, sl2] = feats[:, sl2]
    else:
        sl = slice(locator * block, (locator + 1) * block)
        masked[:, sl] = feats[:, sl]
    return masked


def wasserstein_matrix(reference_model, datasets, per_locator: bool = False,
                       pitch_m: float = 1.0, n_projections: int = 128,
                       seed: int = 0) -> WassersteinMatrix:
    """Latent-shift distances between datasets under one frozen encoder.

    Every dataset is embedded with the reference autoencoder's encoder,
    samples are grouped by spatial grid cell, the sliced W2 distance is
    computed per cell occupied in both datasets, and cell distances are
    averaged.  per_locator repeats this with all but one locator's
    features masked to the training mean, one slice per locator.
    """
    from .nn_core import forward

    if getattr(reference_model, "spec", None) is None or (
        reference_model.spec.family != "Autoencoder"
    ):
        raise ConfigurationError(
            "the reference model must be an autoencoder variant"
        )
    datasets = list(datasets)
    if len(datasets) < 2:
        raise ConfigurationError("need at least two datasets to compare")
    from .dataset_store import grid_cell_indices

    enc = reference_model.nets["encoder"]

    def embed(ds, locator=None):
        if locator is None:
            x = reference_model.features(ds)
        else:
            x = _per_locator_masked_features(reference_model, ds, locator)
        return forward(enc, x).values

    def cell_groups(ds) -> dict:
        cells, labels = grid_cell_indices(ds, pitch_m)
        groups: dict = {}
        for row, lab in enumerate(labels):
            groups.setdefault(tuple(cells[lab]), []).append(row)
        return groups

    n = len(datasets)
    locator_axis = list(range(datasets[0].n_locators)) if per_locator else [None]
    shape = (n, n, len(locator_axis)) if per_locator else (n, n)
    values = np.zeros(shape)
    groups = [cell_groups(ds) for ds in datasets]

    for which, loc in enumerate(locator_axis):
        latents = [embed(ds, loc) for ds in datasets]
        for i in range(n):
            for j in range(i + 1, n):
                common = sorted(set(groups[i]) & set(groups[j]))
                if not common:
                    raise ConfigurationError(
                        "datasets share no occupied grid cells at this pitch"
                    )
                dists = [
                    wasserstein_distance(
                        latents[i][groups[i][c]], latents[j][groups[j][c]],
                        n_projections=n_projections, seed=seed,
                    )
                    for c in common
                ]
                d = float(np.mean(dists))
                if per_locator:
                    values[i, j, which] = values[j, i, which] = d
                else:
                    values[i, j] = values[j, i] = d

    names = tuple(ds.name for ds in datasets)
    return WassersteinMatrix(values=values, names=names, per_locator=per_locator)


# ---------------------------------------------------------------------------
# Loss landscapes


@dataclass(frozen=True)
class LossLandscape:
    """Loss over theta + alpha d1 + beta d2 for (alpha, beta) in [-1, 1]^2."""

    alphas: np.ndarray
    losses: np.ndarray
    direction_1: list = field(repr=False, default_factory=list)
    direction_2: list = field(repr=False, default_factory=list)
    center_loss: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("alpha\\beta," + ",".join(f"{b:.6g}" for b in self.alphas) + "\n")
        for a, row in zip(self.alphas, self.losses):
            buf.write(f"{a:.6g}," + ",".join(f"{x:.9g}" for x in row) + "\n")
        return buf.getvalue()


def _filter_normalised_directions(model, seed: int):
    """Two Gaussian weight directions, each layer's block rescaled to that
    layer's weight norm.

    Bias components are zero: a ReLU (s, 1/s) layer rescaling multiplies
    weight norms by s and 1/s but moves the downstream bias not at all, so
    only weight-normalised, bias-free directions make the landscape an
    exact invariant of that reparameterisation.
    """
    rng = np.random.default_rng(seed)
    dirs = ([], [])
    for layer in model.layers:
        w, b = layer.weights.values, layer.biases.values
        w_norm = float(np.linalg.norm(w))
        for d in dirs:
            dw = rng.standard_normal(w.shape)
            raw = float(np.linalg.norm(dw))
            scale = w_norm / raw if raw > 0 else 0.0
            d.append(dw * scale)
            d.append(np.zeros_like(b))
    return dirs


def loss_landscape(model, loss_fn, data, grid_n: int = 41,
                   seed: int = 0, eval_limit: int = 512) -> LossLandscape:
    """Evaluate loss_fn(model, data) over a grid of parameter perturbations.

    Directions are filter normalised so the slice is comparable across
    reparameterisations; the model's parameters are restored afterwards
    and the centre cell reproduces the unperturbed loss exactly.  When
    data is an index array longer than eval_limit, one seeded subsample
    is drawn and reused for every grid cell.
    """
    if grid_n < 3 or grid_n % 2 == 0:
        raise ConfigurationError("grid_n must be odd and >= 3")
    if isinstance(data, np.ndarray) and eval_limit and len(data) > eval_limit:
        pick = np.random.default_rng([seed, 1]).choice(
            len(data), size=eval_limit, replace=False
        )
        data = data[np.sort(pick)]
    params = model.parameters()
    base = [p.values.copy() for p in params]
    center = float(loss_fn(model, data).item())
    if not math.isfinite(center):
        raise NumericError("model loss is not finite at the centre")
    d1, d2 = _filter_normalised_directions(model, seed)
    alphas = np.linspace(-1.0, 1.0, grid_n)
    losses = np.empty((grid_n, grid_n))
    try:
        for ia, a in enumerate(alphas):
            for ib, b in enumerate(alphas):
                if a == 0.0 and b == 0.0:
                    losses[ia, ib] = center
                    continue
                for p, p0, e1, e2 in zip(params, base, d1, d2):
                    p.values[...] = p0 + a * e1 + b * e2
                losses[ia, ib] = float(loss_fn(model, data).item())
    finally:
        for p, p0 in zip(params, base):
            p.values[...] = p0
    return LossLandscape(
        alphas=alphas,
        losses=losses,
        direction_1=d1,
        direction_2=d2,
        center_loss=center,
    )


def sharpness(landscape: LossLandscape, radius: float = 0.5,
              n_angles: int = 64) -> float:
    """Mean loss increase over the centre on the circle of given radius,
    read from the landscape grid by bilinear interpolation."""
    alphas = landscape.alphas
    lo, hi = alphas[0], alphas[-1]
    if radius <= 0 or -radius < lo or radius > hi:
        raise ConfigurationError("radius outside the landscape range")
    step = alphas[1] - alphas[0]
    total = 0.0
    for t in range(n_angles):
        ang = 2.0 * math.pi * t / n_angles
        a = radius * math.cos(ang)
        b = radius * math.sin(ang)
        fa = (a - lo) / step
        fb = (b - lo) / step
        ia, ib = int(math.floor(fa)), int(math.floor(fb))
        ia = min(max(ia, 0), len(alphas) - 2)
        ib = min(max(ib, 0), len(alphas) - 2)
        wa, wb = fa - ia, fb - ib
        g = landscape.losses
        val = (
            g[ia, ib] * (1 - wa) * (1 - wb)
            + g[ia + 1, ib] * wa * (1 - wb)
            + g[ia, ib + 1] * (1 - wa) * wb
            + g[ia + 1, ib + 1] * wa * wb
        )
        total += val - landscape.center_loss
    return total / n_angles


def relative_sharpness(landscape: LossLandscape, radius: float = 0.5,
                       n_angles: int = 64) -> float:
    """Sharpness normalised by the centre loss, making models trained on
    different loss scales comparable."""
    return sharpness(landscape, radius, n_angles) / max(
        abs(landscape.center_loss), 1e-12
    )
