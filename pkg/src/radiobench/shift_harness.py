"""Experiment protocols for distribution-shift studies: zero-shot scoring
with one-off mean calibration, fine-tuning under label budgets, pool-based
active learning, and frozen-backbone transfer.

Every protocol is a pure function of (models, data, protocol config, seed):
all randomness flows from explicit seeds, so reruns are bit-identical.  Run
manifests and the JSON-lines ledger at the bottom give each experiment a
content-addressed config hash for exact reruns.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset_store import SplitSpec, grid_cell_indices, split
from .errors import ConfigurationError
from .localiser_zoo import (
    HeadSpec,
    attach_head,
    build_variant,
    position_errors,
    predict_positions,
    taoa_rows_to_positions,
    variant_by_name,
)
from .metrics import ErrorCdf, error_cdf
from . import nn_core
from .nn_core import Mlp, TrainConfig, forward, mse_loss

DEFAULT_BUDGETS = (25, 50, 100, 200, 400, 800)


def _derive_seed(*parts) -> int:
    """Stable sub-seed from integer parts; keeps nested loops decorrelated."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Zero-shot evaluation


@dataclass(frozen=True)
class ZeroShotReport:
    """Median position errors on a target dataset, with and without a
    one-off mean-offset calibration fitted on a held-out tenth."""

    variant_name: str
    dataset_name: str
    calibrated: bool
    raw_median_m: float
    calibrated_median_m: float | None
    offset: np.ndarray | None
    n_calibration: int
    n_scored: int
    taoa_medians: dict | None = None

    def __post_init__(self):
        if self.raw_median_m < 0:
            raise ConfigurationError("errors cannot be negative")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant_name,
            "dataset": self.dataset_name,
            "calibrated": self.calibrated,
            "raw_median_m": self.raw_median_m,
            "calibrated_median_m": self.calibrated_median_m,
            "offset": None if self.offset is None else self.offset.tolist(),
            "n_calibration": self.n_calibration,
            "n_scored": self.n_scored,
            "taoa_medians": self.taoa_medians,
        }


def _wrap_angle(d: np.ndarray) -> np.ndarray:
    # leave already-principal differences untouched so constant small
    # biases survive bit-exactly
    out = np.asarray(d, dtype=np.float64)
    needs = np.abs(out) > np.pi
    if np.any(needs):
        out = out.copy()
        out[needs] = (out[needs] + np.pi) % (2.0 * np.pi) - np.pi
    return out


def _calibration_indices(n: int):
    """Every tenth sample is held out to fit the offset; the rest score."""
    calib = np.arange(0, n, 10)
    score = np.setdiff1d(np.arange(n), calib)
    return calib, score


def zero_shot_eval(model, dataset_b, calibrate: bool = True) -> ZeroShotReport:
    """Score a trained model on a (possibly shifted) dataset it never saw.

    With calibrate, the mean estimate bias fitted on every tenth sample is
    subtracted before scoring the remaining samples: a 3-vector position
    offset for direct-position models, per-locator (azimuth, elevation,
    range) offsets for TAoA models, whose calibrated triples are then
    fused to positions by the maximum-likelihood solver.
    """
    spec = model.spec
    if spec.family in ("Autoencoder", "ChannelChart"):
        raise ConfigurationError(
            f"{model.name} has no metric position output; charts are scored "
            "with continuity/trustworthiness instead"
        )
    feat_mean = getattr(model, "feat_mean", None)
    if feat_mean is not None:
        width = model.raw_features(dataset_b).shape[1]
        if width != len(feat_mean):
            raise ConfigurationError(
                f"incompatible shapes: model expects {len(feat_mean)} "
                f"features, dataset provides {width}"
            )
    n = len(dataset_b)
    calib_idx, score_idx = _calibration_indices(n)
    if len(score_idx) == 0:
        raise ConfigurationError("dataset too small to hold out calibration data")
    truth_pos = dataset_b.positions

    offset = None
    cal_median = None
    taoa_medians = None

    if spec.output == "TAoA":
        rows = np.asarray(model.predict(dataset_b), dtype=np.float64)
        truth = dataset_b.taoa.reshape(n, -1)
        L = dataset_b.n_locators
        diffs = rows - truth
        ang_cols = [3 * m + c for m in range(L) for c in (0, 1)]
        diffs[:, ang_cols] = _wrap_angle(diffs[:, ang_cols])
        comp = np.abs(diffs[score_idx].reshape(len(score_idx), L, 3))
        taoa_medians = {
            "azimuth": float(np.median(comp[:, :, 0])),
            "elevation": float(np.median(comp[:, :, 1])),
            "range": float(np.median(comp[:, :, 2])),
        }
        raw_est = taoa_rows_to_positions(dataset_b, rows[score_idx],
                                         getattr(model, "mle_cfg", None))
        raw_errors = np.linalg.norm(raw_est - truth_pos[score_idx], axis=1)
        if calibrate:
            off_row = diffs[calib_idx].mean(axis=0)
            cal_rows = rows - off_row
            cal_est = taoa_rows_to_positions(dataset_b, cal_rows[score_idx],
                                             getattr(model, "mle_cfg", None))
            cal_errors = np.linalg.norm(cal_est - truth_pos[score_idx], axis=1)
            cal_median = float(np.median(cal_errors))
            offset = off_row.reshape(L, 3)
    else:
        est = np.asarray(predict_positions(model, dataset_b), dtype=np.float64)
        raw_errors = np.linalg.norm(
            est[score_idx] - truth_pos[score_idx], axis=1
        )
        if calibrate:
            off = (est[calib_idx] - truth_pos[calib_idx]).mean(axis=0)
            cal_errors = np.linalg.norm(
                est[score_idx] - off - truth_pos[score_idx], axis=1
            )
            cal_median = float(np.median(cal_errors))
            offset = off

    return ZeroShotReport(
        variant_name=model.name,
        dataset_name=dataset_b.name,
        calibrated=calibrate,
        raw_median_m=float(np.median(raw_errors)),
        calibrated_median_m=cal_median,
        offset=offset,
        n_calibration=len(calib_idx) if calibrate else 0,
        n_scored=len(score_idx),
        taoa_medians=taoa_medians,
    )


# ---------------------------------------------------------------------------
# Fine-tuning


@dataclass(frozen=True)
class FinetuneProtocol:
    """Label budget plus the training recipe scaling for adaptation runs.

    label_budget 0 is the documented degenerate case: no training step
    runs and the pretrained model is scored as-is.  `train` carries the
    pretraining recipe; fine-tuning uses its learning rate scaled by
    learning_rate_scale with the protocol's own epoch count and seed.
    """

    label_budget: int
    epochs: int = 60
    learning_rate_scale: float = 0.1
    train: TrainConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.label_budget < 0:
            raise ConfigurationError("label_budget must be >= 0")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.learning_rate_scale <= 0:
            raise ConfigurationError("learning_rate_scale must be positive")
        if self.train is None:
            object.__setattr__(
                self, "train",
                TrainConfig(learning_rate=2e-3, batch_size=32, epochs=1, seed=0),
            )

    def to_dict(self) -> dict:
        return {
            "label_budget": self.label_budget,
            "epochs": self.epochs,
            "learning_rate_scale": self.learning_rate_scale,
            "learning_rate": self.train.learning_rate,
            "batch_size": self.train.batch_size,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FinetuneResult:
    model: object
    history: nn_core.TrainHistory
    labelled: np.ndarray
    budget: int


@dataclass(frozen=True)
class BudgetCurve:
    """Median test error at each label budget."""

    budgets: np.ndarray
    median_errors: np.ndarray

    def to_dict(self) -> dict:
        return {
            "budgets": self.budgets.tolist(),
            "median_errors": self.median_errors.tolist(),
        }


def _default_parts(dataset, seed: int):
    return split(dataset, SplitSpec(0.7, 0.15, 0.15, seed=seed))


def finetune(pretrained, dataset_b, protocol: FinetuneProtocol,
             parts=None) -> FinetuneResult:
    """Adapt a pretrained variant on budgeted labels from a new dataset.

    All parameters are unfrozen; the input model is never mutated (a deep
    clone is trained).  Labelled points are a uniform seeded sample of the
    training split.
    """
    if parts is None:
        parts = _default_parts(dataset_b, protocol.seed)
    train_idx = np.asarray(parts.train, dtype=np.int64)
    if protocol.label_budget > len(train_idx):
        raise ConfigurationError(
            f"label budget {protocol.label_budget} exceeds the "
            f"{len(train_idx)} available training labels"
        )
    tuned = pretrained.clone()
    if protocol.label_budget == 0 or protocol.epochs == 0:
        return FinetuneResult(
            model=tuned, history=nn_core.TrainHistory(),
            labelled=np.empty(0, dtype=np.int64), budget=protocol.label_budget,
        )
    rng = np.random.default_rng([protocol.seed, 2])
    labelled = np.sort(rng.choice(train_idx, size=protocol.label_budget,
                                  replace=False))
    model, loss_fn = tuned.training_objective(dataset_b)
    base = protocol.train
    cfg = TrainConfig(
        learning_rate=base.learning_rate * protocol.learning_rate_scale,
        batch_size=base.batch_size,
        epochs=protocol.epochs,
        weight_decay=base.weight_decay,
        seed=protocol.seed,
        early_stop_patience=base.early_stop_patience,
        momentum=base.momentum,
    )
    _, history = nn_core.train(model, loss_fn, (labelled, parts.val), cfg)
    return FinetuneResult(model=tuned, history=history, labelled=labelled,
                          budget=protocol.label_budget)


def finetune_curve(pretrained, dataset_b, protocol: FinetuneProtocol,
                   budgets=DEFAULT_BUDGETS, parts=None) -> BudgetCurve:
    """Median-test-error-vs-budget curve; budgets beyond the available
    training labels are dropped."""
    if parts is None:
        parts = _default_parts(dataset_b, protocol.seed)
    kept = [int(b) for b in budgets if b <= len(parts.train)]
    if not kept:
        raise ConfigurationError("no budget fits the available labels")
    medians = []
    for budget in kept:
        res = finetune(pretrained, dataset_b,
                       replace(protocol, label_budget=budget), parts=parts)
        errs = position_errors(res.model, dataset_b, parts.test)
        medians.append(float(np.median(errs)))
    return BudgetCurve(budgets=np.asarray(kept, dtype=np.int64),
                       median_errors=np.asarray(medians))


# ---------------------------------------------------------------------------
# Active learning


_AL_KINDS = ("Random", "EnsembleVariance", "Margin")


@dataclass(frozen=True)
class AlCriterion:
    """Pool-scoring rule: which unlabelled points to acquire next."""

    kind: str
    pool_batch: int
    ensemble_size: int = 3

    def __post_init__(self):
        if self.kind not in _AL_KINDS:
            raise ConfigurationError(f"kind must be one of {_AL_KINDS}")
        if self.pool_batch < 1:
            raise ConfigurationError("pool_batch must be >= 1")
        if self.kind == "EnsembleVariance" and self.ensemble_size < 2:
            raise ConfigurationError("variance needs an ensemble of >= 2")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "pool_batch": self.pool_batch,
                "ensemble_size": self.ensemble_size}


@dataclass(frozen=True)
class AlCurve:
    """Validation loss after each acquisition round."""

    labels: np.ndarray
    val_losses: np.ndarray
    criterion: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "labels": self.labels.tolist(),
            "val_losses": self.val_losses.tolist(),
            "criterion": self.criterion,
            "seed": self.seed,
        }


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _margin_scores(variant, dataset, labelled, pool, seed: int) -> np.ndarray:
    """Uncertainty of a least-squares grid-cell classifier head.

    Cells come from the 1 m spatial grid; the head regresses one-hot cell
    targets, a softmax turns its outputs into probabilities, and the score
    is the negated difference between the two largest ones (small margin =
    high uncertainty = acquired first).
    """
    _, cell_labels = grid_cell_indices(dataset, 1.0)
    n_cells = int(cell_labels.max()) + 1
    feats = variant.features(dataset)
    onehot = np.zeros((len(dataset), n_cells))
    onehot[np.arange(len(dataset)), cell_labels] = 1.0
    head = Mlp.create([feats.shape[1], 32, n_cells], seed=seed)

    def loss_fn(m, idx):
        return mse_loss(forward(m, feats[idx]), onehot[idx])

    cfg = TrainConfig(learning_rate=2e-3, batch_size=32, epochs=40, seed=seed)
    nn_core.train(head, loss_fn, (labelled, labelled), cfg)
    probs = _softmax_rows(forward(head, feats[pool]).values)
    top2 = np.sort(probs, axis=1)[:, -2:]
    return -(top2[:, 1] - top2[:, 0])


def _pool_scores(criterion, variant, spec, dataset, labelled, pool, parts,
                 train_cfg, hidden, seed, round_idx) -> np.ndarray:
    if criterion.kind == "Random":
        rng = np.random.default_rng([seed, 5, round_idx])
        return rng.random(len(pool))
    if criterion.kind == "EnsembleVariance":
        preds = [variant.predict(dataset, pool)]
        for member in range(1, criterion.ensemble_size):
            peer = _build(spec, dataset.radio, hidden)
            cfg = replace(train_cfg, seed=_derive_seed(seed, round_idx, member))
            peer.fit(dataset, labelled, parts.val, cfg)
            preds.append(peer.predict(dataset, pool))
        stack = np.stack(preds)                     # (members, pool, out)
        return stack.var(axis=0).mean(axis=1)
    return _margin_scores(variant, dataset, labelled, pool,
                          _derive_seed(seed, round_idx, 7))


def _build(spec, radio, hidden):
    if isinstance(spec, str):
        return variant_by_name(spec, radio, hidden=hidden)
    return build_variant(spec, radio, hidden=hidden)


def active_learning_run(variant_spec, dataset, criterion: AlCriterion,
                        budget_schedule, seed: int, parts=None,
                        train_cfg: TrainConfig | None = None,
                        hidden=(32, 32)) -> AlCurve:
    """Pool-based acquisition loop.

    Each round trains a fresh model on the labelled set, records the
    validation loss, scores the remaining pool by the criterion, and moves
    the top pool_batch points (clamped to the final budget) into the
    labelled set.  budget_schedule is (initial_random_labels, ...,
    final_budget); the loop stops at the final budget or an empty pool,
    returning the partial curve in the latter case.
    """
    if train_cfg is None:
        train_cfg = TrainConfig(learning_rate=2e-3, batch_size=32, epochs=60,
                                seed=0)
    if parts is None:
        parts = _default_parts(dataset, seed)
    schedule = [int(b) for b in np.atleast_1d(budget_schedule)]
    initial, final = schedule[0], schedule[-1]
    if initial < 1 or final < initial:
        raise ConfigurationError("budget schedule must grow from >= 1")
    train_pool = np.asarray(parts.train, dtype=np.int64)
    if final > len(train_pool):
        raise ConfigurationError(
            f"final budget {final} exceeds the {len(train_pool)}-point pool"
        )
    probe = _build(variant_spec, dataset.radio, hidden)
    if probe.spec.family != "Supervised":
        raise ConfigurationError("active learning needs a supervised variant")
    spec = probe.spec

    rng = np.random.default_rng([seed, 4])
    labelled = np.sort(rng.choice(train_pool, size=initial, replace=False))
    pool = np.setdiff1d(train_pool, labelled)

    labels_curve: list = []
    losses: list = []
    round_idx = 0
    while True:
        variant = _build(spec, dataset.radio, hidden)
        cfg = replace(train_cfg, seed=_derive_seed(seed, round_idx, 0))
        variant.fit(dataset, labelled, parts.val, cfg)
        model, loss_fn = variant.training_objective(dataset)
        labels_curve.append(len(labelled))
        losses.append(float(loss_fn(model, parts.val).item()))
        if len(labelled) >= final or len(pool) == 0:
            break
        scores = _pool_scores(criterion, variant, spec, dataset, labelled,
                              pool, parts, train_cfg, hidden, seed, round_idx)
        k = min(criterion.pool_batch, final - len(labelled), len(pool))
        # ties resolve to the lowest pool index for determinism
        order = np.lexsort((pool, -scores))
        take = pool[order[:k]]
        labelled = np.sort(np.concatenate([labelled, take]))
        pool = np.setdiff1d(pool, take)
        round_idx += 1
    return AlCurve(
        labels=np.asarray(labels_curve, dtype=np.int64),
        val_losses=np.asarray(losses),
        criterion=criterion.kind,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Frozen-backbone transfer


def backbone_transfer_eval(backbone, datasets, head_budget: int,
                           head_spec: HeadSpec | None = None, seed: int = 0,
                           split_spec: SplitSpec | None = None) -> list:
    """Train a small position head per dataset on a frozen latent backbone
    and return one test-split ErrorCdf per dataset."""
    if getattr(backbone, "spec", None) is None or backbone.spec.family not in (
        "Autoencoder", "ChannelChart",
    ):
        raise ConfigurationError("the backbone must expose a latent space")
    if head_budget < 1:
        raise ConfigurationError("head_budget must be >= 1")
    if head_spec is None:
        head_spec = HeadSpec(
            hidden=32,
            train=TrainConfig(learning_rate=2e-3, batch_size=32, epochs=150,
                              seed=seed),
        )
    spec_ = split_spec if split_spec is not None else SplitSpec(
        0.7, 0.15, 0.15, seed=seed
    )
    out: list[ErrorCdf] = []
    for i, ds in enumerate(datasets):
        parts = split(ds, spec_)
        if head_budget > len(parts.train):
            raise ConfigurationError(
                f"head budget {head_budget} exceeds dataset {i}'s "
                f"{len(parts.train)} training labels"
            )
        rng = np.random.default_rng([seed, 6, i])
        labelled = np.sort(rng.choice(parts.train, size=head_budget,
                                      replace=False))
        head = attach_head(backbone, head_spec, (ds, labelled, parts.val))
        out.append(error_cdf(head.predict(ds, parts.test),
                             ds.positions[parts.test]))
    return out


# ---------------------------------------------------------------------------
# Manifests and the run ledger


def _canonical(obj):
    """JSON-safe deep copy: numpy scalars/arrays to plain types, tuples to
    lists, dataclasses and to_dict objects expanded."""
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return _canonical(obj.to_dict())
        return _canonical(dataclasses.asdict(obj))
    if hasattr(obj, "to_dict") and not isinstance(obj, type):
        return _canonical(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ConfigurationError("manifests cannot hold non-finite numbers")
    return obj


def config_hash(config) -> str:
    """Content hash over the canonical sorted-keys JSON form."""
    text = json.dumps(_canonical(config), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def experiment_manifest(**sections) -> dict:
    """Canonical manifest dict with its own config_hash embedded."""
    payload = {k: _canonical(v) for k, v in sections.items()}
    out = dict(payload)
    out["config_hash"] = config_hash(payload)
    return out


def append_record(path, record: dict):
    """Append one canonical JSON line to the run ledger."""
    line = json.dumps(_canonical(record), sort_keys=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def read_records(path):
    """All parseable ledger records plus the count of malformed lines."""
    records = []
    skipped = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                skipped += 1
    return records, skipped
