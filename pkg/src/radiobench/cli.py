"""Command-line front end: simulate scenes, train localisers, run shift
protocols, slice loss landscapes, and aggregate run ledgers into tables.

All plotting is delegated: commands emit CSV with documented headers and
canonical JSON, so outputs stay diffable.  Every command writes a
manifest.json whose config_hash is content-addressed over the resolved
configuration; rerunning with an equal hash rewrites byte-identical result
files regardless of --threads.

Exit codes: 0 success, 2 configuration or usage problems, 3 numeric
failures.  Errors print one machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .channel_sim import (
    RadioConfig,
    SamplingConfig,
    SceneConfig,
    Scatterer,
    ShiftSpec,
    apply_shift,
    simulate_dataset,
)
from .dataset_store import SplitSpec, load, save, split
from .errors import EstimationError, NumericError, RadioBenchError
from .errors import ConfigurationError
from .geometry import LocatorPose
from .localiser_zoo import (
    load_variant,
    position_errors,
    save_variant,
    variant_by_name,
)
from .metrics import chart_score, loss_landscape, relative_sharpness, sharpness
from . import nn_core
from .nn_core import TrainConfig
from .shift_harness import (
    FinetuneProtocol,
    append_record,
    backbone_transfer_eval,
    config_hash,
    finetune,
    read_records,
    zero_shot_eval,
)

LEDGER_NAME = "runs.jsonl"


# ---------------------------------------------------------------------------
# Manifests and small I/O helpers


@dataclass(frozen=True)
class RunManifest:
    """Provenance record written next to every command's outputs."""

    command: str
    config_path: str | None
    config_hash: str
    seed: int
    version: str
    out_dir: str

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "out_dir": self.out_dir,
        }

    def write(self, path) -> None:
        _write_json(path, self.to_dict())


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _print_error(exc: BaseException) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from e


def _require(config: dict, key: str, where: str):
    if key not in config:
        raise ConfigurationError(f"{where} is missing the {key!r} field")
    return config[key]


def _out_dir(args) -> str:
    out = args.out or os.environ.get("RADIOBENCH_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def _write_manifest(args, command: str, config_path, resolved: dict,
                    seed: int, out: str) -> str:
    h = config_hash(resolved)
    RunManifest(
        command=command,
        config_path=None if config_path is None else str(config_path),
        config_hash=h,
        seed=int(seed),
        version=__version__,
        out_dir=str(out),
    ).write(os.path.join(out, "manifest.json"))
    return h


# ---------------------------------------------------------------------------
# simulate


def _ring_scene(cfg: dict) -> SceneConfig:
    """Locators on a ring near the walls of a square room, facing centre."""
    n = int(cfg.get("n_locators", 4))
    size = float(cfg.get("size", 10.0))
    height = float(cfg.get("height", 3.0))
    z_levels = tuple(cfg.get("z_levels", (2.5, 2.0)))
    if n < 1:
        raise ConfigurationError("n_locators must be >= 1")
    poses = []
    for m in range(n):
        ang = 2.0 * math.pi * m / n
        z = z_levels[m % len(z_levels)]
        p = np.array([size / 2 + 0.45 * size * math.cos(ang),
                      size / 2 + 0.45 * size * math.sin(ang), z])
        yaw = math.atan2(size / 2 - p[1], size / 2 - p[0])
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        poses.append(LocatorPose(position=p, orientation=rot))
    scatterers = tuple(
        Scatterer(np.asarray(s["position"], dtype=np.float64), s["reflectivity"])
        for s in cfg.get("scatterers", [])
    )
    return SceneConfig(
        locators=tuple(poses),
        bounds=(np.zeros(3), np.array([size, size, height])),
        scatterers=scatterers,
        pathloss_exponent=float(cfg.get("pathloss_exponent", 2.0)),
        seed=int(cfg.get("seed", 0)),
    )


def _scene_from_config(cfg: dict) -> SceneConfig:
    if "ring" in cfg:
        return _ring_scene(cfg["ring"])
    return SceneConfig.from_dict(cfg)


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    config = _load_json(args.config)
    radio_cfg = config.get("radio")
    radio = (RadioConfig.desk_default() if radio_cfg is None
             else RadioConfig.from_dict(radio_cfg))
    scene = _scene_from_config(_require(config, "scene", "simulate config"))
    if "shift" in config:
        scene = apply_shift(scene, ShiftSpec.from_dict(config["shift"]))
    sampling = SamplingConfig.from_dict(
        _require(config, "sampling", "simulate config"))
    n_samples = int(_require(config, "n_samples", "simulate config"))
    noise_std = float(config.get("noise_std", 0.0))
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    name = str(config.get("name", "synthetic"))

    resolved = {
        "radio": radio.to_dict(),
        "scene": scene.to_dict(),
        "sampling": sampling.to_dict(),
        "n_samples": n_samples,
        "noise_std": noise_std,
        "seed": seed,
        "name": name,
    }
    dataset = simulate_dataset(scene, radio, sampling, n_samples, noise_std,
                               seed, threads=args.threads, name=name)
    path = os.path.join(out, "dataset.rdb")
    save(dataset, path)
    _write_manifest(args, "simulate", args.config, resolved, seed, out)
    grid_cells = len(np.unique(dataset.positions, axis=0))
    print(f"wrote {path}: {len(dataset)} samples over {grid_cells} grid points")
    return 0


# ---------------------------------------------------------------------------
# train


def _history_rows(history: nn_core.TrainHistory, start_epoch: int = 0):
    rows = []
    for i, t in enumerate(history.train):
        v = history.val[i] if i < len(history.val) else ""
        rows.append((start_epoch + i, _fmt(t), "" if v == "" else _fmt(v)))
    return rows


def _write_history_csv(path, rows) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{t},{v}" for e, t, v in rows]
    _write_text(path, "\n".join(lines) + "\n")


def _read_history_csv(path):
    rows = []
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            e, t, v = line.rstrip("\n").split(",")
            rows.append((int(e), t, v))
    return rows


def cmd_train(args) -> int:
    out = _out_dir(args)
    config = _load_json(args.config)
    name = str(_require(config, "variant", "train config"))
    ds_path = _require(config, "dataset", "train config")
    dataset = load(ds_path)
    split_cfg = SplitSpec(**config.get(
        "split", {"train_frac": 0.7, "val_frac": 0.15, "test_frac": 0.15}))
    train_dict = dict(_require(config, "train", "train config"))
    if args.seed is not None:
        train_dict["seed"] = args.seed
    cfg = TrainConfig(**train_dict)
    hidden = tuple(config.get("hidden", (64, 64)))
    resume = config.get("resume")

    resolved = {
        "variant": name,
        "dataset": str(ds_path),
        "split": {"train_frac": split_cfg.train_frac,
                  "val_frac": split_cfg.val_frac,
                  "test_frac": split_cfg.test_frac,
                  "mode": split_cfg.mode, "seed": split_cfg.seed},
        "train": train_dict,
        "hidden": list(hidden),
        "latent_dim": int(config.get("latent_dim", 32)),
        "chart_dim": int(config.get("chart_dim", 2)),
        "resume": None if resume is None else str(resume),
    }
    parts = split(dataset, split_cfg)

    prev_rows = []
    if resume is not None:
        variant = load_variant(resume)
        if variant.name != name:
            raise ConfigurationError(
                f"checkpoint holds {variant.name}, config asks for {name}")
        model, loss_fn = variant.training_objective(dataset)
        _, history = nn_core.train(model, loss_fn, (parts.train, parts.val), cfg)
        prev_csv = os.path.join(os.path.dirname(resume) or ".", "history.csv")
        if os.path.exists(prev_csv):
            prev_rows = _read_history_csv(prev_csv)
    else:
        variant = variant_by_name(name, dataset.radio, hidden=hidden,
                                  latent_dim=resolved["latent_dim"],
                                  chart_dim=resolved["chart_dim"])
        history = variant.fit(dataset, parts.train, parts.val, cfg)

    start = prev_rows[-1][0] + 1 if prev_rows else 0
    rows = prev_rows + _history_rows(history, start_epoch=start)
    save_variant(variant, os.path.join(out, "model.ckpt"))
    _write_history_csv(os.path.join(out, "history.csv"), rows)
    _write_manifest(args, "train", args.config, resolved, cfg.seed, out)
    final_t = history.train[-1] if history.train else float("nan")
    final_v = history.val[-1] if history.val else float("nan")
    print(f"trained {name}: final train loss {final_t:.6g}, "
          f"val loss {final_v:.6g}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _eval_protocol(args) -> dict:
    if args.zero_shot:
        return {"kind": "zero_shot", "calibrate": not args.no_calibrate}
    if args.finetune is not None:
        return {"kind": "finetune", "label_budget": int(args.finetune),
                "epochs": int(args.budget_epochs),
                "learning_rate_scale": float(args.lr_scale)}
    if args.head is not None:
        return {"kind": "head", "head_budget": int(args.head)}
    return {"kind": "chart", "k": int(args.k)}


def _eval_zero_shot(model, dataset, out, h, calibrate: bool) -> str:
    report = zero_shot_eval(model, dataset, calibrate=calibrate)
    payload = report.to_dict()
    payload["config_hash"] = h
    _write_json(os.path.join(out, "eval_zero_shot.json"), payload)
    cal = report.calibrated_median_m
    lines = ["variant,dataset,raw_median_m,calibrated_median_m,"
             "n_calibration,n_scored",
             f"{report.variant_name},{report.dataset_name},"
             f"{_fmt(report.raw_median_m)},"
             f"{'' if cal is None else _fmt(cal)},"
             f"{report.n_calibration},{report.n_scored}"]
    _write_text(os.path.join(out, "zero_shot.csv"), "\n".join(lines) + "\n")
    append_record(os.path.join(out, LEDGER_NAME), {
        "kind": "zero_shot", "config_hash": h,
        "variant": report.variant_name, "dataset": report.dataset_name,
        "median_m": report.raw_median_m if cal is None else cal,
        "raw_median_m": report.raw_median_m,
    })
    return f"median {report.raw_median_m:.4g} m raw"


def _eval_finetune(model, dataset, out, h, proto: dict, seed: int) -> str:
    parts = split(dataset, SplitSpec(0.7, 0.15, 0.15, seed=seed))
    protocol = FinetuneProtocol(label_budget=proto["label_budget"],
                                epochs=proto["epochs"],
                                learning_rate_scale=proto["learning_rate_scale"],
                                seed=seed)
    before = float(np.median(position_errors(model, dataset, parts.test)))
    res = finetune(model, dataset, protocol, parts=parts)
    after = float(np.median(position_errors(res.model, dataset, parts.test)))
    _write_json(os.path.join(out, "eval_finetune.json"), {
        "variant": model.name, "dataset": dataset.name,
        "label_budget": protocol.label_budget, "epochs": protocol.epochs,
        "median_before_m": before, "median_after_m": after,
        "config_hash": h,
    })
    _write_history_csv(os.path.join(out, "finetune_history.csv"),
                       _history_rows(res.history))
    append_record(os.path.join(out, LEDGER_NAME), {
        "kind": "finetune", "config_hash": h, "variant": model.name,
        "dataset": dataset.name, "budget": protocol.label_budget,
        "median_m": after,
    })
    return f"median {before:.4g} -> {after:.4g} m at budget {protocol.label_budget}"


def _eval_head(model, dataset, out, h, head_budget: int, seed: int) -> str:
    cdf = backbone_transfer_eval(model, [dataset], head_budget, seed=seed)[0]
    payload = cdf.to_dict()
    payload.update({"variant": model.name, "dataset": dataset.name,
                    "head_budget": head_budget, "config_hash": h})
    _write_json(os.path.join(out, "eval_head.json"), payload)
    lines = ["error_m"] + [_fmt(e) for e in cdf.errors]
    _write_text(os.path.join(out, "head_errors.csv"), "\n".join(lines) + "\n")
    append_record(os.path.join(out, LEDGER_NAME), {
        "kind": "head", "config_hash": h, "variant": model.name,
        "dataset": dataset.name, "budget": head_budget,
        "median_m": cdf.median,
    })
    return f"head median {cdf.median:.4g} m at budget {head_budget}"


def _eval_chart(model, dataset, out, h, k: int) -> str:
    if model.spec.family != "ChannelChart":
        raise ConfigurationError(
            f"--chart needs a chart variant, got {model.name}")
    points = model.predict(dataset)
    score = chart_score(dataset.positions, points, k=k)
    payload = score.to_dict()
    payload.update({"variant": model.name, "dataset": dataset.name,
                    "config_hash": h})
    _write_json(os.path.join(out, "eval_chart.json"), payload)
    dims = points.shape[1]
    header = ",".join([f"chart_{ax}" for ax in "xyz"[:dims]]
                      + ["pos_x", "pos_y", "pos_z"])
    lines = [header]
    for p, q in zip(points, dataset.positions):
        lines.append(",".join(_fmt(v) for v in (*p, *q)))
    _write_text(os.path.join(out, "chart_points.csv"), "\n".join(lines) + "\n")
    append_record(os.path.join(out, LEDGER_NAME), {
        "kind": "chart", "config_hash": h, "variant": model.name,
        "dataset": dataset.name, "continuity": score.continuity,
        "trustworthiness": score.trustworthiness, "k": k,
    })
    return (f"continuity {score.continuity:.3f}, "
            f"trustworthiness {score.trustworthiness:.3f}")


def cmd_eval(args) -> int:
    out = _out_dir(args)
    model = load_variant(args.model)
    dataset = load(args.dataset)
    seed = args.seed if args.seed is not None else 0
    proto = _eval_protocol(args)
    resolved = {"model": str(args.model), "dataset": str(args.dataset),
                "protocol": proto, "seed": seed}
    h = _write_manifest(args, "eval", None, resolved, seed, out)
    if proto["kind"] == "zero_shot":
        summary = _eval_zero_shot(model, dataset, out, h, proto["calibrate"])
    elif proto["kind"] == "finetune":
        summary = _eval_finetune(model, dataset, out, h, proto, seed)
    elif proto["kind"] == "head":
        summary = _eval_head(model, dataset, out, h, proto["head_budget"], seed)
    else:
        summary = _eval_chart(model, dataset, out, h, proto["k"])
    print(f"eval {proto['kind']} on {dataset.name}: {summary}")
    return 0


# ---------------------------------------------------------------------------
# landscape


def cmd_landscape(args) -> int:
    out = _out_dir(args)
    variant = load_variant(args.model)
    dataset = load(args.dataset)
    seed = args.seed if args.seed is not None else 0
    resolved = {"model": str(args.model), "dataset": str(args.dataset),
                "grid_n": int(args.grid_n), "seed": seed}
    h = _write_manifest(args, "landscape", None, resolved, seed, out)
    model, loss_fn = variant.training_objective(dataset)
    land = loss_landscape(model, loss_fn, np.arange(len(dataset)),
                          grid_n=args.grid_n, seed=seed)
    _write_text(os.path.join(out, "landscape.csv"), land.to_csv())
    _write_json(os.path.join(out, "landscape.json"), {
        "variant": variant.name, "dataset": dataset.name,
        "grid_n": int(args.grid_n), "seed": seed,
        "center_loss": land.center_loss,
        "sharpness": sharpness(land),
        "relative_sharpness": relative_sharpness(land),
        "config_hash": h,
    })
    print(f"landscape {variant.name} on {dataset.name}: "
          f"centre loss {land.center_loss:.6g}")
    return 0


# ---------------------------------------------------------------------------
# report


def _dedupe(records: list) -> list:
    seen = set()
    out = []
    for r in records:
        h = r.get("config_hash")
        if h is not None:
            if h in seen:
                continue
            seen.add(h)
        out.append(r)
    return out


def _zero_shot_table(records: list) -> str:
    rows = [r for r in records if r.get("kind") == "zero_shot"]
    datasets = sorted({r["dataset"] for r in rows})
    lines = [",".join(["variant"] + datasets)]
    by_cell = {(r["variant"], r["dataset"]): r["median_m"] for r in rows}
    for v in sorted({r["variant"] for r in rows}):
        cells = [by_cell.get((v, d)) for d in datasets]
        lines.append(v + "," + ",".join(
            "" if c is None else _fmt(c) for c in cells))
    return "\n".join(lines) + "\n"


def _budget_table(records: list) -> str:
    rows = [r for r in records if r.get("kind") in ("finetune", "head")]
    lines = ["kind,variant,dataset,budget,median_m"]
    for r in sorted(rows, key=lambda r: (r["kind"], r["variant"],
                                         r["dataset"], r["budget"])):
        lines.append(f"{r['kind']},{r['variant']},{r['dataset']},"
                     f"{r['budget']},{_fmt(r['median_m'])}")
    return "\n".join(lines) + "\n"


def _al_table(records: list) -> str:
    rows = [r for r in records if r.get("kind") == "active_learning"]
    lines = ["criterion,seed,labels,val_loss"]
    for r in rows:
        for n, loss in zip(r["labels"], r["val_losses"]):
            lines.append(f"{r['criterion']},{r['seed']},{n},{_fmt(loss)}")
    return "\n".join(lines) + "\n"


def _wasserstein_table(records: list) -> str:
    rows = [r for r in records if r.get("kind") == "wasserstein"]
    if not rows:
        return ",\n"
    r = rows[0]
    names = list(r["names"])
    lines = ["," + ",".join(names)]
    for name, row in zip(names, r["values"]):
        lines.append(name + "," + ",".join(_fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    out = _out_dir(args)
    ledger = os.path.join(args.run_dir, LEDGER_NAME)
    if os.path.exists(ledger):
        records, skipped = read_records(ledger)
    else:
        records, skipped = [], 0
    if skipped:
        print(json.dumps({"warning":
                          f"skipped {skipped} malformed ledger line(s)"},
                         sort_keys=True), file=sys.stderr)
    records = _dedupe(records)
    resolved = {"run_dir": str(args.run_dir)}
    _write_manifest(args, "report", None, resolved,
                    args.seed if args.seed is not None else 0, out)
    tables = {
        "zero_shot_matrix.csv": _zero_shot_table(records),
        "budget_curves.csv": _budget_table(records),
        "al_curves.csv": _al_table(records),
        "wasserstein_matrix.csv": _wasserstein_table(records),
    }
    for fname, text in tables.items():
        _write_text(os.path.join(out, fname), text)
    print(f"report over {len(records)} ledger records -> {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _print_error(ConfigurationError(message))
        raise SystemExit(2)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radiobench",
                description="Synthetic RF localisation benchmark toolkit")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; never changes results")
    p.add_argument("--out", default=None,
                   help="output directory (default: $RADIOBENCH_OUT or .)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="build a scene, write a .rdb dataset")
    s.add_argument("config", help="JSON simulation config")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one variant, write checkpoint")
    t.add_argument("config", help="JSON training config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run a shift protocol on a checkpoint")
    e.add_argument("model", help="variant checkpoint path")
    e.add_argument("dataset", help=".rdb dataset path")
    g = e.add_mutually_exclusive_group(required=True)
    g.add_argument("--zero-shot", action="store_true")
    g.add_argument("--finetune", type=int, metavar="N",
                   help="finetune with a budget of N labels")
    g.add_argument("--head", type=int, metavar="N",
                   help="train a position head on N labels")
    g.add_argument("--chart", action="store_true",
                   help="score the chart and dump its point cloud")
    e.add_argument("--no-calibrate", action="store_true")
    e.add_argument("--budget-epochs", type=int, default=60)
    e.add_argument("--lr-scale", type=float, default=0.1)
    e.add_argument("--k", type=int, default=10,
                   help="neighbourhood size for chart scores")
    e.set_defaults(func=cmd_eval)

    l = sub.add_parser("landscape", help="loss-landscape grid CSV")
    l.add_argument("model", help="variant checkpoint path")
    l.add_argument("dataset", help=".rdb dataset path")
    l.add_argument("--grid-n", type=int, default=41)
    l.set_defaults(func=cmd_landscape)

    r = sub.add_parser("report", help="aggregate a run ledger into tables")
    r.add_argument("run_dir", help="directory holding runs.jsonl")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (NumericError, EstimationError) as e:
        _print_error(e)
        return 3
    except (RadioBenchError, OSError) as e:
        _print_error(e)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
