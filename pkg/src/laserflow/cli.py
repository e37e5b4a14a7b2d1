"""Command-line experiment runner.

Subcommands: ``simulate``, ``train``, ``eval``, ``ablate``, ``calibrate`` and
``plot``. Configuration is one JSON document; ``--seed`` overrides its seed.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from laserflow import io
from laserflow.losses import LossConfig
from laserflow.metrics import RecallUnreachableError
from laserflow.model import ModelConfig
from laserflow.simulator import SimulatorConfig, generate_dataset
from laserflow.training import (
    DEFAULT_ABLATIONS,
    EvalProtocol,
    NonFiniteLossError,
    TrainConfig,
    evaluate,
    evaluate_detections,
    frame_ground_truth,
    load_net,
    oracle_detections,
    run_ablation,
    summarize_ablation,
    train,
)

log = logging.getLogger("laserflow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: EvalProtocol = field(default_factory=EvalProtocol)
    paths: dict = field(default_factory=dict)
    ablation_variants: tuple[str, ...] = DEFAULT_ABLATIONS
    ablation_seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self) -> None:
        m, s = self.model, self.simulator
        if (m.num_sweeps, m.horizon, m.num_classes) != (s.num_sweeps, s.horizon, s.num_classes):
            raise ConfigError("model and simulator disagree on sweeps, horizon or class count")

    def to_dict(self) -> dict:
        return {
            "schema": "experiment_config", "version": io.VERSION, "seed": self.seed,
            "simulator": self.simulator.to_dict(), "model": self.model.to_dict(), "loss": asdict(self.loss),
            "train": asdict(self.train), "protocol": self.protocol.to_dict(), "paths": self.paths,
            "ablation": {"variants": list(self.ablation_variants), "seeds": list(self.ablation_seeds)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "seed" not in d:
            raise ConfigError("config must set a seed")
        try:
            abl = d.get("ablation", {})
            return cls(
                seed=int(d["seed"]),
                simulator=SimulatorConfig.from_dict(d.get("simulator", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                loss=LossConfig(**d.get("loss", {})),
                train=TrainConfig(**d.get("train", {})),
                protocol=EvalProtocol.from_dict(d.get("protocol", {})),
                paths=dict(d.get("paths", {})),
                ablation_variants=tuple(abl.get("variants", DEFAULT_ABLATIONS)),
                ablation_seeds=tuple(abl.get("seeds", (0, 1, 2))),
            )
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


def load_config(path: str | None, seed: int | None) -> ExperimentConfig:
    if path is None:
        doc: dict = {"seed": 0}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
    if seed is not None:
        doc["seed"] = seed
    return ExperimentConfig.from_dict(doc)


def _out_dir(args, cfg: ExperimentConfig, key: str) -> Path:
    out = args.out or cfg.paths.get(key)
    if not out:
        raise ConfigError("an output directory is required (--out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_path(args, cfg: ExperimentConfig, key: str = "dataset") -> Path:
    path = getattr(args, key, None) or cfg.paths.get(key)
    if not path:
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return Path(path)


def _write_rows(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["variant"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: ExperimentConfig, out_dir: Path) -> Path:
    seqs = generate_dataset(cfg.simulator, cfg.seed)
    io.save_dataset(seqs, out_dir, {"simulator": cfg.simulator.to_dict(), "seed": cfg.seed})
    log.info("wrote %d scenes to %s", len(seqs), out_dir)
    return out_dir


def cmd_train(cfg: ExperimentConfig, dataset: Path, out_dir: Path):
    seqs, _ = io.load_dataset(dataset)

    def progress(row):
        if row["iteration"] % 100 == 0:
            log.info("iter %d L_cls %.4f L_reg %.4f alpha %.4g", row["iteration"], row["L_cls"], row["L_reg"],
                     row["alpha"])

    io.write_json(out_dir / "config.json", cfg.to_dict())
    tcfg = replace(cfg.train, seed=cfg.seed)
    return train(cfg.model, seqs, tcfg, cfg.loss, out_dir, progress)


def _calibration_outputs(metrics: dict, out_dir: Path) -> None:
    from laserflow.plotting import plot_calibration, write_calibration_csv

    curves = metrics.get("calibration", {})
    write_calibration_csv(curves, out_dir / "calibration.csv")
    plot_calibration(curves, out_dir / "calibration.svg")


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path | None, dataset: Path, out_dir: Path,
             oracle: bool = False) -> dict:
    seqs, _ = io.load_dataset(dataset)
    protocol = cfg.protocol
    if oracle:
        gts, ignore = zip(*[frame_ground_truth(s, protocol) for s in seqs]) if seqs else ((), ())
        dets = [oracle_detections(g) for g in gts]
        metrics = evaluate_detections(dets, list(gts), list(ignore), protocol)
    else:
        if checkpoint is None:
            raise ConfigError("--checkpoint is required unless --oracle is given")
        net = load_net(checkpoint)
        metrics, dets = evaluate(net, seqs, protocol)
    timing = {"frames_per_second": metrics.pop("frames_per_second", None)}
    doc = {"schema": "metrics", "version": io.VERSION, "protocol": protocol.to_dict(), **metrics}
    io.write_json(out_dir / "metrics.json", doc)
    io.write_json(out_dir / "timing.json", {"schema": "timing", "version": io.VERSION, **timing})
    io.save_detections(dets, out_dir / "detections.json")
    row = {f"AP@{k}": v for k, v in metrics["ap"].items()}
    for k, v in (metrics["l2_cm"] or {}).items():
        row[f"L2@{k}s_cm"] = v
    _write_rows([row], out_dir / "metrics.csv")
    _calibration_outputs(metrics, out_dir)
    if metrics["l2_error"]:
        raise RecallUnreachableError(protocol.recall_point, _achievable(metrics["l2_error"]))
    return doc


def _achievable(message: str) -> float:
    try:
        return float(message.rsplit(" ", 1)[-1])
    except ValueError:
        return float("nan")


def cmd_ablate(cfg: ExperimentConfig, dataset: Path, val_dataset: Path, out_dir: Path) -> list[dict]:
    train_seqs, _ = io.load_dataset(dataset)
    val_seqs, _ = io.load_dataset(val_dataset)
    rows = run_ablation(train_seqs, val_seqs, cfg.model, cfg.loss, replace(cfg.train, seed=cfg.seed),
                        cfg.ablation_variants, cfg.ablation_seeds, cfg.protocol, log.info)
    _write_rows(rows, out_dir / "ablation_runs.csv")
    summary, flagged = summarize_ablation(rows, f"{max(cfg.protocol.l2_times):g}")
    _write_rows(summary, out_dir / "ablation.csv")
    io.write_json(out_dir / "ablation_report.json", {
        "schema": "ablation_report", "version": io.VERSION, "summary": summary, "ordering_violations": flagged,
        "ordering_holds": not flagged,
    })
    if flagged:
        log.warning("proposed model is not best at the far horizon; beaten by %s", ", ".join(flagged))
    return summary


def cmd_calibrate(cfg: ExperimentConfig, checkpoint: Path, dataset: Path, out_dir: Path) -> dict:
    seqs, _ = io.load_dataset(dataset)
    net = load_net(checkpoint)
    metrics, _ = evaluate(net, seqs, cfg.protocol)
    if metrics["l2_error"]:
        raise RecallUnreachableError(cfg.protocol.recall_point, _achievable(metrics["l2_error"]))
    _calibration_outputs(metrics, out_dir)
    return metrics["calibration"]


def cmd_plot(inputs: list[Path], out_dir: Path) -> list[Path]:
    from laserflow.plotting import plot_calibration, plot_loss, read_calibration_csv

    written = []
    for path in inputs:
        target = out_dir / (path.stem + ".svg")
        with open(path) as fh:
            header = fh.readline()
        if header.startswith("iteration"):
            plot_loss(path, target)
        elif header.startswith("curve"):
            plot_calibration(read_calibration_csv(path), target)
        else:
            raise ConfigError(f"{path}: not a loss or calibration CSV")
        written.append(target)
    return written


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laserflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("simulate", help="generate a synthetic dataset"))
    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--dataset")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="replay ground truth as detections")
    p = common(sub.add_parser("ablate", help="train and compare ablation variants"))
    p.add_argument("--dataset")
    p.add_argument("--val-dataset", dest="val_dataset")
    p = common(sub.add_parser("calibrate", help="calibration curves of a checkpoint"))
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p = common(sub.add_parser("plot", help="render loss or calibration CSVs as SVG"))
    p.add_argument("inputs", nargs="+")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "simulate":
            cmd_simulate(cfg, _out_dir(args, cfg, "dataset"))
        elif args.command == "train":
            cmd_train(cfg, _dataset_path(args, cfg), _out_dir(args, cfg, "train_out"))
        elif args.command == "eval":
            ckpt = Path(args.checkpoint) if args.checkpoint else None
            cmd_eval(cfg, ckpt, _dataset_path(args, cfg), _out_dir(args, cfg, "eval_out"), args.oracle)
        elif args.command == "ablate":
            cmd_ablate(cfg, _dataset_path(args, cfg), _dataset_path(args, cfg, "val_dataset"),
                       _out_dir(args, cfg, "ablate_out"))
        elif args.command == "calibrate":
            if not args.checkpoint:
                raise ConfigError("--checkpoint is required")
            cmd_calibrate(cfg, Path(args.checkpoint), _dataset_path(args, cfg), _out_dir(args, cfg, "eval_out"))
        elif args.command == "plot":
            cmd_plot([Path(p) for p in args.inputs], _out_dir(args, cfg, "plot_out"))
    except (ConfigError, io.FormatError, FileNotFoundError) as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except (NonFiniteLossError, RecallUnreachableError, FloatingPointError) as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
