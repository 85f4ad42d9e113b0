"""Command-line entry point: ``fvp gen-data|pretrain|sample|eval|probe``.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from fvp.config import ConfigError, RunConfig, dump_config, load_config
from fvp.dataset import DemoSetError, generate_synthetic, load_demoset, save_demoset, write_ply
from fvp.probe import run_ablation_matrix, write_report
from fvp.trainer import (
    CheckpointError,
    NumericalError,
    evaluate_prediction,
    load_checkpoint,
    predict_pairs,
    pretrain,
    save_checkpoint,
    write_metrics_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("fvp")


def metrics_path(checkpoint_path: Path) -> Path:
    return checkpoint_path.with_name(checkpoint_path.stem + ".metrics.csv")


def _scene_matches(cfg: RunConfig, n_points: int) -> None:
    if cfg.scene.n_points != n_points:
        raise ValueError(f"shape mismatch: config has scene.n_points={cfg.scene.n_points}, corpus has N={n_points}")


def cmd_gen_data(cfg: RunConfig, args) -> int:
    demos = generate_synthetic(cfg.scene, cfg.corpus_size, cfg.corpus_seed)
    save_demoset(demos, args.out)
    log.info("wrote %d %s trajectories (seed %d) to %s", len(demos), cfg.data.split, cfg.corpus_seed, args.out)
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    demos = load_demoset(_need(args.corpus, "--corpus"))
    _scene_matches(cfg, demos.n_points)
    out = Path(args.out)
    rows = []

    def on_epoch(epoch, loss, wall):
        rows.append((epoch, loss, wall))
        log.info("epoch %d loss %.5f (%.1fs)", epoch, loss, wall)

    ckpt = pretrain(demos, cfg.pretrain_config(), on_epoch=on_epoch)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    write_metrics_csv(metrics_path(out), rows)
    log.info("wrote %s and %s", out, metrics_path(out))
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    ckpt = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    demos = load_demoset(_need(args.corpus, "--corpus"))
    n = cfg.eval.n_pairs if args.n is None else args.n
    if n < 1:
        raise ValueError("--n must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = predict_pairs(ckpt, demos, n, cfg.seed)
    summary = {"rng_seed": cfg.seed, "n_pairs": n, "metric": "chamfer_squared_mean", "pairs": []}
    for j, rec in enumerate(records):
        names = {}
        for role in ("condition", "predicted", "target"):
            name = f"pair_{j:03d}_{'ground_truth' if role == 'target' else role}.ply"
            write_ply(out / name, rec[role])
            names[role] = name
        summary["pairs"].append({
            "trajectory": rec["trajectory"], "frame": rec["frame"], "files": names,
            "predicted_chamfer": rec["predicted_chamfer"], "copy_chamfer": rec["copy_chamfer"],
        })
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d triples to %s", n, out)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    demos = load_demoset(_need(args.corpus, "--corpus"))
    n = cfg.eval.n_pairs if args.n is None else args.n
    summary = evaluate_prediction(ckpt, demos, n, cfg.seed)
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    log.info("predicted %.6f vs copy %.6f", summary["predicted_chamfer_mean"], summary["copy_chamfer_mean"])
    return EXIT_OK


def cmd_probe(cfg: RunConfig, args) -> int:
    demos = load_demoset(_need(args.corpus, "--corpus"))
    _scene_matches(cfg, demos.n_points)
    source = args.checkpoint or "fresh"
    checkpoint = None if source == "fresh" else load_checkpoint(source)
    report = run_ablation_matrix(demos, cfg.scene, cfg.pretrain_config(), cfg.probe_config(),
                                 checkpoint=checkpoint, log=log.info)
    report["checkpoint"] = source
    report["config"] = json.loads(dump_config(cfg))
    csv_path, json_path = write_report(report, args.out)
    log.info("wrote %s and %s", csv_path, json_path)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "probe": cmd_probe,
}


def _need(value, flag):
    if value is None:
        raise ValueError(f"{flag} is required for this command")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fvp", description="Next-frame diffusion pre-training for point-cloud encoders.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="run configuration (JSON); defaults apply when omitted")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config leaf by dotted path, e.g. pretrain.epochs=5")
    parser.add_argument("--out", help="output file or directory")
    parser.add_argument("--corpus", help="demo corpus directory")
    parser.add_argument("--checkpoint", help="checkpoint file; probe also accepts 'fresh'")
    parser.add_argument("--n", type=int, help="number of evaluation pairs")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)  # keeps floating-point reductions identical across reruns
    try:
        if args.command in ("gen-data", "pretrain", "sample", "probe") and not args.out:
            raise ValueError(f"--out is required for {args.command}")
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, DemoSetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
