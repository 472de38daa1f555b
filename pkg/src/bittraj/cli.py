"""``bittraj`` command line: tokenizer-train, train, eval, sweep, export, bench, report."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bitlinear import QuantMode
from .checkpoint import CheckpointError, ShapeMismatch, load_export, load_model, save_export, save_model
from .config import ConfigError, RunConfig, load_config
from .deploy import bench as run_bench
from .deploy import export_model, memory_report
from .metrics import RESULT_COLUMNS, SceneResult, aggregate
from .model import SequenceTooLong, build_model
from .pipeline import evaluate_scenes, examples, model_sampler, split_windows, train_tokenizer
from .tokenizer import BpeVocab
from .trainer import (
    TrainingDiverged,
    TrainLog,
    lr_sweep,
    plateau_length,
    smoothed_final,
    train,
    write_sweep_csv,
)

OUT_ENV = "BITTRAJ_OUT"
EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_SHAPE, EXIT_OTHER = 0, 2, 3, 4, 5, 6
CONFIG_NAME = "config.resolved"
VOCAB_NAME = "vocab.txt"
MODEL_NAME = "model.ckpt"
LOG_NAME = "train_log.csv"
EXPORT_NAME = "model.export"


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist")
    return p


def _out_dir(args) -> Path:
    root = args.out or os.environ.get(OUT_ENV) or "bittraj-out"
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag in ("seed", "mode", "scene"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{flag}={v}")
    cfg_path = _require(args.config) if args.config else None
    return load_config(cfg_path, overrides)


def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")


def _vocab(args, cfg: RunConfig) -> BpeVocab:
    vocab = BpeVocab.load(_require(args.vocab))
    if vocab.size > cfg.vocab_size:
        raise ShapeMismatch(f"vocabulary has {vocab.size} tokens but vocab_size = {cfg.vocab_size}")
    return vocab


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_tokenizer_train(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args)
    train_w, _ = split_windows(cfg)
    vocab = train_tokenizer(train_w, cfg)
    vocab.save(out / VOCAB_NAME)
    _write_config(cfg, out)
    return {"vocab": str(out / VOCAB_NAME), "size": vocab.size, "merges": len(vocab.merges)}


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args)
    vocab = _vocab(args, cfg)
    train_w, _ = split_windows(cfg)
    data = examples(vocab, train_w, cfg)
    model = build_model(cfg.model_config(), cfg.mode, seed=cfg.seed, **cfg.layer_kwargs())
    model, log = train(model, data, cfg.train_config())
    save_model(model, out / MODEL_NAME, {"seed": cfg.seed})
    log.save(out / LOG_NAME)
    _write_config(cfg, out)
    return {"checkpoint": str(out / MODEL_NAME), "log": str(out / LOG_NAME), "steps": len(log.steps),
            "final_loss": log.steps[-1]["loss"]}


def _result_rows(results: list[SceneResult], baseline: dict | None) -> list[dict]:
    method = {r.scene: (r.ade, r.fde) for r in results}
    base = None
    if baseline is not None:
        base = {s: baseline[s] for s in method if s in baseline}
        if set(base) != set(method):
            raise ShapeMismatch("baseline metrics do not cover the evaluated scenes")
    agg = aggregate(method, base)
    variant = results[0].variant
    extra = {r.scene: r for r in results}
    rows = []
    for row in agg:
        r = extra.get(row.scene)
        fr = r.failure_rate if r else float(np.mean([x.failure_rate for x in results]))
        k = r.samples if r else results[0].samples
        rows.append({"scene": row.scene, "variant": variant, "ADE": row.ade, "FDE": row.fde,
                     "failure_rate": fr, "samples": k, "dADE": row.delta_ade, "dFDE": row.delta_fde})
    return rows


def _read_baseline(path) -> dict:
    out = {}
    with open(_require(path), newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            if row["scene"] != "AVG":
                out[row["scene"]] = (float(row["ADE"]), float(row["FDE"]))
    return out


def write_metrics_csv(rows: list[dict], path) -> None:
    def fmt(v):
        return "" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_COLUMNS + ("dADE", "dFDE"))
        for r in rows:
            w.writerow([fmt(r[c]) for c in RESULT_COLUMNS + ("dADE", "dFDE")])


def cmd_eval(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args)
    vocab = _vocab(args, cfg)
    model, header = load_model(_require(args.checkpoint))
    if model.config.vocab_size < vocab.size:
        raise ShapeMismatch("checkpoint vocabulary is smaller than the tokenizer")
    _, test = split_windows(cfg)
    results = evaluate_scenes(model_sampler(model, vocab, cfg), test, header["mode"], cfg.max_eval_windows)
    baseline = _read_baseline(args.baseline) if args.baseline else None
    rows = _result_rows(results, baseline)
    write_metrics_csv(rows, out / "metrics.csv")
    _write_config(cfg, out)
    avg = rows[-1]
    return {"metrics": str(out / "metrics.csv"), "ADE": avg["ADE"], "FDE": avg["FDE"]}


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args)
    vocab = _vocab(args, cfg)
    train_w, _ = split_windows(cfg)
    data = examples(vocab, train_w, cfg)
    lrs = [float(x) for x in args.lrs.split(",")]
    modes = [QuantMode.parse(m) for m in args.modes.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = lr_sweep(data, cfg.model_config(), cfg.train_config(), lrs, modes, seeds, **cfg.layer_kwargs())
    write_sweep_csv(rows, out / "sweep.csv")
    _write_config(cfg, out)
    return {"sweep": str(out / "sweep.csv"), "runs": len(rows), "diverged": sum(r.diverged for r in rows)}


def cmd_export(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args)
    model, header = load_model(_require(args.checkpoint))
    deploy = export_model(model, args.encoding or cfg.encoding)
    save_export(deploy, out / EXPORT_NAME, header.get("extra"))
    rep = memory_report(deploy)
    base = memory_report(model)
    (out / "memory.json").write_text(json.dumps({"packed": rep.as_dict(), "unpacked_16bit": base.total},
                                                indent=2, sort_keys=True), encoding="utf-8")
    return {"export": str(out / EXPORT_NAME), "bytes_total": rep.total, "unpacked_16bit": base.total,
            "packed_layers": len(deploy.packed_layers())}


def cmd_bench(args) -> dict:
    cfg = _config(args)
    out = _out_dir(args)
    vocab = _vocab(args, cfg)
    deploy, _ = load_export(_require(args.export))
    _, test = split_windows(cfg)
    window = next(w for ws in test.values() for w in ws)
    src = examples(vocab, [window], cfg)[0].src
    res = run_bench(deploy, np.array([src]), repeats=args.repeats or cfg.repeats, warmup=cfg.warmup,
                    batch=args.batch, temperature=cfg.temperature, max_new_tokens=cfg.new_token_budget(),
                    n_samples=args.samples, seed=cfg.sampling_seed)
    (out / "bench.json").write_text(res.to_json(), encoding="utf-8")
    return {"bench": str(out / "bench.json"), "seq_per_s": res.seq_per_s, "mean_ms": res.mean_ms}


def _run_summary(run: Path) -> dict:
    cfg_file = run / CONFIG_NAME
    cfg = load_config(cfg_file) if cfg_file.exists() else RunConfig()
    row = {"run": run.name, "mode": QuantMode.parse(cfg.mode).value, "seed": cfg.seed}
    if (run / LOG_NAME).exists():
        log = TrainLog.load(run / LOG_NAME)
        row["smoothed_final_loss"] = smoothed_final(log.losses)
        row["plateau_steps"] = plateau_length(log.losses)
    if (run / "metrics.csv").exists():
        with open(run / "metrics.csv", newline="", encoding="utf-8") as f:
            for r in csv.DictReader(f):
                if r["scene"] == "AVG":
                    row["ADE"], row["FDE"] = float(r["ADE"]), float(r["FDE"])
                    row["failure_rate"] = float(r["failure_rate"])
    if (run / "bench.json").exists():
        b = json.loads((run / "bench.json").read_text(encoding="utf-8"))
        row["seq_per_s"], row["bytes_total"] = b["seq_per_s"], b["bytes_total"]
    return row


REPORT_COLUMNS = ("run", "mode", "seed", "smoothed_final_loss", "plateau_steps", "ADE", "FDE",
                  "failure_rate", "seq_per_s", "bytes_total")


def cmd_report(args) -> dict:
    out = _out_dir(args)
    rows = [_run_summary(_require(r)) for r in args.runs]
    rows.sort(key=lambda r: (r.get("smoothed_final_loss", float("inf")), r["run"]))
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.get(c, "") for c in REPORT_COLUMNS])
    lines = ["runs ordered by smoothed final training loss:"]
    for r in rows:
        loss = r.get("smoothed_final_loss")
        lines.append(f"  {r['run']:<20} mode={r['mode']:<7} loss={'n/a' if loss is None else f'{loss:.4f}'}"
                     + (f" ADE={r['ADE']:.4f} FDE={r['FDE']:.4f}" if "ADE" in r else ""))
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"report": str(out / "report.txt"), "order": [r["mode"] for r in rows]}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bittraj",
        description="Selective BitLinear quantization for language-tokenized trajectory prediction.",
        epilog=f"Outputs go to --out, or ${OUT_ENV}, or ./bittraj-out. Exit codes: 0 ok, 2 usage, "
               "3 missing file, 4 bad config, 5 shape mismatch, 6 other failure.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="run configuration file (key = value lines)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./bittraj-out)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("tokenizer-train", cmd_tokenizer_train, "train the BPE vocabulary on the training scenes")
    sp.add_argument("--scene", help="held-out scene (leave-one-out)")

    sp = add("train", cmd_train, "train a model and write a checkpoint and loss log")
    sp.add_argument("--vocab", required=True, help="vocabulary file from tokenizer-train")
    sp.add_argument("--seed", type=int, help="run seed (overrides config)")
    sp.add_argument("--mode", help="quantization mode: none, both, activ, weight")
    sp.add_argument("--scene", help="held-out scene (leave-one-out)")

    sp = add("eval", cmd_eval, "sample K trajectories per window and write minADE/minFDE per scene")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scene", help="held-out scene (leave-one-out)")
    sp.add_argument("--baseline", help="metrics.csv of a baseline run, for the delta columns")

    sp = add("sweep", cmd_sweep, "learning-rate x mode stability grid")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--lrs", default="1e-4,2e-4,4e-4")
    sp.add_argument("--modes", default="weight")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--scene", help="held-out scene (leave-one-out)")

    sp = add("export", cmd_export, "pack ternary weights of a checkpoint for deployment")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--encoding", choices=("two_bit", "base243"))

    sp = add("bench", cmd_bench, "time sampled generation with an exported model")
    sp.add_argument("--export", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--samples", type=int, default=1, help="samples drawn per input")
    sp.add_argument("--scene", help="held-out scene (leave-one-out)")

    sp = add("report", cmd_report, "merge run directories into one summary")
    sp.add_argument("runs", nargs="+", help="run directories")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        info = args.func(args)
    except FileNotFoundError as exc:
        err = CliError(EXIT_MISSING, "missing_file", str(exc))
    except ShapeMismatch as exc:
        err = CliError(EXIT_SHAPE, "shape_mismatch", str(exc))
    except ConfigError as exc:
        err = CliError(EXIT_CONFIG, "bad_config", str(exc))
    except KeyError as exc:
        err = CliError(EXIT_CONFIG, "bad_config", str(exc.args[0]) if exc.args else "unknown key")
    except SequenceTooLong as exc:
        err = CliError(EXIT_SHAPE, "shape_mismatch", str(exc))
    except (CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        err = CliError(EXIT_OTHER, "failure", str(exc))
    else:
        print(json.dumps(info, sort_keys=True))
        return EXIT_OK
    print(f"bittraj: error code={err.code} kind={err.kind} message={json.dumps(str(err))}", file=sys.stderr)
    return err.code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
