"""Command-line surface: train, finetune, eval, quantize, export, sweep, inspect.

One experiment is one TOML config; flags can override scalar fields with
--set. Machine-readable output is line-delimited JSON with a stable
schema (see README); the printed tables are derived from the same
records. Exit codes: 0 success, 2 configuration/usage errors, 3 runtime
failures (diverged training, bad model files, mismatched architectures).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ternq.config import ConfigError, load_config
from ternq.layers import Model
from ternq.modelfile import (
    FLAVOR_CHECKPOINT,
    FLAVOR_DEPLOY,
    ModelFileData,
    ModelFileError,
    compression_report,
    model_from_records,
    read_model_file,
    records_from_model,
    serialize,
    write_model_file,
)
from ternq.packing import unpack
from ternq.quantizers import QuantizerKind
from ternq.runtime import InferenceModel
from ternq.training import (
    ArchitectureMismatchError,
    TrainingDivergedError,
    TrainReport,
    evaluate,
    finetune_from,
    sparsity_sweep,
    train,
)

GLYPHS = {0: ".", 1: "+", -1: "-"}
PGM_LEVELS = {0: 128, 1: 255, -1: 0}  # grey zero, white positive, black negative


def _write_records(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _check_data_shape(cfg, dataset):
    if tuple(dataset.input_shape) != tuple(cfg.model.input_shape):
        raise ConfigError(
            f"model.input {tuple(cfg.model.input_shape)} does not match "
            f"dataset sample shape {tuple(dataset.input_shape)}"
        )


def _train_outputs(cfg, args):
    model_path = args.model_out or cfg.output_model or "model.ttq"
    report_path = args.report_out or cfg.output_report or "report.jsonl"
    return model_path, report_path


def _finish_training(model, report, model_path, report_path):
    for path in (model_path, report_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_model_file(model_path, model, FLAVOR_CHECKPOINT)
    report.save(report_path)
    last = report.epochs[-1] if report.epochs else None
    if last:
        print(f"epoch {last.epoch}: train err {last.train_err:.2%}  val err {last.val_err:.2%}  "
              f"val err (moving avg) {last.val_err_avg:.2%}")
    print(f"wrote {model_path} ({Path(model_path).stat().st_size} bytes, checkpoint)")
    print(f"wrote {report_path} ({len(report.epochs) + len(report.layer_steps) + 1} records)")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = cfg.make_dataset()
    _check_data_shape(cfg, dataset)
    model = cfg.build_model()
    quantized = [f"{l.name}:{l.quantizer.value}" for l in model.quantized_layers()]
    print(f"training {len(model.layers)} layers for {cfg.train.epochs} epochs "
          f"(quantized: {', '.join(quantized) if quantized else 'none'})")
    model, report = train(model, dataset, cfg.train)
    return _finish_training(model, report, *_train_outputs(cfg, args))


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = cfg.make_dataset()
    _check_data_shape(cfg, dataset)
    source = model_from_records(read_model_file(args.source))
    print(f"fine-tuning from {args.source} for {cfg.train.epochs} epochs")
    model, report = finetune_from(source, cfg.model, dataset, cfg.train)
    return _finish_training(model, report, *_train_outputs(cfg, args))


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = cfg.make_dataset()
    model = InferenceModel.from_file(args.model)
    if args.split == "train":
        x, y = dataset.x_train, dataset.y_train
    else:
        x, y = dataset.x_val, dataset.y_val
    loss, err = evaluate(model, x, y)
    record = {"record": "eval", "model": str(args.model), "split": args.split,
              "n": len(y), "loss": loss, "error": err}
    print(f"{args.split}: loss {loss:.4f}  error {err:.2%}  (n={len(y)})")
    print(json.dumps(record))
    if args.op_counts:
        rows = model.op_counts(batch_size=1)
        total_mult = sum(r["multiplications"] for r in rows)
        total_base = sum(r["baseline_macs"] for r in rows)
        for row in rows:
            print(json.dumps({"record": "op_counts", **row}))
        print(f"multiplications per sample: {total_mult} "
              f"({total_mult / total_base:.1%} of full-precision MACs)")
    return 0


def cmd_quantize(args) -> int:
    data = read_model_file(args.model)
    model = model_from_records(data)
    kind = QuantizerKind.TWN if args.method == "twn" else QuantizerKind.DOREFA
    last = len(model.layers) - 1
    changed = []
    for i, layer in enumerate(model.layers):
        if layer.quantizer is not QuantizerKind.NONE:
            continue
        if not args.all_layers and i in (0, last):
            continue
        layer.quantizer = kind
        changed.append(layer.name)
    if not changed:
        print("no layers eligible for post-hoc quantization", file=sys.stderr)
        return 3
    records = records_from_model(model, FLAVOR_DEPLOY)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "wb") as f:
        f.write(serialize(records))
    report = compression_report(records)
    print(f"applied {args.method} to: {', '.join(changed)}")
    print(f"wrote {args.out} ({Path(args.out).stat().st_size} bytes, "
          f"ratio {report.quantized_ratio:.2f}x on quantized layers)")
    return 0


def cmd_export(args) -> int:
    data = read_model_file(args.model)
    for rec in data.layers:
        rec.latent = None  # throw the full-resolution weights away
    deploy = ModelFileData(FLAVOR_DEPLOY, data.input_shape, data.layers)
    raw = serialize(deploy)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "wb") as f:
        f.write(raw)
    report = compression_report(deploy)
    print(f"wrote {args.out} ({len(raw)} bytes)")
    if report.quantized_packed:
        print(f"quantized layers: {report.quantized_ratio:.2f}x smaller than 32-bit baseline")
    print(f"whole model: {report.total_ratio:.2f}x")
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    dataset = cfg.make_dataset()
    _check_data_shape(cfg, dataset)
    r_values = [float(v) for v in args.r.replace(",", " ").split()]
    print(f"sweeping sparsity over {r_values} ({cfg.train.epochs} epochs each)")
    rows = sparsity_sweep(cfg.model, dataset, r_values, cfg.train)
    records = [{"record": "sweep_point", **row} for row in rows]
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_records(args.out, records)
        print(f"wrote {args.out}")
    width = 40
    worst = max(row["val_err"] for row in rows) or 1.0
    print(f"{'r':>5}  {'train err':>9}  {'val err':>8}  {'val avg':>8}")
    for row in rows:
        bar = "#" * max(1, round(width * row["val_err"] / worst)) if row["val_err"] else ""
        print(f"{row['r']:>5.2f}  {row['train_err']:>9.2%}  {row['val_err']:>8.2%}  {row['val_err_avg']:>8.2%}  {bar}")
    return 0


def _density_rows(data: ModelFileData):
    return list(compression_report(data).rows)


def _inspect_sparsity(data, args) -> list[dict]:
    rows = _density_rows(data)
    print(f"{'Layer':<10}{'Kind':<7}{'Weights':>9}  {'Density':>8}  Width")
    for row in rows:
        print(f"{row.layer:<10}{row.kind:<7}{row.weights:>9}  {row.density:>8.0%}  {row.width_bits} bit")
    return [{"record": "layer_density", "layer": r.layer, "kind": r.kind,
             "weights": r.weights, "density": r.density, "width_bits": r.width_bits} for r in rows]


def _inspect_compression(data, args) -> list[dict]:
    report = compression_report(data)
    print(f"{'Layer':<10}{'Width':>6}  {'Density':>8}  {'Payload B':>10}  {'Baseline B':>11}  {'Ratio':>7}")
    for row in report.rows:
        print(f"{row.layer:<10}{row.width_bits:>4}b  {row.density:>8.0%}  {row.payload_bytes:>10}  "
              f"{row.baseline_bytes:>11}  {row.ratio:>6.2f}x")
    print(f"total: {report.total_packed} B packed vs {report.total_baseline} B baseline "
          f"({report.total_ratio:.2f}x)")
    if report.quantized_packed:
        print(f"quantized layers only: {report.quantized_ratio:.2f}x")
    return list(report.to_records())


def _render_filter_text(signs, filters, channels):
    f_show = min(filters, signs.shape[0])
    c_show = min(channels, signs.shape[1])
    lines = []
    empties = [f for f in range(signs.shape[0]) if not signs[f].any()]
    for f in range(f_show):
        flag = "  [empty]" if f in empties else ""
        lines.append(f"filter {f}{flag}")
        for row in range(signs.shape[2]):
            lines.append("  ".join("".join(GLYPHS[int(v)] for v in signs[f, c, row]) for c in range(c_show)))
        lines.append("")
    return "\n".join(lines), empties


def _filter_tile_image(signs, filters, channels):
    f_show = min(filters, signs.shape[0])
    c_show = min(channels, signs.shape[1])
    kh, kw = signs.shape[2:]
    img = np.full((f_show * (kh + 1) - 1, c_show * (kw + 1) - 1), 200, dtype=np.uint8)
    for f in range(f_show):
        for c in range(c_show):
            tile = np.vectorize(PGM_LEVELS.get)(signs[f, c].astype(int))
            img[f * (kh + 1) : f * (kh + 1) + kh, c * (kw + 1) : c * (kw + 1) + kw] = tile
    return img


def _inspect_kernels(data, args) -> list[dict]:
    candidates = [r for r in data.layers if r.kind == "conv" and r.is_quantized]
    if args.layer:
        candidates = [r for r in candidates if r.name == args.layer]
    if not candidates:
        where = f"layer {args.layer!r}" if args.layer else "this model"
        raise ModelFileError(f"no quantized conv kernels in {where}")
    rec = candidates[0]
    partition, _ = unpack(rec.packed)
    signs = partition.signs
    text, empties = _render_filter_text(signs, args.filters, args.channels)
    print(f"{rec.name}: {signs.shape[0]} filters x {signs.shape[1]} channels, "
          f"{signs.shape[2]}x{signs.shape[3]} kernels ('.' zero, '+' positive, '-' negative)")
    print(text)
    if empties:
        print(f"empty filters (all zeros): {empties}")
    if args.pgm:
        from ternq.data import write_pgm

        write_pgm(args.pgm, _filter_tile_image(signs, args.filters, args.channels))
        print(f"wrote {args.pgm}")
    return [{"record": "kernel_layer", "layer": rec.name,
             "filters": int(signs.shape[0]), "channels": int(signs.shape[1]),
             "empty_filters": [int(f) for f in empties]}]


def _inspect_codebooks(data, args) -> list[dict]:
    if not args.report:
        raise ConfigError("codebook traces live in the training report; pass --report report.jsonl")
    try:
        report = TrainReport.load(args.report)
    except FileNotFoundError:
        raise ConfigError(f"report file not found: {args.report}")
    layers = sorted({s.layer for s in report.layer_steps})
    if not layers:
        raise ConfigError(f"{args.report} contains no layer traces")
    records = []
    print(f"{'Layer':<10}{'steps':>6}  {'w_pos first->last':>22}  {'w_neg first->last':>22}  {'sparsity last':>14}")
    for name in layers:
        trace = report.layer_trace(name)
        first, last = trace[0], trace[-1]
        print(f"{name:<10}{len(trace):>6}  {first.w_pos:>10.4f} -> {last.w_pos:<8.4f}  "
              f"{first.w_neg:>10.4f} -> {last.w_neg:<8.4f}  {last.sparsity:>13.1%}")
        records.append({
            "record": "codebook_trace", "layer": name, "steps": len(trace),
            "w_pos_first": first.w_pos, "w_pos_last": last.w_pos,
            "w_neg_first": first.w_neg, "w_neg_last": last.w_neg,
            "sparsity_last": last.sparsity,
        })
    return records


def cmd_inspect(args) -> int:
    data = read_model_file(args.model)
    views = {
        "sparsity": _inspect_sparsity,
        "compression": _inspect_compression,
        "kernels": _inspect_kernels,
        "codebooks": _inspect_codebooks,
    }
    records = views[args.what](data, args)
    if args.records:
        _write_records(args.records, records)
        print(f"wrote {args.records}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ternq",
        description="Train, compress, and run ternary weight networks with trained scaling coefficients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. --set train.lr=0.01")

    p = sub.add_parser("train", help="train a model from scratch per the config")
    add_config_args(p)
    p.add_argument("--model-out", help="checkpoint path (default: [output].model or model.ttq)")
    p.add_argument("--report-out", help="report path (default: [output].report or report.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="initialize from a full-precision checkpoint, then train")
    add_config_args(p)
    p.add_argument("--from", dest="source", required=True, help="source checkpoint (.ttq)")
    p.add_argument("--model-out")
    p.add_argument("--report-out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a model file on the config's dataset")
    add_config_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--op-counts", action="store_true", help="also report operation counts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="apply post-hoc twn/dorefa quantization to a checkpoint")
    p.add_argument("--model", required=True, help="full-precision checkpoint")
    p.add_argument("--method", choices=["twn", "dorefa"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-layers", action="store_true", help="also quantize first and last layers")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("export", help="strip latent weights: checkpoint -> deployment file")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="train one model per target sparsity and tabulate errors")
    add_config_args(p)
    p.add_argument("--r", required=True, help="comma-separated sparsity targets, e.g. 0,0.2,0.4")
    p.add_argument("--out", help="write sweep records to this JSONL file")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="report on a model file")
    p.add_argument("what", choices=["sparsity", "kernels", "codebooks", "compression"])
    p.add_argument("--model", required=True)
    p.add_argument("--report", help="training report (needed for codebooks)")
    p.add_argument("--layer", help="conv layer to render (kernels)")
    p.add_argument("--filters", type=int, default=8)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--pgm", help="also write the kernel grid as a portable graymap")
    p.add_argument("--records", help="write the view's records to this JSONL file")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except (ModelFileError, ArchitectureMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
