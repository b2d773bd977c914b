"""Command-line entry point: data generation, training, evaluation, sweeps, benchmarks.

One JSON config file drives everything; sections ``data``, ``model``,
``train``, ``align``, and ``ablation`` each accept only their documented
keys (unknown keys are rejected, nothing is read from the environment).
``ssmfuse default-config`` prints the full schema with every default
filled in.

Exit codes: 0 success, 1 metric or assertion failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import model as model_mod
from .align import AlignConfig

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

_ABLATION_KEYS = ("no_alignment", "no_moe", "learnable_routing")


class ConfigError(ValueError):
    pass


def default_run_config() -> dict:
    synth = data_mod.SynthConfig(modalities=[
        data_mod.ModalitySpec("audio", 8, 12),
        data_mod.ModalitySpec("video", 12, 16),
        data_mod.ModalitySpec("text", 10, 14),
    ])
    model_section = {
        "d_model": 16, "unimodal_layers": 1, "fusion_layers": 1,
        "head": model_mod.CLASSIFICATION, "dropout": 0.2, "d_inner": None,
        "n_state": 16, "d_conv": 4, "seed": 0,
    }
    return {
        "data": asdict(synth),
        "model": model_section,
        "train": asdict(model_mod.TrainConfig()),
        "align": asdict(AlignConfig()),
        "ablation": {k: False for k in _ABLATION_KEYS},
    }


def _check_keys(section: str, payload: dict, allowed) -> None:
    unknown = set(payload) - set(allowed)
    if unknown:
        raise ConfigError(f"config section {section!r}: unknown keys {sorted(unknown)}")


def load_run_config(path) -> dict:
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config root must be a JSON object")
    defaults = default_run_config()
    _check_keys("<root>", payload, defaults)
    merged = {}
    for section, section_defaults in defaults.items():
        user = payload.get(section, {})
        if not isinstance(user, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        if section == "data" and "modalities" in user:
            mods = user["modalities"]
            if not isinstance(mods, list) or not mods:
                raise ConfigError("data.modalities must be a nonempty list")
            for m in mods:
                _check_keys("data.modalities[]", m, ("name", "d_in", "seq_len"))
        _check_keys(section, user, section_defaults)
        merged[section] = {**section_defaults, **user}
    return merged


def build_configs(run_cfg: dict):
    """Materialize (SynthConfig, ModelConfig, TrainConfig) with ablations applied."""
    try:
        synth = data_mod.SynthConfig(**run_cfg["data"])
        align = AlignConfig(**run_cfg["align"])
        ablation = run_cfg["ablation"]
        if ablation["no_alignment"]:
            align.lambda_ot = 0.0
            align.lambda_mmd = 0.0
        model_cfg = model_mod.ModelConfig(
            modalities=list(synth.modalities),
            align=align,
            num_classes=synth.num_classes,
            use_moe=not ablation["no_moe"],
            routing="learnable" if ablation["learnable_routing"] else "deterministic",
            **run_cfg["model"])
        train_cfg = model_mod.TrainConfig(**run_cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return synth, model_cfg, train_cfg


def _check_dataset_matches(modalities, dataset: data_mod.Dataset, what: str) -> None:
    want = [(m.name, m.d_in, m.seq_len) for m in modalities]
    have = [(m.name, m.d_in, m.seq_len) for m in dataset.modalities]
    if want != have:
        raise ConfigError(f"{what} modalities {want} do not match dataset {have}")


def accuracy_score(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float((y_true == y_pred).mean())


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    """Unweighted mean of per-class F1 (absent classes contribute zero)."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def predict_labels(model: model_mod.FusionModel, samples) -> np.ndarray:
    preds = []
    for sample in samples:
        logits, _ = model_mod.forward(model, sample, train=False)
        preds.append(int(np.argmax(logits.data)))
    return np.asarray(preds)


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run_cfg = load_run_config(args.config)
    synth, _, _ = build_configs(run_cfg)
    dataset = data_mod.generate(synth)
    try:
        data_mod.save_dataset(dataset, args.out, force=args.force)
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(dataset.samples)} samples "
          f"({synth.num_classes} classes x {synth.samples_per_class}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    _, model_cfg, train_cfg = build_configs(run_cfg)
    dataset = data_mod.load_dataset(args.data)
    _check_dataset_matches(model_cfg.modalities, dataset, "config")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    fusion = model_mod.FusionModel(model_cfg)
    rows = model_mod.train(fusion, dataset, train_cfg,
                           metrics_path=out / "metrics.csv", verbose=not args.quiet)
    model_mod.save_checkpoint(fusion, out / "checkpoint", force=True)
    final_val = [r for r in rows if r["split"] == "val"][-1]
    print(f"trained {final_val['epoch']} epochs; "
          f"val accuracy {final_val['accuracy']:.4f}; artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    fusion = model_mod.load_checkpoint(args.checkpoint)
    dataset = data_mod.load_dataset(args.data)
    _check_dataset_matches(fusion.cfg.modalities, dataset, "checkpoint")
    samples = dataset.of_split(args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} is empty")
    labels = np.asarray([int(s.label) for s in samples])
    preds = predict_labels(fusion, samples)
    acc = accuracy_score(labels, preds)
    f1 = macro_f1(labels, preds, fusion.cfg.num_classes)
    print(f"split={args.split} samples={len(samples)} "
          f"accuracy={acc:.17g} macro_f1={f1:.17g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    run_cfg = load_run_config(args.config)
    rows = []
    for value in args.grid:
        for seed in args.seeds:
            cfg = json.loads(json.dumps(run_cfg))  # deep copy
            cfg["align"][args.param] = value
            cfg["model"]["seed"] = seed
            cfg["train"]["seed"] = seed
            synth, model_cfg, train_cfg = build_configs(cfg)
            dataset = data_mod.generate(synth)
            fusion = model_mod.FusionModel(model_cfg)
            model_mod.train(fusion, dataset, train_cfg)
            val = dataset.of_split("val")
            labels = np.asarray([int(s.label) for s in val])
            preds = predict_labels(fusion, val)
            rows.append((args.param, value, seed,
                         accuracy_score(labels, preds),
                         macro_f1(labels, preds, model_cfg.num_classes)))
            print(f"{args.param}={value} seed={seed} acc={rows[-1][3]:.4f}")
    with open(args.out, "w") as fh:
        fh.write("param,value,seed,accuracy,f1\n")
        for param, value, seed, acc, f1 in rows:
            fh.write(f"{param},{value:.10g},{seed},{acc:.6f},{f1:.6f}\n")
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    for kernel in args.kernels:
        if kernel not in bench_mod.KERNELS:
            print(f"error: unknown kernel {kernel!r} "
                  f"(choose from {sorted(bench_mod.KERNELS)})", file=sys.stderr)
            return EXIT_USAGE
    samples = bench_mod.run_sweep(args.kernels, lengths=args.lengths, trials=args.trials,
                                  d_model=args.d_model, budget_bytes=args.budget_bytes,
                                  seed=args.seed)
    if args.csv:
        bench_mod.emit_csv(samples, args.csv)
        print(f"wrote {args.csv}")
    if args.svg:
        bench_mod.emit_svg(samples, args.svg)
        print(f"wrote {args.svg}")
    for kernel in args.kernels:
        med = bench_mod._medians(samples, kernel, "time_ms")
        oom = [s.length for s in samples if s.kernel == kernel and s.oom]
        line = " ".join(f"T={t}:{v:.1f}ms" for t, v in med.items())
        if oom:
            line += f" OOM at T={oom[0]}"
        print(f"{kernel}: {line}")
    if args.check:
        violations = bench_mod.check_claims(samples)
        for v in violations:
            print(f"assertion failed: {v}", file=sys.stderr)
        if violations:
            return EXIT_FAIL
        print("all scaling assertions hold")
    return EXIT_OK


def cmd_default_config(args) -> int:
    print(json.dumps(default_run_config(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmfuse",
        description="multimodal fusion with selective-scan layers: "
                    "train, evaluate, sweep, and benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="grid-sweep one alignment weight")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=("lambda_ot", "lambda_mmd"))
    p.add_argument("--grid", required=True, nargs="+", type=float)
    p.add_argument("--seeds", nargs="+", type=int, default=[0])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("bench", help="forward-pass scaling sweep")
    p.add_argument("--kernels", nargs="+", default=sorted(bench_mod.KERNELS))
    p.add_argument("--lengths", nargs="+", type=int, default=list(bench_mod.DEFAULT_LENGTHS))
    p.add_argument("--trials", type=int, default=bench_mod.DEFAULT_TRIALS)
    p.add_argument("--d-model", type=int, default=bench_mod.DEFAULT_D_MODEL)
    p.add_argument("--budget-bytes", type=int, default=bench_mod.DEFAULT_BUDGET_BYTES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.add_argument("--assert", dest="check", action="store_true",
                   help="fail (exit 1) if any scaling claim is violated")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("default-config", help="print the full config schema with defaults")
    p.set_defaults(fn=cmd_default_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, data_mod.Mat1Error, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
