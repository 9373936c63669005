"""Command-line frontend: data generation, masking, training, evaluation,
imputation, embedding export, ablation sweeps, and gradient checks.

All randomness flows from explicit --seed flags; sub-streams (mask, init,
shuffle, dropout) use labeled derived seeds so changing one stage does not
perturb the others.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, evaluation, model, training
from .autodiff import derive_seed
from .convgraph import build_graph
from .dataio import MODALITIES, GeneratorConfig

SPLITS = ("train", "val", "test")

VARIANT_FLAGS = {"full": ("full", False), "no-sgnn": ("no_sgnn", False),
                 "no-tgnn": ("no_tgnn", False), "coupled": ("coupled", False),
                 "no-rec": ("no_reconstruction", False),
                 "lower-bound": ("full", True)}


def _read_keyvalue_config(path):
    """key = value lines; '#' starts a comment; values parsed as int/float
    where possible."""
    values = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        for cast in (int, float):
            try:
                value = cast(value)
                break
            except ValueError:
                continue
        values[key] = value
    return values


def _generator_config(args):
    overrides = _read_keyvalue_config(args.config) if args.config else {}
    known = {"num_speakers", "num_classes", "feature_dim", "train_conversations",
             "val_conversations", "test_conversations", "min_length", "max_length",
             "markov_stay", "speaker_bias", "shared_latent_weight", "noise_scale",
             "seed"}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    dim = int(overrides.get("feature_dim", 16))
    return GeneratorConfig(
        num_speakers=int(overrides.get("num_speakers", 2)),
        num_classes=int(overrides.get("num_classes", 4)),
        modality_dims={m: dim for m in MODALITIES},
        conversations_per_split={
            "train": int(overrides.get("train_conversations", 200)),
            "val": int(overrides.get("val_conversations", 40)),
            "test": int(overrides.get("test_conversations", 60))},
        length_range=(int(overrides.get("min_length", 12)),
                      int(overrides.get("max_length", 20))),
        markov_stay=float(overrides.get("markov_stay", 0.8)),
        speaker_bias=float(overrides.get("speaker_bias", 0.5)),
        shared_latent_weight=float(overrides.get("shared_latent_weight", 0.7)),
        noise_scale=float(overrides.get("noise_scale", 1.0)),
        seed=int(overrides.get("seed", args.seed)))


def cmd_gen_data(args):
    cfg = _generator_config(args)
    splits, _ = dataio.generate_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        dataio.save_dataset(splits[split], out / f"{split}.jsonl")
        print(f"wrote {split}: {len(splits[split].conversations)} conversations")
    return 0


def _load_splits(data_dir):
    return {split: dataio.load_dataset(Path(data_dir) / f"{split}.jsonl")
            for split in SPLITS}


def _load_split_masks(mask_dir):
    return {split: dataio.load_masks(Path(mask_dir) / f"{split}.mask.jsonl")
            for split in SPLITS}


def cmd_mask(args):
    if not 0.0 <= args.eta <= 0.7:
        raise ValueError(f"--eta must be within [0, 0.7], got {args.eta}")
    splits = _load_splits(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        masks = dataio.apply_missing(splits[split], args.eta,
                                     derive_seed(args.seed, f"mask:{split}"))
        dataio.save_masks(masks, out / f"{split}.mask.jsonl")
        print(f"{split}: realized eta = {dataio.realized_missing_rate(masks):.4f}")
    return 0


def _train_once(splits, masks, variant_flag, latent_dim, window, dropout,
                epochs, batch_size, learning_rate, weight_decay, seed, eta):
    variant, lower_bound = VARIANT_FLAGS[variant_flag]
    manifest = splits["train"].manifest
    model_config = model.GCNetConfig(
        latent_dim=latent_dim, window=window,
        modality_dims=dict(manifest.modality_dims),
        num_classes=manifest.num_classes, num_speakers=manifest.num_speakers,
        dropout=dropout, variant=variant)
    train_config = training.TrainConfig(
        learning_rate=learning_rate, weight_decay=weight_decay, epochs=epochs,
        batch_size=batch_size, seed=seed, missing_rate=eta,
        lower_bound=lower_bound)
    params, history = training.train(model_config, splits, masks, train_config)
    return model_config, params, history


def cmd_train(args):
    splits = _load_splits(args.data)
    masks = _load_split_masks(args.masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eta = masks["train"][0].requested_rate if masks["train"] else 0.0
    model_config, params, history = _train_once(
        splits, masks, args.variant, args.latent_dim, args.window, args.dropout,
        args.epochs, args.batch_size, args.lr, args.weight_decay, args.seed, eta)
    model.save_checkpoint(out / "checkpoint.json", model_config, params)
    training.save_history(history, out / "history.csv")
    best = max(history, key=lambda row: (row.val_waf, -row.epoch))
    print(f"best epoch {best.epoch}: val WAF = {best.val_waf:.4f}")
    return 0


def _metrics_row(result, eta, seed, variant, num_classes):
    row = {"seed": seed, "eta": eta, "variant": variant,
           "waf": repr(result.metrics.waf), "accuracy": repr(result.metrics.accuracy)}
    for k in range(num_classes):
        row[f"f1_class{k}"] = repr(result.metrics.per_class_f1[k])
    for m in MODALITIES:
        mse = result.imputation_mse[m]
        row[f"mse_{m}"] = "" if mse is None else repr(mse)
    return row


def cmd_eval(args):
    config, params = model.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    masks = dataio.load_masks(args.masks)
    result = evaluation.evaluate(config, params, dataset, masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eta = masks[0].requested_rate if masks else 0.0
    row = _metrics_row(result, eta, args.seed, config.variant, config.num_classes)
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["conversation_id", "utterance_index", "label", "prediction"])
        writer.writerows(result.predictions)
    print(f"WAF = {result.metrics.waf:.4f}, accuracy = {result.metrics.accuracy:.4f}")
    for m in MODALITIES:
        mse = result.imputation_mse[m]
        print(f"imputation MSE [{m}] = " + ("n/a" if mse is None else f"{mse:.6f}"))
    return 0


def cmd_impute(args):
    config, params = model.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    masks = dataio.load_masks(args.masks)
    filled = dataio.Dataset(manifest=dataset.manifest)
    for conv, mask in zip(dataset.conversations, masks):
        graph = build_graph(conv.speakers, config.window, config.num_speakers)
        out = model.forward(conv, mask, graph, config, params, training=False)
        features = {}
        for m in MODALITIES:
            bits = np.asarray(mask.bits[m], dtype=bool)
            mat = conv.features[m].copy()
            mat[~bits] = out.reconstructions[m].data[~bits]
            features[m] = mat
        filled.conversations.append(dataio.Conversation(
            id=conv.id, speakers=list(conv.speakers), labels=list(conv.labels),
            features=features))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(filled, args.out)
    print(f"wrote imputed dataset: {args.out}")
    return 0


def cmd_export_embeddings(args):
    config, params = model.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    masks = dataio.load_masks(args.masks)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    rows = evaluation.export_embeddings(config, params, dataset, masks, args.out)
    print(f"wrote {rows} embedding rows")
    return 0


def cmd_ablate(args):
    splits = _load_splits(args.data)
    etas = [float(e) for e in args.etas.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANT_FLAGS:
            raise ValueError(f"unknown variant {v!r}")
    for eta in etas:
        if not 0.0 <= eta <= 0.7:
            raise ValueError(f"eta {eta} outside [0, 0.7]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows, failures = [], []
    for eta in etas:
        masks = {split: dataio.apply_missing(
            splits[split], eta, derive_seed(args.seed, f"mask:{split}"))
            for split in SPLITS}
        baseline_means = evaluation.mean_imputation_baseline(splits["train"],
                                                             masks["train"])
        baseline = evaluation.baseline_imputation_mse(baseline_means,
                                                      splits["test"], masks["test"])
        for variant in variants:
            for seed in seeds:
                cell = f"variant={variant} eta={eta} seed={seed}"
                try:
                    config, params, _ = _train_once(
                        splits, masks, variant, args.latent_dim, args.window,
                        args.dropout, args.epochs, args.batch_size, args.lr,
                        args.weight_decay, seed, eta)
                    result = evaluation.evaluate(config, params, splits["test"],
                                                 masks["test"])
                except Exception as exc:  # keep sweeping; record the failure
                    failures.append((cell, str(exc)))
                    print(f"FAILED {cell}: {exc}", file=sys.stderr)
                    continue
                row = _metrics_row(result, eta, seed, variant,
                                   splits["train"].manifest.num_classes)
                row["kind"] = "run"
                for m in MODALITIES:
                    row[f"baseline_mse_{m}"] = ("" if baseline[m] is None
                                                else repr(baseline[m]))
                rows.append(row)
                print(f"{cell}: test WAF = {result.metrics.waf:.4f}")

    # aggregate over seeds per (variant, eta)
    aggregates = []
    for eta in etas:
        for variant in variants:
            cell = [r for r in rows
                    if r["variant"] == variant and float(r["eta"]) == eta]
            if not cell:
                continue
            mean_row = {"kind": "mean", "seed": "", "eta": eta, "variant": variant,
                        "waf": repr(float(np.mean([float(r["waf"]) for r in cell]))),
                        "accuracy": repr(float(np.mean([float(r["accuracy"])
                                                        for r in cell])))}
            aggregates.append(mean_row)

    fieldnames = ["kind", "variant", "eta", "seed", "waf", "accuracy"]
    fieldnames += [f"f1_class{k}" for k in range(splits["train"].manifest.num_classes)]
    fieldnames += [f"mse_{m}" for m in MODALITIES]
    fieldnames += [f"baseline_mse_{m}" for m in MODALITIES]
    ordered = sorted(rows, key=lambda r: (r["variant"], float(r["eta"]), int(r["seed"])))
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(ordered)
        writer.writerows(sorted(aggregates,
                                key=lambda r: (r["variant"], float(r["eta"]))))
    if failures:
        with open(out / "failures.txt", "w", encoding="utf-8") as fh:
            fh.writelines(f"{cell}: {msg}\n" for cell, msg in failures)
    return 0


def cmd_gradcheck(args):
    from .training import conversation_loss

    gen = GeneratorConfig(
        num_speakers=args.speakers, num_classes=args.classes,
        modality_dims={m: args.feature_dim for m in MODALITIES},
        conversations_per_split={"train": 1, "val": 0, "test": 0},
        length_range=(args.length, args.length), seed=args.seed)
    splits, _ = dataio.generate_synthetic(gen)
    conv = splits["train"].conversations[0]
    masks = dataio.apply_missing(splits["train"], 0.3, derive_seed(args.seed, "mask"))
    config = model.GCNetConfig(
        latent_dim=args.latent_dim, window=args.window,
        modality_dims=dict(gen.modality_dims), num_classes=args.classes,
        num_speakers=args.speakers, dropout=0.0, variant="full")
    params = model.init_params(config, derive_seed(args.seed, "init"))
    graph = build_graph(conv.speakers, config.window, config.num_speakers)

    def loss_fn():
        loss, _, _ = conversation_loss(conv, masks[0], graph, config, params,
                                       training=False, rng=None)
        return loss

    report = ad.grad_check(loss_fn, params.values(), eps=1e-5, tol=args.tol)
    for line in report.lines():
        print(line)
    name, err, index = report.worst()
    print(f"worst: {name} max_rel_err={err:.3e} at flat index {index} "
          f"({'PASS' if report.passed else 'FAIL'} at tol {args.tol})")
    return 0 if report.passed else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="gcnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark splits")
    p.add_argument("--config", help="key = value overrides for the generator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("mask", help="draw missing-modality masks per split")
    p.add_argument("--data", required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    def add_train_flags(p):
        p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default="full")
        p.add_argument("--latent-dim", "-D", type=int, default=100)
        p.add_argument("--window", "-w", type=int, default=2)
        p.add_argument("--dropout", type=float, default=0.5)
        p.add_argument("--epochs", type=int, default=100)
        p.add_argument("--batch-size", type=int, default=8)
        p.add_argument("--lr", type=float, default=0.001)
        p.add_argument("--weight-decay", type=float, default=1e-5)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train and save the best-validation checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--masks", required=True, help="mask file")
    p.add_argument("--seed", type=int, default=0, help="recorded in metrics.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("impute", help="write a dataset with missing rows filled")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("export-embeddings",
                       help="CSV of fused utterance representations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("ablate", help="train/evaluate a (variant, eta, seed) grid")
    p.add_argument("--data", required=True)
    p.add_argument("--etas", required=True, help="comma-separated missing rates")
    p.add_argument("--seeds", required=True, help="comma-separated training seeds")
    p.add_argument("--variants", default="full,no-sgnn,no-tgnn,coupled,lower-bound")
    add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the joint loss gradient")
    p.add_argument("--latent-dim", "-D", type=int, default=8)
    p.add_argument("--window", "-w", type=int, default=1)
    p.add_argument("--length", "-L", type=int, default=4)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--feature-dim", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    # default seed keeps every gradient coordinate above the finite-difference
    # roundoff floor (~1e-11 absolute at eps=1e-5 for a loss of order 1)
    p.add_argument("--seed", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
