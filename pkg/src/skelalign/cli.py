"""Command-line entry point: the full pipeline as subcommands.

Exit codes: 0 success, 2 configuration or validation problem, 3 I/O or file
format problem, 4 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from . import textbank
from .encoder import build_model, load_checkpoint, save_checkpoint
from .errors import DataFormatError, DivergenceError, SkelAlignError
from .graph import build_partition, build_skeleton
from .train import TrainConfig, rng_stream, train
from .gradcheck import gradcheck_suite

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


def _load_json(path):
    with open(path) as f:
        return json.load(f)


def cmd_gen_data(args) -> int:
    spec = (data_mod.SyntheticSpec.from_dict(_load_json(args.spec))
            if args.spec else data_mod.SyntheticSpec())
    if args.seed is not None:
        spec.seed = args.seed
    dataset = data_mod.generate_synthetic(spec)
    names = [r.name for r in spec.classes]
    gen = spec.to_dict()
    data_mod.save_dataset(dataset.train, os.path.join(args.out, "train"),
                          class_names=names, generator={**gen, "split": "train"})
    data_mod.save_dataset(dataset.test, os.path.join(args.out, "test"),
                          class_names=names, generator={**gen, "split": "test"})
    dataset.corpus.save(os.path.join(args.out, "corpus.json"))
    print(f"wrote {dataset.train.num_samples} train / {dataset.test.num_samples} test samples "
          f"({spec.num_classes} classes, skeleton {spec.skeleton}) to {args.out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    corpus = textbank.DescriptionCorpus.load(args.corpus)
    graph = build_skeleton(args.skeleton)
    partition = build_partition(args.partition, graph,
                                include_global=None if args.include_global else False)
    embedder = textbank.HashedEmbedder(args.dim, seed=args.seed or 0)
    bank = textbank.build_bank(corpus, partition, args.prompt_type, embedder)
    textbank.save_bank(bank, args.out)
    n_entries = sum(len(v) for v in bank.entries.values())
    print(f"wrote bank: {bank.num_classes} classes x {bank.num_slots} slots, "
          f"{n_entries} vectors of dim {bank.dim} to {args.out}")
    return EXIT_OK


def _train_config_from(doc: dict, seed_override) -> TrainConfig:
    tr = dict(doc.get("train", {}))
    loss = doc.get("loss", {})
    if "variant" in loss:
        tr.setdefault("loss_variant", loss["variant"])
    if "lambda" in loss:
        tr.setdefault("lambda", loss["lambda"])
    if "tau" in loss:
        tr.setdefault("tau", loss["tau"])
    tr.setdefault("mode", doc.get("mode", "baseline"))
    tr.setdefault("partition", doc.get("partition", "four_part"))
    tr.setdefault("include_global", doc.get("include_global", True))
    if "lambda" in tr:
        tr["lam"] = tr.pop("lambda")
    if seed_override is not None:
        tr["seed"] = seed_override
    return TrainConfig(**tr)


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    config = _train_config_from(doc, args.seed)
    data_dir = doc["data_dir"]
    train_batch, meta = data_mod.load_dataset(os.path.join(data_dir, "train"))
    test_batch, _ = data_mod.load_dataset(os.path.join(data_dir, "test"))
    skeleton_name = doc.get("skeleton") or meta.get("generator", {}).get("skeleton", "toy10")
    graph = build_skeleton(skeleton_name)
    modality = doc.get("modality", "joint")
    train_batch = data_mod.derive_modality(train_batch, modality, graph)
    test_batch = data_mod.derive_modality(test_batch, modality, graph)
    resize_t = doc.get("resize_frames")
    if resize_t:
        train_batch = data_mod.resize_temporal(train_batch, int(resize_t))
        test_batch = data_mod.resize_temporal(test_batch, int(resize_t))

    partition = build_partition(config.partition, graph,
                                include_global=config.include_global)
    bank = None
    model_cfg = doc.get("model", {})
    head_dim = int(model_cfg.get("text_dim", 256))
    if config.mode == "gap":
        bank_path = doc.get("bank_dir")
        if not bank_path:
            raise SkelAlignError("gap mode requires a bank_dir pointing at bank.json/bank.f32")
        bank = textbank.load_bank(bank_path)
        head_dim = bank.dim
    elif config.mode == "part_cls":
        head_dim = train_batch.num_classes

    model = build_model(
        graph, partition, num_classes=train_batch.num_classes, head_dim=head_dim,
        rng=rng_stream(config.seed, "init"),
        channels=model_cfg.get("channels", (16, 16, 32, 32)),
        strides=model_cfg.get("strides", (1, 1, 2, 1)))
    model, report = train(train_batch, model, config, bank=bank, test_batch=test_batch)

    out_dir = doc.get("out_dir", "run")
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint"),
                    extra={"modality": modality, "mode": config.mode,
                           "seed": config.seed, "skeleton": skeleton_name})
    report.to_csv(os.path.join(out_dir, "report.csv"))
    summary = {**report.summary(), "mode": config.mode, "modality": modality,
               "loss_variant": config.loss_variant, "lambda": config.lam}
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    test_txt = f"{report.final_test_acc:.4f}" if report.final_test_acc is not None else "n/a"
    print(f"mode={config.mode} modality={modality} seed={config.seed} "
          f"train_acc={report.final_train_acc:.4f} test_acc={test_txt} -> {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    batch, _ = data_mod.load_dataset(args.dataset)
    modality = args.modality or extra.get("modality", "joint")
    trained_on = extra.get("modality")
    if trained_on and modality != trained_on:
        print(f"warning: checkpoint was trained on {trained_on!r}, scoring {modality!r}",
              file=sys.stderr)
    batch = data_mod.derive_modality(batch, modality, model.graph)
    table = eval_mod.score_model(model, batch, modality=modality)
    if args.out:
        eval_mod.save_scores_csv(table, args.out)
    acc = eval_mod.top1_accuracy(table)
    print(f"modality={modality} samples={batch.num_samples} top1={acc:.4f}"
          + (f" -> {args.out}" if args.out else ""))
    return EXIT_OK


def cmd_ensemble(args) -> int:
    tables = [eval_mod.load_scores_csv(p) for p in args.scores]
    for path, table in zip(args.scores, tables):
        print(f"{table.modality:>14s} top1={eval_mod.top1_accuracy(table):.4f}  ({path})")
    fused = eval_mod.ensemble_fuse(tables, weights=args.weights, softmax=args.softmax)
    print(f"{'fused':>14s} top1={eval_mod.top1_accuracy(fused):.4f}  weights={args.weights or 'uniform'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(seeds=args.seeds, tol=args.tol)
    for line in report.format_lines():
        print(line)
    return EXIT_OK if report.all_pass else 1


def cmd_text_sim(args) -> int:
    bank = textbank.load_bank(args.bank)
    matrix = eval_mod.text_similarity_matrix(bank, args.slot)
    eval_mod.save_similarity_csv(matrix, bank.class_names, args.out)
    off_diag = matrix[~np.eye(len(matrix), dtype=bool)]
    print(f"slot {args.slot}: {len(matrix)} classes, "
          f"off-diagonal cosine mean {off_diag.mean():.4f} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skelalign",
                                description="Skeleton action classifier with text-aligned part features")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset plus description corpus")
    g.add_argument("--spec", help="synthetic spec JSON (defaults to the shipped desk spec)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    e = sub.add_parser("embed", help="build a text feature bank from a corpus")
    e.add_argument("--corpus", required=True)
    e.add_argument("--prompt-type", dest="prompt_type", required=True,
                   choices=textbank.PROMPT_TYPES)
    e.add_argument("--partition", default="four_part")
    e.add_argument("--skeleton", default="toy10")
    e.add_argument("--dim", type=int, default=256)
    e.add_argument("--no-global", dest="include_global", action="store_false")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_embed)

    t = sub.add_parser("train", help="train a model from an experiment config JSON")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("eval", help="score a dataset with a trained checkpoint")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--dataset", required=True)
    v.add_argument("--modality", choices=data_mod.MODALITIES)
    v.add_argument("--out", help="score CSV path")
    v.set_defaults(fn=cmd_eval)

    n = sub.add_parser("ensemble", help="fuse score CSVs and report top-1")
    n.add_argument("scores", nargs="+")
    n.add_argument("--weights", type=float, nargs="+")
    n.add_argument("--softmax", action="store_true")
    n.set_defaults(fn=cmd_ensemble)

    c = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("text-sim", help="export a class-by-class text similarity matrix")
    s.add_argument("--bank", required=True)
    s.add_argument("--slot", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_text_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SkelAlignError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
