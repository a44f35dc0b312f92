"""Command-line entry points: dataset synthesis, staged training,
attribute editing, and the evaluation protocols.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import data as data_mod
from . import evaluation, gan, identity, train


class UsageError(Exception):
    pass


KNOWN_CONFIG_KEYS = {
    # synthetic spec
    "image_size", "n_identities", "n_images", "attributes",
    "deformation_magnitude", "seed", "test_fraction",
    # training
    "stages", "epochs_constant", "epochs_decay", "lr", "dae_lr",
    "adam_beta1", "adam_beta2", "batch_size", "n_critic", "flip_prob",
    "use_dae", "use_identity_loss", "dae_epochs",
    # loss weights
    "lam_cls", "lam_rec", "lam_ip", "lam1", "lam2", "lam2_prime", "lam3",
    # paths
    "manifest", "output_dir",
}


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    with open(path) as f:
        cfg = yaml.safe_load(f) or {}
    unknown = set(cfg) - KNOWN_CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config key(s): {sorted(unknown)}")
    # paths resolve relative to the config file
    for key in ("manifest", "output_dir"):
        if key in cfg:
            cfg[key] = str((path.parent / cfg[key]).resolve())
    return cfg


def output_root(cfg, args):
    root = getattr(args, "output_dir", None) or cfg.get("output_dir") \
        or os.environ.get("TEXWARP_OUTPUT_ROOT") or "."
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _weights(cfg):
    kwargs = {
        k: cfg[k]
        for k in ("lam_cls", "lam_rec", "lam_ip", "lam1", "lam2", "lam2_prime", "lam3")
        if k in cfg
    }
    return train.LossWeights(**kwargs)


def _plan(cfg, args):
    stage_names = {"dae": train.STAGE_DAE, "gan": train.STAGE_GAN,
                   "joint": train.STAGE_JOINT}
    requested = (args.stages or cfg.get("stages", "dae,gan,joint")).split(",")
    use_dae = cfg.get("use_dae", True) and not args.no_dae
    use_ip = cfg.get("use_identity_loss", True) and not args.no_identity_loss
    weights = _weights(cfg)
    if not use_ip:
        weights = dataclasses.replace(weights, lam_ip=0.0)
    common = dict(
        adam_beta1=cfg.get("adam_beta1", 0.5),
        adam_beta2=cfg.get("adam_beta2", 0.999),
        batch_size=cfg.get("batch_size", 50),
        n_critic=cfg.get("n_critic", 5),
        flip_prob=cfg.get("flip_prob", 0.5),
        weights=weights,
        seed=args.seed if args.seed is not None else cfg.get("seed", 0),
        use_dae=use_dae,
        use_identity_loss=use_ip,
    )
    plan = []
    for name in requested:
        name = name.strip()
        if name not in stage_names:
            raise UsageError(f"unknown stage {name!r}; choose from dae,gan,joint")
        if name == "dae":
            if not use_dae:
                continue
            plan.append(train.TrainConfig(
                train.STAGE_DAE,
                epochs_constant=cfg.get("dae_epochs", 5),
                epochs_decay=0,
                lr=cfg.get("dae_lr", 2e-4),
                **common,
            ))
        else:
            plan.append(train.TrainConfig(
                stage_names[name],
                epochs_constant=cfg.get("epochs_constant", 100),
                epochs_decay=cfg.get("epochs_decay", 100),
                lr=cfg.get("lr", 1e-4),
                **common,
            ))
    if not plan:
        raise UsageError("training plan is empty")
    return plan


# -- subcommands --------------------------------------------------------------


def cmd_synth_data(args):
    cfg = load_config(args.config)
    spec_fields = {f.name for f in dataclasses.fields(data_mod.SyntheticSpec)}
    kwargs = {k: v for k, v in cfg.items() if k in spec_fields}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if args.n_images is not None:
        kwargs["n_images"] = args.n_images
    if "attributes" in kwargs:
        kwargs["attributes"] = tuple(kwargs["attributes"])
    try:
        spec = data_mod.SyntheticSpec(**kwargs)
        manifest = data_mod.generate_synthetic(spec)
    except data_mod.ManifestError as exc:
        raise UsageError(str(exc)) from exc
    out = output_root(cfg, args)
    manifest_csv = data_mod.write_synthetic(manifest, out)
    print(f"wrote {len(manifest)} images and {manifest_csv}")


def _load_manifest(cfg, args):
    path = args.manifest or cfg.get("manifest")
    if not path:
        raise UsageError("a manifest path is required (--manifest or config)")
    if (Path(path).parent / "ground_truth.npz").exists():
        return data_mod.load_ground_truth(path)
    mode = data_mod.ONE_HOT if args.one_hot else data_mod.MULTI_BINARY
    return data_mod.load_manifest_csv(path, mode)


def cmd_train(args):
    cfg = load_config(args.config)
    manifest = _load_manifest(cfg, args)
    plan = _plan(cfg, args)
    out = output_root(cfg, args)
    state = train.run_training(plan, manifest, verbose=True)
    ckpt = out / "checkpoint.twck"
    train.save_checkpoint(state, ckpt)
    state.log.save_csv(out / "losses.csv")
    print(f"wrote {ckpt} and {out / 'losses.csv'}")


def parse_label_expression(expr, vocabulary, mode):
    values = np.zeros(len(vocabulary), dtype=np.float32)
    seen = set()
    for part in expr.split(","):
        if "=" not in part:
            raise UsageError(f"malformed label expression part {part!r}")
        name, _, value = part.partition("=")
        name = name.strip()
        if name not in vocabulary:
            raise UsageError(
                f"unknown attribute {name!r}; vocabulary: {', '.join(vocabulary)}"
            )
        if value.strip() not in ("0", "1"):
            raise UsageError(f"label value for {name!r} must be 0 or 1")
        values[vocabulary.index(name)] = float(value)
        seen.add(name)
    if mode == data_mod.ONE_HOT and values.sum() != 1.0:
        raise UsageError("one-hot label expression must set exactly one class to 1")
    return values


def _to_png(tensor, path, scale=1.0):
    arr = tensor.detach().clamp(0, scale).numpy() / scale
    arr = (np.transpose(arr, (1, 2, 0)) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_edit(args):
    cfg = load_config(args.config)
    state = train.load_checkpoint(args.checkpoint)
    vocab = state.vocabulary
    out = output_root(cfg, args)
    images = []
    for p in args.images:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        images.append(torch.from_numpy(arr).permute(2, 0, 1))
    batch = torch.stack(images)

    with torch.no_grad():
        if args.grid:
            texture, _ = state.model.factorize(batch)
            columns = [batch, texture.clamp(0, 1)]
            for i in range(len(vocab)):
                target = torch.zeros(len(batch), len(vocab))
                target[:, i] = 1.0
                edited_img, edited_tex = gan.transfer_attributes(
                    state.model, batch, target
                )
                columns += [edited_tex.clamp(0, 1), edited_img.clamp(0, 1)]
            sheet = torch.cat([torch.cat(list(col), dim=1) for col in columns], dim=2)
            _to_png(sheet, out / "edit_grid.png")
            print(f"wrote {out / 'edit_grid.png'}")
        else:
            if not args.target:
                raise UsageError("either --target or --grid is required")
            values = parse_label_expression(args.target, vocab, state.label_mode)
            target = torch.from_numpy(values).expand(len(batch), -1)
            edited, _ = gan.transfer_attributes(state.model, batch, target)
            for src, img in zip(args.images, edited):
                dest = out / f"edited_{Path(src).stem}.png"
                _to_png(img.clamp(0, 1), dest)
                print(f"wrote {dest}")


def _embed_records(records, extractor):
    out = []
    for rec in records:
        img = torch.from_numpy(rec.load_image()).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            out.append(extractor.embed(img)[0].numpy())
    return np.stack(out)


def cmd_eval_verify(args):
    cfg = load_config(args.config)
    state = train.load_checkpoint(args.checkpoint)
    manifest = _load_manifest(cfg, args)
    test = manifest.subset("test")
    if len(test.records) == 0:
        raise UsageError("manifest has no test split")
    out = output_root(cfg, args)

    extractor = state.extractor
    if extractor is None:
        extractor = identity.build_extractor(
            state.model_cfg.extractor, manifest.subset("train"), seed=args.seed
        )

    generated = _generate_transfers(state, test)
    pairs = evaluation.build_pairs(
        test, generated, args.n_client, args.n_impostor, args.seed
    )
    records = list(test.records) + list(generated.records)
    embeddings = _embed_records(records, extractor)
    scores = np.array([
        identity.cosine_similarity(embeddings[p.index_a], embeddings[p.index_b])
        for p in pairs
    ])
    labels = np.array([p.is_client for p in pairs])
    report = evaluation.verification_metrics(evaluation.ScoreSet(scores, labels))
    report.save_summary(out / "verification.txt")
    report.roc.save_csv(out / "roc.csv")
    evaluation.save_pairs_csv(pairs, out / "pairs.csv")
    print(f"auc={report.auc:.4f} eer={report.eer:.4f} ap={report.ap:.4f}")
    print(f"wrote {out / 'verification.txt'}, {out / 'roc.csv'}, {out / 'pairs.csv'}")


def _generate_transfers(state, test_manifest, source_class=None):
    """Transfer every test image to every other label configuration."""
    vocab = test_manifest.vocabulary
    records = []
    with torch.no_grad():
        for rec in test_manifest.records:
            img = torch.from_numpy(rec.load_image()).permute(2, 0, 1).unsqueeze(0)
            if test_manifest.label_mode == data_mod.ONE_HOT:
                source = int(np.argmax(rec.labels))
                if source_class is not None and source != source_class:
                    continue
                targets = [k for k in range(len(vocab)) if k != source]
                vectors = [np.eye(len(vocab), dtype=np.float32)[k] for k in targets]
            else:
                vectors = []
                for k in range(len(vocab)):
                    flipped = rec.labels.copy()
                    flipped[k] = 1.0 - flipped[k]
                    vectors.append(flipped)
            for vec in vectors:
                edited, _ = gan.transfer_attributes(
                    state.model, img, torch.from_numpy(vec).unsqueeze(0)
                )
                records.append(data_mod.Record(
                    image_path=f"generated::{rec.image_path}",
                    identity=rec.identity,
                    split="generated",
                    labels=vec,
                    image=edited[0].permute(1, 2, 0).clamp(0, 1).numpy(),
                ))
    return data_mod.Manifest(records, vocab, test_manifest.label_mode)


def cmd_eval_cls(args):
    cfg = load_config(args.config)
    state = train.load_checkpoint(args.checkpoint)
    manifest = _load_manifest(cfg, args)
    test = manifest.subset("test")
    if len(test.records) == 0:
        raise UsageError("manifest has an empty test split")
    out = output_root(cfg, args)

    classifier = evaluation.train_label_classifier(
        manifest.subset("train"), seed=args.seed
    )
    source_class = None
    if manifest.label_mode == data_mod.ONE_HOT and args.source_class:
        source_class = manifest.vocabulary.index(args.source_class)
    generated = _generate_transfers(state, test, source_class=source_class)
    images = torch.from_numpy(
        np.stack([r.image for r in generated.records])
    ).permute(0, 3, 1, 2).float()
    targets = torch.from_numpy(np.stack([r.labels for r in generated.records]))

    if manifest.label_mode == data_mod.ONE_HOT:
        acc = evaluation.expression_accuracy(classifier, images, targets)
        mat = evaluation.confusion_matrix(classifier, images, targets)
    else:
        accs = [
            evaluation.attribute_bit_accuracy(classifier, images, targets, k)
            for k in range(len(manifest.vocabulary))
        ]
        acc = float(np.mean(accs))
        with torch.no_grad():
            pred = classifier.predict(images)
        k = len(manifest.vocabulary)
        mat = np.zeros((k, 2), dtype=np.int64)
        for j in range(k):
            mat[j, 0] = int((pred[:, j] == targets[:, j]).sum())
            mat[j, 1] = int((pred[:, j] != targets[:, j]).sum())
    np.savetxt(out / "confusion.csv", mat, fmt="%d", delimiter=",")
    with open(out / "accuracy.txt", "w") as f:
        f.write(f"accuracy={acc:.6f}\n")
    print(f"accuracy={acc:.4f}")
    print(f"wrote {out / 'accuracy.txt'} and {out / 'confusion.csv'}")


def cmd_compare_curves(args):
    cfg = load_config(args.config)
    out = output_root(cfg, args)
    log_a = train.LossLog.load_csv(args.log_a)
    log_b = train.LossLog.load_csv(args.log_b)
    comparison = evaluation.compare_ablation_curves(log_a, log_b, args.term)
    comparison.save_csv(out / "curve_comparison.csv")
    sign = "a" if comparison.gap < 0 else ("b" if comparison.gap > 0 else "tie")
    print(f"final-window means: a={comparison.final_mean_a:.6g} "
          f"b={comparison.final_mean_b:.6g} gap={comparison.gap:.6g} favors={sign}")
    print(f"wrote {out / 'curve_comparison.csv'}")


def build_parser():
    parser = argparse.ArgumentParser(prog="texwarp")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--n-images", type=int, default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="run the staged training plan")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--stages", default=None, help="comma list from dae,gan,joint")
    p.add_argument("--no-dae", action="store_true")
    p.add_argument("--no-identity-loss", action="store_true")
    p.add_argument("--one-hot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="transfer attributes on images")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--target", default=None, help="e.g. smile=1,glasses=0")
    p.add_argument("--grid", action="store_true", help="write a sheet of all targets")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval-verify", help="verification protocol")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest", default=None)
    p.add_argument("--one-hot", action="store_true")
    p.add_argument("--n-client", type=int, default=3000)
    p.add_argument("--n-impostor", type=int, default=3000)
    p.set_defaults(func=cmd_eval_verify, seed=0)

    p = sub.add_parser("eval-cls", help="classification accuracy on transfers")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest", default=None)
    p.add_argument("--one-hot", action="store_true")
    p.add_argument("--source-class", default=None)
    p.set_defaults(func=cmd_eval_cls)

    p = sub.add_parser("compare-curves", help="compare a loss term across two logs")
    common(p)
    p.add_argument("log_a")
    p.add_argument("log_b")
    p.add_argument("--term", default="gan/cls_fake")
    p.set_defaults(func=cmd_compare_curves)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = 0
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (train.CheckpointError, data_mod.ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
