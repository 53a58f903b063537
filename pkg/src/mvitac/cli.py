"""Command-line entry point: synth, pretrain, probe, export-embeddings.

Configuration comes from built-in defaults, optionally overlaid with a JSON
config file (--config), then with flag overrides. The fully resolved config
is written to resolved_config.json in the output directory so a run can be
reproduced bit for bit.

Exit codes: 0 success, 2 configuration or input error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    AugmentationConfig,
    SynthSpec,
    detect_layout,
    eval_transform,
    export_pair_layout,
    load_grasp_dataset,
    load_pair_dataset,
    synth_generate,
)
from .errors import DivergedTrainingError, MvitacError
from .losses import LossWeights
from .models import EncoderConfig, init_model, load_checkpoint
from .training import (
    ProbeConfig,
    TrainConfig,
    append_eval_row,
    linear_probe_train,
    pretrain,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def default_config() -> dict:
    """Desk-scale defaults: 32x32 synthetic data, 64-dim backbone."""
    return {
        "seed": 0,
        "embed_dim": 128,
        "hidden_dim": None,
        "encoder": {
            "in_channels": 3,
            "blocks": [[16, 3, 2, 1], [32, 3, 2, 1], [64, 3, 2, 1], [64, 3, 2, 1]],
            "backbone_dim": 64,
            "input_size": 32,
        },
        "augmentation": {
            "resize_to": 36,
            "crop_to": 32,
            "crop_scale": [0.2, 1.0],
            "hflip_prob": 0.5,
            "grayscale_prob": 0.2,
            "normalize_mean": None,
            "normalize_std": None,
            "grasp_mode": False,
        },
        "synth": {
            "class_count": 4,
            "samples_per_class": 128,
            "image_size": 32,
            "noise_std": 0.05,
            "seed": 0,
            "train_fraction": 0.8,
        },
        "train": {
            "pretrain_lr": 0.003,
            "probe_lr": 1e-4,
            "batch_size": 64,
            "pretrain_epochs": 30,
            "probe_epochs": 20,
            "momentum": 0.99,
        },
        "loss": {"tau": 0.07, "lambda_inter": 1.0},
        "probe": {"dropout_prob": 0.2},
    }


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_set(config: dict, assignment: str) -> None:
    """Apply one 'dotted.path=value' override; values parse as JSON when possible."""
    if "=" not in assignment:
        raise ValueError(f"--set expects dotted.path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.split(".")
    node = config
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ValueError(f"unknown config section {key!r} in {path!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ValueError(f"unknown config key {keys[-1]!r} in {path!r}")
    node[keys[-1]] = value


def resolve_config(args: argparse.Namespace, flag_map: dict[str, str]) -> dict:
    config = default_config()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = _deep_merge(config, json.load(fh))
    for attr, path in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            _apply_set(config, f"{path}={json.dumps(value)}")
    for assignment in getattr(args, "set", None) or []:
        _apply_set(config, assignment)
    return config


def _write_resolved(config: dict, out_dir: Path, command: str, extras: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **extras, "config": config}
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _encoder_configs(config: dict, grasp: bool) -> tuple[EncoderConfig, EncoderConfig]:
    enc = config["encoder"]
    visual = EncoderConfig(in_channels=enc["in_channels"],
                           blocks=tuple(tuple(b) for b in enc["blocks"]),
                           backbone_dim=enc["backbone_dim"],
                           input_size=enc["input_size"])
    tactile_channels = enc["in_channels"] * 2 if grasp else enc["in_channels"]
    tactile = EncoderConfig(in_channels=tactile_channels,
                            blocks=visual.blocks,
                            backbone_dim=visual.backbone_dim,
                            input_size=visual.input_size)
    return visual, tactile


def _augmentation(config: dict, grasp: bool) -> AugmentationConfig:
    aug = config["augmentation"]
    if aug["crop_to"] != config["encoder"]["input_size"]:
        raise MvitacError(
            f"augmentation crop_to {aug['crop_to']} must match encoder "
            f"input_size {config['encoder']['input_size']}")
    return AugmentationConfig(
        resize_to=aug["resize_to"], crop_to=aug["crop_to"],
        crop_scale=tuple(aug["crop_scale"]), hflip_prob=aug["hflip_prob"],
        grayscale_prob=aug["grayscale_prob"],
        normalize_mean=tuple(aug["normalize_mean"]) if aug["normalize_mean"] else None,
        normalize_std=tuple(aug["normalize_std"]) if aug["normalize_std"] else None,
        grasp_mode=grasp or aug["grasp_mode"])


def _train_config(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        pretrain_lr=t["pretrain_lr"], probe_lr=t["probe_lr"],
        batch_size=t["batch_size"], pretrain_epochs=t["pretrain_epochs"],
        probe_epochs=t["probe_epochs"], momentum=t["momentum"],
        seed=config["seed"],
        weights=LossWeights(tau=config["loss"]["tau"],
                            lambda_inter=config["loss"]["lambda_inter"]))


def _load_dataset(data_path: str):
    layout = detect_layout(data_path)
    if layout == "pair":
        return load_pair_dataset(data_path), False
    return load_grasp_dataset(data_path), True


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    config = resolve_config(args, {
        "classes": "synth.class_count",
        "per_class": "synth.samples_per_class",
        "size": "synth.image_size",
        "noise_std": "synth.noise_std",
        "seed": "synth.seed",
    })
    s = config["synth"]
    spec = SynthSpec(class_count=s["class_count"],
                     samples_per_class=s["samples_per_class"],
                     image_size=s["image_size"], noise_std=s["noise_std"],
                     seed=s["seed"], train_fraction=s["train_fraction"])
    dataset = synth_generate(spec)
    out = Path(args.out)
    export_pair_layout(dataset, out)
    _write_resolved(config, out, "synth", {"out": str(out)})
    print(f"wrote {len(dataset.samples)} pairs "
          f"({s['class_count']} classes x {s['samples_per_class']}) to {out}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = resolve_config(args, {
        "tau": "loss.tau",
        "lambda_inter": "loss.lambda_inter",
        "momentum": "train.momentum",
        "epochs": "train.pretrain_epochs",
        "batch_size": "train.batch_size",
        "seed": "seed",
    })
    dataset, grasp = _load_dataset(args.data)
    visual_cfg, tactile_cfg = _encoder_configs(config, grasp)
    aug = _augmentation(config, grasp)
    train_cfg = _train_config(config)
    model = init_model(visual_cfg, tactile_cfg, embed_dim=config["embed_dim"],
                       hidden_dim=config["hidden_dim"], seed=config["seed"])
    out = Path(args.out)
    _write_resolved(config, out, "pretrain",
                    {"data": str(args.data), "out": str(out)})
    log, final_path = pretrain(model, dataset, train_cfg, aug, out_dir=out,
                               grasp=grasp)
    last = log.epochs[-1]["mean_l_mm"] if log.epochs else float("nan")
    print(f"pretraining finished: {len(log.steps)} steps, "
          f"final epoch mean l_mm {last:.4f}")
    print(f"checkpoint: {final_path}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    config = resolve_config(args, {"seed": "seed"})
    dataset, grasp = _load_dataset(args.data)
    if args.task == "grasp" and not grasp:
        raise MvitacError("--task grasp requires the grasp dataset layout "
                          "(per-attempt directories), got the pair layout")
    if args.task != "grasp" and grasp:
        raise MvitacError(f"--task {args.task} requires the pair layout, "
                          f"got the grasp layout")
    model = load_checkpoint(args.checkpoint)
    data_channels = dataset.samples[0].tactile.shape[0] if dataset.samples else 0
    if data_channels != model.tactile_config.in_channels:
        raise MvitacError(
            f"checkpoint tactile encoder expects {model.tactile_config.in_channels} "
            f"channels but the dataset provides {data_channels}")
    aug = _augmentation(config, grasp)
    train_cfg = _train_config(config)
    modality = "tactile" if args.modality == "tactile" else "both"
    probe = ProbeConfig(input_source=modality,
                        dropout_prob=config["probe"]["dropout_prob"])
    clf, train_acc, test_acc = linear_probe_train(
        model, dataset, args.task, probe, train_cfg, aug, grasp=grasp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(config, out, "probe",
                    {"data": str(args.data), "checkpoint": str(args.checkpoint),
                     "task": args.task, "modality": args.modality})
    n_test = len(dataset.test())
    append_eval_row(out / "eval.csv", args.task, args.modality, test_acc, n_test)
    clf_path = out / f"classifier_{args.task}_{args.modality}.npz"
    np.savez(clf_path, weight=clf.weight, bias=clf.bias,
             classes=np.array(clf.classes), input_source=clf.input_source)
    print(f"probe[{args.task}/{args.modality}]: train acc {train_acc:.4f}, "
          f"test acc {test_acc:.4f} (n={n_test})")
    print(f"classifier: {clf_path}")
    return EXIT_OK


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    config = resolve_config(args, {})
    if args.space not in ("backbone", "intra", "inter"):
        raise MvitacError(f"unknown embedding space {args.space!r}")
    dataset, grasp = _load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    aug = _augmentation(config, grasp)
    from .training import _modality_configs
    vis_cfg, tac_cfg = _modality_configs(dataset.samples, aug, grasp)

    def embed(encoder, head, images):
        with T.no_grad():
            feats = encoder(T.Tensor(np.stack(images)))
            if args.space == "backbone":
                return feats.data
            return head(feats).data

    rows = []
    batch = 128
    for start in range(0, len(dataset.samples), batch):
        chunk = dataset.samples[start:start + batch]
        vis = [eval_transform(s.visual, vis_cfg) for s in chunk]
        tac = [eval_transform(s.tactile, tac_cfg) for s in chunk]
        v_head = (model.visual.intra_head_q if args.space == "intra"
                  else model.visual.inter_head_q)
        t_head = (model.tactile.intra_head_q if args.space == "intra"
                  else model.tactile.inter_head_q)
        z_v = embed(model.visual.query_encoder, v_head, vis)
        z_t = embed(model.tactile.query_encoder, t_head, tac)
        for s, zv, zt in zip(chunk, z_v, z_t):
            rows.append([s.stem, "visual"] + [f"{v:.6f}" for v in zv])
            rows.append([s.stem, "tactile"] + [f"{v:.6f}" for v in zt])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dim = len(rows[0]) - 2 if rows else 0
    with open(out, "w") as fh:
        fh.write(",".join(["stem", "modality"] + [f"d{i}" for i in range(dim)]) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    print(f"wrote {len(rows)} embedding rows ({args.space} space) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvitac",
        description="Self-supervised visuotactile contrastive learning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file overlaying the defaults")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override any config leaf (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    common(p)
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--per-class", dest="per_class", type=int,
                   help="samples per class")
    p.add_argument("--size", type=int, help="image size in pixels")
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    common(p)
    p.add_argument("--data", required=True, help="dataset root (pair or grasp layout)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--tau", type=float, help="contrastive temperature")
    p.add_argument("--lambda-inter", dest="lambda_inter", type=float,
                   help="weight of the cross-modal losses")
    p.add_argument("--momentum", type=float, help="key-encoder momentum coefficient")
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train and evaluate a linear probe")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True,
                   choices=["category", "hardsoft", "roughsmooth", "grasp"])
    p.add_argument("--modality", required=True, choices=["tactile", "both"])
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("export-embeddings", help="dump embeddings to CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--space", required=True, choices=["backbone", "intra", "inter"])
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergedTrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MvitacError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
