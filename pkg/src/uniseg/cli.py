"""Command-line entry point: dataset generation, training, evaluation and
prediction export.

Flags may also come from a plain ``key=value`` config file (--config);
explicit command-line flags win. The seed falls back to the UNISEG_SEED
environment variable, then 0. Every subcommand is deterministic given
identical flags and seed.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import figures, metrics
from .data import AugmentConfig, Domain
from .losses import LossParams
from .network import Model, ModelConfig, config_from_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainingDiverged, joint_train, log_curves, pretrain_ct


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("UNISEG_SEED")
    return int(env) if env else 0


def write_pgm(path, values: np.ndarray, maxval: int):
    """Binary PGM (P5); 16-bit samples are written most significant byte
    first, per the format."""
    arr = np.asarray(values)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            f.write(arr.astype(">u2").tobytes())
        else:
            f.write(arr.astype(np.uint8).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path} is not a binary PGM")
    w, h = map(int, parts[1].split())
    maxval = int(parts[2])
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)
    return data.astype(np.int64), maxval


def _resize_to(sample: D.Sample, size: int) -> D.Sample:
    if sample.image.shape[-1] == size:
        return sample
    return D.Sample(
        image=D.resize_bilinear(sample.image, size),
        mask=D.resize_nearest(sample.mask, size),
        domain=sample.domain,
        id=sample.id,
    )


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return 2
    seed = resolve_seed(args.seed)
    mri = D.generate_phantom(D.mri_spec(args.size, seed), Domain.MRI_LIKE, args.n_mri)
    ct = D.generate_phantom(D.ct_spec(args.size, seed), Domain.CT_LIKE, args.n_ct)
    manifest = D.write_dataset(out, mri + ct)
    print(f"wrote {len(mri) + len(ct)} samples and {manifest}")
    return 0


def _loss_table(args) -> dict[Domain, LossParams]:
    return {
        Domain.MRI_LIKE: LossParams(args.mri_alpha, args.mri_beta, args.gamma),
        Domain.CT_LIKE: LossParams(args.ct_alpha, args.ct_beta, args.gamma),
    }


def cmd_train(args) -> int:
    dataset = D.load_dataset(args.data)
    for split in ("train", "val"):
        dataset[split] = [_resize_to(s, args.size) for s in dataset[split]]
    train = D.split_by_domain(dataset["train"])
    val = D.split_by_domain(dataset["val"])
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = TrainConfig(
        joint_epochs=args.epochs,
        pretrain_epochs=args.pretrain_epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        weight_decay=args.weight_decay,
        loss_table=_loss_table(args),
        pretrain_loss=LossParams(args.ct_alpha, args.ct_beta, args.gamma),
        seed=seed,
        image_size=args.size,
        checkpoint_dir=out,
        keep_all=args.keep_all,
        augment=AugmentConfig() if args.augment else None,
    ).validate()

    dtype = np.float32 if args.dtype == "float32" else np.float64
    model = Model.create(ModelConfig(input_size=args.size), seed=seed, dtype=dtype)
    try:
        pretrain_ct(model, train[Domain.CT_LIKE], config)
        best, records = joint_train(
            model,
            train[Domain.MRI_LIKE],
            train[Domain.CT_LIKE],
            val[Domain.MRI_LIKE],
            val[Domain.CT_LIKE],
            config,
        )
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    curves = out / "curves.csv"
    log_curves(records, curves)
    if not args.no_figures:
        figures.render_curves(records, out / "curves.png")
    last = records[-1]
    print(f"trained {args.epochs} epochs; best macro Dice "
          f"{max(r.macro_dice for r in records):.4f}, final {last.macro_dice:.4f}")
    print(f"wrote {out / 'best.ckpt'} and {curves}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    model = Model(config_from_params(params), params)
    dataset = D.load_dataset(args.data)
    test = dataset["test"]
    if not test:
        print("error: dataset has no test split", file=sys.stderr)
        return 2
    bad = [s.id for s in test if s.image.shape[-1] % 4]
    if bad:
        print(f"error: sample sizes must be divisible by 4 (offenders: {bad[:3]})", file=sys.stderr)
        return 2
    report = metrics.evaluate(model, test, threshold=args.threshold, seed=resolve_seed(args.seed))
    metrics.write_report_csv(report, args.out)
    if not args.no_figures:
        figures.render_report(report, Path(args.out).with_suffix(".png"))
    for domain, values in report.per_domain.items():
        cells = "  ".join(f"{k}={values[k]:.4f}" for k in metrics.METRIC_COLUMNS)
        print(f"{domain.tag:>5}: {cells}")
    cells = "  ".join(f"{k}={report.macro[k]:.4f}" for k in metrics.METRIC_COLUMNS)
    print(f"macro: {cells}")
    print(f"pooled auc={report.pooled_auc:.4f} (all domains' pixels pooled)")
    if report.skipped_domains:
        print("warning: empty domains skipped: "
              + ", ".join(d.tag for d in report.skipped_domains), file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


def cmd_predict(args) -> int:
    params = load_checkpoint(args.ckpt)
    model = Model(config_from_params(params), params)
    sample = D.read_sample(args.input)
    prob = model.predict(sample.image)[0]
    mask = (prob > args.threshold).astype(np.uint8) * 255
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(f"{prefix}_prob.pgm", np.rint(prob * 65535).astype(np.uint16), 65535)
    write_pgm(f"{prefix}_mask.pgm", mask, 255)
    if not args.no_figures:
        figures.render_prediction_panel(
            sample.image, sample.mask, prob[None], f"{prefix}_panel.png"
        )
    print(f"wrote {prefix}_prob.pgm and {prefix}_mask.pgm")
    return 0


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value file supplying flag defaults")
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: $UNISEG_SEED, else 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom dataset with manifest")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--n-mri", type=int, required=True, help="number of MRI-like samples")
    g.add_argument("--n-ct", type=int, required=True, help="number of CT-like samples")
    g.add_argument("--size", type=int, default=128, help="image size in pixels (default: 128)")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")
    _add_common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain on CT then jointly fine-tune")
    t.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    t.add_argument("--out", required=True, help="output directory for checkpoints and curves")
    t.add_argument("--epochs", type=int, required=True, help="joint training epochs")
    t.add_argument("--pretrain-epochs", type=int, default=5,
                   help="CT-only pretraining epochs (default: 5)")
    t.add_argument("--batch-size", type=int, default=8, help="even batch size (default: 8)")
    t.add_argument("--lr", type=float, default=1e-4,
                   help="peak learning rate (default: 1e-4)")
    t.add_argument("--weight-decay", type=float, default=1e-5,
                   help="decoupled weight decay (default: 1e-5)")
    t.add_argument("--size", type=int, default=128,
                   help="training resolution; samples are resized (default: 128)")
    t.add_argument("--mri-alpha", type=float, default=0.7, help="MRI FN weight (default: 0.7)")
    t.add_argument("--mri-beta", type=float, default=0.3, help="MRI FP weight (default: 0.3)")
    t.add_argument("--ct-alpha", type=float, default=0.5, help="CT FN weight (default: 0.5)")
    t.add_argument("--ct-beta", type=float, default=0.5, help="CT FP weight (default: 0.5)")
    t.add_argument("--gamma", type=float, default=4.0 / 3.0,
                   help="focal exponent (default: 4/3)")
    t.add_argument("--dtype", choices=("float64", "float32"), default="float64",
                   help="arithmetic precision (default: float64)")
    t.add_argument("--augment", action="store_true", help="enable on-the-fly augmentation")
    t.add_argument("--keep-all", action="store_true", help="also keep epoch_k.ckpt per epoch")
    t.add_argument("--no-figures", action="store_true", help="skip curves.png")
    _add_common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--out", required=True, help="report CSV path")
    e.add_argument("--threshold", type=float, default=0.5,
                   help="binarization threshold (default: 0.5)")
    e.add_argument("--no-figures", action="store_true", help="skip the report figure")
    _add_common(e)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export probability and mask images for one sample")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="input .useg sample")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="binarization threshold (default: 0.5)")
    p.add_argument("--no-figures", action="store_true", help="skip the panel figure")
    _add_common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def _inject_config(argv: list[str]) -> list[str]:
    """Splice config-file pairs in right after the subcommand so explicit
    flags (which come later) take precedence."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        return argv  # argparse will report the missing value
    path = argv[idx + 1]
    extra: list[str] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if value.lower() in ("false", "no", "0") and key.replace("-", "_") in (
            "force", "keep_all", "augment", "no_figures"
        ):
            continue  # switched-off boolean flag
        extra.append("--" + key.replace("_", "-"))
        if value.lower() != "true":  # bare flags are stored as key=true
            extra.append(value)
    return argv[:1] + extra + argv[1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and not argv[0].startswith("-"):
            argv = _inject_config(argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
