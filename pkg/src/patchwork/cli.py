"""Command-line front end: train, predict, reconstruct, selftest, synth."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .errors import ConfigError, InvariantError, IoError, PatchworkError
from .infer import IdentityModel, format_output, predict
from .model import PatchworkModel, load_checkpoint, save_checkpoint
from .train import TrainingImage, fit
from .volume import (LabelSpec, Volume, labels_to_channels, prefilter_channels, read_nifti,
                     write_nifti)

log = logging.getLogger("patchwork")


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def read_manifest(path) -> list[tuple[str, str]]:
    """``image label`` pairs, one per line (whitespace or comma separated, ``#`` comments)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise IoError(f"cannot read manifest {path}: {e.strerror}") from None
    pairs = []
    base = Path(path).parent
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ConfigError(f"{path}:{n}: expected 'image label', got {line!r}")
        pairs.append(tuple(str(p if Path(p).is_absolute() else base / p) for p in parts))
    return pairs


def _write_outputs(outputs, out: Path) -> list[Path]:
    written = []
    for o in outputs:
        name = out.name
        stem = name[:-7] if name.endswith(".nii.gz") else name[:-4] if name.endswith(".nii") else name
        ext = name[len(stem):] or ".nii.gz"
        path = out.with_name(stem + o.suffix + ext)
        write_nifti(o.volume, path, dtype=o.dtype, slope=o.slope)
        written.append(path)
    return written


def cmd_train(args) -> int:
    cfg = Config.load(args.config)
    pairs = read_manifest(args.manifest) if args.manifest else []
    if len(args.image) != len(args.label):
        raise ConfigError("--image and --label must be given the same number of times")
    pairs += list(zip(args.image, args.label))
    if not pairs:
        raise ConfigError("no training images given (use --manifest or --image/--label)")
    sch = cfg.scheme_cfg()
    lspec = LabelSpec(sch.get("categorial_label"), bool(sch.get("categorical", False)), cfg.num_labels())
    ndim = sch.get("ndim")
    data = []
    for img_path, lab_path in pairs:
        img = read_nifti(img_path, ndim=ndim)
        lab = labels_to_channels(read_nifti(lab_path, ndim=ndim), lspec)
        data.append(TrainingImage.prepare(img, lab, sch))
    init_rng, fit_rng = _seeds(args.seed, 2)
    sch.setdefault("ndim", data[0].image.ndim)
    cfg.sections["scheme"]["ndim"] = sch["ndim"]
    channels = prefilter_channels(data[0].scheme.prefilter_data, data[0].image.num_features)
    model = PatchworkModel(cfg.model_spec(channels), sch, init_rng)
    tcfg = cfg.train_config()
    if args.deterministic:
        tcfg.parallel = False
    history = fit(model, data, tcfg, fit_rng)
    out = Path(args.out)
    save_checkpoint(model, out, extra={"config": cfg.sections})
    history.write_csv(out.with_name(out.name + ".history.csv"))
    print(f"wrote {out}")
    return 0


def cmd_predict(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    cfg = Config(extra.get("config", {}))
    if args.config:
        cfg.sections["apply"].update(Config.load(args.config)["apply"])
    for kv in args.set or []:
        key, _, value = kv.partition("=")
        cfg.sections["apply"][key] = Config.parse(f"[apply]\n{key} = {value}\n")["apply"][key]
    cfg.validate()
    icfg = cfg.infer_config(threads=1 if args.deterministic else args.threads)
    image = read_nifti(args.image)
    prob = predict(image, model, icfg, _seeds(args.seed, 1)[0])
    outputs = format_output(prob, icfg.out_type, icfg.ce_threshold, model.spec.categorial_label)
    for p in _write_outputs(outputs, Path(args.out)):
        print(f"wrote {p}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = Config.load(args.config)
    image = read_nifti(args.image)
    icfg = cfg.infer_config(threads=1 if args.deterministic else args.threads)
    icfg.augment = type(icfg.augment)()
    out = predict(image, IdentityModel(cfg.scheme_cfg(), image.num_features), icfg,
                  _seeds(args.seed, 1)[0])
    write_nifti(out, args.out, dtype="float32")
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import format_table, run_selftest

    results = run_selftest(args.inject_fault)
    print(format_table(results))
    ok = all(r.ok for r in results)
    print("selftest", "PASSED" if ok else "FAILED")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    from .synthetic import context_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = context_dataset(args.n, size=args.size, seed=args.seed)
    lines = []
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        ip, lp = out / f"img{i:03d}.nii.gz", out / f"lab{i:03d}.nii.gz"
        write_nifti(img, ip)
        write_nifti(lab, lp, dtype="uint8")
        lines.append(f"{ip.name} {lp.name}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} image/label pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("--deterministic", action="store_true", help="force serial execution")

    p = argparse.ArgumentParser(prog="patchwork", description="Deep neural patchwork segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", help="file of 'image label' lines")
    t.add_argument("--image", action="append", default=[])
    t.add_argument("--label", action="append", default=[])
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", parents=[common], help="apply a trained model")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--config", help="config whose [apply] section overrides the stored one")
    pr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one [apply] key")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    r = sub.add_parser("reconstruct", parents=[common], help="stitch identity-block crops")
    r.add_argument("--config", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("selftest", parents=[common], help="run built-in numerical checks")
    s.add_argument("--inject-fault", choices=["sign"], default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    y = sub.add_parser("synth", parents=[common], help="write the synthetic context dataset")
    y.add_argument("--n", type=int, default=20)
    y.add_argument("--size", type=int, default=256)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DNP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantError as e:
        print(f"internal invariant failure: {e}", file=sys.stderr)
        return 2
    except (PatchworkError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected is an internal failure
        log.exception("unexpected failure")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
