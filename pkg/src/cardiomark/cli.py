"""Command-line interface: phantom-gen, train, finetune, infer, eval, serve.

Exit codes: 0 success, 1 runtime error, 2 usage error; errors go to stderr.
Flag defaults mirror the published training recipe (lr 0.001 for 50 epochs,
Adam betas 0.9/0.999 eps 1e-8, fine-tuning at lr 0.0005 for 10 epochs,
90/10 patient split, 400x400 1 mm frames).
"""

import argparse
import json
import os
import sys
import time

from . import dataio, measure, phantom, trainer
from .errors import CardiomarkError
from .heatmap import LAX_VIEWS, VIEWS
from .inference import infer_image, landmarks_from_json, landmarks_to_json, load_model
from .preprocess import AugmentConfig, none_augment
from .unet import ArchConfig, UNet, load_checkpoint, save_checkpoint

LAX_GROUP = LAX_VIEWS


def _add_arch_flags(p, base_filters, blocks):
    p.add_argument("--levels", type=int, default=4, help="resolution levels")
    p.add_argument("--blocks", default=blocks,
                   help="blocks per level, comma list (e.g. 3,3,4,4)")
    p.add_argument("--base-filters", type=int, default=base_filters)
    p.add_argument("--leaky-slope", type=float, default=0.01)


def _add_train_flags(p, lr, epochs):
    p.add_argument("--lr", type=float, default=lr, help="initial learning rate")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame", type=int, default=400, help="training frame size (px)")
    p.add_argument("--sigma", type=float, default=5.0, help="heat-map sigma (px)")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--plateau-patience", type=int, default=3)
    p.add_argument("--plateau-min-rel", type=float, default=1e-4)
    p.add_argument("--plateau-factor", type=float, default=0.5)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=10,
                   help="save a periodic checkpoint every N epochs (0 = off)")
    p.add_argument("--views", choices=["lax", "sax"], default="lax",
                   help="view group to train (lax = CH2+CH3+CH4 jointly)")


def build_parser():
    p = argparse.ArgumentParser(prog="cardiomark",
                                description="Cardiac MR landmark detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--views", default="CH2,CH3,CH4,SAX",
                   help="comma list cycled round-robin")
    g.add_argument("--contrast", choices=["cine", "inverted"], default="cine")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frame", type=int, default=160)

    t = sub.add_parser("train", help="train a model from scratch")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    _add_train_flags(t, lr=0.001, epochs=50)
    _add_arch_flags(t, base_filters=32, blocks="3,3,4,4")

    f = sub.add_parser("finetune", help="fine-tune an existing checkpoint")
    f.add_argument("--base", required=True, help="checkpoint to start from")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    _add_train_flags(f, lr=0.0005, epochs=10)

    i = sub.add_parser("infer", help="detect landmarks on images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True, help="directory for landmark JSON files")
    i.add_argument("--manifest", help="run on every image of a manifest")
    i.add_argument("--view", choices=sorted(VIEWS),
                   help="view for bare image paths (ignored with --manifest)")
    i.add_argument("--tau", type=float, default=0.5)
    i.add_argument("images", nargs="*", help="image files (when no manifest)")

    e = sub.add_parser("eval", help="compare predictions against manifest labels")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="directory for report.json/report.csv")
    e.add_argument("--checkpoint", help="run the model to get predictions")
    e.add_argument("--pred", help="directory of landmark JSON files from `infer`")
    e.add_argument("--tau", type=float, default=0.5)

    s = sub.add_parser("serve", help="run the inline TCP inference service")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--port", type=int, required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--tau", type=float, default=0.5)
    return p


def _parse_blocks(spec, levels):
    parts = [int(v) for v in str(spec).split(",") if v != ""]
    if len(parts) == 1:
        parts = parts * levels
    return tuple(parts)


def _train_config(args, mode):
    aug = none_augment() if args.no_augment else AugmentConfig()
    return trainer.TrainConfig(
        lr0=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        mode=mode, sigma_px=args.sigma, frame=(args.frame, args.frame),
        plateau_patience=args.plateau_patience,
        plateau_min_rel=args.plateau_min_rel,
        plateau_factor=args.plateau_factor,
        augment=aug,
    )


def _prepared_split(args, config):
    manifest = dataio.load_manifest(args.manifest)
    views = LAX_GROUP if args.views == "lax" else trainer.SAX_GROUP
    subset = [s for s in manifest.samples if s.view in views]
    sub_manifest = dataio.Manifest(samples=subset, root=manifest.root)
    train_raw, val_raw = trainer.split_patients(sub_manifest, 1.0 - args.val_frac,
                                                args.seed)
    train = trainer.prepare_samples(manifest, train_raw, config.frame, config.sigma_px)
    val = trainer.prepare_samples(manifest, val_raw, config.frame, config.sigma_px)
    return train, val


def cmd_phantom_gen(args):
    views = tuple(v.strip() for v in args.views.split(",") if v.strip())
    phantom.gen_dataset(args.n, views, args.contrast, args.seed, args.out,
                        frame=(args.frame, args.frame))
    print(f"wrote {args.n} phantoms to {args.out}")
    return 0


def cmd_train(args):
    config = _train_config(args, "fresh")
    train, val = _prepared_split(args, config)
    arch = ArchConfig(
        num_layers=args.levels,
        blocks_per_layer=_parse_blocks(args.blocks, args.levels),
        base_filters=args.base_filters,
        leaky_slope=args.leaky_slope,
    )
    model = UNet.build(arch, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    ckpt, history = trainer.train(model, train, val, config,
                                  checkpoint_every=args.checkpoint_every,
                                  checkpoint_dir=args.out)
    save_checkpoint(ckpt, os.path.join(args.out, "checkpoint.cmlk"))
    history.write_csv(os.path.join(args.out, "history.csv"))
    best = ckpt.provenance
    print(f"best epoch {best['epoch']} val_loss {best['val_loss']:.6f} "
          f"-> {args.out}/checkpoint.cmlk")
    return 0


def cmd_finetune(args):
    config = _train_config(args, "finetune")
    train, val = _prepared_split(args, config)
    base = load_checkpoint(args.base)
    os.makedirs(args.out, exist_ok=True)
    ckpt, history = trainer.fine_tune(base, train, val, config)
    save_checkpoint(ckpt, os.path.join(args.out, "checkpoint.cmlk"))
    history.write_csv(os.path.join(args.out, "history.csv"))
    print(f"fine-tuned -> {args.out}/checkpoint.cmlk")
    return 0


def _iter_infer_inputs(args):
    if args.manifest:
        manifest = dataio.load_manifest(args.manifest)
        for s in manifest.samples:
            yield s.image, manifest.load_image(s), s.view
    else:
        if not args.images:
            raise CardiomarkError("infer needs --manifest or image paths")
        if not args.view:
            raise CardiomarkError("--view is required for bare image paths")
        for path in args.images:
            yield os.path.basename(path), dataio.read_image(path), args.view


def cmd_infer(args):
    model, frame, _sigma = load_model(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    total = 0.0
    count = 0
    for name, image, view in _iter_infer_inputs(args):
        t0 = time.perf_counter()
        landmarks, length = infer_image(model, image, view, frame, args.tau)
        dt = time.perf_counter() - t0
        total += dt
        count += 1
        doc = landmarks_to_json(landmarks, length, image_name=name)
        out_path = os.path.join(args.out, os.path.splitext(name)[0] + ".landmarks.json")
        with open(out_path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        print(f"{name}: {1000.0 * dt:.1f} ms")
    print(f"series total: {count} frames in {total:.3f} s")
    return 0


def cmd_eval(args):
    if bool(args.checkpoint) == bool(args.pred):
        raise CardiomarkError("eval needs exactly one of --checkpoint or --pred")
    manifest = dataio.load_manifest(args.manifest)
    preds, truths, sequences = [], [], []
    model = frame = None
    if args.checkpoint:
        model, frame, _sigma = load_model(args.checkpoint)
    for s in manifest.samples:
        image = manifest.load_image(s)
        truths.append(s.landmark_set(image.pixels.shape))
        sequences.append(s.sequence)
        if model is not None:
            landmarks, _length = infer_image(model, image, s.view, frame, args.tau)
            preds.append(landmarks)
        else:
            stem = os.path.splitext(s.image)[0]
            with open(os.path.join(args.pred, stem + ".landmarks.json")) as fh:
                preds.append(landmarks_from_json(json.load(fh)))
    report = measure.build_report(preds, truths, sequences)
    os.makedirs(args.out, exist_ok=True)
    report.to_json(os.path.join(args.out, "report.json"))
    report.to_csv(os.path.join(args.out, "report.csv"))
    for g in report.groups:
        print(f"{g['sequence']:>5s} {g['view']}: {g['n_success']}/{g['n_tested']} "
              f"detected ({100.0 * g['detection_rate']:.1f}%)")
    return 0


def cmd_serve(args):
    from .service import serve

    serve(args.checkpoint, args.port, host=args.host, tau=args.tau)
    return 0


_COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return _COMMANDS[args.command](args)
    except (CardiomarkError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
