"""Command line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Results go to stdout (or ``--out``), logs to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import config as cfgmod
from .data import DataError, load_manifest, read_image, split, synth_generate, write_manifest

log = logging.getLogger("tres_iqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "train", "eval", "predict", "flip-report", "retrieve", "qmap", "ablate", "plot", "gradcheck")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_config_keys(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="flat 'key = value' config file")
    group = p.add_argument_group("config keys (override the config file)")
    for key, (_, _, _, default) in cfgmod.schema().items():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V",
                           help=f"default: {cfgmod.format_value(default)}")


def build_parser() -> Parser:
    parser = Parser(prog="tres-iqa", description="No-reference image quality assessment toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=Parser, metavar="COMMAND")

    def add(name, help_, stdout):
        p = sub.add_parser(name, help=help_, description=f"{help_}\n\nstdout: {stdout}",
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        _add_config_keys(p)
        return p

    p = add("synth", "generate the synthetic distortion dataset", "manifest path and record count")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", "train a model", "metric CSV (header + row) for the held-out split")
    p.add_argument("--manifest", help="training manifest (split by reference unless --test-manifest)")
    p.add_argument("--test-manifest", help="held-out manifest")
    p.add_argument("--val-manifest", help="validation manifest for best-checkpoint selection")
    p.add_argument("--out", required=True, help="run directory (checkpoint, logs)")

    p = add("eval", "evaluate a checkpoint", "metric CSV: dataset,n,srocc,plcc,beta1..beta4")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="also write the CSV here")
    p.add_argument("--no-header", action="store_true")

    p = add("predict", "score images", "CSV path,q")
    p.add_argument("--ckpt", required=True)
    p.add_argument("images", nargs="+")

    p = add("flip-report", "horizontal flip sensitivity", "CSV path,q,q_flipped,abs_delta + aggregate row")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")

    p = add("retrieve", "nearest neighbours in latent space", "CSV rank,path,distance,score")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--manifest", required=True, help="gallery manifest")
    p.add_argument("--k", type=int, default=3)

    p = add("qmap", "spatial quality map", "paths of the heat map and overlay PPMs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output path stem")
    p.add_argument("--source", choices=("encoded", "f4"), default="encoded")

    p = add("ablate", "component ablation table", "CSV label,<axes>,srocc,plcc")
    p.add_argument("--manifest", help="dataset manifest, split by reference")
    p.add_argument("--axes", required=True,
                   help="e.g. 'transformer=0,1;ranking_loss=0,1;consistency_transform_kind=hflip,vflip'")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")

    p = add("plot", "prediction vs score scatter plot", "path of the SVG written")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("gradcheck", "finite-difference gradient checks", "CSV op,max_rel_error,passed")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--points", type=int, default=3)
    return parser


def resolve_config(args) -> cfgmod.RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    rc = cfgmod.load_config(args.config, overrides)
    log.info("resolved config:\n%s", rc.dump().rstrip())
    torch.set_num_threads(rc.run.resolved_workers())
    return rc


def _emit(text: str, out=None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _load(args, rc):
    from .trainer import load_checkpoint

    model, meta = load_checkpoint(args.ckpt)
    explicit = {k[4:] for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.config:
        explicit |= set(cfgmod.read_config_file(args.config))
    train_meta = {k: v for k, v in meta.items() if k.startswith(("train.", "loss.")) and k not in explicit}
    tc = rc.train
    if train_meta:
        from_ckpt = cfgmod.train_config_from_flat(train_meta)
        keep = {k.split(".", 1)[1]: getattr(from_ckpt, k.split(".", 1)[1]) for k in train_meta
                if k.startswith("train.")}
        tc = replace(tc, **keep)
    return model, tc


def _manifest_arg(path, rc, which="manifest"):
    path = path or getattr(rc.data, which)
    if not path:
        raise UsageError(f"no {which.replace('_', '-')} given (flag or data.{which})")
    return load_manifest(path)


def cmd_synth(args, rc):
    m = synth_generate(rc.synth, args.out)
    _emit(f"{Path(args.out) / 'manifest.csv'},{len(m)}\n")


def cmd_train(args, rc):
    from .model import TReSModel
    from .trainer import NumericError, evaluate_model, save_checkpoint, train, write_history

    manifest = _manifest_arg(args.manifest, rc)
    if args.test_manifest or rc.data.test_manifest:
        train_m, test_m = manifest, _manifest_arg(args.test_manifest, rc, "test_manifest")
    else:
        train_m, test_m = split(manifest, rc.data.split_seed, rc.data.split_ratio)
    val_m = load_manifest(args.val_manifest) if args.val_manifest else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(rc.dump(), encoding="utf-8")
    write_manifest(train_m, out / "train_manifest.csv")
    write_manifest(test_m, out / "test_manifest.csv")
    log.info("training on %d images (%d refs), holding out %d", len(train_m), len(train_m.ref_ids), len(test_m))

    steps = []

    def progress(row):
        steps.append(row)
        if row["step"] % 50 == 0:
            log.info("step %d epoch %d loss %.4f", row["step"], row["epoch"], row["total"])

    model = TReSModel(rc.model_config())
    try:
        result = train(rc.train, train_m, val_m, model=model, on_step=progress)
    except NumericError:
        # The optimizer validates every gradient before touching any weight,
        # so the model still holds the last finite state.
        save_checkpoint(out / "checkpoint_last_good", model, rc.train, step=len(steps))
        write_history(steps, out / "train_log.csv")
        log.error("saved last good weights to %s", out / "checkpoint_last_good")
        raise
    write_history(result.history, out / "train_log.csv")
    save_checkpoint(out / "checkpoint", result.model, rc.train, step=len(result.history), epoch=rc.train.epochs)
    report = evaluate_model(result.model, test_m, rc.train.test_patches, rc.train.patch_size, rc.train.seed)
    report.dataset = test_m.name
    text = report.to_csv()
    (out / "metrics.csv").write_text(text, encoding="utf-8")
    _emit(text)


def cmd_eval(args, rc):
    from .trainer import evaluate_model

    model, tc = _load(args, rc)
    manifest = load_manifest(args.manifest)
    report = evaluate_model(model, manifest, tc.test_patches, tc.patch_size, tc.seed)
    _emit(report.to_csv(header=not args.no_header), args.out)


def cmd_predict(args, rc):
    from .inference import predict_image

    model, tc = _load(args, rc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("path", "q"))
    for i, path in enumerate(args.images):
        w.writerow((path, repr(predict_image(model, read_image(path), tc.test_patches, tc.patch_size, (tc.seed, i)))))
    _emit(buf.getvalue())


def cmd_flip_report(args, rc):
    from .analysis import flip_report

    model, tc = _load(args, rc)
    rep = flip_report(model, load_manifest(args.manifest), tc.test_patches, tc.patch_size, tc.seed,
                      tag=str(args.ckpt))
    log.info("flip |delta|: mean %.4f median %.4f max %.4f", rep.mean, rep.median, rep.max)
    _emit(rep.to_csv(), args.out)


def cmd_retrieve(args, rc):
    from .analysis import nearest_neighbors

    model, tc = _load(args, rc)
    res = nearest_neighbors(model, read_image(args.query), load_manifest(args.manifest), args.k,
                            tc.test_patches, tc.patch_size, tc.seed, query_path=args.query)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("rank", "path", "distance", "score"))
    for rank, (path, dist, score) in enumerate(res.neighbors, start=1):
        w.writerow((rank, path, repr(dist), repr(score)))
    _emit(buf.getvalue())


def cmd_qmap(args, rc):
    from .analysis import quality_map, save_quality_map

    model, _ = _load(args, rc)
    qmap = quality_map(model, read_image(args.image), args.source)
    heat, blend = save_quality_map(qmap, args.out)
    _emit(f"{heat}\n{blend}\n")


def parse_axes(text: str) -> dict:
    axes = {}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        name, _, values = part.partition("=")
        name = name.strip()
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"axis {name!r} has no values")
        if name != "consistency_transform_kind":
            vals = [cfgmod.parse_value(v, bool) for v in vals]
        axes[name] = vals
    return axes


def cmd_ablate(args, rc):
    from .analysis import ablate, ablation_csv, ablation_grid

    try:
        axes = parse_axes(args.axes)
        ablation_grid(axes)
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = _manifest_arg(args.manifest, rc)
    train_m, test_m = split(manifest, rc.data.split_seed, rc.data.split_ratio)
    rows = ablate(rc, axes, train_m, test_m, seeds, log=log.info)
    _emit(ablation_csv(rows), args.out)


def cmd_plot(args, rc):
    from .analysis import scatter_from_model

    model, tc = _load(args, rc)
    path = scatter_from_model(model, load_manifest(args.manifest), tc.test_patches, tc.patch_size,
                              args.out, tc.seed)
    _emit(f"{path}\n")


def cmd_gradcheck(args, rc):
    from .gradcheck import run_suite

    results = run_suite(points=args.points, seed=rc.train.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("op", "max_rel_error", "passed"))
    failed = False
    for res in results:
        ok = res.passed(args.tol)
        failed |= not ok
        w.writerow((res.op, f"{res.max_rel_error:.3e}", ok))
    _emit(buf.getvalue())
    if failed:
        raise FloatingPointError("gradient check failed")


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "flip-report": cmd_flip_report, "retrieve": cmd_retrieve, "qmap": cmd_qmap,
    "ablate": cmd_ablate, "plot": cmd_plot, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    from .trainer import CheckpointError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if not args.command:
        sys.stderr.write(parser.format_help())
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve_config(args)
        HANDLERS[args.command](args, rc)
    except (UsageError, cfgmod.ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FloatingPointError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
