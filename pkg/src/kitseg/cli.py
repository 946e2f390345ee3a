"""Command-line entry point: ``kitseg <subcommand> ...``.

Exit codes
----------
0  success
1  unexpected internal error
2  usage or configuration error
3  missing input file or directory
4  malformed KVL1/KCK1 file
5  checkpoint incompatible with the network architecture
6  invalid data (geometry, shape, labels, empty sampling group)
7  non-finite loss or gradient during training
8  gradient check failed

Failures print one line to stderr: ``error: category=<name> message=<text>``.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import gradcheck
from .evaluation import DiceReport
from .exceptions import FormatError, IncompatibleCheckpointError, KitsegError, NonFiniteError
from .networks import build_from_arch
from .pipeline import predict_stage1_only, predict_volume
from .preprocess import VolumePreprocessor, parse_key_values
from .scale import DESK, FULL
from .training import PRESETS, fit_network, log_csv, split_volumes
from .volume_io import (LabelVolume, generate_phantom, load_checkpoint, random_phantom_spec,
                        read_volume, save_checkpoint, write_volume)

logger = logging.getLogger("kitseg")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING = 0, 1, 2, 3
EXIT_FORMAT, EXIT_CHECKPOINT, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 4, 5, 6, 7, 8

IMAGE, LABEL = "imaging.kvl", "segmentation.kvl"


class UsageError(Exception):
    category = "usage"


class GradcheckFailed(Exception):
    category = "gradcheck"


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# configuration resolution: flag > config file > scale preset
# --------------------------------------------------------------------------

def _floats(text):
    return tuple(float(v) for v in str(text).strip("()[]").split(","))


def _ints(text):
    return tuple(int(float(v)) for v in str(text).strip("()[]").split(","))


def _tunables(scale):
    """Per-subcommand ``{key: (default, cast)}`` under ``scale``."""
    pipe = scale.pipeline_config()
    return {
        "phantom": {"count": (10, int), "tumor_fraction": (0.75, float),
                    "dims": (scale.phantom_dims, _ints), "spacing": (scale.phantom_spacing, _floats),
                    "noise": (10.0, float)},
        "preprocess": {"thickness": (scale.thickness, float), "hu_min": (-30.0, float),
                       "hu_max": (300.0, float)},
        "train": {"max_epochs": (scale.max_epochs, int), "base_channels": (scale.base_channels, int),
                  "epoch_iterations": (scale.epoch_iterations, int), "max_iterations": (0, int),
                  "batch_size": (32, int), "val_fraction": (0.1, float),
                  "l2_scale": (scale.l2_scale, float), "stage1_size": (scale.stage1_size, int),
                  "roi_size": (scale.roi_size, int),
                  "roi_jitter": (scale.roi_jitter, int)},
        "predict": {"thickness": (scale.thickness, float), "hu_min": (-30.0, float),
                    "hu_max": (300.0, float), "stage1_size": (scale.stage1_size, int),
                    "roi_size": (scale.roi_size, int), "min_voxels": (pipe.min_voxels_final, int),
                    "ensemble": ("mean", str), "batch_size": (16, int), "jobs": (1, int)},
        "evaluate": {"jobs": (1, int)},
        "gradcheck": {"shapes": (5, int)},
    }


def resolve(args):
    """Fill unset tunables from the config file, then from the scale preset."""
    scale = DESK if args.desk else FULL
    file_values = {}
    if args.config:
        with open(args.config) as fh:
            file_values = parse_key_values(fh.read())
    keys = _tunables(scale)[args.command]
    unknown = set(file_values) - set(keys) - {"seed", "desk"}
    if unknown:
        raise UsageError(f"config file keys not valid for {args.command}: {sorted(unknown)}")
    if args.seed is None:
        args.seed = int(file_values.get("seed", 0))
    resolved = {"command": args.command, "scale": scale.name, "seed": args.seed}
    for key, (default, cast) in keys.items():
        value = getattr(args, key, None)
        if value is None:
            value = cast(file_values[key]) if key in file_values else default
        setattr(args, key, value)
        resolved[key] = list(value) if isinstance(value, tuple) else value
    for key in ("preset", "stage", "data", "out", "input", "pred", "gt", "report", "table",
                "stage1", "stage2", "op"):
        if getattr(args, key, None) is not None:
            resolved[key] = getattr(args, key)
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    args.scale = scale
    args.resolved = resolved
    return args


# --------------------------------------------------------------------------
# case directories
# --------------------------------------------------------------------------

def _require(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return path


def list_cases(root):
    """Case directories (holding ``imaging.kvl``) under ``root``, sorted."""
    root = _require(root)
    cases = sorted(p for p in root.iterdir() if (p / IMAGE).is_file())
    if not cases:
        raise FileNotFoundError(f"no case directories with {IMAGE} under {root}")
    return cases


def _mask_files(root, name=LABEL):
    """``{case_id: path}`` from either case directories or flat ``*.kvl`` files."""
    root = _require(root)
    if root.is_file():
        return {root.stem: root}
    out = {p.name: p / name for p in root.iterdir() if (p / name).is_file()}
    if not out:
        out = {p.stem: p for p in root.glob("*.kvl")}
    if not out:
        raise FileNotFoundError(f"no masks found under {root}")
    return dict(sorted(out.items()))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_phantom(args):
    out = Path(args.out)
    rng = np.random.default_rng([args.seed, 0x9A7])
    tumors = rng.random(args.count) < args.tumor_fraction
    for i in range(args.count):
        spec = random_phantom_spec(args.seed * 100003 + i, tumor=bool(tumors[i]), dims=args.dims,
                                   spacing=args.spacing, noise_sigma=args.noise)
        image, labels = generate_phantom(spec)
        case = out / f"case_{i:05d}"
        case.mkdir(parents=True, exist_ok=True)
        write_volume(image, case / IMAGE)
        write_volume(labels, case / LABEL)
    logger.info("wrote %d phantoms to %s (%d with tumor)", args.count, out, int(tumors.sum()))
    return EXIT_OK


def cmd_preprocess(args):
    pre = VolumePreprocessor(args.thickness, args.hu_min, args.hu_max).fit()
    out = Path(args.out)
    for case in list_cases(args.input):
        dest = out / case.name
        dest.mkdir(parents=True, exist_ok=True)
        write_volume(pre.transform(read_volume(case / IMAGE)), dest / IMAGE)
        if (case / LABEL).is_file():
            write_volume(pre.transform_labels(read_volume(case / LABEL)), dest / LABEL)
    return EXIT_OK


def cmd_train(args):
    cfg = args.scale.train_config(
        args.preset, seed=args.seed, max_epochs=args.max_epochs, base_channels=args.base_channels,
        epoch_iterations=args.epoch_iterations, max_iterations=args.max_iterations,
        batch_size=args.batch_size, val_fraction=args.val_fraction, l2_scale=args.l2_scale)
    if args.stage is not None and args.stage != cfg.stage:
        raise UsageError(f"preset {args.preset} trains stage {cfg.stage}, not stage {args.stage}")
    cases = []
    for case in list_cases(args.data):
        if not (case / LABEL).is_file():
            raise FileNotFoundError(f"training case {case} has no {LABEL}")
        cases.append((case.name, read_volume(case / IMAGE), read_volume(case / LABEL)))
    tr, va = split_volumes([c[0] for c in cases], cfg.val_fraction, cfg.seed)
    train_cases = [c for c in cases if c[0] in set(tr)]
    val_cases = [c for c in cases if c[0] in set(va)] or train_cases
    size = args.stage1_size if cfg.stage == 1 else args.roi_size
    jitter = args.roi_jitter if cfg.stage == 2 else 0
    result = fit_network(cfg, train_cases, val_cases, size, jitter)
    meta = dict(result.meta, resolved_config=args.resolved,
                train_cases=tr, val_cases=va)
    save_checkpoint(result.network.state_dict(), result.optimizer.to_arrays(), meta, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.csv")
    log_path.write_text(log_csv(result.log))
    logger.info("best epoch %d, validation score %.4f", result.best_epoch, result.best_score)
    return EXIT_OK


def load_network(path):
    ck = load_checkpoint(_require(path))
    arch = ck.meta.get("arch")
    if arch is None:
        raise IncompatibleCheckpointError(f"{path}: checkpoint has no architecture record")
    net = build_from_arch(arch)
    try:
        net.load_state_dict(ck.params)
    except IncompatibleCheckpointError as exc:
        raise IncompatibleCheckpointError(f"{path}: {exc}") from exc
    return net.eval(), ck.meta


def _contours(mask):
    inner = ndimage.binary_erosion(mask, structure=np.array([[[0, 1, 0], [1, 1, 1], [0, 1, 0]]]))
    return mask & ~inner


def write_overlay(image, labels, out_dir, stem):
    """One PNG per slice: windowed grayscale with kidney (green) and tumor (red) outlines."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gray = np.clip((image.data - (-30.0)) / 330.0, 0, 1) * 255
    rgb = np.repeat(gray.astype(np.uint8)[..., None], 3, axis=-1)
    rgb[_contours(labels.data == 1)] = (0, 255, 0)
    rgb[_contours(labels.data == 2)] = (255, 0, 0)
    for z in range(rgb.shape[0]):
        Image.fromarray(rgb[z]).save(out_dir / f"{stem}_z{z:03d}.png")


def cmd_predict(args):
    stage1, meta1 = load_network(args.stage1)
    stage2 = []
    if not args.stage1_only:
        if not args.stage2:
            raise UsageError("--stage2 is required unless --stage1-only is given")
        stage2 = [load_network(p)[0] for p in args.stage2.split(",") if p]
    if meta1.get("stage", 1) != 1:
        logger.warning("%s was trained for stage %s", args.stage1, meta1.get("stage"))
    cfg = args.scale.pipeline_config(
        thickness=args.thickness, hu_min=args.hu_min, hu_max=args.hu_max,
        stage1_size=args.stage1_size, roi_size=args.roi_size, min_voxels_stage1=args.min_voxels,
        min_voxels_final=args.min_voxels, ensemble=args.ensemble, batch_size=args.batch_size)
    source = _require(args.input)
    if source.is_file():
        jobs = [(source.stem, source, Path(args.out))]
    else:
        out = Path(args.out)
        jobs = [(c.name, c / IMAGE, out / f"{c.name}.kvl") for c in list_cases(source)]

    def run(job):
        name, src, dest = job
        raw = read_volume(src)
        if args.stage1_only:
            mask = predict_stage1_only(raw, stage1, cfg)
        else:
            res = predict_volume(raw, stage1, stage2, cfg, return_details=True)
            mask = res.labels
            for w in res.warnings:
                logger.warning("%s: %s", name, w)
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_volume(mask, dest)
        if args.overlay:
            write_overlay(raw, mask, args.overlay, name)
        return name

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        for name in pool.map(run, jobs):
            logger.info("predicted %s", name)
    return EXIT_OK


def _named_dirs(items):
    out = []
    for item in items:
        name, sep, path = item.partition("=")
        out.append((name, path) if sep else (Path(item).name, item))
    return out


def cmd_evaluate(args):
    gt = _mask_files(args.gt)
    report = DiceReport()
    models = _named_dirs(args.pred)
    for model, path in models:
        preds = _mask_files(path)
        missing = sorted(set(gt) - set(preds))
        if missing:
            raise FileNotFoundError(f"{path}: no prediction for {missing[:3]}")

        def score(case):
            return case, read_volume(gt[case]), read_volume(preds[case])

        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            for case, g, p in pool.map(score, list(gt)):
                if not isinstance(p, LabelVolume):
                    raise FormatError(f"{preds[case]} is not a label volume")
                report.add(model, case, g, p)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    if len(models) == 1:
        report_path.write_text(report.case_csv(models[0][0]))
    else:
        for model, _ in models:
            path = report_path.with_name(f"{report_path.stem}_{model}{report_path.suffix}")
            path.write_text(report.case_csv(model))
    if args.table:
        Path(args.table).write_text(report.table_csv())
    for model, _ in models:
        s = report.summary(model)
        print(f"{model}: dice_kidney {s['dice_kidney'][0]:.4f} ± {s['dice_kidney'][1]:.4f}  "
              f"dice_tumor {s['dice_tumor'][0]:.4f} ± {s['dice_tumor'][1]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args):
    ops = [args.op] if args.op else None
    if args.op and args.op not in gradcheck.CASES:
        raise UsageError(f"unknown op {args.op!r}; choose from {sorted(gradcheck.CASES)}")
    rows = gradcheck.run_suite(ops, shapes_per_op=args.shapes, seed=args.seed)
    print(f"{'op':<24}{'max_rel_err':>14}{'seconds':>10}  status")
    failed = []
    for op, err, secs in rows:
        ok = err < gradcheck.TOLERANCE
        failed += [] if ok else [op]
        print(f"{op:<24}{err:>14.3e}{secs:>10.3f}  {'pass' if ok else 'FAIL'}")
    if failed:
        raise GradcheckFailed(f"ops above tolerance {gradcheck.TOLERANCE}: {failed}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    common = Parser(add_help=False)
    common.add_argument("--config", help="key=value file; explicit flags take precedence")
    common.add_argument("--seed", type=int)
    common.add_argument("--desk", action="store_true", help="desk-scale preset (small CPU run)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="kitseg", description="Coarse-to-fine kidney and tumor segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("phantom", parents=[common], help="generate synthetic CT volumes")
    s.add_argument("--count", type=int)
    s.add_argument("--tumor-fraction", type=float)
    s.add_argument("--dims", type=_ints, help="nx,ny,nz")
    s.add_argument("--spacing", type=_floats, help="sx,sy,sz in mm")
    s.add_argument("--noise", type=float)
    s.add_argument("--out", required=True)

    s = sub.add_parser("preprocess", parents=[common], help="reslice, window and standardize")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--thickness", type=float)
    s.add_argument("--hu-min", type=float)
    s.add_argument("--hu-max", type=float)

    s = sub.add_parser("train", parents=[common], help="train one network")
    s.add_argument("--preset", required=True, choices=sorted(PRESETS))
    s.add_argument("--stage", type=int, choices=(1, 2))
    s.add_argument("--data", required=True, help="preprocessed case directory")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    for flag, kind in (("--max-epochs", int), ("--base-channels", int), ("--epoch-iterations", int),
                       ("--max-iterations", int), ("--batch-size", int), ("--val-fraction", float),
                       ("--l2-scale", float), ("--stage1-size", int), ("--roi-size", int),
                       ("--roi-jitter", int)):
        s.add_argument(flag, type=kind)

    s = sub.add_parser("predict", parents=[common], help="segment raw volumes")
    s.add_argument("--stage1", required=True)
    s.add_argument("--stage2", help="comma-separated stage-2 checkpoints (ensemble members)")
    s.add_argument("--stage1-only", action="store_true", help="3-class output of stage 1 alone")
    s.add_argument("--in", dest="input", required=True, help="KVL1 volume or case directory")
    s.add_argument("--out", required=True)
    s.add_argument("--overlay", help="directory for per-slice PNG overlays")
    for flag, kind in (("--thickness", float), ("--hu-min", float), ("--hu-max", float),
                       ("--stage1-size", int), ("--roi-size", int), ("--min-voxels", int),
                       ("--batch-size", int), ("--jobs", int)):
        s.add_argument(flag, type=kind)
    s.add_argument("--ensemble", choices=("mean", "vote"))

    s = sub.add_parser("evaluate", parents=[common], help="Dice report")
    s.add_argument("--pred", required=True, action="append",
                   help="[NAME=]DIR of predicted masks; repeat for several models")
    s.add_argument("--gt", required=True)
    s.add_argument("--report", required=True, help="per-case CSV")
    s.add_argument("--table", help="one summary row per model")
    s.add_argument("--jobs", type=int)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--op")
    s.add_argument("--shapes", type=int)
    return p


COMMANDS = {"phantom": cmd_phantom, "preprocess": cmd_preprocess, "train": cmd_train,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def _fail(code, category, exc):
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: category={category} message={message}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing-file", exc)
    except IncompatibleCheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, exc.category, exc)
    except FormatError as exc:
        return _fail(EXIT_FORMAT, exc.category, exc)
    except NonFiniteError as exc:
        return _fail(EXIT_NUMERIC, exc.category, exc)
    except GradcheckFailed as exc:
        return _fail(EXIT_GRADCHECK, exc.category, exc)
    except (KitsegError, ValueError) as exc:
        return _fail(EXIT_DATA, getattr(exc, "category", "data"), exc)
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        logger.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, "internal", exc)


if __name__ == "__main__":
    sys.exit(main())
