"""camsticker command-line interface.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or invalid input files,
4 failures during computation.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import read_artifact, read_image, read_structured, sha256_file, write_artifact, write_image
from .attack import AttackConfig, AttackResult, PGDBounds, pgd_unconstrained, run_attack, stage_summary
from .calib import (
    CapturePair,
    ColorCalibration,
    GridSpec,
    ThreatModel,
    candidate_lattice,
    fit_color_transform,
    fit_shared_shape,
    select_palette,
)
from .classifiers import builtin_toy_network, load_backend, train_classifier
from .evaluation import LabeledDataset, dot_count_sweep, evaluate_fooling, sweep_table, synth_shapes_dataset
from .export import DEFAULT_DPI, DEFAULT_MIN_RADIUS_IN, DEFAULT_SCALE, StickerExportSpec, layout_dots, render_sticker
from .perturb import StickerPattern, render_preview

log = logging.getLogger("camsticker")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_COMPUTE = 4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


def _load(what, fn, *args, **kwargs):
    """Run a loader, reporting any failure as an input error."""
    try:
        return fn(*args, **kwargs)
    except InputError:
        raise
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read {what}: {exc}") from exc
    except Exception as exc:  # e.g. YAML syntax errors
        raise InputError(f"cannot read {what}: {exc}") from exc


def _hash_inputs(**paths):
    # file names and hashes only, so outputs do not depend on where inputs live
    out = {}
    for name, p in paths.items():
        if p is None:
            continue
        p = Path(p)
        out[name] = {"file": p.name, "sha256": sha256_file(p)}
    return out


def _model_files(spec):
    kind, _, rest = spec.partition(":")
    model, _, sidecar = rest.partition("::")
    files = {"model": model}
    if sidecar:
        files["model_sidecar"] = sidecar
    return files


def _open_model(spec):
    return _load(f"model {spec!r}", load_backend, spec)


def _open_dataset(path):
    return _load(f"dataset manifest {path}", LabeledDataset.from_manifest, path)


def _check_classes(classifier, *classes):
    for c in classes:
        if not 0 <= c < classifier.num_classes:
            raise UsageError(f"class index {c} out of range for a {classifier.num_classes}-class model")


# --------------------------------------------------------------------------
# manifests


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def read_calibration_manifest(path):
    """Capture pairs and printed/observed color pairs from a YAML/JSON manifest.

    Layout::

        capture_pairs:
          - {clean: a.png, dotted: b.png, center_hint: [i, j], printed_color: [r, g, b]}
        color_pairs:
          - {printed: [r, g, b], observed: [r, g, b]}
    """
    path = Path(path)
    doc = read_structured(path) or {}
    if not isinstance(doc, dict):
        raise ValueError("manifest must be a mapping")
    base = path.parent
    pairs = []
    for n, row in enumerate(doc.get("capture_pairs") or []):
        try:
            clean = read_image(_resolve(base, row["clean"]))
            dotted = read_image(_resolve(base, row["dotted"]))
            pairs.append(CapturePair(clean, dotted, tuple(row["center_hint"]), tuple(row["printed_color"])))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"capture pair {n}: {exc}") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"capture pair {n}: {exc}") from exc
    colors = []
    for n, row in enumerate(doc.get("color_pairs") or []):
        try:
            colors.append((tuple(map(float, row["printed"])), tuple(map(float, row["observed"]))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"color pair {n}: {exc}") from exc
    return pairs, colors


# --------------------------------------------------------------------------
# commands


def cmd_calibrate(args):
    _, colors = _load("calibration manifest", read_calibration_manifest, args.manifest)
    if not colors:
        raise InputError(f"{args.manifest}: no color_pairs to fit")
    cal = fit_color_transform(colors)
    write_artifact(args.output, "color-calibration", cal.to_dict(), _hash_inputs(manifest=args.manifest))
    print(f"k = {list(cal.k)}\nb = {list(cal.b)}\nresidual rms = {list(cal.residual_rms)}")


def cmd_fit(args):
    pairs, _ = _load("calibration manifest", read_calibration_manifest, args.manifest)
    if not pairs:
        raise InputError(f"{args.manifest}: no capture_pairs to fit")
    cal = ColorCalibration()
    if args.calibration:
        doc = _load("calibration artifact", read_artifact, args.calibration, "color-calibration")
        cal = ColorCalibration.from_dict(doc["payload"])
    sizes = {p.clean.shape for p in pairs}
    if len(sizes) != 1:
        raise InputError(f"capture pairs differ in size: {sorted(sizes)}")
    ch, cw = pairs[0].clean.shape[:2]
    fh, fw = args.frame or (ch, cw)

    fit = fit_shared_shape(
        pairs, cal, inner_steps=args.inner_steps, max_sweeps=args.max_sweeps, tol=args.tol, threads=args.threads
    )
    factor = min(fh, fw) / min(ch, cw)
    shape = fit.shape.scaled(factor)
    grid = GridSpec.for_image(fh, fw, args.grid_cells)

    diagnostics = {
        "capture_shape": fit.shape.to_dict(),
        "frame_scale": factor,
        "pair_ssim": fit.ssim,
        "mean_ssim": fit.mean_ssim,
        "sweeps": fit.sweeps,
    }
    inputs = _hash_inputs(manifest=args.manifest, calibration=args.calibration)
    if args.model:
        if not args.dataset:
            raise UsageError("--model needs --dataset for palette scoring")
        classifier = _open_model(args.model)
        ds = _open_dataset(args.dataset).split("train-attack")
        if args.palette_class is not None:
            ds = ds.of_class(args.palette_class)
        if args.palette_images:
            ds = LabeledDataset(ds.items[: args.palette_images], ds.class_names)
        if not len(ds):
            raise InputError("no train-attack images available for palette scoring")
        images = _load("dataset images", ds.images)
        printed, observed = candidate_lattice(args.levels, cal)
        palette, scores, order = select_palette(
            observed, classifier, images, shape, grid, args.trials, args.palette_size, args.seed
        )
        palette_printed = [printed[k] for k in order]
        diagnostics["palette_scores"] = scores
        inputs.update(_hash_inputs(dataset=args.dataset, **_model_files(args.model)))
    else:
        # without a model, the palette is the observed colors of the captured dots
        seen = []
        for p in pairs:
            if p.printed_color not in seen:
                seen.append(p.printed_color)
        palette_printed = seen[: args.palette_size]
        palette = [tuple(float(v) for v in cal.apply(c)) for c in palette_printed]
    tm = ThreatModel(shape, tuple(palette), grid, args.max_dots, tuple(palette_printed), diagnostics)
    write_artifact(args.output, "threat-model", tm.to_dict(), inputs)
    s = shape
    print(f"shape: radius {s.radius:.4f}  alpha_max {s.alpha_max:.4f}  beta {s.beta:.4f}")
    print(f"mean SSIM {fit.mean_ssim:.6f} over {len(pairs)} pair(s), {fit.sweeps} sweep(s)")
    print(f"palette: {len(palette)} colors; grid {grid.rows}x{grid.cols} spacing {grid.spacing:g}")


def _attack_inputs(args):
    ds = _open_dataset(args.dataset)
    tm_doc = _load("threat model", read_artifact, args.threat_model, "threat-model")
    tm = _load("threat model", ThreatModel.from_dict, tm_doc["payload"])
    classifier = _open_model(args.model)
    _check_classes(classifier, args.victim, args.target)
    attack_set = ds.of_class(args.victim).split("train-attack")
    if args.max_images:
        attack_set = LabeledDataset(attack_set.items[: args.max_images], attack_set.class_names)
    if not len(attack_set):
        raise InputError(f"no train-attack images of class {args.victim} in {args.dataset}")
    images = _load("dataset images", attack_set.images)
    inputs = _hash_inputs(threat_model=args.threat_model, dataset=args.dataset, **_model_files(args.model))
    return ds, tm, classifier, images, inputs


def _config(args, tm, k):
    if not 0 <= k <= tm.max_dots:
        raise UsageError(f"--dots must be in [0, {tm.max_dots}]")
    return AttackConfig(
        args.victim,
        args.target,
        k,
        tm,
        max_sweeps=args.max_sweeps,
        tol=args.tol,
        subsample=args.subsample,
        seed=args.seed,
        threads=args.threads,
        fine_tune_steps=args.fine_tune_steps,
        finite_difference=args.finite_difference,
    )


def cmd_attack(args):
    ds, tm, classifier, images, inputs = _attack_inputs(args)
    config = _config(args, tm, args.dots)
    if args.unconstrained:
        bounds = PGDBounds.for_image(*images.shape[1:3])
        pattern = pgd_unconstrained(
            images,
            args.victim,
            args.target,
            args.dots,
            bounds,
            classifier,
            steps=args.pgd_steps,
            seed=args.seed,
            finite_difference=args.finite_difference,
        )
        summary = stage_summary("unconstrained", pattern, images, config, classifier)
        result = AttackResult(pattern, [(0, summary.loss)], stages=[summary])
    else:
        result = run_attack(config, classifier, images, fine_tune=not args.no_fine_tune)
    payload = {
        "mode": "unconstrained" if args.unconstrained else "threat-model",
        "config": config.to_dict(),
        "result": result.to_dict(),
        "threat_model": tm.to_dict(),
        "image_shape": list(images.shape[1:3]),
        "n_attack_images": len(images),
        "class_names": list(ds.class_names) if ds.class_names else None,
    }
    write_artifact(args.output, "attack", payload, inputs)
    for st in result.stages:
        print(
            f"{st.stage:<14} loss {st.loss:12.4f}  correct {100 * st.fraction_correct:5.1f}%  "
            f"target {100 * st.fraction_target:5.1f}%  other {100 * st.fraction_other:5.1f}%"
        )


def _read_attack(path):
    doc = _load("attack artifact", read_artifact, path, "attack")
    pay = doc["payload"]
    pattern = _load("attack artifact", StickerPattern.from_dict, pay["result"]["pattern"])
    return doc, pay, pattern


def cmd_evaluate(args):
    _, pay, pattern = _read_attack(args.attack)
    victim, target = pay["config"]["victim"], pay["config"]["target"]
    ds = _open_dataset(args.dataset)
    classifier = _open_model(args.model)
    _check_classes(classifier, victim, target)
    items = ds.split(args.split).of_class(victim)
    if not len(items):
        raise InputError(f"no {args.split} images of class {victim} in {args.dataset}")
    report = evaluate_fooling(pattern, items, victim, target, classifier, threads=args.threads)
    names = pay.get("class_names") or [str(c) for c in range(classifier.num_classes)]
    table = report.table(names[victim], names[target], attacked=len(pattern) > 0)
    if args.output:
        inputs = _hash_inputs(attack=args.attack, dataset=args.dataset, **_model_files(args.model))
        payload = {"split": args.split, "victim": victim, "target": target, "report": report.to_dict(), "table": table}
        write_artifact(args.output, "fooling-report", payload, inputs)
    print(table, end="")


def cmd_render(args):
    _, pay, pattern = _read_attack(args.attack)
    background = None
    if args.background:
        background = _load("background image", read_image, args.background)
    h, w = args.size or pay.get("image_shape") or (224, 224)
    write_image(args.output, render_preview(pattern, background, h, w))


def cmd_export_sticker(args):
    _, pay, pattern = _read_attack(args.attack)
    try:
        spec = StickerExportSpec(args.dpi, args.scale, tuple(args.canvas) if args.canvas else None, args.mirror,
                                 args.min_radius)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    frame = tuple(pay.get("image_shape") or (224, 224))
    tm = ThreatModel.from_dict(pay["threat_model"]) if pay.get("threat_model") else None
    color_map = tm.printed_color if tm is not None else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        placed = layout_dots(pattern, frame, spec, color_map)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_image(args.output, render_sticker(placed, frame, spec), dpi=spec.dpi)
    cw, ch = spec.canvas_inches(frame)
    sidecar = Path(args.output).with_suffix(".layout.json")
    payload = {
        "spec": spec.to_dict(),
        "canvas_in": [cw, ch],
        "camera_frame": list(frame),
        "dots": [d.to_dict() for d in placed],
        "note": "Register the transparency so the canvas center sits on the lens axis.",
    }
    write_artifact(sidecar, "sticker-layout", payload, _hash_inputs(attack=args.attack))
    print(f"{len(placed)} dot(s) on a {cw:.4f} x {ch:.4f} in canvas at {spec.dpi:g} dpi; layout in {sidecar}")


def cmd_sweep(args):
    ds, tm, classifier, _, inputs = _attack_inputs(args)
    config = _config(args, tm, 0)
    for k in args.counts:
        if not 1 <= k <= tm.max_dots:
            raise UsageError(f"dot count {k} outside [1, {tm.max_dots}]")
    rows = dot_count_sweep(
        config, args.counts, classifier, ds, fine_tune=not args.no_fine_tune, attack_images=args.max_images
    )
    table = sweep_table(rows)
    if args.output:
        payload = {
            "config": config.to_dict(),
            "rows": [
                {
                    "num_dots": r.num_dots,
                    "targeted_rate": r.targeted_rate,
                    "loss": r.loss,
                    "error": r.error,
                    "report": r.report.to_dict() if r.report else None,
                }
                for r in rows
            ],
            "table": table,
        }
        write_artifact(args.output, "dot-count-sweep", payload, inputs)
    print(table, end="")
    if any(r.error for r in rows):
        return EXIT_COMPUTE
    return EXIT_OK


def cmd_shapes(args):
    ds = synth_shapes_dataset(args.seed, args.n_per_class, args.size, args.test_fraction)
    out = ds.write(args.output)
    print(f"{len(ds)} images -> {out}")


def cmd_train_toy(args):
    ds = _open_dataset(args.dataset)
    train = ds.split("train-attack")
    if not len(train):
        raise InputError(f"{args.dataset} has no train-attack items")
    x = _load("dataset images", train.images)
    y = train.labels()
    n_classes = len(ds.class_names) if ds.class_names else int(ds.labels().max()) + 1
    net = builtin_toy_network(args.seed, args.arch, x.shape[1:3], n_classes, channels=tuple(args.channels))
    net.labels = list(ds.class_names) if ds.class_names else None
    train_classifier(net, x, y, epochs=args.epochs, lr=args.lr, seed=args.seed, log=log.info)
    net.save(args.output)
    test = ds.split("test")
    if len(test):
        acc = float(np.mean(net.predict(test.images()) == test.labels()))
        print(f"test accuracy {100 * acc:.1f}% on {len(test)} images")


# --------------------------------------------------------------------------
# parser


def _class_index(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"class index must be an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("class index must be >= 0")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_attack_options(p, single=True):
    p.add_argument("--threat-model", required=True, help="threat-model artifact from 'fit'")
    p.add_argument("--dataset", required=True, help="dataset manifest (JSON/YAML)")
    p.add_argument("--model", required=True, help="builtin:<weights.npz> or onnx:<model.onnx>[::<sidecar>]")
    p.add_argument("--victim", type=_class_index, required=True, help="true class y*")
    p.add_argument("--target", type=_class_index, required=True, help="target class y_targ")
    if single:
        p.add_argument("--dots", type=int, default=6, help="number of dots K (default 6)")
    p.add_argument("--max-images", type=_positive_int, help="attack on the first N victim train-attack images")
    p.add_argument("--max-sweeps", type=_positive_int, default=5)
    p.add_argument("--tol", type=float, default=1e-4, help="relative loss improvement that ends the sweeps")
    p.add_argument("--subsample", type=_positive_int, help="run early sweeps on a random subset of this size")
    p.add_argument("--fine-tune-steps", type=int, default=200)
    p.add_argument("--no-fine-tune", action="store_true")
    p.add_argument("--finite-difference", action="store_true", help="use finite differences for gradient-free models")


def build_parser():
    parser = argparse.ArgumentParser(prog="camsticker", description="Camera-lens sticker attacks on image classifiers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    parser.add_argument("--threads", type=_positive_int, default=1, help="worker threads (default 1)")
    parser.add_argument("--config", help="YAML/JSON file of option defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the printed -> observed color transform")
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit", help="fit the shared dot shape and choose a palette")
    p.add_argument("manifest")
    p.add_argument("--calibration", help="color-calibration artifact (identity if omitted)")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--frame", type=int, nargs=2, metavar=("H", "W"), help="attack image size (default: capture size)")
    p.add_argument("--grid-cells", type=_positive_int, default=45)
    p.add_argument("--max-dots", type=_positive_int, default=10)
    p.add_argument("--inner-steps", type=_positive_int, default=50)
    p.add_argument("--max-sweeps", type=_positive_int, default=20)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--model", help="classifier for palette scoring")
    p.add_argument("--dataset", help="dataset manifest supplying palette-scoring images")
    p.add_argument("--palette-class", type=_class_index, help="score colors on this class only")
    p.add_argument("--palette-images", type=_positive_int, help="use at most N scoring images")
    p.add_argument("--palette-size", type=_positive_int, default=10)
    p.add_argument("--levels", type=_positive_int, default=5, help="candidate lattice levels per channel")
    p.add_argument("--trials", type=_positive_int, default=20, help="random placements per candidate color")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("attack", help="craft a targeted universal sticker")
    _add_attack_options(p)
    p.add_argument("--unconstrained", action="store_true", help="projected gradient ascent on all dot parameters")
    p.add_argument("--pgd-steps", type=_positive_int, default=100)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="correct / target / other fractions on held-out images")
    p.add_argument("attack")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["test", "train-attack"])
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="preview a pattern over white or a background image")
    p.add_argument("attack")
    p.add_argument("--background")
    p.add_argument("--size", type=_positive_int, nargs=2, metavar=("H", "W"))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("export-sticker", help="print-ready bitmap of opaque dots")
    p.add_argument("attack")
    p.add_argument("--dpi", type=float, default=DEFAULT_DPI)
    p.add_argument("--scale", type=float, default=DEFAULT_SCALE, help="printed inches per camera pixel of radius")
    p.add_argument("--canvas", type=float, nargs=2, metavar=("W_IN", "H_IN"))
    p.add_argument("--mirror", action="store_true", help="mirror left-right for the lens-facing side")
    p.add_argument("--min-radius", type=float, default=DEFAULT_MIN_RADIUS_IN, help="smallest printable radius, inches")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_export_sticker)

    p = sub.add_parser("sweep", help="targeted fooling rate versus number of dots")
    _add_attack_options(p, single=False)
    p.add_argument("--counts", type=_positive_int, nargs="+", default=[1, 3, 5, 7, 10])
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("shapes", help="write the synthetic shapes dataset")
    p.add_argument("output")
    p.add_argument("--n-per-class", type=_positive_int, default=400)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("train-toy", help="train the built-in network on a dataset's train-attack split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default="conv2", choices=["conv2"])
    p.add_argument("--channels", type=_positive_int, nargs=2, default=[16, 32])
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train_toy)
    return parser, sub


def _apply_config(parser, sub, argv):
    """Install defaults from --config: top-level keys for global flags, a section per command."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        doc = read_structured(known.config) or {}
    except Exception as exc:
        raise InputError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"{known.config}: config must be a mapping")
    commands = sub.choices
    top = {k.replace("-", "_"): v for k, v in doc.items() if k not in commands}
    unknown = set(top) - {"seed", "threads", "verbose"}
    if unknown:
        raise UsageError(f"{known.config}: unknown global option(s) {sorted(unknown)}")
    parser.set_defaults(**top)
    for name, section in doc.items():
        if name in commands:
            if not isinstance(section, dict):
                raise InputError(f"{known.config}: section {name!r} must be a mapping")
            dests = {a.dest for a in commands[name]._actions}
            opts = {k.replace("-", "_"): v for k, v in section.items()}
            bad = set(opts) - dests
            if bad:
                raise UsageError(f"{known.config}: unknown option(s) for {name}: {sorted(bad)}")
            commands[name].set_defaults(**opts)
            # a required option supplied by the config file no longer has to be on the command line
            for action in commands[name]._actions:
                if action.dest in opts:
                    action.required = False


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, sub = build_parser()
    try:
        _apply_config(parser, sub, argv)
    except UsageError as exc:
        print(f"camsticker: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"camsticker: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
        if getattr(args, "victim", None) is not None and args.victim == args.target:
            sub.choices[args.command].error("--victim and --target must differ")
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"camsticker: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"camsticker: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        log.debug("computation failed", exc_info=True)
        print(f"camsticker: error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
