"""Command-line entry point: ``python -m vertlabel <command> ...``.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Keys
name fields of the phantom, model or training configuration (or the desk
setup, e.g. ``epochs``); tuples are written comma-separated.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import logging
import os
import sys

from . import autograd as ag
from . import data as D
from .evaluation import (format_ablation_table, format_metrics_table, identification_metrics,
                         padded_window, predict_scan, read_predictions, write_metrics_csv,
                         write_predictions)
from .experiment import DeskData, DeskSetup, run_ablation, train_setup
from .gradsuite import MODEL_ENTRIES, run_gradient_suite
from .integral import normalize_heatmap
from .nn import MODES, encoder_forward, localization_forward
from .training import load_checkpoint, train

log = logging.getLogger("vertlabel")


class ConfigError(ValueError):
    pass


# -- config files ---------------------------------------------------------------

def read_config(path):
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def _coerce(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_coerce(p.strip(), like[0] if like else 0.0) for p in parts)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _apply(obj, values, used):
    changes = {}
    for f in dataclasses.fields(obj):
        if f.name in values and not dataclasses.is_dataclass(getattr(obj, f.name)):
            try:
                changes[f.name] = _coerce(values[f.name], getattr(obj, f.name))
            except ValueError as exc:
                raise ConfigError(f"bad value for {f.name}: {exc}") from None
            used.add(f.name)
    return dataclasses.replace(obj, **changes)


def setup_from_config(values) -> DeskSetup:
    """Build a :class:`DeskSetup` from flat config values; unknown keys are errors."""
    used = set()
    setup = _apply(DeskSetup(), values, used)
    setup = dataclasses.replace(setup, phantom=_apply(setup.phantom, values, used),
                                model=_apply(setup.model, values, used),
                                train=_apply(setup.train, values, used))
    unknown = sorted(set(values) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return setup


def _load_setup(path, overrides=()):
    values = read_config(path) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return setup_from_config(values)


# -- commands -------------------------------------------------------------------------

def cmd_phantom(args):
    values = read_config(args.spec) if args.spec else {}
    used = set()
    spec = _apply(D.PhantomSpec(), values, used)
    if set(values) - used:
        raise ConfigError(f"unknown phantom keys: {', '.join(sorted(set(values) - used))}")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        vol, labels = D.generate_phantom(spec, seed)
        stem = os.path.join(args.out, f"phantom_{seed:05d}")
        D.write_volume(stem + ".vol", vol)
        D.write_labels(stem + ".txt", labels)
    print(f"wrote {args.count} phantom(s) to {args.out}")
    return 0


def _scans_from_dir(path, target_spacing):
    vols = sorted(glob.glob(os.path.join(path, "*.vol")))
    if not vols:
        raise FileNotFoundError(f"no .vol files in {path}")
    scans = []
    for v in vols:
        labels = D.read_labels(os.path.splitext(v)[0] + ".txt")
        scans.append(D.resample_isotropic(D.preprocess(D.read_volume(v)), labels, target_spacing))
    return scans


def cmd_train(args):
    setup = _load_setup(args.config, args.set)
    if args.epochs is not None:
        setup = dataclasses.replace(setup, epochs=args.epochs)
    if args.seed is not None:
        setup = dataclasses.replace(setup, seed=args.seed)
    data = DeskData(setup)
    if args.data:
        scans = _scans_from_dir(args.data, setup.target_spacing)
        if len(scans) <= setup.num_val:
            raise ValueError(f"need more than num_val={setup.num_val} scans, found {len(scans)}")
        data.scans = scans
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        result = train(resume.model_config, resume.train_config, data.dataset, setup.epochs,
                       seed=setup.seed, out_dir=args.out, resume=resume)
    else:
        result = train_setup(setup, data, out_dir=args.out)
    last = result.log[-1] if result.log else None
    print(f"checkpoints and losses.csv written to {args.out}" + (f"; last row {last}" if last else ""))
    return 0


def cmd_infer(args):
    model = load_checkpoint(args.checkpoint).build_model()
    vol = D.read_volume(args.volume)
    vol, _ = D.resample_isotropic(D.preprocess(vol), None, args.spacing)
    stride = tuple(args.stride) if args.stride else None
    pred = predict_scan(vol, model, stride=stride, threshold=args.threshold)
    write_predictions(args.out, pred)
    if args.heatmaps:
        _dump_centre_heatmaps(args.heatmaps, vol, model)
    print(f"{len(pred.present())} vertebra(e) predicted from {len(pred.votes)} vote(s); wrote {args.out}")
    return 0


def _dump_centre_heatmaps(prefix, vol, model):
    if model.config.mode == "direct_fc":
        raise ValueError("direct_fc models have no heatmaps to dump")
    crop = model.config.crop_shape
    corner = tuple((n - c) // 2 for n, c in zip(vol.data.shape, crop))
    with ag.no_grad():
        scales, _ = encoder_forward(model.as_input(padded_window(vol, corner, crop)), model)
        heat = localization_forward(scales, model)
        maps = normalize_heatmap(heat).data if model.config.mode == "integral" else heat.data
    origin = tuple(o + s * c for o, s, c in zip(vol.origin, vol.spacing, corner))
    for p in D.dump_tensor(prefix, maps, vol.spacing, origin):
        print(f"heatmap {p}")


def cmd_eval(args):
    if len(args.pred) != len(args.labels):
        raise ValueError(f"{len(args.pred)} prediction file(s) but {len(args.labels)} label file(s)")
    preds = [read_predictions(p) for p in args.pred]
    truths = [D.read_labels(p) for p in args.labels]
    report = identification_metrics(preds, truths)
    if args.out:
        write_metrics_csv(args.out, report)
    print(format_metrics_table(report))
    return 0


def cmd_ablate(args):
    setup = _load_setup(args.config, args.set)
    if args.epochs is not None:
        setup = dataclasses.replace(setup, epochs=args.epochs)
    rows = run_ablation(setup, args.modes)
    table = format_ablation_table(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(table + "\n")
    print(table)
    return 0


def cmd_gradcheck(args):
    model_entries = None if args.model_entries == 0 else args.model_entries
    results = run_gradient_suite(args.seed, args.max_entries, include_model=not args.ops_only,
                                 model_entries=model_entries)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<24} rel_err={r.error:.2e}  tol={r.tol:.0e}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"{len(failed)} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="vertlabel", description="Vertebra localization and identification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="generate synthetic spine phantoms")
    ph.add_argument("--spec", help="phantom config file")
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--count", type=int, default=1)
    ph.add_argument("--out", required=True, help="output directory")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train a model from a config file")
    tr.add_argument("--config", help="flat key=value config file")
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    tr.add_argument("--data", help="directory of phantom .vol/.txt pairs (default: generate)")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--out", required=True, help="output directory")
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="predict vertebra centroids for one volume")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--volume", required=True)
    inf.add_argument("--out", required=True, help="prediction file")
    inf.add_argument("--stride", type=int, nargs=3, metavar=("D", "H", "W"))
    inf.add_argument("--threshold", type=float, default=0.5)
    inf.add_argument("--spacing", type=float, default=2.0, help="isotropic resampling (mm)")
    inf.add_argument("--heatmaps", metavar="PREFIX", help="dump centre-window heatmaps")
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="identification rate and localization error")
    ev.add_argument("--pred", nargs="+", required=True)
    ev.add_argument("--labels", nargs="+", required=True)
    ev.add_argument("--out", help="metrics CSV")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="compare localization modes on identical data")
    ab.add_argument("--config")
    ab.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ab.add_argument("--epochs", type=int)
    ab.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    ab.add_argument("--out", help="write the table here too")
    ab.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--max-entries", type=int, help="probe at most this many entries per tensor")
    gc.add_argument("--model-entries", type=int, default=MODEL_ENTRIES,
                    help="entries probed per model parameter tensor (0 = all)")
    gc.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"vertlabel {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
