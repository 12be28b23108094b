"""``lodc`` command line: gen-data, train, eval, lod-study.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import coeff as coeffs
from . import lod
from .config import PAPER_TARGETS, load_config
from .dataset import MS_ID, DatasetFile, generate
from .errors import ConfigurationError, FormatError
from .mesh import build_mesh
from .nn import (
    append_history, default_architecture, init_glorot, load_adam, load_checkpoint, save_adam,
    save_checkpoint, train,
)
from .surrogate import evaluate, write_cross_section_csv

log = logging.getLogger("lodc")

EXPERIMENTS = ("multiscale", "smooth", "cracks", "custom")
RHS = {
    "one": lambda x, y: np.ones_like(x),
    "step": lambda x, y: np.where(x >= 0.5, x, 0.0),
    "cos": lambda x, y: np.cos(2 * np.pi * x),
    "sine": lambda x, y: 2 * np.pi ** 2 * np.sin(np.pi * x) * np.sin(np.pi * y),
}
DEFAULT_RHS = {"multiscale": "one", "smooth": "step", "cracks": "cos", "custom": "one"}


def _common(p):
    p.add_argument("--config", help="JSON config file; keys override the preset")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", help="output directory (default runs/<preset>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="lodc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="offline phase: sample coefficients and compute local LOD matrices")
    _common(p)

    p = sub.add_parser("train", help="train the network on generated data")
    _common(p)
    p.add_argument("--data", help="dataset directory (default <out>/data)")
    p.add_argument("--resume", action="store_true", help="continue from <out>/model/last.lodn")

    p = sub.add_parser("eval", help="online phase: compare network and reference PG-LOD solutions")
    _common(p)
    p.add_argument("--checkpoint", help="network checkpoint (default <out>/model/best.lodn)")
    p.add_argument("--experiment", choices=EXPERIMENTS, default="multiscale")
    p.add_argument("--coefficient", help="coefficient file (.lodc) for --experiment custom")
    p.add_argument("--rhs", choices=sorted(RHS), help="right-hand side (default depends on experiment)")
    p.add_argument("--fine-reference", action="store_true", help="also solve on the fine mesh")

    p = sub.add_parser("lod-study", help="localization decay and h-convergence tables")
    _common(p)
    p.add_argument("--coefficient-kind", choices=("ms", "smooth", "constant"), default="ms",
                   help="coefficient for the decay study")
    return parser


def _config(args):
    cfg = load_config(args.config, args.preset, {"seed": args.seed, "out": args.out})
    if cfg.preset == "paper":
        log.warning("paper preset: %d training pairs, %d parameters; expect days of CPU time and ~60 GB of data",
                    PAPER_TARGETS["train_pairs"],
                    default_architecture(cfg.dataset().r, cfg.dataset().label_len, cfg.gap_levels).n_params)
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args):
    cfg = _config(args)
    out = os.path.join(cfg.out, "data")

    def progress(done, total):
        log.info("samples %d/%d", done, total)

    manifest = generate(cfg.dataset(), out, workers=max(1, args.threads), progress=progress)
    # The output location is not a property of the data; leaving it out keeps manifests byte-identical.
    manifest["experiment"] = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    _write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {manifest['splits']['train']['pairs']} train / {manifest['splits']['val']['pairs']} val / "
          f"{manifest['splits']['test']['pairs']} test pairs to {out}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    data = args.data or os.path.join(cfg.out, "data")
    train_set = DatasetFile(os.path.join(data, "train.lodd"))
    val_set = DatasetFile(os.path.join(data, "val.lodd"))
    arch = default_architecture(train_set.r, train_set.label_len, cfg.gap_levels)
    out = os.path.join(cfg.out, "model")
    os.makedirs(out, exist_ok=True)
    hist_path = os.path.join(out, "history.jsonl")
    last_path = os.path.join(out, "last.lodn")
    best_path = os.path.join(out, "best.lodn")
    adam_path = os.path.join(out, "adam.npz")

    start, state = 1, None
    if args.resume:
        model, _ = load_checkpoint(last_path, arch)
        state = load_adam(adam_path)
        with open(hist_path) as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        start = records[-1]["epoch"] + 1 if records else 1
    else:
        model = init_glorot(arch, coeffs.child_rng(cfg.seed, 7))
        if os.path.exists(hist_path):
            os.remove(hist_path)

    def checkpoint(model, best, state, record):
        save_checkpoint(model, last_path)
        save_checkpoint(best, best_path)
        save_adam(state, adam_path)

    result = train(train_set, val_set, model, cfg.schedule(), cfg.seed, sink=lambda r: append_history(hist_path, r),
                   state=state, start_epoch=start, checkpoint=checkpoint)
    _write_json(os.path.join(out, "train_config.json"), {"config": cfg.to_dict(), "widths": list(arch.widths),
                                                         "n_params": arch.n_params})
    if result.diverged:
        print("training diverged (non-finite loss); last good checkpoint kept", file=sys.stderr)
        return 1
    if result.history:
        h = result.history[-1]
        print(f"epoch {h['epoch']}: train {h['train_loss']:.3e} val {h['val_loss']:.3e}")
    return 0


def _experiment_coefficient(cfg, experiment, path):
    if experiment == "multiscale":
        # Index past every generated sample, so never part of train/val/test.
        rng = coeffs.child_rng(cfg.seed, MS_ID, cfg.samples_per_family + 1000)
        return coeffs.sample_multiscale(cfg.eps_level, cfg.eps_level, rng)
    if experiment == "smooth":
        return coeffs.smooth_sine(cfg.eps_level)
    if experiment == "cracks":
        return coeffs.cracks(cfg.eps_level, rng=coeffs.child_rng(cfg.seed, 200))
    if path is None:
        raise ConfigurationError("--experiment custom needs --coefficient PATH", "coefficient")
    c = coeffs.load_coefficient(path)
    if c.eps_level != cfg.eps_level:
        raise ConfigurationError(f"coefficient level {c.eps_level} != eps_level {cfg.eps_level}", "coefficient")
    return c


def cmd_eval(args):
    cfg = _config(args)
    ckpt = args.checkpoint or os.path.join(cfg.out, "model", "best.lodn")
    if not os.path.exists(ckpt):
        raise ConfigurationError(f"checkpoint {ckpt} not found", "checkpoint")
    model, _ = load_checkpoint(ckpt)
    coefficient = _experiment_coefficient(cfg, args.experiment, args.coefficient)
    rhs = args.rhs or DEFAULT_RHS[args.experiment]
    report = evaluate(coefficient, RHS[rhs], model, cfg.coarse_level, cfg.ell, experiment=args.experiment,
                      fine_reference=args.fine_reference)
    out = os.path.join(cfg.out, "eval", args.experiment)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    for cs in report.cross_sections:
        write_cross_section_csv(os.path.join(out, f"cross_x{cs.axis + 1}.csv"), cs)
    print(f"{args.experiment}: L2 error {report.l2_error_abs:.3e} (rel {report.l2_error_rel:.3e}), "
          f"spectral norm diff {report.spectral_norm_diff:.3e}")
    return 0


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_lod_study(args):
    cfg = _config(args)
    out = os.path.join(cfg.out, "study")
    os.makedirs(out, exist_ok=True)
    if args.coefficient_kind == "ms":
        c = coeffs.sample_multiscale(cfg.eps_level, cfg.eps_level, coeffs.child_rng(cfg.seed, 300))
    elif args.coefficient_kind == "smooth":
        c = coeffs.smooth_sine(cfg.eps_level)
    else:
        c = coeffs.Coefficient(cfg.eps_level, np.ones(4 ** cfg.eps_level))
    decay = lod.localization_decay_study(build_mesh(cfg.coarse_level), c, cfg.decay_ells, f=1.0)
    _write_csv(os.path.join(out, "decay.csv"), ["ell", "rel_l2_error"],
               [(r["ell"], repr(r["rel_l2_error"])) for r in decay["rows"]])

    hconv = lod.h_convergence_study(coeffs.smooth_sine(cfg.eps_level), cfg.hconv_levels, cfg.hconv_ell, RHS["sine"])
    _write_csv(os.path.join(out, "hconv.csv"), ["level", "h", "rel_l2_error"],
               [(r["level"], repr(r["h"]), repr(r["rel_l2_error"])) for r in hconv["rows"]])
    _write_json(os.path.join(out, "summary.json"), {
        "decay_slope": decay["slope"], "hconv_rate": hconv["rate"], "coefficient": args.coefficient_kind,
        "config": cfg.to_dict(),
    })
    print(f"decay slope {decay['slope']:.3f}, h-convergence rate {hconv['rate']:.3f}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "lod-study": cmd_lod_study}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"lodc: configuration error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"lodc: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, FileNotFoundError) else 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"lodc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
