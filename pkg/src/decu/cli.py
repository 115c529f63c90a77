"""``decu`` command line: train, generate, experiment, inspect.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from decu import config as cfgmod
from decu import experiments as ex
from decu.branching import generate_with_branching, pixel_paide
from decu.checkpoint import CheckpointError, load_ensemble, save_ensemble
from decu.dataset import make_binned_dataset
from decu.diffusion import TrainingDivergence
from decu.ensemble import build_ensemble
from decu.paide import paide_points

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
CHECKPOINT_NAME = "ensemble.decu"


class UsageError(Exception):
    pass


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(path, seed=None):
    run = cfgmod.load(path) if path else cfgmod.RunConfig().validate()
    return cfgmod.with_seed(run, seed) if seed is not None else run


def _dataset_for(run):
    return make_binned_dataset(run.dataset, run.resolved_dataset_seed())


def _open_checkpoint(path):
    if not path:
        raise UsageError("--checkpoint is required")
    try:
        return load_ensemble(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror or exc}") from exc
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _run_config_for(args, manifest):
    if args.config:
        return _load_config(args.config)
    if "run_config" not in manifest:
        raise UsageError("checkpoint has no run config; pass --config")
    return cfgmod.from_dict(manifest["run_config"])


def _out_dir(args, run=None):
    out = args.out or (run.output_dir if run is not None else None)
    if not out:
        raise UsageError("--out is required")
    os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(args):
    run = _load_config(args.config, args.seed)
    out = _out_dir(args, run)
    dataset = _dataset_for(run)
    model = build_ensemble(dataset, run.model, run.master_seed, run.resolved_component_seeds())
    ckpt = os.path.join(out, CHECKPOINT_NAME)
    save_ensemble(ckpt, model, {"run_config": run.to_dict(), "config_hash": run.hash(),
                                "dataset_sha256": dataset.digest()})
    rows = []
    for stage, losses in model.losses.items():
        rows += [(stage, k + 1, float(v)) for k, v in enumerate(losses)]
    ex.write_csv(os.path.join(out, "losses.csv"), ("stage", "step", "loss"), rows)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(run.to_json())
    _write_json(os.path.join(out, "manifest.json"), {
        "checkpoint": CHECKPOINT_NAME,
        "checkpoint_sha256": _sha256_file(ckpt),
        "config_hash": run.hash(),
        "master_seed": run.master_seed,
        "component_seeds": list(model.component_seeds),
        "subset_hashes": list(model.subset_digests),
    })
    print(ckpt)
    return EXIT_OK


def cmd_generate(args):
    model, manifest = _open_checkpoint(args.checkpoint)
    out = _out_dir(args)
    class_id = 0 if args.class_id is None else args.class_id
    if not 0 <= class_id < model.n_classes:
        raise UsageError(f"--class must be in 0..{model.n_classes - 1}")
    b = int(model.grid[0]) if args.branch_point is None else args.branch_point
    try:
        model.prev_step(b)
    except ValueError as exc:
        raise UsageError(f"--branch-point: {exc}") from exc
    seed = 0 if args.seed is None else args.seed
    trace = generate_with_branching(model, class_id, b, seed)
    unc = float(paide_points(np.stack([g.mean for g in trace.first_step_means]), model.weights))
    pix = pixel_paide(trace.decoded_images, model.weights)
    names = []
    for j, img in enumerate(trace.decoded_images):
        names.append(f"component{j}.pgm")
        ex.write_pgm(os.path.join(out, names[-1]), img)
    ex.write_pixel_map(os.path.join(out, "pixels"), pix, math.log(model.M))
    _write_json(os.path.join(out, "manifest.json"), {
        "class_id": class_id, "seed": seed, "branch_point": b,
        "prefix_component": trace.prefix_component,
        "config_hash": manifest.get("config_hash"),
        "uncertainty": unc, "images": names,
        "pixel_map": ["pixels.csv", "pixels.pgm"],
    })
    print(repr(unc))
    return EXIT_OK


def cmd_experiment(args):
    model, manifest = _open_checkpoint(args.checkpoint)
    run = _run_config_for(args, manifest)
    out = _out_dir(args, run)
    seed = run.resolved_eval_seed() if args.seed is None else args.seed
    e = run.experiment
    lnm = math.log(model.M)

    def dataset():
        ds = _dataset_for(run)
        if manifest.get("dataset_sha256") not in (None, ds.digest()):
            raise UsageError("config dataset does not match the checkpoint's training data")
        return ds

    try:
        if args.which == "bins":
            b = run.class_branch_point() if args.branch_point is None else args.branch_point
            res = ex.run_bin_experiment(model, dataset(), b, e.n_noise, seed)
            ex.write_bins(out, res)
            for s in res.summary:
                print(f"{s.bin}\t{s.mean!r}")
        elif args.which == "diversity":
            table = ex.run_diversity_experiment(model, dataset(), run.branch_points(), e.n_seeds, seed)
            ex.write_diversity(out, table)
            for row in table.rows():
                print("\t".join(ex.fmt(v) for v in row[:3]))
        elif args.which == "curve":
            c = e.curve_class if args.class_id is None else args.class_id
            b = model.config.T if args.branch_point is None else args.branch_point
            curve = ex.run_curve_experiment(model, c, b, e.curve_seeds, seed)
            ex.write_curve(out, curve)
            print(repr(curve[-1][1]))
        else:
            b = run.class_branch_point() if args.branch_point is None else args.branch_point
            classes = None if args.class_id is None else [args.class_id]
            res = ex.run_pixel_experiment(model, dataset(), b, e.n_noise, seed, classes)
            ex.write_pixels(out, res, lnm)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc
    return EXIT_OK


def cmd_inspect(args):
    _, manifest = _open_checkpoint(args.checkpoint)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="decu", description="Diffusion ensembles with "
                                "pairwise-distance uncertainty estimates.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, checkpoint=True):
        if config:
            sp.add_argument("--config", metavar="PATH", help="JSON run configuration")
        if checkpoint:
            sp.add_argument("--checkpoint", metavar="PATH", help="ensemble checkpoint")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--seed", type=int, metavar="N")

    t = sub.add_parser("train", help="train an ensemble and write a checkpoint")
    common(t, checkpoint=False)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="branched generation for one class and seed")
    common(g, config=False)
    g.add_argument("--class", dest="class_id", type=int, metavar="N")
    g.add_argument("--branch-point", type=int, metavar="N")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("experiment", help="run one experiment and write its files")
    e.add_argument("which", choices=("bins", "diversity", "curve", "pixels"))
    common(e)
    e.add_argument("--class", dest="class_id", type=int, metavar="N")
    e.add_argument("--branch-point", type=int, metavar="N")
    e.set_defaults(func=cmd_experiment)

    i = sub.add_parser("inspect", help="print a checkpoint manifest")
    i.add_argument("--checkpoint", metavar="PATH")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"decu {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"decu {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
