"""Command-line entry point.

Exit codes: 0 success, 1 a bound was violated, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .auditor import audit_theorem_4_1, audit_theorem_4_5, audit_theorem_B_1
from .classifier import MeanClassifier, accuracy_mean, class_means
from .complexity import gen_bound, loss_bound, rademacher_linear
from .io import (
    DataError,
    EmbeddingSet,
    dumps_json,
    load_model,
    load_severities,
    load_shift,
    read_embeddings,
    read_json,
    write_embeddings,
    write_json,
    write_text,
)
from .auditor import draw_training_set, training_inputs
from .latent_model import SamplingError
from .losses import MarginLossKind
from .recovery import recover_pseudo_means, shift_accuracy_table, simulate_embeddings, sweep_entries
from .shift import ShiftProfile, hull_project, mean_shift_stat, novel_class_bias_bound

EXIT_OK, EXIT_VIOLATED, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _kind(args) -> MarginLossKind:
    return MarginLossKind(args.loss, ways=args.k)


def _emit(args, text: str):
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise UsageError(f"{args.command} requires " + ", ".join(f"--{n}" for n in missing))


def cmd_simulate(args) -> int:
    _require(args, "model", "out")
    model = load_model(args.model)
    severities = load_severities(args.severities) if args.severities else []
    labels, pre = simulate_embeddings(model, args.samples, args.seed)
    names = [str(c) for c in labels.tolist()]
    out = Path(args.out)
    write_embeddings(out / "pretrain.csv", EmbeddingSet(names, pre, "pretrain"))
    for sev in severities:
        down = pre + sev.vector(model.dim)
        write_embeddings(out / f"down_{sev.tag}.csv", EmbeddingSet(names, down, "downstream", sev.tag))
    return EXIT_OK


def cmd_audit(args) -> int:
    _require(args, "model", "theorem")
    if args.theorem != "B.1" and args.k != 1:
        raise UsageError(f"theorem {args.theorem} requires --k 1")
    model = load_model(args.model)
    if args.shift:
        shift = load_shift(args.shift)
    else:
        shift = ShiftProfile.zero(range(model.n_classes), model.dim)
    if args.epsilon is not None:
        shift = shift.with_epsilon(args.epsilon)
    kind = MarginLossKind(args.loss)
    common = dict(M=args.samples, draws=args.draws, confidence_delta=args.delta, seed=args.seed, steps=args.steps)
    if args.theorem == "B.1":
        report = audit_theorem_B_1(model, shift, kind, args.k, **common)
    else:
        audit = audit_theorem_4_1 if args.theorem == "4.1" else audit_theorem_4_5
        report = audit(model, shift, kind, **common)
    _emit(args, report.to_json())
    return EXIT_VIOLATED if report.verdict == "violated" else EXIT_OK


def _stem(path: str) -> str:
    name = Path(path).name
    for suffix in (".gz", ".csv"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return name[len("down_"):] if name.startswith("down_") else name


def cmd_shift_sweep(args) -> int:
    if args.model:
        _require(args, "severities")
        model = load_model(args.model)
        labels, pre = simulate_embeddings(model, args.samples, args.seed)
        entries = sweep_entries(labels, pre, load_severities(args.severities))
    else:
        _require(args, "embeddings_pre", "embeddings_down")
        pre = read_embeddings(args.embeddings_pre)
        pre_means = class_means(pre)
        clf = MeanClassifier.from_means(pre_means)
        entries = []
        for path in args.embeddings_down:
            down = read_embeddings(path, "downstream", _stem(path))
            if set(down.classes) != set(pre.classes):
                raise DataError(f"{path}: classes differ from the pretraining set")
            entries.append((down.severity, mean_shift_stat(pre_means, class_means(down)), accuracy_mean(down, clf)))
    if len(entries) < 3:
        raise DataError("a sweep needs at least 3 severities")
    r, table = shift_accuracy_table(entries, require_distinct=False)
    if args.out:
        write_text(args.out, table)
        write_json(Path(args.out).with_suffix(".json"), {"spearman": r})
    else:
        sys.stdout.write(table)
        sys.stdout.write(dumps_json({"spearman": r}))
    return EXIT_OK


def cmd_recover(args) -> int:
    _require(args, "embeddings_pre", "embeddings_down")
    if len(args.embeddings_down) != 1:
        raise UsageError("recover takes exactly one --embeddings-down file")
    pre = read_embeddings(args.embeddings_pre)
    down = read_embeddings(args.embeddings_down[0], "downstream")
    down_means = class_means(down)
    means, align = recover_pseudo_means(pre, len(down_means), down_means, seed=args.seed, cost=args.cost)
    keys = sorted(down_means)
    clf = MeanClassifier.from_means(means, keys)
    result = {
        "alignment": {str(i): keys[j] for i, j in sorted(align.permutation.items())},
        "cost": align.cost,
        "pseudo_means": {c: means[c].tolist() for c in keys},
        "delta_hat": mean_shift_stat(means, down_means),
        "accuracy": accuracy_mean(down, clf),
    }
    _emit(args, dumps_json(result))
    return EXIT_OK


def cmd_rademacher(args) -> int:
    _require(args, "model")
    model = load_model(args.model)
    batch = draw_training_set(model, args.k, args.samples, args.seed)
    frob = math.sqrt(model.dim) if args.frob_bound is None else args.frob_bound
    rad = rademacher_linear(training_inputs(batch), frob, args.draws, args.seed)
    kind = _kind(args)
    R_f = frob * model.norm_bound
    gen = gen_bound(rad, R_f, loss_bound(kind, R_f, args.k), kind.lipschitz, args.delta)
    result = {
        "rademacher": {"mean": rad.mean, "std_error": rad.std_error, "draws": rad.draws, "sample_size": rad.sample_size, "k": rad.k},
        "gen_bound": {"value": gen.value, "std_error": gen.std_error, "confidence_delta": gen.confidence_delta, "constants": gen.constants},
        "frob_bound": frob,
    }
    _emit(args, dumps_json(result))
    return EXIT_OK


def cmd_hull(args) -> int:
    _require(args, "embeddings_pre")
    pre = read_embeddings(args.embeddings_pre)
    pre_means = class_means(pre)
    keys = sorted(pre_means)
    vertices = np.stack([pre_means[c] for c in keys])
    if args.target:
        raw = read_json(args.target)
        targets = raw if isinstance(raw, dict) else {"target": raw}
        targets = {str(k): np.asarray(v, dtype=float) for k, v in targets.items()}
    elif args.embeddings_down:
        targets = class_means(read_embeddings(args.embeddings_down[0], "downstream"))
    else:
        raise UsageError("hull requires --target or --embeddings-down")
    if args.embeddings_down and len(args.embeddings_down) != 1:
        raise UsageError("hull takes exactly one --embeddings-down file")
    kind = MarginLossKind(args.loss)
    R = float(np.max(np.linalg.norm(pre.vectors, axis=1)))
    out = {}
    for name in sorted(targets):
        t = np.asarray(targets[name], dtype=float)
        if t.shape != (pre.dim,):
            raise DataError(f"target {name!r} has shape {t.shape}, expected ({pre.dim},)")
        proj = hull_project(vertices, t)
        out[name] = {
            "weights": {c: float(w) for c, w in zip(keys, proj.weights)},
            "projected": proj.projected.tolist(),
            "residual_norm": proj.residual_norm,
            "bias_bound": novel_class_bias_bound(args.in_dist_bias, proj.residual_norm, kind.lipschitz, R),
        }
    _emit(args, dumps_json({"R": R, "lipschitz": kind.lipschitz, "in_dist_bias": args.in_dist_bias, "targets": out}))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "audit": cmd_audit,
    "shift-sweep": cmd_shift_sweep,
    "recover": cmd_recover,
    "rademacher": cmd_rademacher,
    "hull": cmd_hull,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftbound", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--model")
        p.add_argument("--shift")
        p.add_argument("--severities")
        p.add_argument("--embeddings-pre")
        p.add_argument("--embeddings-down", nargs="+")
        p.add_argument("--target")
        p.add_argument("--theorem", choices=["4.1", "4.5", "B.1"])
        p.add_argument("--loss", choices=["hinge", "logistic"], default="hinge")
        p.add_argument("--k", type=int, default=1)
        p.add_argument("--draws", type=int, default=200_000 if name == "audit" else 1000)
        p.add_argument("--samples", type=int, default=500 if name in ("audit", "rademacher") else 1000)
        p.add_argument("--steps", type=int, default=1000)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--delta", type=float, default=0.05)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--frob-bound", type=float)
        p.add_argument("--cost", choices=["distance", "overlap"], default="distance")
        p.add_argument("--in-dist-bias", type=float, default=0.0)
        p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.k < 1 or args.draws < 1 or args.samples < 1:
            raise UsageError("--k, --draws and --samples must be positive")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"shiftbound: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SamplingError, ValueError, KeyError) as exc:
        print(f"shiftbound: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


run_cli = main
