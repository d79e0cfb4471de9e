"""Command-line entry point: ``angular-at <command> ...``.

Commands::

    gen-data blobs|idx   write features/labels tensor files plus a manifest
    train                fit a model, write checkpoint + per-epoch metrics + curves
    eval                 natural/robust accuracy of a checkpoint under named attacks
    ablate               the four-row ce / +wfc / +sep / +wfc+sep study
    selfcheck            gradient checks and file-format round trips

Exit codes: 0 ok, 2 usage/config, 3 I/O, 4 numeric failure, 5 integrity.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import config as cfg
from .attacks import PRESETS, AttackError, AttackSpec
from .autodiff import NonFiniteError
from .data import (FormatError, ensure_dir, gen_blobs, load_checkpoint, load_dataset,
                   load_idx_dataset, save_checkpoint, save_dataset)
from .evaluation import (angle_statistics, evaluate, format_fields_line, format_metrics_line,
                         mean_std, run_ablation, summary_table)
from .training import TrainingError, train

logger = logging.getLogger("angular_at")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--workers", type=int, default=None,
                   help="threads for attack/evaluation maps (results do not depend on it)")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """``--config`` plus one ``--key-with-dashes`` flag per config key."""
    p.add_argument("--config", help="flat 'key = value' run configuration")
    for key in cfg.KEYS:
        if key in ("seed", "workers"):
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="VALUE")


def _run_values(args) -> Dict[str, object]:
    file_values = cfg.load_config(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k, None) for k in cfg.KEYS}
    return cfg.merge(file_values, overrides)


def parse_attacks(text: str, epsilon: Optional[float] = None, seed: int = 0) -> Dict[str, AttackSpec]:
    names = [n.strip() for n in str(text).split(",") if n.strip()]
    if not names:
        raise UsageError(f"no attacks given; valid names: {', '.join(PRESETS)}")
    unknown = [n for n in names if n not in PRESETS]
    if unknown:
        raise UsageError(f"unknown attack(s) {', '.join(unknown)}; valid names: {', '.join(PRESETS)}")
    out = {}
    for n in names:
        spec = PRESETS[n].replace(seed=seed)
        if epsilon is not None and spec.family != "none":
            spec = spec.replace(epsilon=epsilon)
        out[n] = spec
    return out


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    with open(path, "a") as fh:
        for line in lines:
            fh.write(line + "\n")


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = ensure_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    if args.source == "blobs":
        if args.k < 2 or args.dim < 1 or args.n < 1:
            raise UsageError("--k must be >= 2, --dim and --n >= 1")
        ds = gen_blobs(args.k, args.dim, args.n, args.spread, seed, args.split)
        meta = {"source": "blobs", "seed": seed, "spread": args.spread, "n_per_class": args.n}
    else:
        ds = load_idx_dataset(args.images, args.labels, args.split, args.num_classes)
        meta = {"source": "idx", "images": Path(args.images).name}
    paths = save_dataset(ds, out / args.split, meta)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    values = _run_values(args)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg.require(values, ["train_data"])
    train_ds = load_dataset(values["train_data"])
    test_ds = load_dataset(values["test_data"]) if values.get("test_data") else None
    spec = cfg.train_spec(values, len(train_ds))
    out = ensure_dir(values.get("out") or f"runs/{spec.objective}-s{spec.seed}")
    run_id = f"{spec.objective}-s{spec.seed}"

    model, history = train(train_ds, spec, values["hidden"], values["feature_dim"], test_ds, run_id)
    save_checkpoint(model, out / "checkpoint.aatc")
    (out / "config.cfg").write_text(cfg.dump_config(values))
    lines = [format_metrics_line(r) for r in history]
    (out / "metrics.log").write_text("".join(line + "\n" for line in lines))
    from .plotting import plot_training_curves

    plot_training_curves(history, out / "training_curves.png")
    for line in lines:
        print(line)
    print(f"checkpoint {out / 'checkpoint.aatc'} sha256={model.checksum()}")
    return EXIT_OK


def cmd_eval(args) -> int:
    seed = 0 if args.seed is None else args.seed
    workers = args.workers or 1
    attacks = parse_attacks(args.attacks, args.epsilon, seed)
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    out = ensure_dir(args.out or Path(args.checkpoint).parent)
    run_id = args.run or f"eval-{Path(args.checkpoint).parent.name or 'model'}"
    rec = evaluate(model, ds, attacks, tag=model.head_kind, run=run_id, seed=seed, workers=workers)
    line = format_metrics_line(rec)
    _write_lines(out / "metrics.log", [line])
    print(summary_table([rec], [n for n in attacks if attacks[n].family != "none"]))
    print(line)

    probe = next((s for s in attacks.values() if s.family != "none"), None)
    if model.head_kind == "he" and probe is not None:
        from .plotting import plot_angle_histogram

        clean, adv, c_s, a_s = angle_statistics(model, ds, probe, workers, return_samples=True)
        plot_angle_histogram(c_s, a_s, out / "angles.png")
        angle_line = format_fields_line(run_id, {"probe": "angles", "theta_clean": clean, "theta_adv": adv})
        _write_lines(out / "metrics.log", [angle_line])
        print(angle_line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    values = _run_values(args)
    if args.seed is not None:
        values["seed"] = args.seed
    workers = args.workers or values.get("workers") or 1
    cfg.require(values, ["train_data", "test_data"])
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    train_ds = load_dataset(values["train_data"])
    test_ds = load_dataset(values["test_data"])
    base_seed = values.get("seed") or 0
    attacks = parse_attacks(values.get("attacks") or "pgd20", None, base_seed)
    out = ensure_dir(values.get("out") or "runs/ablation")

    per_seed: List[list] = []
    lines = []
    for r in range(args.repeats):
        spec = cfg.train_spec({**values, "seed": base_seed + r}, len(train_ds))
        recs = run_ablation(train_ds, test_ds, spec, attacks, values["hidden"], values["feature_dim"],
                            workers, run=f"ablation-s{spec.seed}")
        per_seed.append(recs)
        lines += [format_metrics_line(rec) for rec in recs]
    _write_lines(out / "metrics.log", lines)

    final = per_seed[0]
    if args.repeats > 1:
        final = _aggregate(per_seed)
    robust_cols = [n for n in attacks if attacks[n].family != "none"]
    print(summary_table(final, robust_cols))
    if args.repeats > 1:
        for rec in final:
            stds = [f"{k[:-4]} {100 * v:.2f}" for k, v in rec.extra.items() if k.endswith("_std")]
            print(f"  std over {args.repeats} seeds, {rec.tag}: " + ", ".join(stds))
    for line in lines:
        print(line)
    from .plotting import plot_ablation

    plot_ablation(final, out / "ablation.png")
    return EXIT_OK


def _aggregate(per_seed):
    """Mean over repeats per row; stds go in ``extra``."""
    from .evaluation import MetricsRecord

    out = []
    for rows in zip(*per_seed):
        nat_m, nat_s = mean_std([r.natural_accuracy for r in rows])
        robust, extra = {}, {"natural_std": nat_s}
        for k in rows[0].robust_accuracy:
            robust[k], extra[f"{k}_std"] = mean_std([r.robust_accuracy[k] for r in rows])
        out.append(MetricsRecord(rows[0].tag, nat_m, robust, run="run", seed=rows[0].seed, extra=extra))
    return out


def cmd_selfcheck(args) -> int:
    from .selfcheck import GRAD_TOL, run_all

    seed = 0 if args.seed is None else args.seed
    results = run_all(args.instances, seed)
    for r in results:
        fields = {"check": r.name, "passed": str(r.passed).lower(), "value": float(r.value)}
        if r.detail:
            fields["worst"] = r.detail
        if r.name.startswith("grad."):
            fields["tol"] = GRAD_TOL
        print(format_fields_line("selfcheck", fields))
    failed = [r for r in results if not r.passed]
    if not failed:
        return EXIT_OK
    return EXIT_NUMERIC if any(r.name.startswith("grad.") for r in failed) else EXIT_INTEGRITY


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="angular-at", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate or convert a dataset")
    gsub = g.add_subparsers(dest="source", required=True)
    b = gsub.add_parser("blobs", help="Gaussian blobs in [0,1]^dim")
    b.add_argument("--k", type=int, required=True, help="number of classes")
    b.add_argument("--dim", type=int, required=True, help="input dimension")
    b.add_argument("--n", type=int, required=True, help="samples per class")
    b.add_argument("--spread", type=float, default=0.1, help="per-coordinate std (default 0.1)")
    b.add_argument("--split", default="train")
    b.add_argument("--out", default=".", help="output directory")
    _add_common(b)
    i = gsub.add_parser("idx", help="convert IDX image/label files")
    i.add_argument("--images", required=True)
    i.add_argument("--labels", required=True)
    i.add_argument("--num-classes", type=int, default=None)
    i.add_argument("--split", default="train")
    i.add_argument("--out", default=".")
    _add_common(i)

    t = sub.add_parser("train", help="train a classifier")
    _add_config_flags(t)
    _add_common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset prefix, e.g. data/test")
    e.add_argument("--attacks", default="none,pgd20", help=f"comma list from {{{','.join(PRESETS)}}}")
    e.add_argument("--epsilon", type=float, default=None, help="override the attack radius")
    e.add_argument("--out", default=None, help="directory for metrics.log / angles.png")
    e.add_argument("--run", default=None, help="run id written to metrics lines")
    _add_common(e)

    a = sub.add_parser("ablate", help="four-row loss ablation")
    _add_config_flags(a)
    a.add_argument("--repeats", type=int, default=1, help="seeds seed..seed+repeats-1")
    _add_common(a)

    s = sub.add_parser("selfcheck", help="gradient and format self-tests")
    s.add_argument("--instances", type=int, default=20)
    _add_common(s)
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "selfcheck": cmd_selfcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfg.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (TrainingError, NonFiniteError, AttackError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
