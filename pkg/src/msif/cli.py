"""Command-line entry point: ``msif pretrain|finetune|influence|validate|report``.

Errors are reported as one JSON object on stderr. Exit codes: 2 for
configuration problems, 3 for unreadable or mismatched checkpoints, 4 for
scenario failures and 1 for anything else raised by the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig
from .errors import CheckpointFormatError, ConfigError, MsifError, ScenarioError
from .influence import MultiStageInfluence
from .models import TwoStageModel
from .report import INFLUENCE_COLUMNS, influence_rows, read_csv, scatter_svg, write_csv
from .trainer import train_finetune, train_pretrain
from .validation import SCENARIOS, CorrelationReport, build_datasets, run_scenario, seeded

EXIT_CODES = {ConfigError: 2, CheckpointFormatError: 3, ScenarioError: 4}


def _exit_code(exc):
    for kind, code in EXIT_CODES.items():
        if isinstance(exc, kind):
            return code
    return 1


def load_config(args):
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.preset:
        cfg = RunConfig.preset(args.preset)
    elif args.config:
        cfg = RunConfig.load(args.config)
    else:
        raise ConfigError("one of --config or --preset is required")
    if getattr(args, "seed_override", None) is not None:
        cfg = seeded(cfg, args.seed_override).override(scenario={"seeds": str(args.seed_override)})
    if getattr(args, "top_fraction", None) is not None:
        cfg = cfg.override(scenario={"top_fraction": str(args.top_fraction)})
    if getattr(args, "jobs", None) is not None:
        cfg = cfg.override(influence={"jobs": str(args.jobs)})
    if getattr(args, "ablation_identity_hessian", False):
        cfg = cfg.override(influence={"identity_hessian": "true"})
    return cfg


def _model(cfg):
    Z, X, T = build_datasets(cfg)
    return TwoStageModel(cfg.architecture(Z.dim)), (Z, X, T)


def _load_stage(path, stage, model):
    ckpt = load_checkpoint(path)
    if ckpt.stage != stage:
        raise CheckpointFormatError(f"{path}: expected a {stage} checkpoint, found {ckpt.stage}")
    expected = model.segment_sizes
    got = {s.name: s.length for s in ckpt.params.segments}
    if got != dict(expected):
        raise CheckpointFormatError(f"{path}: segments {got} do not match the configured model "
                                    f"{dict(expected)}")
    return ckpt


def parse_ids(text, universe):
    """``all``, an empty string, or comma separated ids and ``a-b`` ranges (inclusive)."""
    text = (text or "").strip()
    if text.lower() == "all":
        return list(universe)
    known = set(int(u) for u in universe)
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1) if part[0] != "-" else (part, part)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad id selector {part!r}") from exc
    missing = [i for i in out if i not in known]
    if missing:
        raise ConfigError(f"selector names unknown example ids {missing[:5]}")
    return out


# -- commands -----------------------------------------------------------------


def cmd_pretrain(args):
    cfg = load_config(args)
    model, (Z, _, _) = _model(cfg)
    ckpt = train_pretrain(model, Z, cfg.train_config("pretrain"))
    ckpt = _stamp(ckpt, cfg)
    save_checkpoint(ckpt, args.out)
    _note(args, stage="pretrain", converged=ckpt.converged, grad_norm=ckpt.grad_norm, out=str(args.out))
    return 0


def cmd_finetune(args):
    cfg = load_config(args)
    model, (_, X, _) = _model(cfg)
    pre = _load_stage(args.pretrain, "pretrain", model)
    ckpt = train_finetune(model, X, pre, cfg.finetune.mode, cfg.train_config("finetune"))
    ckpt = _stamp(ckpt, cfg)
    save_checkpoint(ckpt, args.out)
    _note(args, stage="finetune", mode=ckpt.mode, converged=ckpt.converged, grad_norm=ckpt.grad_norm,
          out=str(args.out))
    return 0


def cmd_influence(args):
    cfg = load_config(args)
    model, (Z, X, T) = _model(cfg)
    pre = _load_stage(args.pretrain, "pretrain", model)
    fine = _load_stage(args.finetune, "finetune", model)
    z_ids = parse_ids(args.z, Z.ids)
    positions = [Z.position(i) for i in z_ids]
    records = []
    if positions:
        engine = MultiStageInfluence(model, pre, fine, Z, X, cfg.influence_config(), cfg.influence.jobs)
        if args.x.strip().upper() == "ALL":
            records = engine.scores(positions, T, "ALL")
        else:
            for x_id in parse_ids(args.x, T.ids):
                records += engine.scores(positions, T.subset([T.position(x_id)]), x_id)
    write_csv(args.out, INFLUENCE_COLUMNS, influence_rows(records, cfg.digest()))
    _note(args, records=len(records), out=str(args.out))
    return 0


def cmd_validate(args):
    cfg = load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_scenario(args.scenario, cfg)
    stamp = {"config_hash": cfg.digest(), "tool_version": __version__}
    rows = [dict(r, **stamp) for r in report.rows()]
    columns = list(rows[0]) if rows else list(stamp)
    write_csv(out / f"{args.scenario}.csv", columns, rows)
    summary = {"scenario": args.scenario, **report.summary, "descriptor": report.scenario, **stamp}
    (out / f"{args.scenario}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if isinstance(report, CorrelationReport):
        xs, ys = zip(*report.pairs)
        (out / f"{args.scenario}.svg").write_text(
            scatter_svg(xs, ys, title=f"{args.scenario} {stamp['config_hash']}",
                        xlabel="predicted loss change", ylabel="retrained loss change"))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_report(args):
    xs, ys = [], []
    for path in args.inputs:
        try:
            rows = read_csv(path)
        except OSError as exc:
            raise MsifError(f"cannot read {path}: {exc}") from exc
        for row in rows:
            try:
                xs.append(float(row[args.x_column]))
                ys.append(float(row[args.y_column]))
            except (KeyError, ValueError) as exc:
                raise MsifError(f"{path}: need numeric columns {args.x_column!r} and "
                                f"{args.y_column!r}") from exc
    svg = scatter_svg(xs, ys, title=args.title or "", xlabel=args.x_column, ylabel=args.y_column)
    Path(args.out).write_text(svg, encoding="utf-8")
    return 0


# -- plumbing -----------------------------------------------------------------


def _stamp(ckpt, cfg):
    return replace(ckpt, meta=dict(ckpt.meta, run_config=cfg.digest(), tool_version=__version__))


def _note(args, **info):
    if not args.quiet:
        print(json.dumps(info, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="msif", description="Multi-stage influence of pretraining examples.")
    p.add_argument("--version", action="version", version=f"msif {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="built-in configuration")
        sp.add_argument("--seed-override", type=int, help="replace data and training seeds")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("pretrain", help="train the pretrain stage")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("finetune", help="finetune from a pretrain checkpoint")
    common(sp)
    sp.add_argument("--pretrain", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("influence", help="score pretraining examples against test examples")
    common(sp)
    sp.add_argument("--pretrain", required=True)
    sp.add_argument("--finetune", required=True)
    sp.add_argument("--z", default="all", help="pretraining ids: all, '', or e.g. 0,3,10-19")
    sp.add_argument("--x", default="ALL", help="ALL for the summed test set, or test ids")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--ablation-identity-hessian", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_influence)

    sp = sub.add_parser("validate", help="run a validation scenario")
    common(sp)
    sp.add_argument("--scenario", required=True, help=", ".join(SCENARIOS))
    sp.add_argument("--top-fraction", type=float)
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--ablation-identity-hessian", action="store_true")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("report", help="scatter plot from CSV files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--x-column", default="predicted")
    sp.add_argument("--y-column", default="actual")
    sp.add_argument("--title")
    sp.add_argument("--out", required=True)
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("default")
    try:
        return args.func(args)
    except (MsifError, OSError) as exc:
        code = _exit_code(exc)
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
