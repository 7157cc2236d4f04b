"""Command-line pipeline: synth, fit-cle, fit-retro, evaluate, rank, validate.

Exit status is 0 on success, 1 on usage or configuration errors and 2 on
data errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from .cfmetric import AssignmentCounts, report_from_counts
from .cle import CLERanker
from .config import ConfigError, RunConfig, load_config
from .core import LoggedPolicy, UniformRandomPolicy, check_assignments, validate_dataset
from .io import DataFormatError, DatasetReader, RecordParser, load_model, read_dataset, save_model, write_dataset
from .retro import RetrospectiveRanker, TrainingDivergedError
from .synth import config_to_dict, generate

logger = logging.getLogger("sigrank")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _write_json(doc, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = args.output or cfg.dataset
    if not out:
        raise UsageError("synth needs --output or a 'dataset' config key")
    try:
        synth_cfg = cfg.synth_config()
        d, gt = generate(synth_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    write_dataset(d, out)
    gt_path = args.ground_truth or cfg.ground_truth or os.path.splitext(out)[0] + ".truth.json"
    doc = gt.to_dict()
    doc["config"] = config_to_dict(synth_cfg)
    _write_json(doc, gt_path)
    print(f"wrote {len(d)} impressions to {out}; ground truth to {gt_path}")
    return 0


def cmd_fit_cle(args) -> int:
    cfg = _config(args)
    d = read_dataset(args.dataset, target=cfg.target)
    model = CLERanker(
        alpha=cfg.alpha, min_cell_n=cfg.min_cell_n, default_order=cfg.default_order_ids(d.catalog)
    ).fit(d)
    save_model(model, args.output)
    n_sig = sum(c.significant for c in model.cells_.values())
    print(f"fit CLE on {len(d)} impressions: {len(model.cells_)} cells, {n_sig} significant")
    return 0


def cmd_fit_retro(args) -> int:
    cfg = _config(args)
    d = read_dataset(args.dataset, target=cfg.target)
    model = RetrospectiveRanker(
        epochs=cfg.retro_epochs,
        learning_rate=cfg.retro_learning_rate,
        l2=cfg.retro_l2,
        batch_size=cfg.retro_batch_size,
        random_state=cfg.seed,
    ).fit(d)
    save_model(model, args.output)
    print(f"fit retro model on {len(d)} impressions: final loss {model.final_loss_:.6f}")
    return 0


def _model_names(paths: List[str]) -> List[str]:
    names, seen = [], {"logged", "random"}
    for p in paths:
        base = os.path.splitext(os.path.basename(p))[0]
        name, j = base, 1
        while name in seen:
            j += 1
            name = f"{base}-{j}"
        seen.add(name)
        names.append(name)
    return names


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    reader = DatasetReader(args.dataset, strict=True, target=cfg.target)
    K = len(reader.catalog)
    policies: Dict[str, object] = {
        "logged": LoggedPolicy(),
        "random": UniformRandomPolicy(K, seed=cfg.seed),
    }
    for name, path in zip(_model_names(args.models), args.models):
        model = load_model(path)
        if tuple(model.catalog_) != reader.catalog:
            raise DataFormatError(
                f"{path}: model catalog {list(model.catalog_)} does not match dataset "
                f"catalog {list(reader.catalog)}"
            )
        if isinstance(model, RetrospectiveRanker) and model.feature_dim_ != reader.feature_dim:
            raise DataFormatError(f"{path}: model expects {model.feature_dim_} features")
        policies[name] = model

    counts = {name: AssignmentCounts(K) for name in policies}
    for chunk in reader:
        for name, policy in policies.items():
            assigned = policy.assign_dataset(chunk)
            check_assignments(chunk, assigned)
            counts[name].update(chunk.qual, assigned, chunk.shown, chunk.y)

    reports = [
        report_from_counts(
            counts[name],
            n_bootstrap=cfg.bootstrap_replicates,
            seed=cfg.seed,
            name=name,
            catalog=reader.catalog,
        )
        for name in policies
    ]
    n = reports[0].n_impressions
    print(f"{n} impressions, target={reader.target}")
    print(f"{'policy':<20}{'c_hat':>12}{'stderr':>12}{'uplift':>12}{'skipped':>10}")
    for r in reports:
        print(
            f"{r.name:<20}{r.c_hat:>12.6f}{r.stderr:>12.6f}{r.uplift_estimate:>+12.6f}"
            f"{r.skipped_mass:>10.4f}"
        )
    doc = {
        "dataset": {"n_impressions": n, "catalog": list(reader.catalog), "target": reader.target},
        "bootstrap_replicates": cfg.bootstrap_replicates,
        "seed": cfg.seed,
        "policies": [r.to_dict() for r in reports],
    }
    out = args.output or cfg.report
    if out:
        _write_json(doc, out)
    return 0


def cmd_rank(args) -> int:
    model = load_model(args.model)
    line = sys.stdin.readline()
    if not line.strip():
        raise DataFormatError("expected one JSON record on standard input")
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"line 1: malformed JSON ({exc.msg})") from None
    if isinstance(model, CLERanker):
        dim = len(rec.get("features", [])) if isinstance(rec, dict) else 0
    else:
        dim = model.feature_dim_
    parser = RecordParser(model.catalog_, dim, strict=True)
    if isinstance(model, CLERanker) and isinstance(rec, dict):
        rec.setdefault("features", [])
    features, qual = parser.parse(rec, 1, need_outcome=False)
    if isinstance(model, CLERanker):
        chosen, unseen = model.assign_with_flags([qual])
        if unseen[0]:
            print("warning: unseen-mask, using default order", file=sys.stderr)
    else:
        chosen = model.assign([features], [qual])
    print(model.catalog_[int(chosen[0])])
    return 0


def cmd_validate(args) -> int:
    d = read_dataset(args.dataset, strict=False)
    violations = validate_dataset(d)
    for v in violations:
        print(f"{v.impression_id}\t{v.rule}")
    print(f"{len(d)} impressions, {len(violations)} violations", file=sys.stderr)
    return 2 if violations else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sigrank", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="key = value run configuration")
        if seed:
            p.add_argument("--seed", type=int, help="override the configured seed")

    p = sub.add_parser("synth", help="simulate a conditionally randomized log")
    common(p)
    p.add_argument("--output", help="dataset NDJSON path")
    p.add_argument("--ground-truth", help="ground-truth JSON path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-cle", help="fit the conversion likelihood estimator")
    common(p, seed=False)
    p.add_argument("dataset")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fit_cle)

    p = sub.add_parser("fit-retro", help="fit the retrospective classifier")
    common(p)
    p.add_argument("dataset")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fit_retro)

    p = sub.add_parser("evaluate", help="counterfactual conversion rate per model")
    common(p)
    p.add_argument("dataset")
    p.add_argument("models", nargs="+")
    p.add_argument("--output", help="report JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="choose a signal for one record read from stdin")
    p.add_argument("model")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("validate", help="list invariant violations in a dataset")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sigrank: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"sigrank: error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, TrainingDivergedError, ValueError, KeyError) as exc:
        print(f"sigrank: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sigrank: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
