"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 numerical abort.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .data import dataset_digest, load_dataset, save_dataset, synth_toy_images, synth_vmf_mixture
from .discovery import OOD_METHODS, estimate_k_new, evaluate_model, evaluate_ood
from .errors import ConfigError, NumericalAbort, NumericalFailure, ProtoNCDError
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, write_log_csv

log = logging.getLogger("protoncd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
REPORT_FORMAT = "protoncd-report"
REPORT_VERSION = 1


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str
    output_dir: str
    train: TrainConfig = field(default_factory=TrainConfig)
    candidates: list | None = None
    ood_methods: list = field(default_factory=lambda: list(OOD_METHODS))
    energy_temperature: float = 1.0
    jobs: int = 1

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        for key in ("dataset", "output_dir"):
            if not isinstance(raw.get(key), str):
                raise ConfigError(f"config key {key!r} is required and must be a string")
        kwargs = dict(raw)
        kwargs["train"] = TrainConfig.from_dict(raw.get("train", {}))
        if kwargs.get("candidates") is not None:
            kwargs["candidates"] = parse_candidates(kwargs["candidates"])
        bad = [m for m in kwargs.get("ood_methods", []) if m not in OOD_METHODS]
        if bad:
            raise ConfigError(f"unknown OOD methods {bad}; choose from {list(OOD_METHODS)}")
        if not kwargs.get("energy_temperature", 1.0) > 0:
            raise ConfigError("energy_temperature must be positive")
        if not isinstance(kwargs.get("jobs", 1), int) or kwargs.get("jobs", 1) < 1:
            raise ConfigError("jobs must be a positive integer")
        return cls(**kwargs)

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "train": self.train.to_dict(),
            "candidates": self.candidates,
            "ood_methods": list(self.ood_methods),
            "energy_temperature": self.energy_temperature,
            "jobs": self.jobs,
        }

    def candidate_range(self):
        """Configured candidates, else 1..2*hint with the hint taken from an
        integer ``train.k_new`` (3 when unset)."""
        if self.candidates is not None:
            return list(self.candidates)
        hint = self.train.k_new if isinstance(self.train.k_new, int) and self.train.k_new > 0 else 3
        return list(range(1, 2 * hint + 1))


def parse_candidates(spec):
    """``"a..b"`` (inclusive), ``"a,b,c"`` or a list of ints."""
    if isinstance(spec, list):
        vals = spec
    elif isinstance(spec, str) and ".." in spec:
        lo, _, hi = spec.partition("..")
        try:
            vals = list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigError(f"bad candidate range {spec!r}") from exc
    elif isinstance(spec, str):
        try:
            vals = [int(x) for x in spec.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad candidate list {spec!r}") from exc
    else:
        raise ConfigError("candidates must be 'a..b', 'a,b,...' or a list")
    if not vals:
        raise ConfigError("candidate range is empty")
    if any(not isinstance(v, int) or isinstance(v, bool) or v < 0 for v in vals):
        raise ConfigError("candidates must be non-negative integers")
    return vals


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def _load_dataset(path):
    if not Path(path).is_file():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def make_report(command, config_echo, digest, seed, **payload):
    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "artifact_version": __version__,
        "command": command,
        "config": config_echo,
        "dataset_digest": digest,
        "seed": seed,
        **payload,
    }


def write_candidates_csv(results, path):
    cols = ("k_new_candidate", "acc_score", "centr_score", "proto_score", "error")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerow({k: v for k, v in r.to_dict().items() if k in cols})


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args):
    out = Path(args.out_dir)
    if args.kind == "vmf":
        ds = synth_vmf_mixture(
            args.classes, args.dim, args.kappa, args.per_class, seed=args.seed,
            k_base=args.k_base, labeled_fraction=args.labeled_fraction,
            n_ood_classes=args.ood_classes, include_normal=args.include_normal,
        )
    else:
        ds = synth_toy_images(args.types, args.grid, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.name}.jsonl"
    save_dataset(ds, path)
    digest = dataset_digest(ds)
    (out / f"{args.name}.sha256").write_text(digest + "\n")
    print(f"wrote {len(ds.samples)} samples to {path}")
    print(f"digest {digest}")
    return EXIT_OK


def _resolve_k_new(exp, ds, out, jobs):
    """Run the candidate sweep when ``train.k_new`` is 'estimate'."""
    if exp.train.k_new != "estimate":
        return exp.train.k_new, None
    results, chosen = estimate_k_new(ds, exp.candidate_range(), exp.train, jobs=jobs)
    write_candidates_csv(results, out / "candidates.csv")
    return chosen, [r.to_dict() for r in results]


def cmd_train(args):
    exp = load_config(args.config)
    ds = _load_dataset(exp.dataset)
    if args.dry_run:
        print(f"config ok; dataset {exp.dataset} has {len(ds.samples)} samples")
        return EXIT_OK
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    k_new, sweep = _resolve_k_new(exp, ds, out, exp.jobs)
    cfg = replace(exp.train, k_new=k_new)
    try:
        ckpt, rows = train(ds, cfg)
    except NumericalAbort as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out / "checkpoint_last_good.json")
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(ckpt, out / "checkpoint.json")
    write_log_csv(rows, out / "train_log.csv")
    metrics = evaluate_model(ckpt.state, ds, cfg)
    report = make_report(
        "train", exp.to_dict(), dataset_digest(ds), cfg.seed,
        k_new=k_new, steps=ckpt.step, final_loss=rows[-1]["total"] if rows else None,
        metrics=metrics, candidates=sweep,
    )
    write_json(out / "report.json", report)
    print(f"nmi {metrics['nmi']:.4f} ari {metrics['ari']:.4f} f1 {metrics['f1']:.4f}")
    return EXIT_OK


def cmd_estimate_k(args):
    exp = load_config(args.config)
    if args.candidates is not None:
        exp.candidates = parse_candidates(args.candidates)
    jobs = args.jobs if args.jobs is not None else exp.jobs
    ds = _load_dataset(exp.dataset)
    out = Path(exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, chosen = estimate_k_new(ds, exp.candidate_range(), exp.train, jobs=jobs)
    write_candidates_csv(results, out / "candidates.csv")
    report = make_report(
        "estimate-k", exp.to_dict(), dataset_digest(ds), exp.train.seed,
        candidates=[r.to_dict() for r in results], chosen_k_new=chosen,
    )
    write_json(out / "estimate_report.json", report)
    print(f"chosen k_new = {chosen}")
    return EXIT_OK


def _load_model(args):
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args.dataset)
    return ckpt, TrainConfig.from_dict(ckpt.config), ds


def cmd_eval(args):
    ckpt, cfg, ds = _load_model(args)
    metrics = evaluate_model(ckpt.state, ds, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = make_report("eval", ckpt.config, dataset_digest(ds), cfg.seed, metrics=metrics)
    write_json(out / "eval_report.json", report)
    print(f"nmi {metrics['nmi']:.4f} ari {metrics['ari']:.4f} f1 {metrics['f1']:.4f}")
    return EXIT_OK


def cmd_ood(args):
    ckpt, cfg, ds = _load_model(args)
    if not ds.by_split("ood"):
        raise UsageError("dataset has no samples with split 'ood'")
    methods = list(OOD_METHODS) if args.method == "all" else [args.method]
    results = evaluate_ood(ckpt.state, ds, cfg, methods, args.energy_temperature)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"train": ckpt.config, "method": args.method, "energy_temperature": args.energy_temperature}
    report = make_report("ood", echo, dataset_digest(ds), cfg.seed, ood=[r.to_dict() for r in results])
    write_json(out / "ood_report.json", report)
    for r in results:
        print(f"{r.method}: auroc {r.auroc:.4f} fpr95 {r.fpr95:.4f} threshold {r.threshold:.6g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="protoncd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    kinds = ps.add_subparsers(dest="kind", required=True)
    pv = kinds.add_parser("vmf", help="vMF mixture of unit feature vectors")
    pv.add_argument("--classes", type=int, required=True)
    pv.add_argument("--dim", type=int, required=True)
    pv.add_argument("--kappa", type=float, required=True)
    pv.add_argument("--per-class", type=int, required=True)
    pv.add_argument("--k-base", type=int, default=None)
    pv.add_argument("--labeled-fraction", type=float, default=0.5)
    pv.add_argument("--ood-classes", type=int, default=0)
    pv.add_argument("--include-normal", action="store_true")
    pt = kinds.add_parser("toy", help="toy patch grids with implanted anomalies")
    pt.add_argument("--types", type=int, required=True)
    pt.add_argument("--grid", type=int, required=True)
    for q in (pv, pt):
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--out-dir", default=".")
        q.add_argument("--name", default="dataset")
    ps.set_defaults(func=cmd_synth)

    ptr = sub.add_parser("train", help="train a model from a JSON experiment config")
    ptr.add_argument("config")
    ptr.add_argument("--dry-run", action="store_true", help="validate config and dataset only")
    ptr.set_defaults(func=cmd_train)

    pe = sub.add_parser("estimate-k", help="sweep candidate novel-class counts")
    pe.add_argument("config")
    pe.add_argument("--candidates", default=None, help="range 'a..b' or list 'a,b,c'")
    pe.add_argument("--jobs", type=int, default=None)
    pe.set_defaults(func=cmd_estimate_k)

    for name, func, helptext in (("eval", cmd_eval, "clustering metrics"), ("ood", cmd_ood, "OOD detection")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("checkpoint")
        q.add_argument("dataset")
        q.add_argument("--out-dir", default=".")
        q.set_defaults(func=func)
        if name == "ood":
            q.add_argument("--method", default="all", choices=[*OOD_METHODS, "all"])
            q.add_argument("--energy-temperature", type=float, default=1.0)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ProtoNCDError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
