"""``headfold`` command line: verify, count, train, sweep, report.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
``verify`` finds a residual above tolerance.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import accounting
from .initialization import ConfigError, InitSpec
from .model import PROFILES, ModelConfig, ReconstructionError, reconstruct, resolve_model
from .tasks import KINDS, ToyTask
from .train import AGGRESSIVE, TrainSettings, head_sweep, run_jobs, stability_sweep, task_for
from .verify import DEFAULT_TOLERANCES, FFN_WIDTHS, HEAD_COUNTS, MODEL_WIDTHS, SEQ_LENGTHS, run_suite

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2

SCHEDULES = {"default": TrainSettings(), "aggressive": AGGRESSIVE}

CONVENTION_NOTE = """\
convention: published
  params include token/position embeddings, biases and layer-norm affines;
  encoder-only counts add 2 segment embeddings and the pooler; encoder-decoder
  models share one token table between source, target and output projection.
  MACs: one multiply-accumulate per FLOP, single sequence, inference only."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0,2,5"`` or the inclusive range ``"0..4"``."""
    try:
        seeds: list[int] = []
        for part in text.split(","):
            lo, sep, hi = part.strip().partition("..")
            seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    except ValueError:
        raise UsageError(f"cannot parse seeds {text!r}; use e.g. 0..4 or 0,1,2") from None
    if not seeds or min(seeds) < 0:
        raise UsageError("seeds must be non-negative and non-empty")
    return seeds


def _int_list(text: str, what: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None
    if not values or min(values) < 1:
        raise UsageError(f"{what} must be positive integers")
    return values


def _positive(kind):
    def convert(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return convert


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="headfold", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def model_flags(p, required=True, defaults="desk"):
        p.add_argument("--model", required=required, help="shorthand like 8H-6L-6L, or a JSON config path")
        p.add_argument("--defaults", default=defaults, choices=sorted(PROFILES), help="dimension profile for shorthands")

    def run_flags(p):
        p.add_argument("--init", default="vanilla", help="comma list: vanilla, truncated-normal, admin, admin:truncated-normal")
        p.add_argument("--seeds", default="0")
        p.add_argument("--task", default="copy", choices=KINDS)
        p.add_argument("--steps", type=_positive(int), default=400)
        p.add_argument("--seq-len", type=_positive(int), default=8)
        p.add_argument("--schedule", default="default", choices=sorted(SCHEDULES))
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=_positive(int), default=None, help="process pool size (HEADFOLD_WORKERS overrides)")

    v = sub.add_parser("verify", help="check the head-sum / FFN-split identities and gradients")
    v.add_argument("--model", help="restrict the head-sum grid to this config's heads and d_model")
    v.add_argument("--defaults", default="desk", choices=sorted(PROFILES))
    v.add_argument("--seeds", default="0..19")
    v.add_argument("--tol", type=float, default=None, help="one tolerance for every check")
    v.add_argument("--out", help="also write verify.json here")

    c = sub.add_parser("count", help="parameters and inference MACs, with the single-head reconstruction")
    model_flags(c, defaults=None)
    c.add_argument("--seq-len", type=_positive(int), default=512)
    c.add_argument("--out", help="also write count.json here")

    t = sub.add_parser("train", help="train one config per init and seed; one CSV per run")
    model_flags(t)
    run_flags(t)

    s = sub.add_parser("sweep", help="stability or head-count sweep; one JSON per sweep")
    s.add_argument("kind", choices=("stability", "heads"))
    model_flags(s)
    run_flags(s)
    s.add_argument("--heads", default="2,4", help="head counts for the heads sweep")

    r = sub.add_parser("report", help="summarise the JSON outputs in a directory")
    r.add_argument("--out", required=True, help="directory written by train or sweep")
    r.add_argument("--model", help="also print the resolved config and its accounting")
    r.add_argument("--defaults", default=None, choices=sorted(PROFILES))
    return parser


# -- helpers -------------------------------------------------------------------------
def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".headfold-write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {path}: {exc}") from None
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _task(args, config: ModelConfig) -> ToyTask:
    return task_for(config, ToyTask(args.task, seq_len=args.seq_len))


def _inits(text: str) -> list[InitSpec]:
    return [InitSpec.parse(name.strip()) for name in text.split(",") if name.strip()]


def _label_from_record(rec) -> str:
    d = rec.init
    if d["scheme"] == "admin":
        return "admin" if d.get("base", "xavier") == "xavier" else f"admin:{d['base']}"
    return "vanilla" if d["scheme"] == "xavier" else d["scheme"]


def _run_name(rec) -> str:
    model = ModelConfig(**rec.config).shorthand()
    return f"{model}_{_label_from_record(rec).replace(':', '-')}_seed{rec.seed}"


def _write_runs(out: Path, records) -> None:
    runs = out / "runs"
    runs.mkdir(exist_ok=True)
    for rec in records:
        rec.write_csv(runs / f"{_run_name(rec)}.csv")


def _summary_line(rec) -> str:
    val = rec.final_val_loss
    return (
        f"{ModelConfig(**rec.config).shorthand():<12} {_label_from_record(rec):<24} seed {rec.seed:<3} "
        f"{rec.status:<18} steps {len(rec.losses):<5} final val loss {val:.4f}"
    )


def _count_rows(config: ModelConfig, seq_len: int) -> list[dict]:
    rows = []
    try:
        deep = reconstruct(config)
    except ReconstructionError:
        deep = None
    base = accounting.count_params(config)
    for cfg in [config] + ([deep] if deep is not None and deep != config else []):
        params = accounting.count_params(cfg)
        rows.append(
            {
                "model": cfg.shorthand(),
                "params": params,
                "params_built": accounting.count_params(cfg, "built"),
                "flops": accounting.count_flops(cfg, seq_len),
                "param_parity_pct": 100.0 * (params - base) / base,
                "config": cfg.to_dict(),
            }
        )
    return rows


# -- verbs ---------------------------------------------------------------------------
def cmd_verify(args) -> int:
    seeds = parse_seeds(args.seeds)
    heads, widths = HEAD_COUNTS, MODEL_WIDTHS
    if args.model:
        config = resolve_model(args.model, args.defaults)
        if config.d_model % config.heads:
            raise UsageError(f"{config.heads} heads do not divide d_model={config.d_model}")
        heads, widths = (config.heads,), (config.d_model,)
    if args.tol is not None and not args.tol >= 0:
        raise UsageError("--tol must be non-negative")
    tols = {k: args.tol for k in DEFAULT_TOLERANCES} if args.tol is not None else None
    report = run_suite(heads, widths, SEQ_LENGTHS, FFN_WIDTHS, seeds, seeds[:10], tols)
    for check in report.checks:
        print(check.line())
    print("all checks passed" if report.passed else "verification FAILED")
    if args.out:
        (_out_dir(args.out) / "verify.json").write_text(_dump(report.to_dict()))
    return EXIT_OK if report.passed else EXIT_VIOLATION


def cmd_count(args) -> int:
    config = resolve_model(args.model, args.defaults)
    rows = _count_rows(config, args.seq_len)
    print(f"{'model':<14}{'params':>16}{'(M)':>10}{'MACs @' + str(args.seq_len):>18}{'(B)':>10}{'parity':>10}")
    for row in rows:
        print(
            f"{row['model']:<14}{row['params']:>16,}{row['params'] / 1e6:>10.2f}"
            f"{row['flops']:>18,}{row['flops'] / 1e9:>10.2f}{row['param_parity_pct']:>+9.2f}%"
        )
    print()
    print(CONVENTION_NOTE)
    if args.out:
        payload = {"seq_len": args.seq_len, "convention": "published", "rows": rows}
        (_out_dir(args.out) / "count.json").write_text(_dump(payload))
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_model(args.model, args.defaults)
    out = _out_dir(args.out)
    task = _task(args, config)
    settings = SCHEDULES[args.schedule]
    jobs = [
        dict(config=config, init=init, task=task, seed=seed, steps=args.steps, settings=settings)
        for init in _inits(args.init)
        for seed in parse_seeds(args.seeds)
    ]
    records = run_jobs(jobs, args.workers)
    _write_runs(out, records)
    summaries = {_run_name(r): r.summary() for r in records}
    (out / "train.json").write_text(_dump({"runs": summaries}))
    for rec in records:
        print(_summary_line(rec))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = resolve_model(args.model, args.defaults)
    out = _out_dir(args.out)
    settings = SCHEDULES[args.schedule]
    seeds = parse_seeds(args.seeds)
    if args.kind == "stability":
        if config.heads < 2:
            raise UsageError("the stability sweep needs a multi-head --model to reconstruct")
        table = stability_sweep(
            config, seeds, _inits(args.init), _task(args, config), args.steps, settings, args.workers
        )
    else:
        inits = _inits(args.init)
        if len(inits) != 1:
            raise UsageError("the heads sweep takes a single --init")
        if args.model.endswith(".json"):
            raise UsageError("the heads sweep takes a shorthand --model such as 4H-4L")
        table = head_sweep(
            _int_list(args.heads, "--heads"),
            config.enc_layers,
            _task(args, config),
            args.steps,
            seeds,
            defaults=args.defaults,
            init=inits[0],
            settings=settings,
            workers=args.workers,
            kind_suffix=config.kind == "encoder-decoder",
        )
    _write_runs(out, table.records)
    (out / f"sweep-{args.kind}.json").write_text(table.to_json())
    for rec in table.records:
        print(_summary_line(rec))
    for key, cell in sorted(table.cells.items()):
        if args.kind == "stability":
            print(f"{key:<32} diverged {cell['diverged']}/{cell['runs']}")
        else:
            print(f"alpha {key:<4} {cell['shallow_model']} vs {cell['deep_model']}  mean gap {cell['mean_gap']:+.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise UsageError(f"{args.out} is not a directory")
    if args.model:
        config = resolve_model(args.model, args.defaults)
        print("resolved config:")
        print(_dump(config.to_dict()), end="")
        print("accounting (published convention):")
        for name, value in accounting.param_breakdown(config).items():
            print(f"  {name:<22}{value:>16,}")
        print(f"  {'total':<22}{accounting.count_params(config):>16,}")
        print(CONVENTION_NOTE)
    files = sorted(out.glob("*.json"))
    if not files:
        raise UsageError(f"no JSON outputs in {args.out}")
    for path in files:
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}") from None
        print(f"== {path.name}")
        if "runs" in data:
            for name, run in sorted(data["runs"].items()):
                val = run["validation"][-1]["loss"] if run["validation"] else float("nan")
                print(f"  {name:<40} {run['status']:<18} final val loss {val:.4f}")
                if run.get("admin"):
                    omegas = [r["omega"] for r in run["admin"]["sublayers"]]
                    print(f"    admin omegas {min(omegas):.3f}..{max(omegas):.3f} over {len(omegas)} sub-layers")
        elif data.get("sweep") == "stability":
            for key, cell in sorted(data["cells"].items()):
                print(f"  {key:<32} diverged {cell['diverged']}/{cell['runs']}  statuses {', '.join(cell['statuses'])}")
        elif data.get("sweep") == "heads":
            for key, row in sorted(data["cells"].items(), key=lambda kv: int(kv[0])):
                print(
                    f"  alpha {key:<3} {row['shallow_model']:<10} {row['deep_model']:<10} "
                    f"mean gap (shallow - deep val loss) {row['mean_gap']:+.4f}"
                )
        elif "rows" in data:
            for row in data["rows"]:
                print(f"  {row['model']:<14} params {row['params']:,}  MACs {row['flops']:,}")
        elif "checks" in data:
            for check in data["checks"]:
                print(f"  {check['name']:<36} {check['max_residual']:.3e}  {'ok' if check['passed'] else 'FAIL'}")
        else:
            print("  (unrecognised file)")
    return EXIT_OK


VERBS = {"verify": cmd_verify, "count": cmd_count, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return VERBS[args.verb](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ReconstructionError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
