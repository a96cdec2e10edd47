"""``konvlina`` command line.

Exit codes: 0 success, 1 usage or config error, 2 tolerance or ordering
check failed, 3 numerical failure at runtime.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from konvlina import __version__
from konvlina.config import RunConfig, load_config, save_config
from konvlina.core.tensor import ConfigurationError, NumericalError, inject_fault, track_allocations
from konvlina.records import EventLog, experiment_id

EXIT_OK, EXIT_USAGE, EXIT_TOLERANCE, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults used when omitted)")
    common.add_argument("--seed", type=_u64, help="root seed; overrides the config")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    common.add_argument("--threads", type=int, help="BLAS thread cap; overrides the config")

    p = _Parser(prog="konvlina", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"konvlina {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameterized op")
    g.add_argument("--only", type=lambda s: s.split(","), help="comma-separated subset of suite entries")
    g.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)

    b = sub.add_parser("bench-attention", parents=[common], help="time exact vs Nystrom attention")
    b.add_argument("--n", type=_int_list, help="sequence lengths, e.g. 256,512,1024")
    b.add_argument("--m", type=_int_list, help="landmark counts, e.g. 32")
    b.add_argument("--repeats", type=int, help="timed repetitions per cell (>= 9 for the slope claim)")
    b.add_argument("--check", action="store_true", help="exit 2 unless exact slope >= 1.7 and Nystrom <= 1.3")

    sub.add_parser("train", parents=[common], help="train the toy detector")

    a = sub.add_parser("ablate", parents=[common], help="nearest vs eNAU vs eNAU+cKSPP over several seeds")
    a.add_argument("--seeds", type=_int_list, help="override ablation seeds, e.g. 0,1,2")
    a.add_argument("--require-order", action="store_true", help="exit 2 unless the reference ordering holds")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    e.add_argument("--checkpoint", type=Path, help="KVLC checkpoint (default: OUT/checkpoint.kvlc)")
    return p


def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    return cfg.with_overrides(**over) if over else cfg


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> int:
    from konvlina.suite import REGISTRY, run_suite

    names = args.only or list(REGISTRY)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise UsageError(f"unknown suite entries {unknown}; known: {', '.join(REGISTRY)}")
    fault = inject_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    with fault, track_allocations() as recorded, EventLog(out / "events.csv", experiment_id("gradcheck", cfg)) as log:
        results = run_suite(cfg.seed, cfg.gradcheck.h, names)
        for r in results:
            log.append(f"{r.name}.max_rel_error", r.max_rel_error)
    if args.inject_fault and args.inject_fault not in {op for op, _ in recorded}:
        raise UsageError(f"fault target {args.inject_fault!r} is not a recorded op of the selected suite entries")
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.max_rel_error < cfg.gradcheck.tol else "FAIL"
        print(f"{r.name:<{width}}  max rel err {r.max_rel_error:.3e}  ({r.n_params} values)  {status}")
    worst = max(results, key=lambda r: r.max_rel_error)
    if worst.max_rel_error >= cfg.gradcheck.tol:
        failing = [r.name for r in results if r.max_rel_error >= cfg.gradcheck.tol]
        print(f"gradcheck FAILED: {', '.join(failing)} exceed {cfg.gradcheck.tol:g}; "
              f"worst offender {worst.name} (rel err {worst.max_rel_error:.3e})")
        return EXIT_TOLERANCE
    print(f"gradcheck passed: {len(results)} ops, worst {worst.name} at {worst.max_rel_error:.3e}")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, args, out: Path) -> int:
    from konvlina.bench import bench_attention, fit_slopes, write_bench_csv

    bc = cfg.bench
    n_values = args.n or list(bc.n_values)
    m_values = args.m or list(bc.m_values)
    if min(n_values) < max(m_values):
        raise UsageError("every N must be >= every m")
    with EventLog(out / "events.csv", experiment_id("bench-attention", cfg)) as log:
        def on_row(r):
            log.append(f"{r.method}.N{r.N}.m{r.m}.median", r.wall_ns_median, "ns")
            print(f"{r.method:<8} N={r.N:<5} m={r.m:<3} median {r.wall_ns_median / 1e6:9.3f} ms  "
                  f"rel err {r.rel_frobenius_err:.2e}", flush=True)
        rows = bench_attention(n_values, m_values, bc.heads, bc.head_dim, args.repeats or bc.repeats, bc.warmup,
                               cfg.seed, bc.pinv_iterations, on_row=on_row)
        slopes = fit_slopes(rows)
        for (method, m), s in slopes.items():
            log.append(f"{method}.m{m}.slope", s)
    write_bench_csv(rows, out / "bench_attention.csv")
    ok = True
    for (method, m), s in slopes.items():
        bound_ok = s >= 1.7 if method == "exact" else s <= 1.3
        ok &= bound_ok
        print(f"slope {method:<8} m={m:<3} {s:.3f}  ({'within' if bound_ok else 'outside'} bound)")
    print(f"wrote {out / 'bench_attention.csv'}")
    return EXIT_TOLERANCE if args.check and not ok else EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    from konvlina.toy.train import train

    with EventLog(out / "events.csv", experiment_id("train", cfg)) as log:
        def on_row(row):
            for k, v in row.items():
                if k not in ("epoch", "split"):
                    log.append(f"{row['split']}.{k}", v, "" if k != "loss" else "nats")
        res = train(cfg, out, log=print, on_row=on_row)
    final = res.final
    print(f"final val AP {final['AP']:.4f}  AR {final['AR']:.4f}; wrote {out / 'checkpoint.kvlc'}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    from konvlina.toy.ablation import run_ablation

    if args.seeds is not None:
        cfg = cfg.with_overrides(**{"ablation.seeds": args.seeds})
    save_config(cfg, out / "config.yaml")
    with EventLog(out / "events.csv", experiment_id("ablate", cfg)) as log:
        res = run_ablation(cfg, out_dir=out, log=print)
        for r in res.rows:
            log.append(f"{r.mode}.AP_mean", r.ap_mean)
            log.append(f"{r.mode}.AR_mean", r.ar_mean)
    print(res.table())
    return EXIT_TOLERANCE if args.require_order and not res.ordering_holds else EXIT_OK


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    from konvlina.core.io import load_checkpoint
    from konvlina.toy.model import Detector
    from konvlina.toy.scene import make_dataset
    from konvlina.toy.train import evaluate

    path = args.checkpoint or out / "checkpoint.kvlc"
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model = Detector(cfg.neck_config(), cfg.model.widths, cfg.model.num_classes, cfg.seed)
    try:
        model.load_state_dict(load_checkpoint(path))
    except KeyError as err:
        raise ConfigurationError(f"checkpoint does not match the configured model: {err}") from None
    scenes = make_dataset(cfg.seed, "val", cfg.train.val_scenes, cfg.model.image_size, cfg.model.num_classes)
    res, loss = evaluate(model, scenes, cfg)
    row = {"split": "val", "loss": loss, **res.as_dict()}
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
    with EventLog(out / "events_eval.csv", experiment_id("eval", cfg)) as log:
        for k, v in res.as_dict().items():
            log.append(k, v)
    print("  ".join(f"{k} {v:.4f}" for k, v in res.as_dict().items()) + f"  loss {loss:.4f}")
    return EXIT_OK


COMMANDS = {"gradcheck": cmd_gradcheck, "bench-attention": cmd_bench, "train": cmd_train,
            "ablate": cmd_ablate, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        limits = threadpool_limits(cfg.threads) if cfg.threads else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](cfg, args, out)
    except (UsageError, ConfigurationError) as err:
        print(f"konvlina: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"konvlina: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
