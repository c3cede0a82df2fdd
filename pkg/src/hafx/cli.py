"""Command-line entry point.

Subcommands: transfer, finetune, hedgecats, ssd-run, eval, ablate, bench,
report. Every pipeline is driven by a `key = value` config file (see
configs/ for the shipped recipes); flags override file paths and modes.
"""

import argparse
import sys

from .config import RunConfig, load_config, parse_config
from .errors import HafxError
from .evalbench import ALL_MODES, AblationMode


def _config(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    return parse_config("")


def _parse_modes(text):
    if text == "all":
        return ALL_MODES
    return tuple(AblationMode(m.strip()) for m in text.split(","))


def build_parser():
    p = argparse.ArgumentParser(prog="hafx", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="run config file")
        return sp

    sp = add("transfer", "train/load base model and run attention transfer")
    sp.add_argument("--base-ckpt", help="existing base checkpoint")

    sp = add("finetune", "LoRA fine-tuning from a post-transfer checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ssd", action="store_true", help="apply the SSD schedule")

    sp = add("hedgecats", "two-stage weights-transfer + hybrid LoRA pipeline")
    sp.add_argument("--base-ckpt")

    sp = add("ssd-run", "transfer then SSD-scheduled fine-tuning")
    sp.add_argument("--base-ckpt")

    sp = add("eval", "evaluate a checkpoint on the configured tasks")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", default="full_hybrid")
    sp.add_argument("--softmax", action="store_true", help="full softmax attention")

    sp = add("ablate", "six-mode ablation table for a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--modes", default="all")

    sp = add("bench", "linear vs quadratic scaling benchmark")
    sp.add_argument("--T", default="256,512,1024")
    sp.add_argument("--d", type=int, default=64)
    sp.add_argument("--d-prime", type=int, default=8)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--out", default="bench.csv")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("report", "pretty-print an ablation CSV as a table")
    sp.add_argument("csv", nargs="+")
    return p


def _run(args):
    from . import pipelines

    if args.command == "transfer":
        _, report = pipelines.cmd_transfer(_config(args), base_ckpt=args.base_ckpt)
        print(f"transfer losses: {report.epoch_losses}")
    elif args.command == "finetune":
        _, report = pipelines.cmd_finetune(_config(args), args.ckpt, use_ssd=args.ssd)
        print(f"finetune losses: {report.epoch_losses}")
    elif args.command == "hedgecats":
        _, (s1, s2) = pipelines.cmd_hedgecats(_config(args), base_ckpt=args.base_ckpt)
        print(f"stage1 losses: {s1.epoch_losses}; stage2 epochs: {len(s2.epoch_losses)}")
    elif args.command == "ssd-run":
        _, report = pipelines.cmd_ssd_run(_config(args), base_ckpt=args.base_ckpt)
        print(f"ssd finetune losses: {report.epoch_losses}")
    elif args.command == "eval":
        stage, results = pipelines.cmd_eval(
            _config(args), args.ckpt, AblationMode(args.mode), softmax=args.softmax
        )
        for task, r in results.items():
            print(f"{stage} {task}: acc={r['accuracy']:.4f} loss={r['loss']:.4f}")
    elif args.command == "ablate":
        report, path = pipelines.cmd_ablate(
            _config(args), args.ckpt, modes=_parse_modes(args.modes)
        )
        print(f"wrote {path}")
        _print_table(report)
    elif args.command == "bench":
        T_list = [int(t) for t in args.T.split(",")]
        report = pipelines.cmd_bench(
            T_list, d=args.d, d_prime=args.d_prime, reps=args.reps,
            out_path=args.out, seed=args.seed,
        )
        for path, T, ms, aux in report.rows:
            print(f"{path:20s} T={T:<6d} {ms:10.3f} ms  aux={aux} B")
        print(f"wrote {args.out}")
    elif args.command == "report":
        _print_csvs(args.csv)
    return 0


def _print_table(report):
    print(f"{'mode':16s} " + " ".join(f"{t:>14s}" for t in report.tasks) + f" {'AVG':>8s} {'Rec.Perf':>9s}")
    base = " ".join(f"{report.base_scores[t] * 100:14.2f}" for t in report.tasks)
    print(f"{'base (softmax)':16s} {base} {report.base_avg * 100:8.2f} {100.0:9.2f}")
    for mode in dict.fromkeys(m for m, *_ in report.rows):
        accs = {t: a for m, t, a, _l in report.rows if m == mode}
        cells = " ".join(f"{accs[t] * 100:14.2f}" for t in report.tasks)
        print(
            f"{mode.value:16s} {cells} {report.mode_avg(mode) * 100:8.2f} "
            f"{report.recovered(mode):9.2f}"
        )


def _print_csvs(paths):
    for path in paths:
        with open(path) as f:
            for line in f:
                print(line.rstrip("\n").replace(",", "\t"))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 2
    try:
        return _run(args)
    except HafxError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
