"""``sdanet`` command line.

Every subcommand accepts ``--config FILE`` and any ``--key value`` pair
naming a RunConfig field; those not claimed by the subcommand's own flags
are treated as config overrides. The effective configuration is printed
(and saved next to the outputs) so runs can be reproduced.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from . import gradsuite
from . import networks as nw
from . import pipelines as pl
from .benchmark import runner
from .benchmark.metrics import dice, mse_metric, ssim
from .benchmark.phantoms import gen_phantom_dataset, shift_subject
from .config import ConfigError, RunConfig, parse_overrides

log = logging.getLogger("sdanet")


class CliError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="sdanet", description="Test-time self domain adaptation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="key=value config file")
        return sp

    sp = add("gen-data", "Generate a phantom dataset directory.")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=1)
    sp.add_argument("--slices", type=int, default=None, help="slices per subject")
    sp.add_argument("--shifted", action="store_true", help="apply the target-domain shift")
    sp.add_argument("--prefix", default=None, help="subject id prefix (default s, or t when shifted)")

    sp = add("train-task", "Train the task network on a source dataset.")
    sp.add_argument("--train", required=True)
    sp.add_argument("--val", default=None)
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = add("train-ae", "Train the auto-encoder bank against a frozen task network.")
    sp.add_argument("--train", required=True)
    sp.add_argument("--checkpoint", required=True, help="task network checkpoint")
    sp.add_argument("--out", required=True, help="checkpoint path (task network and AEs)")

    sp = add("adapt", "Adapt to one subject and write its predictions.")
    sp.add_argument("--checkpoint", required=True, help="checkpoint with task network and AEs")
    sp.add_argument("--subject", required=True, help="subject directory")
    sp.add_argument("--out", required=True, help="prediction directory")
    sp.add_argument("--no-adapt", action="store_true", help="predict without adaptors")

    sp = add("evaluate", "Score prediction directories against ground truth.")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--method", default="pred")

    sp = add("run-benchmark", "Train, adapt and evaluate all methods on phantoms.")
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", "Finite-difference check of every op and network block.")
    sp.add_argument("--precision", choices=("32", "64", "both"), default="both")
    sp.add_argument("--max-coords", type=int, default=gradsuite.MAX_COORDS)
    return p


def _emit_config(rc, configs, out_dir=None):
    lines = rc.echo(*configs)
    print("# effective configuration")
    for line in lines:
        print(line)
    if out_dir is not None:
        Path(out_dir, "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _subject_dirs(root):
    """A single subject directory, or every subject directory below ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"directory {root} does not exist")
    if any(p.suffix == ".sdat" for p in root.iterdir()):
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise formats.FormatError(f"{root}: no subject directories")
    return dirs


def _load_models(path, need_ae=True):
    entries = formats.read_checkpoint(path)
    if "task.meta.kind" not in entries:
        raise CliError(f"{path}: no task network in checkpoint")
    weights = nw.load_task(entries)
    bank = None
    if need_ae:
        if "ae.meta.y_channels" not in entries:
            raise CliError(f"{path}: no auto-encoders in checkpoint (run train-ae)")
        bank = nw.load_ae(entries)
    return weights, bank


def cmd_gen_data(args, rc):
    phantom = rc.phantom_config()
    slices = args.slices or rc.benchmark_config().slices_per_subject
    if args.subjects < 1 or slices < 1:
        raise CliError("--subjects and --slices must be >= 1")
    prefix = args.prefix or ("t" if args.shifted else "s")
    subjects = gen_phantom_dataset(phantom, args.subjects, slices, prefix=prefix)
    configs = [phantom]
    if args.shifted:
        shift = rc.shift_config(gamma=runner.TARGET_GAMMA)
        seed = rc.benchmark_config().shift_seed
        subjects = [shift_subject(s, shift, seed=seed + i) for i, s in enumerate(subjects)]
        configs.append(shift)
    formats.write_dataset(args.out, subjects)
    _emit_config(rc, configs, args.out)
    print(f"wrote {len(subjects)} subjects to {args.out}")


def cmd_train_task(args, rc):
    cfg = rc.train_config()
    train = formats.read_dataset(args.train)
    val = formats.read_dataset(args.val) if args.val else []
    n_out = rc.get("n_classes") if cfg.task == nw.SEGMENTATION else None
    weights, history = pl.train_task(train, val, cfg, n_out=n_out)
    formats.write_checkpoint(args.out, nw.task_state(weights))
    _emit_config(rc, [cfg])
    best = min(h[2] for h in history)
    print(f"epochs run: {len(history) - 1}  best validation loss: {best:.6g}")
    print(f"wrote {args.out}")


def cmd_train_ae(args, rc):
    cfg = rc.train_config()
    weights, _ = _load_models(args.checkpoint, need_ae=False)
    if weights.kind != cfg.task:
        raise CliError(f"checkpoint holds a {weights.kind} network but task={cfg.task}")
    bank, history = pl.train_autoencoders(weights, formats.read_dataset(args.train), cfg)
    formats.write_checkpoint(args.out, {**nw.task_state(weights), **nw.ae_state(bank)})
    _emit_config(rc, [cfg])
    if history:
        print(f"L_AE first epoch {history[0]:.6g}  last epoch {history[-1]:.6g}")
    print(f"wrote {args.out}")


def cmd_adapt(args, rc):
    weights, bank = _load_models(args.checkpoint)
    cfg = rc.train_config(task=weights.kind)
    if cfg.task != weights.kind:
        raise CliError(f"checkpoint holds a {weights.kind} network but task={cfg.task}")
    subject = formats.read_subject(args.subject)
    out = formats.ensure_dir(args.out)
    if args.no_adapt:
        pred = pl.predict(subject, weights)
        report_lines = ["adaptation: disabled"]
    else:
        pred, report, adaptors = pl.adapt_subject(subject, weights, bank, cfg)
        report_lines = report.lines()
        formats.write_checkpoint(out / "adaptors.sdck", nw.adaptor_state(adaptors))
    formats.write_prediction(out, pred, subject.subject_id)
    (out / "adaptation_report.txt").write_text("\n".join(report_lines) + "\n", encoding="utf-8")
    _emit_config(rc, [cfg], out)
    for line in report_lines:
        print(line)


def _evaluate_pair(method, subject_id, pred_dir, gt_dir, n_classes):
    kind, pred = formats.read_maps(pred_dir)
    gt_kind, gt = formats.read_maps(gt_dir)
    if kind != gt_kind:
        raise CliError(f"{pred_dir} holds {kind} but {gt_dir} holds {gt_kind}")
    if pred.shape != gt.shape:
        raise CliError(f"{subject_id}: prediction shape {pred.shape} != ground truth {gt.shape}")
    rows = []
    if kind == "labels":
        k = n_classes or int(max(gt.max(), pred.max())) + 1
        per = [dice(pred, gt, c) for c in range(k)]
        rows += [(method, subject_id, "dice", str(c), v) for c, v in enumerate(per)]
        rows.append((method, subject_id, "dice", "all", float(np.mean(per))))
    else:
        rows.append((method, subject_id, "mse", "all", mse_metric(pred, gt)))
        rows.append((method, subject_id, "ssim", "all", float(np.mean([ssim(a, b) for a, b in zip(pred, gt)]))))
    return rows


def cmd_evaluate(args, rc):
    pred_dirs = _subject_dirs(args.pred)
    gt_root = Path(args.gt)
    single = len(pred_dirs) == 1 and pred_dirs[0] == Path(args.pred)
    rows = []
    for pd in pred_dirs:
        if single and any(p.suffix == ".sdat" for p in gt_root.iterdir()):
            gd = gt_root
        else:
            gd = gt_root / pd.name
        if not gd.is_dir():
            raise FileNotFoundError(f"no ground truth directory for subject {pd.name} under {gt_root}")
        rows += _evaluate_pair(args.method, gd.name, pd, gd, rc.get("n_classes"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(runner.CSV_HEADER)
        for m, s, k, c, v in rows:
            w.writerow([m, s, k, c, repr(float(v))])
    for m, s, k, c, v in rows:
        if c == "all":
            print(f"{s}  {k} {v:.6f}")
    print(f"wrote {out}")


def cmd_run_benchmark(args, rc):
    cfg = rc.train_config()
    phantom = rc.phantom_config(task=cfg.task, seed=cfg.seed)
    shift = rc.shift_config(gamma=runner.TARGET_GAMMA)
    bench = rc.benchmark_config()
    out = formats.ensure_dir(args.out)
    result = runner.run_benchmark(cfg.task, bench, phantom, shift, cfg)
    runner.write_results(result, out)
    formats.write_checkpoint(out / "models.sdck", {**nw.task_state(result.weights), **nw.ae_state(result.bank)})
    _emit_config(rc, [cfg, phantom, shift, bench], out)
    print(result.table())
    print(f"max adaptation time per subject: {max(result.adapt_seconds, default=0.0):.2f} s")
    print(f"max feature-adaptor deviation: {max(result.deviations, default=0.0):.4f}")
    print(f"wrote {out / 'results.csv'}")


def cmd_gradcheck(args, rc):
    dtypes = {"32": [np.float32], "64": [np.float64], "both": [np.float32, np.float64]}[args.precision]
    ok_all = True
    for dt in dtypes:
        lines, ok, seconds = gradsuite.report(dt, args.max_coords)
        print(f"# {np.dtype(dt).name}: {seconds:.1f} s")
        for line in lines:
            print(line)
        ok_all &= ok
    return 0 if ok_all else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-task": cmd_train_task,
    "train-ae": cmd_train_ae,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "run-benchmark": cmd_run_benchmark,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        rc = RunConfig.load(args.config, parse_overrides(extra))
        code = COMMANDS[args.command](args, rc)
    except (ConfigError, CliError, formats.FormatError, FileNotFoundError, ValueError,
            nw.ArchitectureError, pl.AdaptationError) as exc:
        print(f"sdanet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
