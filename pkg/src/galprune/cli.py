"""Command-line driver: pretrain, prune, compact, finetune, eval, report.

Exit codes: 0 success, 1 configuration problem, 2 data/checkpoint problem,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gal
from . import pruner as pr
from .dataio import (Checkpoint, CheckpointError, DataError, RunConfig, gal_checkpoint, load_idx_images,
                     load_mnist_split, restore_gal, MNIST_FILES)
from .gal import ConfigError, TrainingDiverged
from .networks import ArchitectureError, attach_masks, count_cost, describe_widths, init_params, make_network

log = logging.getLogger("galprune")


def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, gal=replace(cfg.gal, seed=args.seed),
                      pretrain=replace(cfg.pretrain, seed=args.seed), finetune=replace(cfg.finetune, seed=args.seed))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / f"config.{args.command}.json")
    return cfg


def _test_data(cfg: RunConfig):
    return load_mnist_split(cfg.resolved_data_dir(), "test", cfg.test_limit)


def _path(arg, cfg: RunConfig, default: str) -> Path:
    return Path(arg) if arg else Path(cfg.out) / default


def _record_time(cfg: RunConfig, stage: str, seconds: float) -> None:
    # wall-clock times live outside the checkpoints so that same-seed runs stay bitwise identical
    path = Path(cfg.out) / "timings.json"
    times = json.loads(path.read_text()) if path.is_file() else {}
    times[stage] = seconds
    path.write_text(json.dumps(times, indent=1, sort_keys=True))


def _cost_meta(spec) -> dict:
    c = count_cost(spec)
    return {"flops": c.flops, "params": c.params}


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, cfg: RunConfig) -> int:
    spec = cfg.build_spec()
    images, labels = load_mnist_split(cfg.resolved_data_dir(), "train", cfg.train_limit)
    test = _test_data(cfg)
    net = make_network(spec, init_params(spec, np.random.default_rng([cfg.pretrain.seed, 1])))
    t0 = time.time()
    _, history = pr.finetune(net, images, labels, cfg.pretrain, eval_data=test,
                             log=lambda row: log.info("pretrain %s", row))
    err = history[-1]["error"] if history else pr.evaluate(net, *test)
    ck = Checkpoint.from_network(net, "baseline", test_error=err, reference=_cost_meta(spec),
                                 history=history)
    _record_time(cfg, "pretrain", time.time() - t0)
    path = Path(cfg.out) / "baseline.ckpt"
    ck.save(path)
    print(f"baseline test error {err:.2f}% -> {path}")
    return 0


def cmd_prune(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    # images only: the label file is never opened on this path
    images = load_idx_images(Path(cfg.resolved_data_dir()) / MNIST_FILES["train"][0])
    if cfg.train_limit is not None:
        images = images[:cfg.train_limit]
    if args.resume:
        resume_ck = Checkpoint.load(args.resume)
        baseline, net, D, state, tcfg = restore_gal(resume_ck)
        extra = {k: resume_ck.meta.get(k) for k in ("reference", "baseline_error")}
    else:
        base_ck = Checkpoint.load(_path(args.baseline, cfg, "baseline.ckpt"))
        if base_ck.spec.to_dict() != cfg.build_spec().to_dict():
            log.warning("baseline architecture differs from the config; using the checkpoint's")
        tcfg = cfg.gal
        baseline = base_ck.network(trainable=False)
        net = attach_masks(base_ck.spec, cfg.structures, np.random.default_rng([tcfg.seed, 2]),
                           baseline=base_ck.params, dropout_rate=tcfg.dropout)
        D = gal.make_discriminator(base_ck.spec.classes, tcfg)
        state = gal.init_state(net, tcfg)
        extra = {"reference": base_ck.meta.get("reference", _cost_meta(base_ck.spec)),
                 "baseline_error": base_ck.meta.get("test_error")}
    stream = gal.ImageStream(images, tcfg.batch_size, tcfg.seed)
    every = args.checkpoint_every or stream.batches_per_epoch
    ckpt_path = out / "gal.ckpt"
    t0 = time.time()

    def progress(row):
        t = row["iteration"]
        if t % 50 == 0:
            log.info("iter %d epoch %.2f data %.5f adv %.4f zeros %d d_acc %.3f (%.0fs)", t, row["epoch"],
                     row["data"], row["adversarial"], row["exact_zero_count"], row["d_accuracy"], time.time() - t0)

    features = pr.predict(baseline, images)
    total = tcfg.total_iterations(stream.batches_per_epoch)
    try:
        while state.iteration < total:
            stop = min(total, (state.iteration // every + 1) * every)
            gal.train_gal(baseline, net, D, stream, tcfg, state=state, stop_at=stop,
                          baseline_features=features, callback=progress)
            gal_checkpoint(baseline, net, D, state, tcfg, **extra).save(ckpt_path)
    except FloatingPointError as exc:
        if isinstance(exc, TrainingDiverged):
            row, mask = exc.state["row"], exc.state["mask"]
        else:
            row, mask = (state.history[-1] if state.history else None), net.mask.values.data
        (out / "divergence.json").write_text(json.dumps(
            {"message": str(exc), "iteration": state.iteration, "row": row,
             "mask": np.nan_to_num(mask).tolist()}, indent=1))
        raise
    gal_checkpoint(baseline, net, D, state, tcfg, **extra).save(ckpt_path)
    _record_time(cfg, "prune", time.time() - t0)
    write_metrics(out / "metrics.csv", state.history)
    m = net.mask.values.data
    print(f"GAL finished at iteration {state.iteration}: {int(np.sum(m == 0))}/{m.size} exact zeros -> {ckpt_path}")
    return 0


def write_metrics(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=gal.METRIC_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in gal.METRIC_COLUMNS})


def cmd_compact(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_path(args.checkpoint, cfg, "gal.ckpt"))
    net = ck.network(trainable=False)
    threshold = cfg.threshold if args.threshold is None else args.threshold
    structures = pr.extract_prunable(net, threshold)
    model = pr.compact(net, structures)
    try:
        test_images, test_labels = _test_data(cfg)
        probes = test_images[:1000]
    except DataError:
        test_images = None
        probes = np.random.default_rng(cfg.seed).random((1000,) + net.spec.input_shape)
    lam = ck.meta.get("train_config", {}).get("lam")
    report = pr.build_report(net, model, lam=lam, threshold=threshold, probes=probes)
    if test_images is not None:
        masked = net.clone()
        for s in structures:
            masked.mask.values.data[s.position] = 0.0
        report.pre_error = ck.meta.get("baseline_error")
        report.masked_error = pr.evaluate(masked, test_images, test_labels)
        report.post_error = pr.evaluate(model.network(False), test_images, test_labels)
    ref = ck.meta.get("reference", _cost_meta(net.spec))
    out_ck = Checkpoint(model.spec, model.weights, "compact",
                        meta={"reference": ref, "lam": lam, "test_error": report.post_error})
    out = Path(cfg.out)
    out_ck.save(out / "compact.ckpt")
    (out / "prune_report.json").write_text(report.to_json())
    print(f"removed {len(structures)} structures; {describe_widths(model.spec)}; "
          f"FLOPs -{report.flops_reduction:.1f}%, params -{report.params_reduction:.1f}%; "
          f"max |dlogit| {report.equivalence_residual:.2e}")
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_path(args.checkpoint, cfg, "compact.ckpt"))
    if ck.mask is not None:
        raise ConfigError("finetune expects a compact checkpoint without a mask; run compact first")
    images, labels = load_mnist_split(cfg.resolved_data_dir(), "train", cfg.train_limit)
    test = _test_data(cfg)
    net = ck.network()
    before = pr.evaluate(net, *test)
    t0 = time.time()
    _, history = pr.finetune(net, images, labels, cfg.finetune, eval_data=test,
                             log=lambda row: log.info("finetune %s", row))
    err = history[-1]["error"] if history else before
    out_ck = Checkpoint.from_network(net, "finetuned", reference=ck.meta.get("reference"), lam=ck.meta.get("lam"),
                                     test_error=err, error_before=before, history=history)
    _record_time(cfg, "finetune", time.time() - t0)
    out_ck.save(Path(cfg.out) / "finetuned.ckpt")
    print(f"error {before:.2f}% -> {err:.2f}% after {cfg.finetune.epochs} epochs")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_path(args.checkpoint, cfg, "finetuned.ckpt"))
    err = pr.evaluate(ck.network(trainable=False), *_test_data(cfg))
    print(f"test error {err:.2f}%")
    return 0


def report_row(ck: Checkpoint, error: float | None) -> str:
    cost = count_cost(ck.spec)
    ref = ck.meta.get("reference") or {"flops": cost.flops, "params": cost.params}
    err = "n/a" if error is None else f"{error:.2f}"
    return (f"{err} {pr.format_millions(cost.flops, ref['flops'])} "
            f"{pr.format_millions(cost.params, ref['params'])} {describe_widths(ck.spec)}")


def cmd_report(args, cfg: RunConfig) -> int:
    ck = Checkpoint.load(_path(args.checkpoint, cfg, "finetuned.ckpt"))
    try:
        error = pr.evaluate(ck.network(trainable=False), *_test_data(cfg))
    except DataError:
        error = ck.meta.get("test_error")
    print("Error% FLOPs(PR) Params(PR) Architecture")
    print(report_row(ck, error))
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "prune": cmd_prune, "compact": cmd_compact,
            "finetune": cmd_finetune, "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="galprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed for every stage (overrides the config)")
        if name in ("compact", "finetune", "eval", "report"):
            p.add_argument("--checkpoint", help="input checkpoint (default: the previous stage's file in --out)")
        if name == "compact":
            p.add_argument("--threshold", type=float, help="prune |m| <= threshold (default 0: exact zeros)")
        if name == "prune":
            p.add_argument("--baseline", help="baseline checkpoint (default: <out>/baseline.ckpt)")
            p.add_argument("--resume", help="continue a GAL checkpoint")
            p.add_argument("--checkpoint-every", type=int, help="iterations between checkpoints (default: an epoch)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = _resolve(args)
        return COMMANDS[args.command](args, cfg)
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ArchitectureError, pr.CompactionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
