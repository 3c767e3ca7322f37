"""Command-line entry point: ``icvit <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import ConfigError, FormatError, LoadError, NumericalError

log = logging.getLogger("icvit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def version_string():
    try:
        sha = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(os.path.abspath(__file__)))
        if sha.returncode == 0 and sha.stdout.strip():
            return f"{__version__}-g{sha.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- helpers ------------------------------------------------------------------
def _load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _write_manifest(out, command, cfg, outputs, extra=None, started=None):
    man = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": version_string(),
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    if extra:
        man.update(extra)
    if started is not None:
        man["wall_time_s"] = round(time.time() - started, 3)
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(man, f, indent=2, sort_keys=True)
    return man


def _load_splits(data_dir, names=("train", "val", "test")):
    from .data.formats import load_dataset

    raw_train = load_dataset(os.path.join(data_dir, "train.mcid"))
    stats = (raw_train.mean, raw_train.std)
    out = {}
    for name in names:
        ds = raw_train if name == "train" else load_dataset(os.path.join(data_dir, f"{name}.mcid"))
        out[name] = ds.normalized(*stats)
    return out


def _model_from_checkpoint(path):
    from . import numkernel as nk
    from .data.formats import load_checkpoint
    from .vit import ViTConfig

    tensors, meta = load_checkpoint(path)
    if "model" not in meta:
        raise LoadError(f"{path}: checkpoint metadata has no model config")
    cfg = ViTConfig(**meta["model"])
    params = {k: nk.parameter(v) for k, v in tensors.items() if not k.startswith("dino_head.")}
    if "head.w" not in params:
        raise LoadError(f"{path}: checkpoint has no classifier head; fine-tune it first")
    return cfg, params, meta


def _parse_mask(args, n_channels):
    from .sampling import ChannelMask, parse_index_list

    if args.mask and args.partial:
        raise UsageError("--mask and --partial are mutually exclusive")
    if args.mask:
        bits = args.mask.strip()
        if len(bits) != n_channels or set(bits) - {"0", "1"}:
            raise UsageError(f"--mask must be {n_channels} characters of 0/1")
        mask = ChannelMask(tuple(b == "1" for b in bits))
    elif args.partial:
        try:
            mask = ChannelMask.from_indices(parse_index_list(args.partial), n_channels)
        except ValueError as e:
            raise UsageError(f"--partial: {e}") from None
    else:
        return ChannelMask.full(n_channels)
    if mask.popcount() == 0:
        raise UsageError("mask selects no channels")
    return mask


def _threads(n):
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=int(n))
    except ImportError:
        return None


# -- subcommands --------------------------------------------------------------
def cmd_config_dump(args, cfg):
    text = cfg.dumps()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "config.json"), "w") as f:
            f.write(text + "\n")
    print(text)


def cmd_gen_data(args, cfg):
    from .data.formats import save_dataset
    from .data.synthetic import generate_synthetic

    started = time.time()
    splits = generate_synthetic(cfg.data, cfg.seed)
    outs = []
    for name, ds in splits.items():
        p = os.path.join(args.out, f"{name}.mcid")
        save_dataset(p, ds)
        outs.append(p)
    _write_manifest(args.out, "gen-data", cfg, outs, {"counts": {k: len(v) for k, v in splits.items()}}, started)
    print(f"wrote {', '.join(outs)}")


def cmd_pretrain(args, cfg):
    from . import dino
    from .data.formats import save_checkpoint

    started = time.time()
    if args.strategy:
        cfg.pretrain.strategy = args.strategy
    if args.steps is not None:
        cfg.pretrain.steps = args.steps
    cfg.pretrain.seed = cfg.seed
    data_dir = args.data or cfg.paths.data_dir
    cfg.paths.data_dir = data_dir
    train = _load_splits(data_dir, ("train",))["train"]
    log_path = os.path.join(args.out, "pretrain_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    state = dino.pretrain(train, cfg.model, cfg.pretrain, log_path=log_path)
    tensors = dict(dino.backbone_tensors(state, "teacher"))
    tensors.update({k: v.data for k, v in state.teacher.items() if k.startswith("dino_head.")})
    meta = {"kind": "pretrain", "model": cfg.model.to_dict(), "pretrain": cfg.pretrain.to_dict(),
            "step": state.step, "rng": {"seed": cfg.seed}, "center": state.center.tolist()}
    ck = os.path.join(args.out, "pretrain.ckpt")
    save_checkpoint(ck, tensors, meta)
    last = state.history[-1] if state.history else {}
    _write_manifest(args.out, "pretrain", cfg, [ck, log_path],
                    {"final_loss": last.get("loss"), "final_teacher_entropy": last.get("teacher_entropy")}, started)
    print(f"pretrained {state.step} steps; final loss {last.get('loss', float('nan')):.4f}")


def _train(args, cfg, command, init_path):
    from . import trainer
    from .data.formats import load_checkpoint, save_checkpoint

    started = time.time()
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
        cfg.train.warmup_epochs = min(cfg.train.warmup_epochs, args.epochs)
    if args.strategy:
        cfg.train.strategy = args.strategy
    cfg.train.seed = cfg.seed
    data_dir = args.data or cfg.paths.data_dir
    cfg.paths.data_dir = data_dir
    cfg.paths.init = init_path
    splits = _load_splits(data_dir)
    init = None
    if init_path:
        init, meta = load_checkpoint(init_path)
        if meta.get("model"):
            pre_model = {k: v for k, v in meta["model"].items() if k != "num_classes"}
            mine = {k: v for k, v in cfg.model.to_dict().items() if k != "num_classes"}
            if pre_model != mine:
                raise LoadError(f"{init_path}: backbone config differs from the run config")
    log_path = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    res = trainer.fit(cfg.model, cfg.train, splits["train"], splits["val"], splits["test"], init=init,
                      log_path=log_path)
    meta = {"kind": command, "model": cfg.model.to_dict(), "train": cfg.train.to_dict(), "step": None,
            "best_epoch": res.best_epoch, "best_val_acc": res.best_val_acc, "test_acc": res.test_acc,
            "rng": {"seed": cfg.seed}, "init": init_path}
    ck = os.path.join(args.out, "model.ckpt")
    save_checkpoint(ck, {k: p.data for k, p in res.params.items()}, meta)
    _write_manifest(args.out, command, cfg, [ck, log_path],
                    {"best_epoch": res.best_epoch, "best_val_acc": res.best_val_acc, "test_acc": res.test_acc},
                    started)
    print(f"best epoch {res.best_epoch}: val {res.best_val_acc:.4f} test {res.test_acc:.4f}")


def cmd_finetune(args, cfg):
    if not args.init:
        raise UsageError("finetune requires --init CHECKPOINT (use train-scratch otherwise)")
    _train(args, cfg, "finetune", args.init)


def cmd_train_scratch(args, cfg):
    _train(args, cfg, "train-scratch", None)


def cmd_eval(args, cfg):
    from .trainer import evaluate

    started = time.time()
    mcfg, params, _ = _model_from_checkpoint(args.ckpt)
    data_dir = args.data or cfg.paths.data_dir
    ds = _load_splits(data_dir, (args.split,))[args.split]
    mask = _parse_mask(args, ds.channels)
    acc = evaluate(params, mcfg, ds, mask)
    res = {"split": args.split, "mask": str(mask), "channels": mask.indices(), "accuracy": acc}
    with open(os.path.join(args.out, "eval.json"), "w") as f:
        json.dump(res, f, indent=2, sort_keys=True)
    _write_manifest(args.out, "eval", cfg, [os.path.join(args.out, "eval.json")],
                    {"checkpoint": os.path.abspath(args.ckpt), **res}, started)
    print(f"accuracy {acc:.4f} on {args.split} with channels {mask.indices()}")


def cmd_subset_sweep(args, cfg):
    from .analysis import subset_sweep, write_subset_csv, write_subset_summary_csv

    started = time.time()
    mcfg, params, _ = _model_from_checkpoint(args.ckpt)
    ds = _load_splits(args.data or cfg.paths.data_dir, (args.split,))[args.split]
    rep = subset_sweep(params, mcfg, ds)
    p1, p2 = os.path.join(args.out, "subset_sweep.csv"), os.path.join(args.out, "subset_summary.csv")
    write_subset_csv(rep, p1)
    write_subset_summary_csv(rep, p2)
    _write_manifest(args.out, "subset-sweep", cfg, [p1, p2], {"checkpoint": os.path.abspath(args.ckpt)}, started)
    for r in rep.rows:
        print(f"k={r.k} n={r.n_combinations} mean={r.mean:.4f} std={r.std:.4f}")


def cmd_corr(args, cfg):
    from . import vit
    from .analysis import feature_correlation, token_correlation, write_matrix_csv
    from .data.formats import load_checkpoint

    started = time.time()
    tensors, meta = load_checkpoint(args.ckpt)
    mcfg = vit.ViTConfig(**meta["model"])
    from . import numkernel as nk

    params = {k: nk.parameter(v) for k, v in tensors.items()}
    ds = _load_splits(args.data or cfg.paths.data_dir, (args.split,))[args.split]
    imgs = ds.pixels[: args.n_images]
    outs = []
    for name, fn in (("token", token_correlation), ("feature", feature_correlation)):
        mat = fn(params, mcfg, imgs)
        p = os.path.join(args.out, f"corr_{name}.csv")
        write_matrix_csv(mat, p)
        outs.append(p)
        if mat.degenerate:
            log.warning("%s correlation: zero-variance vectors were scored as 0", name)
    _write_manifest(args.out, "corr", cfg, outs, {"checkpoint": os.path.abspath(args.ckpt)}, started)
    print(f"wrote {', '.join(outs)}")


def cmd_attn(args, cfg):
    from . import numkernel as nk
    from . import vit
    from .analysis import export_attention
    from .data.formats import load_checkpoint

    started = time.time()
    tensors, meta = load_checkpoint(args.ckpt)
    mcfg = vit.ViTConfig(**meta["model"])
    params = {k: nk.parameter(v) for k, v in tensors.items()}
    ds = _load_splits(args.data or cfg.paths.data_dir, (args.split,))[args.split]
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index must be in [0, {len(ds)})")
    paths = export_attention(params, mcfg, ds.pixels[args.index], os.path.join(args.out, f"attn_{args.index}"))
    _write_manifest(args.out, "attn", cfg, paths, {"checkpoint": os.path.abspath(args.ckpt), "index": args.index},
                    started)
    print(f"wrote {len(paths)} files")


def cmd_bench(args, cfg):
    import dataclasses

    from .analysis import benchmark_step, write_bench_csv
    from .data.synthetic import generate_synthetic
    from .sampling import parse_index_list

    started = time.time()
    channels = parse_index_list(args.channels) if args.channels else [1, 3, 5, 8]
    strategies = [args.strategy] if args.strategy else ["isolated", "hcs", "full"]
    ests = []
    for c in channels:
        spec = dataclasses.replace(cfg.data, channels=c, fl_channels=max(1, min(cfg.data.fl_channels, c - 1)),
                                   n_train=max(cfg.pretrain.batch_size * 4, 64), n_val=0, n_test=0)
        if c == 1:
            ds = generate_synthetic(dataclasses.replace(spec, channels=2, fl_channels=1), cfg.seed)["train"]
            ds = ds.select_channels([0]).normalized()
        else:
            ds = generate_synthetic(spec, cfg.seed)["train"].normalized()
        mcfg = dataclasses.replace(cfg.model, max_channels=max(cfg.model.max_channels, c), in_chans=c)
        for s in strategies:
            if mcfg.patchify == "standard" and s != "full":
                continue
            est = benchmark_step(s, mcfg, cfg.pretrain, ds, steps=args.steps, seed=cfg.seed)
            ests.append(est)
            print(f"{s:9s} C={c} L={est.seq_len:g} flops={est.flops_per_forward:.3g} median={est.wall_ms:.1f} ms",
                  flush=True)
    p = os.path.join(args.out, "bench.csv")
    write_bench_csv(ests, p)
    _write_manifest(args.out, "bench", cfg, [p], {"channels": channels, "strategies": strategies}, started)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "train-scratch": cmd_train_scratch,
    "eval": cmd_eval,
    "subset-sweep": cmd_subset_sweep,
    "corr": cmd_corr,
    "attn": cmd_attn,
    "bench": cmd_bench,
    "config-dump": cmd_config_dump,
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--data", metavar="DIR", help="directory holding train/val/test .mcid files")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="icvit", description="Isolated-channel ViT toolkit")
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common])
    sp = sub.add_parser("pretrain", parents=[common])
    sp.add_argument("--strategy", choices=["isolated", "hcs", "full"])
    sp.add_argument("--steps", type=int)
    for name in ("finetune", "train-scratch"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--strategy", choices=["isolated", "hcs", "full"])
        if name == "finetune":
            sp.add_argument("--init", metavar="CKPT")
    for name in ("eval", "subset-sweep", "corr", "attn"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        if name == "eval":
            sp.add_argument("--mask", help="channel bits, e.g. 11111000")
            sp.add_argument("--partial", help="comma-separated channel indices, e.g. 0,1,2,3,4")
        if name == "corr":
            sp.add_argument("--n-images", type=int, default=200)
        if name == "attn":
            sp.add_argument("--index", type=int, default=0)
    sp = sub.add_parser("bench", parents=[common])
    sp.add_argument("--channels", help="comma-separated channel counts (default 1,3,5,8)")
    sp.add_argument("--strategy", choices=["isolated", "hcs", "full"])
    sp.add_argument("--steps", type=int, default=50)
    sub.add_parser("config-dump", parents=[common])
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        logging.getLogger("icvit").setLevel(logging.INFO)
        if args.command != "config-dump" and not args.out:
            raise UsageError("--out DIR is required")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
        cfg = _load_config(args)
        limiter = _threads(args.threads)
        try:
            COMMANDS[args.command](args, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
        return EXIT_OK
    except (UsageError, ConfigError) as e:
        print(f"icvit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"icvit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, LoadError, FileNotFoundError, IsADirectoryError) as e:
        print(f"icvit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"icvit: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
