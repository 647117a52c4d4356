"""Command-line entry points: train / adapt / eval / inspect / gen-data.

One flag per RunConfig key, so ``--help`` doubles as the configuration
reference. A ``--config FILE`` may supply any subset of keys; flags given
on the command line win. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as cf
from . import datakit as dk
from . import evalkit as ev
from . import gradcheck
from .adaptation import adapt as run_adapt
from .errors import DataError, NumericError, ShapeError, UsageError
from .model import Model
from .trainer import train as run_train

COMMANDS = ("train", "adapt", "eval", "inspect-attention", "gen-data",
            "grad-check")


class _Parser(argparse.ArgumentParser):
    def error(self, message):                 # argparse would sys.exit(2)
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="vtm", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="FILE", default=None,
                   help="key = value file supplying any of the keys below")
    for key, spec in cf.KEYS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                       metavar="V", help=f"{spec.help} (default: "
                                         f"{spec.default or 'none'})")
    return p


def _require(rc: cf.RunConfig, command: str, *keys: str) -> None:
    missing = [k for k in keys if not getattr(rc, k)]
    if missing:
        raise UsageError(f"{command} requires --" +
                         ", --".join(k.replace("_", "-") for k in missing))


def _task_specs(ds: dk.Dataset, task: str):
    """All channel specs named by a 'task' or 'task:channel' key."""
    specs = [s for s in ds.channel_specs()
             if s.key == task or s.task == task]
    if not specs:
        raise DataError(f"task {task!r} not in dataset")
    return specs


def _support_arrays(ds: dk.Dataset, spec, n: int):
    if n < 1 or n > len(ds.ids):
        raise UsageError(f"support size {n} outside 1..{len(ds.ids)}")
    ids = ds.ids[:n]
    images = np.stack([ds.image(i) for i in ids])
    labels = np.stack([ds.label(spec.task, spec.channel, i) for i in ids])
    return ids, images, labels


# ------------------------------------------------------------------ commands


def _cmd_gen_data(rc: cf.RunConfig) -> int:
    _require(rc, "gen-data", "out")
    ds = dk.gen_synthetic(dk.default_families(), seed=rc.seed, count=rc.count)
    dk.save_dataset(ds, Path(rc.out))
    print(f"wrote {len(ds.ids)} images, "
          f"{len(ds.channel_specs())} channels to {rc.out}")
    return 0


def _cmd_train(rc: cf.RunConfig) -> int:
    _require(rc, "train", "data", "out")
    ds = dk.load_dataset(Path(rc.data))
    model = Model.build(matching_mode=rc.matching, seed=rc.seed)
    cfg = rc.train_config()

    def save_now(m, step):
        ck.save(rc.out, m, rc.raw)

    run_train(model, ds, cfg, log=print,
              checkpoint_fn=save_now if rc.checkpoint_every else None,
              checkpoint_every=rc.checkpoint_every)
    ck.save(rc.out, model, rc.raw)
    print(f"saved checkpoint {rc.out}")
    return 0


def _cmd_adapt(rc: cf.RunConfig) -> int:
    _require(rc, "adapt", "checkpoint", "data", "task")
    model, snapshot = ck.load_model(rc.checkpoint)
    ds = dk.load_dataset(Path(rc.data))
    acfg = rc.adapt_config()
    for spec in _task_specs(ds, rc.task):
        ids, images, labels = _support_arrays(ds, spec, rc.support)
        history = run_adapt(model, images, labels, spec, acfg)
        print(f"adapted {spec.key} on {len(ids)} supports: "
              f"loss {history[0]:.6f} -> {history[-1]:.6f}")
    out = rc.out or rc.checkpoint
    ck.save(out, model, snapshot)
    print(f"saved checkpoint {out}")
    return 0


def _cmd_eval(rc: cf.RunConfig) -> int:
    _require(rc, "eval", "checkpoint", "data")
    model, _ = ck.load_model(rc.checkpoint)
    ds = dk.load_dataset(Path(rc.data))
    specs = ds.channel_specs(rc.fold)
    if not specs:
        raise DataError(f"no channels in fold {rc.fold!r}")
    if rc.support >= len(ds.ids):
        raise UsageError(f"support {rc.support} leaves no query images")
    sup_ids, qry_ids = ds.ids[:rc.support], ds.ids[rc.support:]
    report = ev.MetricReport()
    for spec in specs:
        report.add(ev.eval_channel(model, ds, spec, sup_ids, qry_ids,
                                   crop=rc.eval_crop or None))
    print(report.format())
    return 0


def _cmd_inspect(rc: cf.RunConfig) -> int:
    _require(rc, "inspect-attention", "checkpoint", "data", "task", "out")
    model, _ = ck.load_model(rc.checkpoint)
    ds = dk.load_dataset(Path(rc.data))
    specs = _task_specs(ds, rc.task)
    spec = specs[0]
    _, images, _ = _support_arrays(ds, spec, rc.support)
    image_id = rc.image or ds.ids[0]
    query = ds.image(image_id)
    attn = model.attention_maps(query, images, spec.key, rc.level, rc.head)
    grid = query.shape[-1] // model.enc_cfg.patch
    tile = ev.attention_grid(attn, (grid, grid), len(images))
    ev.write_pgm(Path(rc.out), tile)
    print(f"wrote attention grid for {spec.key} level {rc.level} "
          f"head {rc.head} to {rc.out}")
    return 0


def _cmd_grad_check(rc: cf.RunConfig) -> int:
    report = gradcheck.toy_suite(seed=rc.seed)
    print(report.format())
    if not report.passed:
        raise NumericError("gradient check failed")
    return 0


_DISPATCH = {
    "train": _cmd_train,
    "adapt": _cmd_adapt,
    "eval": _cmd_eval,
    "inspect-attention": _cmd_inspect,
    "gen-data": _cmd_gen_data,
    "grad-check": _cmd_grad_check,
}


def run(argv: list[str]) -> int:
    """Execute one CLI command; returns the process exit code."""
    parser = _build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
        except SystemExit as e:              # --help prints and exits 0
            return 0 if e.code in (0, None) else 1
        flags = {k: getattr(ns, k) for k in cf.KEYS if getattr(ns, k)
                 is not None}
        file_cfg = cf.parse_config_file(ns.config) if ns.config else {}
        rc = cf.RunConfig(file_cfg, flags)
        return _DISPATCH[ns.command](rc)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ShapeError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
