"""Command-line entry point: ``attrnet {train,evaluate,params,heatmap,relationships,synth}``.

Exit codes: 0 success, 1 usage/configuration error, 2 data or checkpoint
error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import __version__
from .data import SyntheticSpec, augment_dataset, load_dataset, save_dataset, synth_generate
from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     DivergenceError)
from .export import export_heatmap, extract_relationships, format_relationships
from .topology import (ArchConfig, AttributeVocab, GroupSpec, attach_aux, build_independent,
                       build_mcnn, count_params, init_params)
from .trainer import Checkpoint, HyperParams, evaluate, train, train_two_stage

log = logging.getLogger("attrnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass
class RunConfig:
    variant: str = "mcnn"
    attribute: Optional[str] = None
    data: Optional[str] = None
    synthetic: Optional[str] = None
    groups: Optional[str] = None
    scale: str = "tiny"
    seed: int = 0
    out: str = "out"
    epochs: int = 22
    aux_epochs: Optional[int] = None
    batch: int = 100
    lr: float = 0.01
    aux_lr: Optional[float] = None
    aux_weight_decay: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_epoch: Optional[int] = 15
    jitter: Optional[int] = None
    threads: Optional[int] = None
    checkpoint: Optional[str] = None
    split: Optional[str] = None
    tau: float = 0.5
    weights: bool = False
    image_format: str = "raw_tensor"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, value):
    kind = _FIELD_TYPES[key]
    if value is None or value == "":
        return None
    if "bool" in kind:
        return str(value).lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return str(value)


def read_keyvalue_file(path):
    """``key = value`` lines with ``#`` comments; repeated keys accumulate."""
    entries = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            entries.append((key.replace("-", "_"), value))
    return entries


def load_run_config(path):
    values = {}
    for key, value in read_keyvalue_file(path):
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}: unknown setting {key!r}")
        values[key] = _convert(key, value)
    return values


def resolve_config(args):
    """Defaults, then the config file, then explicit flags."""
    settings = {f.name: f.default for f in fields(RunConfig)}
    if getattr(args, "command", None) == "params":
        settings["scale"] = "paper"
    if getattr(args, "config", None):
        settings.update(load_run_config(args.config))
    for key in _FIELD_TYPES:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    cfg = RunConfig(**settings)
    cfg.variant = cfg.variant.replace("-", "_")
    return cfg


def load_synthetic_spec(path):
    kwargs, correlations = {}, []
    allowed = {f.name for f in fields(SyntheticSpec)} - {"correlations", "vocab"}
    for key, value in read_keyvalue_file(path):
        if key == "correlation":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) != 3:
                raise ConfigError(f"{path}: correlation needs 'attr_a, attr_b, rho'")
            correlations.append((parts[0], parts[1], float(parts[2])))
        elif key in allowed:
            kwargs[key] = int(value) if key in ("n_train", "n_val", "n_test", "image_size", "seed") else float(value)
        else:
            raise ConfigError(f"{path}: unknown synthetic setting {key!r}")
    return SyntheticSpec(correlations=correlations, **kwargs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load_data(cfg):
    if bool(cfg.data) == bool(cfg.synthetic):
        raise ConfigError("exactly one of --data DIR or --synthetic CFG is required")
    if cfg.synthetic:
        dataset = synth_generate(load_synthetic_spec(cfg.synthetic))
    else:
        if not os.path.isdir(cfg.data):
            raise DataError(f"data directory {cfg.data!r} does not exist")
        dataset = load_dataset(cfg.data)
    if cfg.jitter:
        dataset = augment_dataset(dataset, step=cfg.jitter)
    return dataset


def _groups(cfg):
    return GroupSpec.load(cfg.groups) if cfg.groups else GroupSpec.celeba()


def _hyper(cfg):
    return HyperParams(batch_size=cfg.batch, epochs=cfg.epochs, lr=cfg.lr, momentum=cfg.momentum,
                       weight_decay=cfg.weight_decay, lr_step_epoch=cfg.lr_step_epoch, seed=cfg.seed,
                       aux_epochs=cfg.aux_epochs, aux_lr=cfg.aux_lr,
                       aux_weight_decay=cfg.aux_weight_decay)


def _eval_split(dataset, requested):
    if requested:
        return requested
    for split in ("test", "val", "train"):
        if dataset.indices(split).size:
            return split
    raise DataError("dataset has no records")


def write_loss_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "epoch", "loss"])
        for stage, epoch, loss in rows:
            w.writerow([stage, epoch, repr(float(loss))])


def cmd_train(cfg):
    dataset = _load_data(cfg)
    groups = _groups(cfg)
    arch = ArchConfig.preset(cfg.scale)
    hyper = _hyper(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.variant == "mcnn_aux":
        result = train_two_stage(dataset, hyper, arch, groups, dataset.vocab)
        ckpt = result.checkpoint
        rows = [("mcnn", e + 1, l) for e, l in enumerate(result.stage1.loss_curve)]
        rows += [("aux", e + 1, l) for e, l in enumerate(result.stage2.loss_curve)]
    elif cfg.variant in ("mcnn", "independent"):
        if cfg.variant == "independent":
            if not cfg.attribute:
                raise ConfigError("--variant independent requires --attribute NAME")
            topo = build_independent(dataset.vocab, cfg.attribute, arch, groups)
        else:
            topo = build_mcnn(dataset.vocab, groups, arch)
        result = train(topo, dataset, hyper, stage=cfg.variant)
        ckpt = result.checkpoint
        rows = [(cfg.variant, e + 1, l) for e, l in enumerate(result.loss_curve)]
    else:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    ckpt.save(os.path.join(cfg.out, "checkpoint.mtck"))
    write_loss_csv(os.path.join(cfg.out, "loss.csv"), rows)
    report = evaluate(ckpt, dataset, _eval_split(dataset, cfg.split))
    report.write_csv(os.path.join(cfg.out, "metrics.csv"))
    print(f"mean accuracy {report.mean_accuracy:.4f}; wrote {cfg.out}")
    return EXIT_OK


def cmd_evaluate(cfg):
    ckpt = _load_checkpoint(cfg)
    dataset = _load_data(cfg)
    report = evaluate(ckpt, dataset, _eval_split(dataset, cfg.split))
    os.makedirs(cfg.out, exist_ok=True)
    report.write_csv(os.path.join(cfg.out, "metrics.csv"))
    for name, acc, base in zip(report.attributes, report.per_attribute_accuracy, report.baseline_accuracy):
        print(f"{name:24s} {100 * acc:6.2f}  baseline {100 * base:6.2f}")
    print(f"{'mean':24s} {100 * report.mean_accuracy:6.2f}")
    return EXIT_OK


def param_report(arch, vocab=None, groups=None, attribute="Smiling"):
    vocab = vocab or AttributeVocab.celeba()
    groups = groups or GroupSpec.celeba()
    mcnn = build_mcnn(vocab, groups, arch)
    aux, _ = attach_aux(mcnn)
    indep = build_independent(vocab, attribute, arch, groups)
    n_ind, per_ind = count_params(indep)
    n_mcnn, per_mcnn = count_params(mcnn)
    n_aux, _ = count_params(aux)
    lines = ["independent CNN (one attribute):"]
    lines += [f"  {k:24s} {v:>12,d}" for k, v in per_ind.items()]
    lines.append(f"  {'total':24s} {n_ind:>12,d}")
    lines.append(f"  {'x40 attributes':24s} {40 * n_ind:>12,d}")
    lines.append("MCNN:")
    lines += [f"  {k:24s} {v:>12,d}" for k, v in per_mcnn.items()]
    lines.append(f"  {'total':24s} {n_mcnn:>12,d}")
    lines.append(f"MCNN-AUX total {n_aux:,d} (AUX adds {n_aux - n_mcnn:,d})")
    lines.append(f"ratio (40 x independent) / MCNN = {40 * n_ind / n_mcnn:.4f}")
    return "\n".join(lines) + "\n", {"independent": n_ind, "mcnn": n_mcnn, "mcnn_aux": n_aux}


def cmd_params(cfg):
    text, _ = param_report(ArchConfig.preset(cfg.scale), groups=_groups(cfg))
    sys.stdout.write(text)
    return EXIT_OK


def _load_checkpoint(cfg):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint PATH is required")
    if not os.path.exists(cfg.checkpoint):
        raise DataError(f"checkpoint {cfg.checkpoint!r} does not exist")
    return Checkpoint.load(cfg.checkpoint)


def cmd_heatmap(cfg):
    ckpt = _load_checkpoint(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    export_heatmap(ckpt, os.path.join(cfg.out, "heatmap"))
    print(f"wrote {os.path.join(cfg.out, 'heatmap')}.{{csv,pgm}}")
    return EXIT_OK


def cmd_relationships(cfg):
    ckpt = _load_checkpoint(cfg)
    text = format_relationships(extract_relationships(ckpt, cfg.tau), with_weights=cfg.weights)
    sys.stdout.write(text)
    if cfg.out and cfg.out != "out":
        os.makedirs(os.path.dirname(os.path.abspath(cfg.out)), exist_ok=True)
        with open(cfg.out, "w") as fh:
            fh.write(text)
    return EXIT_OK


def cmd_synth(cfg):
    if not cfg.synthetic:
        raise ConfigError("--synthetic CFG is required")
    dataset = synth_generate(load_synthetic_spec(cfg.synthetic))
    save_dataset(dataset, cfg.out, cfg.image_format)
    print(f"wrote {len(dataset)} records to {cfg.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "params": cmd_params,
    "heatmap": cmd_heatmap,
    "relationships": cmd_relationships,
    "synth": cmd_synth,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="attrnet", description="Multi-task CNN facial attribute classifier")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value settings file; flags override it")
        sp.add_argument("--out", help="output directory (relationships: output file)")
        sp.add_argument("--threads", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")

    def data_args(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--data", metavar="DIR")
        g.add_argument("--synthetic", metavar="CFG")
        sp.add_argument("--jitter", type=int, metavar="STEP", help="jitter-augment the train split")
        sp.add_argument("--split", choices=("train", "val", "test"))

    tr = sub.add_parser("train", help="train independent / mcnn / mcnn-aux")
    common(tr)
    data_args(tr)
    tr.add_argument("--variant", choices=("independent", "mcnn", "mcnn-aux"))
    tr.add_argument("--attribute", metavar="NAME")
    tr.add_argument("--groups", metavar="FILE")
    tr.add_argument("--scale", choices=("paper", "tiny"))
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--aux-epochs", dest="aux_epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--aux-lr", dest="aux_lr", type=float)
    tr.add_argument("--aux-weight-decay", dest="aux_weight_decay", type=float)
    tr.add_argument("--momentum", type=float)
    tr.add_argument("--weight-decay", dest="weight_decay", type=float)
    tr.add_argument("--lr-step-epoch", dest="lr_step_epoch", type=int)

    ev = sub.add_parser("evaluate", help="per-attribute accuracy of a checkpoint")
    common(ev)
    data_args(ev)
    ev.add_argument("--checkpoint", required=True)

    pa = sub.add_parser("params", help="parameter-count report")
    common(pa)
    pa.add_argument("--scale", choices=("paper", "tiny"))
    pa.add_argument("--groups", metavar="FILE")

    hm = sub.add_parser("heatmap", help="export AUX weights as CSV and PGM")
    common(hm)
    hm.add_argument("--checkpoint", required=True)

    rl = sub.add_parser("relationships", help="positive/negative influence table from AUX weights")
    common(rl)
    rl.add_argument("--checkpoint", required=True)
    rl.add_argument("--tau", type=float)
    rl.add_argument("--weights", action="store_true", default=None)

    sy = sub.add_parser("synth", help="write a synthetic dataset to disk")
    common(sy)
    sy.add_argument("--synthetic", metavar="CFG", required=True)
    sy.add_argument("--image-format", dest="image_format", choices=("raw_tensor", "ppm"))
    return p


def _thread_limit(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(cfg.threads):
            return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
