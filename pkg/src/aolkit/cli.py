"""Command-line entry point: ``aolkit {train,certify,diagnose,bound,gradcheck}``.

Exit codes: 0 success, 1 usage or input error, 2 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from aolkit.certification import DEFAULT_EPS, certified_robust_accuracy
from aolkit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from aolkit.config import RunConfig
from aolkit.data import DatasetError, DatasetSource, load_dataset
from aolkit.diagnostics import (MAX_JACOBIAN_DIM, audit_model_bound, crops_to_csv,
                                gram_analysis, gram_crops, gradcheck, lipschitz_bound)
from aolkit.layers import SpecError, build_model
from aolkit.training import TrainingDiverged, train

log = logging.getLogger("aolkit")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aolkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, checkpoint=False, config=False):
        if config:
            p.add_argument("--config", help="run config JSON")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint written by 'train'")
        p.add_argument("--dataset", help="dataset source as a JSON file or inline JSON")
        p.add_argument("--out-dir", type=Path)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train a model from a config")
    common(p, config=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--offset-u", type=float)
    p.add_argument("--temperature-t", type=float)
    p.add_argument("--eps", type=float, action="append")

    p = sub.add_parser("certify", help="certified robust accuracy over an eps grid")
    common(p, checkpoint=True, config=True)
    p.add_argument("--eps", type=float, action="append")

    p = sub.add_parser("diagnose", help="J^T J statistics and crops for one layer")
    common(p, checkpoint=True)
    p.add_argument("--layer", type=int, help="layer index (default: middle eligible layer)")
    p.add_argument("--crop", type=int, default=288)

    p = sub.add_parser("bound", help="per-layer spectral norm audit")
    common(p, checkpoint=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p, checkpoint=True, config=True)
    p.add_argument("--coords", type=int, default=50)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _dataset_arg(value: str | None) -> DatasetSource | None:
    if value is None:
        return None
    path = Path(value)
    try:
        if path.exists():
            return DatasetSource.from_dict(json.loads(path.read_text()), path.parent)
        return DatasetSource.from_dict(json.loads(value))
    except (json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"--dataset must be a JSON file or inline JSON object: {exc}") from None


def _load_config(args) -> RunConfig:
    if not getattr(args, "config", None):
        raise UsageError("--config is required")
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "offset_u", None) is not None:
        cfg.train.loss_offset = args.offset_u
    if getattr(args, "temperature_t", None) is not None:
        cfg.train.loss_temperature = args.temperature_t
    if getattr(args, "eps", None):
        cfg.eps = tuple(args.eps)
    ds = _dataset_arg(args.dataset)
    if ds is not None:
        cfg.dataset = ds
    cfg.train.__post_init__()
    return cfg


def _out_dir(args) -> Path | None:
    if args.out_dir is None:
        return None
    args.out_dir.mkdir(parents=True, exist_ok=True)
    return args.out_dir


def _write_metrics(path: Path, history: list) -> None:
    keys = []
    for row in history:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if cfg.dataset is None:
        raise UsageError("no dataset given (config 'dataset' section or --dataset)")
    train_set, test_set = load_dataset(cfg.dataset)
    cfg.train.eval_eps = tuple(cfg.eps)
    model = build_model(cfg.model, cfg.seed)
    out = _out_dir(args) or Path(".")
    extra = {"dataset": cfg.dataset.to_dict(), "eps": list(cfg.eps)}
    try:
        result = train(model, train_set, cfg.train, val_set=test_set)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(out / "last_good.ckpt", exc.last_good, seed=cfg.seed,
                            epoch=exc.epoch, extra=extra)
        print(f"training diverged: {exc}; last good model saved to {out / 'last_good.ckpt'}",
              file=sys.stderr)
        return EXIT_VALIDATION
    _write_metrics(out / "metrics.csv", result.log)
    (out / "config.json").write_text(cfg.to_json())
    save_checkpoint(out / "model.ckpt", result.model, seed=cfg.seed, epoch=cfg.train.epochs,
                    metrics=result.log[-1] if result.log else {}, extra=extra)
    print(json.dumps(result.log[-1] if result.log else {}, sort_keys=True))
    return EXIT_OK


def _load_model(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_certify(args) -> int:
    model, header = _load_model(args)
    source = _dataset_arg(args.dataset)
    eps = args.eps
    if getattr(args, "config", None):
        cfg = RunConfig.from_file(args.config)
        source = source or cfg.dataset
        eps = eps or list(cfg.eps)
    if source is None and "dataset" in header:
        source = DatasetSource.from_dict(header["dataset"])
    if source is None:
        raise UsageError("no dataset: pass --dataset or --config")
    eps = eps or header.get("eps") or None
    _, test_set = load_dataset(source)
    L = lipschitz_bound(model)
    if L != 1.0:
        print(f"warning: model has unrescaled layers; certifying with the estimated bound "
              f"L={L:.6g}", file=sys.stderr)
    report = certified_robust_accuracy(model, test_set, eps or DEFAULT_EPS, L=L)
    text = report.to_json()
    print(text)
    out = _out_dir(args)
    if out:
        (out / "cert.json").write_text(text + "\n")
        (out / "cert.csv").write_text(report.to_csv())
    return EXIT_OK


def _default_layer(model) -> int:
    shapes = model.shapes()
    eligible = [i for i, layer in enumerate(model.layers)
                if layer.has_params and int(np.prod(shapes[i])) <= MAX_JACOBIAN_DIM]
    if not eligible:
        raise UsageError("no parametrised layer small enough for an explicit Jacobian")
    return eligible[len(eligible) // 2]


def cmd_diagnose(args) -> int:
    model, _ = _load_model(args)
    idx = args.layer if args.layer is not None else _default_layer(model)
    if not 0 <= idx < len(model.layers):
        raise UsageError(f"layer index {idx} out of range")
    stats = gram_analysis(model.layers[idx], model.params[idx], model.shapes()[idx])
    summary = {"layer": idx, "kind": model.layers[idx].kind, **stats.summary()}
    print(json.dumps(summary, indent=2))
    out = _out_dir(args)
    if out:
        (out / f"gram_stats_layer{idx}.json").write_text(json.dumps(summary, indent=2) + "\n")
        for name, text in crops_to_csv(gram_crops(stats.gram, args.crop)).items():
            (out / f"gram_layer{idx}_{name}.csv").write_text(text)
    return EXIT_OK


def cmd_bound(args) -> int:
    model, _ = _load_model(args)
    audit = audit_model_bound(model)
    table = audit.to_csv()
    print(table, end="")
    out = _out_dir(args)
    if out:
        (out / "bound_audit.csv").write_text(table)
    if not audit.passed:
        print(f"bound violated on layers {[r.index for r in audit.flagged]}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        u, t = 2 ** 0.5, 0.25
    else:
        cfg = _load_config(args)
        model = build_model(cfg.model, seed)
        u, t = cfg.train.loss_offset, cfg.train.loss_temperature
        # move away from the identity/orthogonal init so every path carries gradient
        rng = np.random.default_rng(seed)
        for p in model.params:
            if p is not None:
                for v in p.values():
                    v += 0.1 * rng.standard_normal(v.shape)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((args.batch,) + model.input_shape)
    n_classes = model.shapes()[-1][-1]
    labels = rng.integers(0, n_classes, args.batch)
    result = gradcheck(model, x, labels, u, t, n_coords=args.coords, h=args.step,
                       tol=args.tol, seed=seed)
    status = "PASS" if result.passed else "FAIL"
    print(json.dumps({"status": status, "max_rel_error": result.max_rel_error,
                      "coords": len(result.coords), "tol": result.tol}))
    return EXIT_OK if result.passed else EXIT_VALIDATION


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "diagnose": cmd_diagnose,
            "bound": cmd_bound, "gradcheck": cmd_gradcheck}


def _thread_limit():
    value = os.environ.get("AOLKIT_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(value))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except (UsageError, SpecError, DatasetError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(f"aolkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
