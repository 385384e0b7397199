"""``latent-soc`` command line entry point.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, digest, load, pretrain_configs, synth_config
from .data_io import SeriesFormatError, read_dataset, robust_scale, write_dataset
from .downstream import FinetuneHyper, finetune, finetune_predict, metrics, split, zscore
from .experiments import ablation, judge, probe_all, write_ablation
from .grad_core import ContractViolation
from .networks import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, reconstruction_mse, train
from .scan import default_workers

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
BENCH_HEADER = "k,d,sequential_ns,scan_ns,workers,max_abs_diff"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    seed: int | None
    inputs: dict[str, str]
    wall_clock: float = 0.0
    summary: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _file_version(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from None


def _args_hash(args: argparse.Namespace) -> str:
    items = {k: str(v) for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    cfg = getattr(args, "config", None)
    if cfg:
        items["config_sha"] = digest(cfg)
    return hashlib.sha256(json.dumps(items, sort_keys=True).encode()).hexdigest()[:16]


def _dataset(path):
    try:
        return read_dataset(path)
    except SeriesFormatError as exc:
        raise DataError(str(exc)) from None


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (CheckpointFormatError, OSError) as exc:
        raise DataError(str(exc)) from None


def _config(path):
    try:
        return load(path) if path else {}
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _scaled(ckpt: Checkpoint, data):
    medians, iqrs = np.asarray(ckpt.metadata["medians"]), np.asarray(ckpt.metadata["iqrs"])
    if medians.size != data.values.shape[-1]:
        raise DataError(f"checkpoint expects {medians.size} channels, data has {data.values.shape[-1]}")
    return data.timestamps * data.time_scale, robust_scale(data.values, medians, iqrs), medians, iqrs


# subcommands ---------------------------------------------------------------

def cmd_gen(args, manifest: RunManifest):
    from .data_io import generate

    try:
        cfg, seed = synth_config(_config(args.config))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    seed = args.seed if args.seed is not None else seed
    data = generate(cfg, np.random.default_rng(seed))
    args.out.mkdir(parents=True, exist_ok=True)
    write_dataset(args.out / "data.lsds", data)
    np.save(args.out / "latents.npy", data.latents)
    manifest.seed = seed
    manifest.summary = {"series": len(data), "path": str(args.out / "data.lsds")}
    print(f"wrote {len(data)} series to {args.out / 'data.lsds'}")


def _pretrain_cfg(args):
    try:
        cfg, model_cfg = pretrain_configs(_config(args.config))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, model_cfg


def cmd_pretrain(args, manifest: RunManifest):
    cfg, model_cfg = _pretrain_cfg(args)
    data = _dataset(args.data)
    manifest.inputs["data"] = _file_version(args.data)
    manifest.seed = cfg.seed
    if data.values.shape[-1] != model_cfg.n:
        raise UsageError(f"config n={model_cfg.n} but data has {data.values.shape[-1]} channels")
    log = (lambda row: print(json.dumps({k: round(float(v), 6) for k, v in row.items()}), flush=True))
    res = train(data, cfg, model_cfg, out_dir=args.out, log=None if args.quiet else log)
    last = res.metrics[-1]
    manifest.summary = {"epochs": cfg.epochs, "final_total": last["total"], "final_val_mse": last["val_mse"]}


def cmd_probe(args, manifest: RunManifest):
    ckpt = _checkpoint(args.checkpoint)
    data = _dataset(args.data)
    manifest.inputs.update(checkpoint=_file_version(args.checkpoint), data=_file_version(args.data))
    manifest.seed = args.seed
    _, _, medians, iqrs = _scaled(ckpt, data)
    label = args.label or ("regime" if args.task == "cls" else "target")
    try:
        result = probe_all(ckpt.build(), data, medians, iqrs, args.seed, tasks=((args.task, label),))
    except (ContractViolation, SeriesFormatError) as exc:
        raise DataError(str(exc)) from None
    record = {"task": args.task, "label": label, "seed": args.seed, **result}
    _append_jsonl(args.out / "probe.jsonl", record)
    manifest.summary = record
    print(json.dumps(record))


def cmd_finetune(args, manifest: RunManifest):
    ckpt = _checkpoint(args.checkpoint)
    data = _dataset(args.data)
    manifest.inputs.update(checkpoint=_file_version(args.checkpoint), data=_file_version(args.data))
    manifest.seed = args.seed
    times, values, _, _ = _scaled(ckpt, data)
    label = args.label or ("regime" if args.task == "cls" else "target")
    try:
        y = data.label(label)
        tr, va, te = split(y, args.task, args.seed)
    except (ContractViolation, SeriesFormatError) as exc:
        raise DataError(str(exc)) from None
    ytr, yva, yte = zscore(y[tr], y[va], y[te]) if args.task == "reg" else (y[tr], y[va], y[te])
    hyper = FinetuneHyper(lr=args.lr, batch=args.batch, epochs=args.epochs, layer_decay=args.layer_decay,
                          weight_decay=args.weight_decay, seed=args.seed)
    model, probe = finetune(ckpt.build(), times[tr], values[tr], ytr, args.task, hyper)
    record = {"task": args.task, "label": label, "seed": args.seed,
              "val": metrics(finetune_predict(model, probe, times[va], values[va]), yva, args.task),
              "test": metrics(finetune_predict(model, probe, times[te], values[te]), yte, args.task)}
    save_checkpoint(args.out / "finetuned.bin", Checkpoint.from_model(model, **ckpt.metadata, finetuned=True))
    _append_jsonl(args.out / "finetune.jsonl", record)
    manifest.summary = record
    print(json.dumps(record))


def cmd_eval(args, manifest: RunManifest):
    ckpt = _checkpoint(args.checkpoint)
    data = _dataset(args.data)
    manifest.inputs.update(checkpoint=_file_version(args.checkpoint), data=_file_version(args.data))
    manifest.seed = args.seed
    times, values, _, _ = _scaled(ckpt, data)
    meta = ckpt.metadata
    cfg = PretrainConfig(epochs=1, warmup=0, gamma=meta.get("gamma", 0.75), T=int(meta.get("T", 160)))
    model_mse, base_mse = reconstruction_mse(ckpt.build(), times, values, cfg, seed=args.seed)
    record = {"recon_mse": model_mse, "mean_imputation_mse": base_mse, "beats_baseline": model_mse < base_mse}
    manifest.summary = record
    (args.out / "eval.json").write_text(json.dumps(record, indent=2) + "\n")
    print(json.dumps(record))


def cmd_bench_scan(args, manifest: RunManifest):
    from .verification import bench_scan

    workers = args.workers or default_workers()
    row = bench_scan(args.k, args.d, workers, args.repeats, args.seed)
    line = f"{row.k},{row.d},{row.sequential_ns},{row.scan_ns},{row.workers},{row.max_abs_diff:.3e}"
    (args.out / "bench_scan.csv").write_text(BENCH_HEADER + "\n" + line + "\n")
    print(BENCH_HEADER)
    print(line)
    print(f"speedup {row.speedup:.2f}x", file=sys.stderr)
    manifest.seed = args.seed
    manifest.summary = {"speedup": row.speedup, "max_abs_diff": row.max_abs_diff, "workers": workers}


def cmd_verify(args, manifest: RunManifest):
    from .verification import quick_suite

    checks = quick_suite()
    for c in checks:
        print(c.line(), flush=True)
    manifest.summary = {c.name: c.passed for c in checks}
    if not all(c.passed for c in checks):
        return EXIT_VERIFY
    return EXIT_OK


def cmd_ablate(args, manifest: RunManifest):
    cfg, model_cfg = _pretrain_cfg(args)
    data = _dataset(args.data)
    manifest.inputs["data"] = _file_version(args.data)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    progress = None if args.quiet else (lambda r: print(json.dumps(r), flush=True))
    rows = ablation(data, cfg, model_cfg, seeds=seeds, progress=progress)
    write_ablation(rows, args.out / "ablation.csv", args.out / "ablation.png")
    verdict = judge(rows)
    manifest.summary = {**asdict(verdict), "passed": verdict.passed}
    print(json.dumps(manifest.summary))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latent-soc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, out_default=None):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", type=Path, default=Path(out_default or f"runs/{name}"))
        sp.set_defaults(func=func)
        return sp

    g = add("gen", cmd_gen, "generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)

    t = add("pretrain", cmd_pretrain, "masked pre-training")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--quiet", action="store_true")

    for name, func, text in (("probe", cmd_probe, "linear probe on frozen features"),
                             ("finetune", cmd_finetune, "fine-tune encoder and head")):
        s = add(name, func, text)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--task", choices=("cls", "reg"), required=True)
        s.add_argument("--seed", type=int, choices=(0, 1, 2), default=0)
        s.add_argument("--label")
        if name == "finetune":
            s.add_argument("--lr", type=float, default=1e-3)
            s.add_argument("--batch", type=int, default=16)
            s.add_argument("--epochs", type=int, default=50)
            s.add_argument("--layer-decay", type=float, default=0.9)
            s.add_argument("--weight-decay", type=float, default=0.0)

    e = add("eval", cmd_eval, "masked reconstruction vs mean imputation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, default=0)

    b = add("bench-scan", cmd_bench_scan, "time the prefix scan against the sequential recurrence")
    b.add_argument("--k", type=int, default=8192)
    b.add_argument("--d", type=int, default=8)
    b.add_argument("--workers", type=int)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)

    add("verify", cmd_verify, "run the oracle suites")

    a = add("ablate", cmd_ablate, "sweep mask ratio and regulariser weight")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = RunManifest(args.command, _args_hash(args), getattr(args, "seed", None), {})
    start = time.perf_counter()
    code = EXIT_OK
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        code = args.func(args, manifest) or EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except (DataError, ContractViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    manifest.wall_clock = round(time.perf_counter() - start, 3)
    manifest.summary.setdefault("exit_code", code)
    manifest.write(args.out)
    return code


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
