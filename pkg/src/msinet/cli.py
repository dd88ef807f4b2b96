"""Command-line entry point: ``msinet {train,finetune,predict,eval,ablate,inspect,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .data import generate_synthetic, load_dataset, split_dataset, write_dataset
from .flops import flop_report, format_report
from .imageio import encode_pnm
from .metrics import DEFAULT_EMD_GRID, METRIC_NAMES
from .model import ConfigError, Model, ModelConfig, count_parameters, parameter_subtotals
from .ranking import DEFAULT_RANK_SUBSET, aggregate_by_category, cumulative_rank, evaluate, read_values
from .training import TrainConfig, TrainingError, finetune, predict_distribution, train
from .weights import WeightFileError, atomic_write_bytes, load_weights, save_weights

log = logging.getLogger("msinet")

VARIANTS = ("no-aspp", "no-concat")
CHECKPOINT = "checkpoint.msiw"
MODEL_CFG = "model.cfg"


class UsageError(Exception):
    pass


# --- config handling ---------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_config_file(path, values: dict) -> None:
    text = "".join(f"{k}={v}\n" for k, v in values.items())
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_size(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None


def parse_scale(text: str) -> Fraction:
    try:
        return Fraction(text).limit_denominator(1 << 16)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"invalid scale {text!r}") from None


_CASTS = {
    "size": parse_size, "scale": parse_scale, "epochs": int, "seed": int, "synthetic": int,
    "lr": float, "sigma": float, "repeats": int, "grid": parse_size, "dtype": str,
    "variant": str, "dataset": str, "weights": str, "out": str, "rank_subset": str,
    "encoder_only": lambda v: str(v).lower() in ("1", "true", "yes"),
}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge the config file (and a ``model.cfg`` beside ``--weights``) under explicit flags."""
    file_values: dict[str, str] = {}
    weights = getattr(args, "weights", None)
    if weights and args.config is None:
        sidecar = Path(weights).parent / MODEL_CFG
        if sidecar.exists():
            file_values.update(read_config_file(sidecar))
    if args.config is not None:
        if not Path(args.config).exists():
            raise UsageError(f"--config: file not found: {args.config}")
        file_values.update(read_config_file(args.config))
    for key, raw in file_values.items():
        if key in _CASTS and getattr(args, key, None) is None and hasattr(args, key):
            try:
                setattr(args, key, _CASTS[key](raw))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    return args


def model_config(args, variant: str | None = None) -> ModelConfig:
    variant = variant if variant is not None else getattr(args, "variant", None)
    return ModelConfig(
        channel_scale=args.scale if args.scale is not None else Fraction(1),
        input_size=args.size or (240, 320),
        use_aspp=variant != "no-aspp",
        use_multilevel_concat=variant != "no-concat",
        seed=args.seed or 0,
        dtype=getattr(args, "dtype", None) or "float32",
    )


def model_cfg_values(cfg: ModelConfig, variant: str | None) -> dict:
    return {"scale": str(cfg.channel_scale), "size": f"{cfg.input_size[0]}x{cfg.input_size[1]}",
            "variant": variant or "", "seed": cfg.seed, "dtype": cfg.dtype}


def train_config(args, cfg: ModelConfig) -> TrainConfig:
    lr = args.lr
    if lr is None:
        lr = 1e-6 if cfg.channel_scale == 1 else 1e-3
    return TrainConfig(learning_rate=lr, epochs=args.epochs if args.epochs is not None else 10,
                       seed=args.seed or 0)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MSINET_THREADS", "1")))
    except ValueError:
        return 1


# --- manifests ---------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    input_hash: str
    outputs: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        atomic_write_bytes(path, (json.dumps(asdict(self), indent=2, default=str) + "\n").encode())
        return path


def hash_inputs(paths=(), extra: str = "") -> str:
    h = hashlib.sha256(extra.encode("utf-8"))
    for p in sorted(str(p) for p in paths):
        h.update(p.encode("utf-8"))
        h.update(Path(p).read_bytes())
    return "sha256:" + h.hexdigest()


# --- data ----------------------------------------------------------------------------


def load_samples(args, size: tuple[int, int]):
    """Samples from ``--dataset`` (manifest CSV) or ``--synthetic N``; returns (samples, input paths)."""
    if getattr(args, "synthetic", None):
        return generate_synthetic(args.synthetic, size, seed=args.seed or 0, sigma=args.sigma), []
    if not getattr(args, "dataset", None):
        raise UsageError("--dataset is required (or use --synthetic N)")
    manifest = Path(args.dataset)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    if not manifest.exists():
        raise UsageError(f"--dataset: manifest not found: {args.dataset}")
    samples = load_dataset(manifest, size, args.sigma)
    if not samples:
        raise UsageError(f"--dataset: manifest {manifest} lists no samples")
    return samples, [manifest]


def data_tag(args, size) -> str:
    return f"synthetic={getattr(args, 'synthetic', None)};size={size};seed={args.seed};sigma={args.sigma}"


def require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ------------------------------------------------------------------------


def _train_and_save(args, cfg, variant, samples, out: Path, base_weights=None, encoder_only=False):
    model = Model(cfg)
    tcfg = train_config(args, cfg)
    train_set, val_set = split_dataset(samples, seed=args.seed or 0)
    if base_weights:
        result = finetune(model, base_weights, train_set, val_set, tcfg, encoder_only=encoder_only)
    else:
        result = train(model, train_set, val_set, tcfg)
    save_weights(model, out / CHECKPOINT)
    result.write_log(out / "train_log.csv")
    write_config_file(out / MODEL_CFG, model_cfg_values(cfg, variant))
    return model, result, tcfg, val_set


def cmd_train(args) -> int:
    out = require_out(args)
    t0 = time.perf_counter()
    cfg = model_config(args)
    samples, paths = load_samples(args, cfg.input_size)
    weights = getattr(args, "weights", None)
    if weights and not Path(weights).exists():
        raise UsageError(f"--weights: file not found: {weights}")
    _, result, tcfg, _ = _train_and_save(args, cfg, args.variant, samples, out, weights,
                                         encoder_only=bool(weights))
    outputs = [CHECKPOINT, "train_log.csv", MODEL_CFG]
    RunManifest("train", {"model": cfg.as_dict(), "train": asdict(tcfg)}, cfg.seed,
                hash_inputs(paths + ([weights] if weights else []), data_tag(args, cfg.input_size)),
                outputs, {"total_seconds": time.perf_counter() - t0}).write(out)
    print(f"best epoch {result.best_epoch}: val_kld={result.best_val_kld:.6f}; wrote {out / CHECKPOINT}")
    return 0


def cmd_finetune(args) -> int:
    if not args.weights:
        raise UsageError("--weights is required for finetune")
    if not Path(args.weights).exists():
        raise UsageError(f"--weights: file not found: {args.weights}")
    out = require_out(args)
    t0 = time.perf_counter()
    cfg = model_config(args)
    samples, paths = load_samples(args, cfg.input_size)
    _, result, tcfg, _ = _train_and_save(args, cfg, args.variant, samples, out, args.weights,
                                         encoder_only=bool(args.encoder_only))
    RunManifest("finetune", {"model": cfg.as_dict(), "train": asdict(tcfg),
                             "base_weights": str(args.weights)}, cfg.seed,
                hash_inputs(paths + [args.weights], data_tag(args, cfg.input_size)),
                [CHECKPOINT, "train_log.csv", MODEL_CFG],
                {"total_seconds": time.perf_counter() - t0}).write(out)
    print(f"best epoch {result.best_epoch}: val_kld={result.best_val_kld:.6f}; wrote {out / CHECKPOINT}")
    return 0


def write_prediction(out: Path, name: str, dist: np.ndarray) -> list[str]:
    peak = dist.max()
    scaled = dist / peak if peak > 0 else dist
    atomic_write_bytes(out / f"{name}.pgm", encode_pnm(scaled, maxval=65535))
    atomic_write_bytes(out / f"{name}.f32", np.ascontiguousarray(dist, dtype="<f4").tobytes())
    return [f"{name}.pgm", f"{name}.f32"]


def read_prediction(path, shape) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != shape[0] * shape[1]:
        raise ValueError(f"{path}: {raw.size} values, expected {shape[0]}x{shape[1]}")
    return raw.reshape(shape).astype(np.float64)


def measure_throughput(model: Model, images, repeats: int, min_seconds: float = 0.25) -> dict:
    """Images/second over ``repeats`` timed runs after one warm-up pass.

    Each run loops over the whole image set until at least ``min_seconds`` have
    passed, so short sets are not dominated by timer and scheduler noise.
    """
    for img in images:
        predict_distribution(model, img)
    rates = []
    for _ in range(repeats):
        done, t = 0, time.perf_counter()
        while True:
            for img in images:
                predict_distribution(model, img)
            done += len(images)
            elapsed = time.perf_counter() - t
            if elapsed >= min_seconds:
                break
        rates.append(done / elapsed)
    return {"repeats": repeats, "images": len(images), "mean_fps": float(np.mean(rates)),
            "std_fps": float(np.std(rates)), "per_repeat_fps": rates}


def cmd_predict(args) -> int:
    if not args.weights:
        raise UsageError("--weights is required for predict")
    if not Path(args.weights).exists():
        raise UsageError(f"--weights: file not found: {args.weights}")
    out = require_out(args)
    t0 = time.perf_counter()
    cfg = model_config(args)
    model = Model(cfg, init=False)
    load_weights(model, args.weights)
    samples, paths = load_samples(args, cfg.input_size)
    outputs = []
    for s in samples:
        outputs += write_prediction(out, s.name, predict_distribution(model, s.image))
    timings = {"predict_seconds": time.perf_counter() - t0}
    if args.repeats:
        report = measure_throughput(model, [s.image for s in samples], args.repeats)
        atomic_write_bytes(out / "throughput.json", json.dumps(report, indent=2).encode())
        outputs.append("throughput.json")
        print(f"throughput: {report['mean_fps']:.2f} +- {report['std_fps']:.2f} images/s")
    RunManifest("predict", {"model": cfg.as_dict()}, cfg.seed,
                hash_inputs(paths + [args.weights], data_tag(args, cfg.input_size)),
                outputs, timings).write(out)
    print(f"wrote {len(samples)} predictions to {out}")
    return 0


def rank_subset(args) -> tuple[str, ...]:
    if not args.rank_subset:
        return DEFAULT_RANK_SUBSET
    subset = tuple(s.strip() for s in args.rank_subset.split(",") if s.strip())
    unknown = [s for s in subset if s not in METRIC_NAMES]
    if unknown:
        raise UsageError(f"--rank-subset: unknown metrics {unknown}; choose from {list(METRIC_NAMES)}")
    return subset


def cmd_eval(args) -> int:
    subset = rank_subset(args)
    if not args.values and not args.pred:
        raise UsageError("eval needs --pred DIR with --dataset, or --values FILE")
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    outputs, inputs = [], []
    if args.pred:
        size = args.size
        if size is None:
            raise UsageError("--size is required to evaluate predictions")
        samples, paths = load_samples(args, size)
        inputs += paths
        preds = []
        for s in samples:
            path = Path(args.pred) / f"{s.name}.f32"
            if not path.exists():
                raise UsageError(f"--pred: missing prediction {path}")
            preds.append(read_prediction(path, s.shape))
            inputs.append(path)
        report = evaluate(preds, samples, seed=args.seed or 0, grid=args.grid or DEFAULT_EMD_GRID,
                          workers=worker_count())
        print(report.to_json())
        if out:
            atomic_write_bytes(out / "report.csv", report.to_csv().encode())
            atomic_write_bytes(out / "aggregate.json", report.to_json().encode())
            outputs += ["report.csv", "aggregate.json"]
    if args.values:
        if not Path(args.values).exists():
            raise UsageError(f"--values: file not found: {args.values}")
        table = cumulative_rank(read_values(args.values, args.group), subset)
        inputs.append(args.values)
        print(table.render())
        if out:
            atomic_write_bytes(out / "rank.txt", (table.render() + "\n").encode())
            atomic_write_bytes(out / "rank.csv", table.to_csv().encode())
            outputs += ["rank.txt", "rank.csv"]
    if out:
        RunManifest("eval", {"rank_subset": list(subset), "grid": list(args.grid or DEFAULT_EMD_GRID)},
                    args.seed or 0, hash_inputs(inputs, ""), outputs).write(out)
    return 0


def cmd_ablate(args) -> int:
    if args.variant not in VARIANTS:
        raise UsageError(f"--variant must be one of {list(VARIANTS)}")
    out = require_out(args)
    t0 = time.perf_counter()
    base_cfg = model_config(args, variant="")
    var_cfg = model_config(args, variant=args.variant)
    samples, paths = load_samples(args, base_cfg.input_size)
    reports, counts = {}, {}
    for tag, cfg, variant in (("baseline", base_cfg, None), (args.variant, var_cfg, args.variant)):
        sub = out / tag
        sub.mkdir(exist_ok=True)
        model, _, _, val_set = _train_and_save(args, cfg, variant, samples, sub)
        preds = [predict_distribution(model, s.image) for s in val_set]
        reports[tag] = evaluate(preds, val_set, seed=args.seed or 0,
                                grid=args.grid or DEFAULT_EMD_GRID, workers=worker_count())
        atomic_write_bytes(sub / "report.csv", reports[tag].to_csv().encode())
        counts[tag] = count_parameters(cfg)
    base, var = reports["baseline"], reports[args.variant]
    agg_b, agg_v = base.aggregate(), var.aggregate()
    delta = {m: None if agg_b[m]["mean"] is None or agg_v[m]["mean"] is None
             else agg_b[m]["mean"] - agg_v[m]["mean"] for m in METRIC_NAMES}
    summary = {"parameters": counts, "baseline": agg_b, "variant": agg_v, "delta_baseline_minus_variant": delta}
    atomic_write_bytes(out / "summary.json", json.dumps(summary, indent=2).encode())
    outputs = ["summary.json", "baseline/report.csv", f"{args.variant}/report.csv"]
    if all(c is not None for c in base.categories):
        comp = aggregate_by_category(base, var, rank_subset(args))
        atomic_write_bytes(out / "categories.txt", (comp.render() + "\n").encode())
        outputs.append("categories.txt")
        print(comp.render())
    RunManifest("ablate", {"baseline": base_cfg.as_dict(), "variant": var_cfg.as_dict()},
                base_cfg.seed, hash_inputs(paths, data_tag(args, base_cfg.input_size)), outputs,
                {"total_seconds": time.perf_counter() - t0}).write(out)
    print(f"parameters: baseline {counts['baseline']:,} vs {args.variant} {counts[args.variant]:,}")
    for m in METRIC_NAMES:
        d = delta[m]
        print(f"  {m:<6} baseline-variant = {'NA' if d is None else f'{d:+.4f}'}")
    return 0


def cmd_inspect(args) -> int:
    cfg = model_config(args)
    report = flop_report(cfg)
    text = format_report(report)
    print(text)
    if args.out:
        out = require_out(args)
        payload = {
            "parameters": count_parameters(cfg), "subtotals": parameter_subtotals(cfg),
            "input_size": list(cfg.input_size), "total_macs": report.total_macs,
            "total_flops": report.total_flops, "layers": [asdict(l) for l in report.layers],
        }
        atomic_write_bytes(out / "inspect.json", json.dumps(payload, indent=2).encode())
        RunManifest("inspect", cfg.as_dict(), cfg.seed, hash_inputs((), ""), ["inspect.json"]).write(out)
    return 0


def cmd_synth(args) -> int:
    if not args.synthetic:
        raise UsageError("--synthetic N is required for synth")
    out = require_out(args)
    size = args.size or (48, 64)
    samples = generate_synthetic(args.synthetic, size, seed=args.seed or 0, sigma=args.sigma)
    write_dataset(samples, out)
    RunManifest("synth", {"count": args.synthetic, "size": list(size), "sigma": args.sigma},
                args.seed or 0, hash_inputs((), data_tag(args, size)),
                ["manifest.csv", "images/", "fixations/"]).write(out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msinet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, training=False):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--size", type=parse_size, metavar="RxC")
        p.add_argument("--scale", type=parse_scale, metavar="FLOAT")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--dtype", choices=("float32", "float64"))
        if data:
            p.add_argument("--dataset", metavar="PATH")
            p.add_argument("--synthetic", type=int, metavar="N")
            p.add_argument("--sigma", type=float, help="fixation blur in pixels (default width/32)")
        if training:
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--weights", metavar="PATH")
            p.add_argument("--grid", type=parse_size, metavar="NxN")
            p.add_argument("--rank-subset", metavar="LIST")

    p = sub.add_parser("train", help="train on a dataset manifest or synthetic data")
    common(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    common(p, training=True)
    p.add_argument("--encoder-only", action="store_true", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="write saliency maps for a dataset")
    common(p)
    p.add_argument("--weights", metavar="PATH")
    p.add_argument("--repeats", type=int, help="repeat passes for a throughput report")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions and/or rank a multi-model values file")
    common(p)
    p.add_argument("--pred", metavar="DIR", help="directory of <name>.f32 predictions")
    p.add_argument("--values", metavar="PATH", help="CSV with a model column and metric columns")
    p.add_argument("--group", help="only rank rows whose group column matches")
    p.add_argument("--rank-subset", metavar="LIST")
    p.add_argument("--grid", type=parse_size, metavar="NxN")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train baseline and an ablated variant on shared data")
    common(p, training=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="parameter and FLOP accounting")
    common(p, data=False)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"msinet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (WeightFileError, TrainingError, ValueError, OSError) as exc:
        print(f"msinet {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
