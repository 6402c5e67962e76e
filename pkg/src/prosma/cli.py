"""``prosma`` command-line interface.

Exit codes: 0 success, 1 contract / parse / format error, 2 verification
failure (a gradient check, property check or ablation verdict that fails).
Every subcommand prints its resolved configuration as one ``config {...}``
JSON line before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import ABLATION_VARIANTS, run_ablation
from .checks import SCOPES, run_scope
from .data import CLUTTER_LEVELS, Dataset, SynthConfig, generate, read_pgm, write_pgm
from .errors import ProsmaError, ShapeError
from .gate import VARIANTS, soft_threshold
from .model import ModelConfig, forward
from .tensor import Tensor, no_grad, sigmoid
from .theorem import SABOTAGE_MODES, run_suite
from .train import (TrainConfig, evaluate, load_checkpoint, save_checkpoint, train, train_config_dict,
                    write_json)

EXIT_OK, EXIT_CONTRACT, EXIT_VERIFY = 0, 1, 2


class UsageError(ProsmaError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; 2 is reserved for verification failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _print_config(command: str, **resolved) -> None:
    print("config " + json.dumps({"command": command, **resolved}, sort_keys=True, default=str))


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_variants(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    return out


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(a) -> int:
    cfg = SynthConfig(size=a.size, count=a.count, seed=a.seed, clutter_level=a.clutter, noise_sigma=a.noise,
                      train_fraction=a.train_fraction, val_fraction=a.val_fraction)
    cfg.validate()
    _print_config("gen-data", out=a.out, **vars(cfg))
    ds = generate(cfg)
    ds.save(a.out)
    print(" ".join(f"{k}={len(v)}" for k, v in ds.splits.items()) + f" -> {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    model_cfg = ModelConfig(base_channels=a.base_channels, gate_variant=a.variant)
    train_cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, seed=a.seed)
    train_cfg.validate()
    _print_config("train", data=a.data, out=a.out, model=model_cfg.to_dict(), train=train_config_dict(train_cfg))
    ds = Dataset.load(a.data)

    def progress(epoch, loss, report):
        val = f" val_f1={report.mean_f1:.4f}" if report else ""
        print(f"epoch {epoch + 1}/{train_cfg.epochs} loss={loss:.5f}{val}", flush=True)

    result = train(model_cfg, ds, train_cfg, on_epoch=progress)
    save_checkpoint(a.out, result.params)
    if a.history:
        write_json(a.history, result.history_json())
    print(f"best epoch {result.best_epoch + 1} -> {a.out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    _print_config("eval", ckpt=a.ckpt, data=a.data, split=a.split, threshold=a.threshold, out=a.out)
    params = load_checkpoint(a.ckpt)
    report = evaluate(params, Dataset.load(a.data), a.split, a.threshold)
    payload = report.to_json()
    if a.out:
        write_json(a.out, payload)
    print(f"mean_iou={report.mean_iou:.4f} mean_f1={report.mean_f1:.4f} images={len(report.per_image)}")
    return EXIT_OK


def cmd_ablate(a) -> int:
    model_cfg = ModelConfig(base_channels=a.base_channels)
    train_cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr)
    train_cfg.validate()
    seeds = list(range(a.seed_offset, a.seed_offset + a.seeds))
    _print_config("ablate", data=a.data, out=a.out, seeds=seeds, variants=a.variants, workers=a.workers,
                  model=model_cfg.to_dict(), train=train_config_dict(train_cfg))
    ds = Dataset.load(a.data)
    start = time.perf_counter()

    def progress(r):
        print(f"{r.variant:<8} seed={r.seed} test_f1={r.test_f1:.4f} best_epoch={r.best_epoch + 1} "
              f"({r.seconds:.0f}s)", flush=True)

    report = run_ablation(ds, model_cfg, train_cfg, seeds, a.variants, a.workers, progress)
    payload = report.to_json()
    payload["seconds"] = round(time.perf_counter() - start, 1)
    write_json(a.out, payload)
    print(report.table())
    if "full" in a.variants and "plain" in a.variants:
        print(report.verdict())
        return EXIT_OK if report.passed else EXIT_VERIFY
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    scopes = SCOPES if a.scope == "all" else (a.scope,)
    _print_config("gradcheck", scope=a.scope, seed=a.seed)
    ok = True
    for scope in scopes:
        start = time.perf_counter()
        results, tol = run_scope(scope, a.seed)
        for r in results:
            good = r.passed(tol)
            ok &= good
            print(f"{'PASS' if good else 'FAIL'} {scope:<5} {r.name:<24} max_rel_err={r.max_rel_err:.3e} "
                  f"tol={tol:g} checked={r.checked} skipped={r.skipped}")
        print(f"scope {scope}: {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_theorem_check(a) -> int:
    _print_config("theorem-check", trials=a.trials, seed=a.seed, out=a.out)
    report = run_suite(a.trials, a.seed, a.sabotage)
    for name, r in report.results.items():
        line = f"{'PASS' if r.passed else 'FAIL'} {name:<16} trials={r.trials} violations={r.violations}"
        print(line + (f" first: {r.example}" if r.example else ""))
    print(f"{report.seconds:.1f}s")
    if a.out:
        write_json(a.out, report.to_json())
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_prox_demo(a) -> int:
    _print_config("prox-demo", lam=a.lam, values=a.values)
    if a.lam < 0:
        raise UsageError(f"--lambda must be non-negative, got {a.lam}")
    u = Tensor(np.asarray(a.values, dtype=np.float64).reshape(-1, 1))
    with no_grad():
        z = soft_threshold(u, Tensor(np.array([a.lam]))).data.reshape(-1)
    print(", ".join(f"{v:g}" for v in z))
    return EXIT_OK


def cmd_inspect_gate(a) -> int:
    _print_config("inspect-gate", ckpt=a.ckpt, image=a.image, out=a.out)
    params = load_checkpoint(a.ckpt)
    cfg = params.config
    image = read_pgm(a.image)
    if image.shape[0] % cfg.divisor or image.shape[1] % cfg.divisor:
        raise ShapeError(f"image {image.shape[1]}x{image.shape[0]} is not divisible by {cfg.divisor} "
                         f"as the checkpoint's {cfg.levels}-level model requires")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        logits, traces = forward(params, Tensor(image[None, None]))
        prob = sigmoid(logits).data[0, 0]
    write_pgm(out / "pred_mask.pgm", (prob > 0.5).astype(np.float64))

    summary = {"variant": cfg.gate_variant, "stages": []}
    print(f"variant {cfg.gate_variant}")
    for s, tr in zip(range(cfg.levels - 1, 0, -1), traces):
        stage = {"stage": s}
        if tr.psi_mask is not None:
            psi = tr.psi_mask.data[0, 0]
            write_pgm(out / f"psi_stage{s}.pgm", psi)
            stage["psi_min"], stage["psi_max"] = float(psi.min()), float(psi.max())
        if tr.lam is not None:
            stage["lambda"] = tr.lam.data.tolist()
            stage["zero_fraction"] = tr.zero_fraction_per_channel.tolist()
        if tr.channel_gate is not None:
            stage["channel_gate"] = tr.channel_gate.data[0].tolist()
        summary["stages"].append(stage)
        parts = [f"stage {s}"]
        if "psi_min" in stage:
            parts.append(f"psi[min={stage['psi_min']:.4f} max={stage['psi_max']:.4f}] -> 0..255")
        if "lambda" in stage:
            lam, zf = np.array(stage["lambda"]), np.array(stage["zero_fraction"])
            parts.append(f"lambda[mean={lam.mean():.4f} min={lam.min():.4f} max={lam.max():.4f}]")
            parts.append(f"zero_fraction[mean={zf.mean():.4f} max={zf.max():.4f}]")
        if "channel_gate" in stage:
            c = np.array(stage["channel_gate"])
            parts.append(f"c[mean={c.mean():.4f} min={c.min():.4f} max={c.max():.4f}]")
        print("  ".join(parts))
    write_json(out / "gate_summary.json", summary)
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prosma", description="Proximal-sparse skip gating for U-Net segmentation.")
    parser.add_argument("--version", action="version", version=f"prosma {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic cluttered corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clutter", choices=CLUTTER_LEVELS, default="high")
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--train-fraction", type=float, default=0.70)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="optional JSON path for the loss / val-F1 curves")
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train gate variants over seeds and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--seed-offset", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--variants", type=_csv_variants, default=list(ABLATION_VARIANTS))
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("theorem-check", help="randomised soft-threshold property checks")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--sabotage", choices=SABOTAGE_MODES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_theorem_check)

    p = sub.add_parser("prox-demo", help="soft-threshold a list of values")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--values", type=_csv_floats, required=True)
    p.set_defaults(func=cmd_prox_demo)

    p = sub.add_parser("inspect-gate", help="dump gate masks, thresholds and sparsity for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_gate)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ProsmaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
