"""Command-line entry points: phantom, train, predict, eval, compare, check, ablation.

Exit codes: 0 ok, 2 config, 3 numeric, 4 checkpoint, 5 missing input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from .network import CheckpointError, NetworkConfig, SegNet, ShapeError, get_parameters, load_checkpoint, \
    network_config_dict, save_checkpoint, set_parameters
from .ssl import NonFiniteLossError, TrainingConfig, config_dict, predict_sequence, train, write_trace_csv

log = logging.getLogger("valveseg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_MISSING = 0, 2, 3, 4, 5
MANIFEST = "run_manifest.txt"


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- config files


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise CLIError(EXIT_MISSING, f"{path}: config file not found")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(EXIT_CONFIG, f"{path}:{n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def write_manifest(path, command: str, resolved: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# valveseg {command}", f"command = {command}"]
    for k in sorted(resolved):
        v = resolved[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "on", "yes"):
        return True
    if s in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _coerce(value, like):
    if isinstance(like, bool):
        return _parse_bool(value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        if isinstance(value, str):
            value = [s for s in value.split(",") if s.strip()]
        return tuple(int(x) for x in value)
    return str(value)


def _resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    file_vals.pop("command", None)
    flags = {k: v for k, v in vars(args).items() if k in defaults and v is not None}
    try:
        for source in (file_vals, flags):
            for k, v in source.items():
                if k not in defaults:
                    raise CLIError(EXIT_CONFIG, f"unknown config key {k!r}")
                resolved[k] = _coerce(v, defaults[k]) if defaults[k] is not None else v
    except ValueError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from e
    return resolved


def _out_dir(path) -> Path:
    p = Path(path)
    if not p.is_absolute() and "VALVESEG_OUTPUT_ROOT" in os.environ:
        p = D.output_root(".") / p
    return p


def _subset(cfg, cls):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


# --------------------------------------------------------------------------- phantom

PHANTOM_DEFAULTS = dict(
    patients=24, grid=32, phases=8, seed=0, amplitude=0.25, noise=0.3, extent_mm=32.0, blur=0.8,
    train_frac=0.75, val_frac=0.125, test_frac=0.125, out="data",
)


def phantom_config(cfg: dict) -> D.PhantomConfig:
    return D.PhantomConfig(grid_size=cfg["grid"], n_phases=cfg["phases"], seed=cfg["seed"],
                           n_patients=cfg["patients"], deformation_amplitude=cfg["amplitude"],
                           noise_level=cfg["noise"], extent_mm=cfg["extent_mm"], blur_sigma=cfg["blur"])


def cmd_phantom(args) -> int:
    cfg = _resolve(PHANTOM_DEFAULTS, args)
    pc = phantom_config(cfg)
    try:
        pc.validate()
        seqs = D.generate_phantom(pc)
    except (D.ConfigError, ValueError) as e:
        raise CLIError(EXIT_CONFIG, f"invalid phantom config: {e}") from e
    out = _out_dir(cfg["out"])
    try:
        manifest = D.save_dataset(seqs, out, (cfg["train_frac"], cfg["val_frac"], cfg["test_frac"]), pc)
    except D.ConfigError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from e
    write_manifest(out / MANIFEST, "phantom", cfg)
    print(f"wrote {len(seqs)} patients to {out} "
          f"(train {len(manifest['split']['train'])}, val {len(manifest['split']['val'])}, "
          f"test {len(manifest['split']['test'])})")
    return EXIT_OK


# --------------------------------------------------------------------------- train

_NET_DEFAULTS = {f.name: f.default for f in fields(NetworkConfig)}
TRAIN_DEFAULTS = dict(
    {f.name: f.default for f in fields(TrainingConfig)},
    **_NET_DEFAULTS, data="data", out="runs/train",
)


def _load(root, subset, with_gt=False):
    root = Path(root)
    if not root.exists():
        raise CLIError(EXIT_MISSING, f"{root}: dataset not found")
    try:
        return D.load_dataset(root, subset, with_ground_truth=with_gt)
    except (D.FormatError, KeyError) as e:
        raise CLIError(EXIT_MISSING, f"{root}: {e}") from e


def _checkpoint_config(train_cfg: TrainingConfig, net_cfg: NetworkConfig) -> dict:
    return {"network": network_config_dict(net_cfg), "training": config_dict(train_cfg)}


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args)
    try:
        tc = TrainingConfig(**_subset(cfg, TrainingConfig))
        nc = NetworkConfig(**_subset(cfg, NetworkConfig))
    except (TypeError, ValueError) as e:
        raise CLIError(EXIT_CONFIG, f"invalid training config: {e}") from e
    train_set = _load(cfg["data"], "train")
    val_set = _load(cfg["data"], "val", with_gt=True)
    out = _out_dir(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / MANIFEST, "train", cfg)

    trace = []
    try:
        result = train(train_set, tc, nc, val_set, on_report=trace.append)
    except NonFiniteLossError as e:
        write_trace_csv(trace, out / "loss.csv")
        dump = {"step": e.step, "components": {k: repr(v) for k, v in e.components.items()},
                "config": {k: str(v) for k, v in cfg.items()}}
        (out / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2) + "\n")
        raise CLIError(EXIT_NUMERIC, f"{e}; diagnostics in {out / 'nonfinite_dump.json'}") from e
    except ShapeError as e:
        raise CLIError(EXIT_CONFIG, str(e)) from e

    write_trace_csv(result.trace, out / "loss.csv")
    meta = _checkpoint_config(tc, nc)
    save_checkpoint(out / "last.ckpt", get_parameters(result.teacher), meta, result.step)
    best = result.best_params["teacher"] if result.best_params else get_parameters(result.teacher)
    save_checkpoint(out / "best.ckpt", best, meta, result.step)
    print(f"trained {result.step} steps; best val dice {result.best_score:.4f}; outputs in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- predict


def load_model(path) -> tuple:
    try:
        tensors, config, _ = load_checkpoint(path)
        nc = NetworkConfig(**config["network"])
        model = SegNet(nc)
        set_parameters(model, tensors)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise CLIError(EXIT_CHECKPOINT, str(e)) from e
        raise CLIError(EXIT_CHECKPOINT, f"{path}: checkpoint/config mismatch ({e})") from e
    return model, config


def _sequences(path, subset):
    path = Path(path)
    if (path / D.META_NAME).exists():
        try:
            return [D.load_sequence(path)]
        except D.FormatError as e:
            raise CLIError(EXIT_MISSING, str(e)) from e
    return _load(path, subset)


def cmd_predict(args) -> int:
    if not Path(args.checkpoint).exists():
        raise CLIError(EXIT_MISSING, f"{args.checkpoint}: checkpoint not found")
    model, config = load_model(args.checkpoint)
    tr = config.get("training", {})
    k, capacity = int(tr.get("topk", 16)), int(tr.get("memory_capacity", 4))
    mcl = not args.no_mcl
    out = _out_dir(args.out)
    seqs = _sequences(args.data, args.subset)
    for seq in seqs:
        try:
            probs = predict_sequence(model, seq, mcl, k, capacity)
        except ShapeError as e:
            raise CLIError(EXIT_CHECKPOINT, f"{seq.patient_id}: {e}") from e
        d = out / seq.patient_id
        d.mkdir(parents=True, exist_ok=True)
        meta = {"patient_id": seq.patient_id, "n_phases": seq.n_phases, "shape": list(seq.shape),
                "spacing_mm": seq.spacing, "mcl": mcl}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for t, P in enumerate(probs):
            (P > 0.5).astype("u1").tofile(d / f"mask_{t}.raw")
            if args.save_prob:
                P.astype("<f4").tofile(d / f"prob_{t}.raw")
    write_manifest(out / MANIFEST, "predict", {"checkpoint": args.checkpoint, "data": args.data,
                                                "subset": args.subset or "", "mcl": mcl,
                                                "save_prob": bool(args.save_prob)})
    print(f"predicted {len(seqs)} patient(s) into {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def read_predictions(directory, n_phases: int, shape) -> list:
    d = Path(directory)
    masks = []
    for t in range(n_phases):
        p = d / f"mask_{t}.raw"
        if not p.exists():
            raise CLIError(EXIT_MISSING, f"{p}: missing prediction")
        arr = np.fromfile(p, dtype="u1")
        if arr.size != int(np.prod(shape)):
            raise CLIError(EXIT_MISSING, f"{p}: size {arr.size} does not match shape {list(shape)}")
        masks.append(arr.reshape(shape).astype(np.float32))
    return masks


def plot_dice_curve(reports, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for rep in reports:
        ax.plot([r.phase_index for r in rep.rows], [r.dice for r in rep.rows], marker="o", lw=1,
                label=rep.patient_id)
    ax.set_xlabel("phase")
    ax.set_ylabel("Dice (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    if len(reports) <= 8:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def cmd_eval(args) -> int:
    from .metrics import evaluate_sequence, summarize, write_reports

    pred_root = Path(args.pred)
    if not pred_root.exists():
        raise CLIError(EXIT_MISSING, f"{pred_root}: predictions not found")
    seqs = _load(args.data, args.subset, with_gt=True)
    reports = []
    for seq in seqs:
        pdir = pred_root / seq.patient_id
        if not pdir.exists():
            if args.subset is None:
                continue
            raise CLIError(EXIT_MISSING, f"{pdir}: no predictions for {seq.patient_id}")
        reports.append(evaluate_sequence(read_predictions(pdir, seq.n_phases, seq.shape), seq))
    if not reports:
        raise CLIError(EXIT_MISSING, f"{pred_root}: no predictions match the dataset")
    out = _out_dir(args.out)
    write_reports(reports, out)
    plot_dice_curve(reports, out / "dice_curve.png")
    for name, agg in summarize(reports).items():
        print(f"{name:18s} dice {_f(agg['dice'])}  hd95 {_f(agg['hd95'])}  conf {_f(agg['conformity'])}")
    return EXIT_OK


def _f(v):
    return "   n/a" if v is None else f"{v:6.2f}"


# --------------------------------------------------------------------------- compare


def _read_report(path):
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    if not p.exists():
        raise CLIError(EXIT_MISSING, f"{p}: report not found")
    return json.loads(p.read_text())


def cmd_compare(args) -> int:
    from .metrics import compare_reports

    rows = compare_reports(_read_report(args.a), _read_report(args.b))
    lines = ["section,metric,a,b,b_minus_a"]
    for r in rows:
        lines.append(",".join([r[0], r[1]] + ["" if v is None else f"{v:.4f}" for v in r[2:]]))
    text = "\n".join(lines) + "\n"
    if args.out:
        out = _out_dir(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(f"{'section':18s} {'metric':10s} {'A':>9s} {'B':>9s} {'B-A':>9s}")
    for sec, m, a, b, d in rows:
        print(f"{sec:18s} {m:10s} {_f(a):>9s} {_f(b):>9s} {_f(d):>9s}")
    return EXIT_OK


# --------------------------------------------------------------------------- harness commands


def cmd_check(args) -> int:
    from .harness import format_table, run_gradient_checks, run_oracle_suite, save_results

    results = run_gradient_checks(args.seed) + run_oracle_suite()
    print(format_table(results))
    if args.out:
        save_results(results, _out_dir(args.out))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_ablation(args) -> int:
    from .harness import run_ablation_benchmark

    report = run_ablation_benchmark(args.seed, epochs=args.epochs)
    print(report.table())
    if args.out:
        out = _out_dir(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --------------------------------------------------------------------------- parser


def _add_keys(p, defaults, skip=()):
    for k, v in defaults.items():
        if k in skip:
            continue
        flag = "--" + k.replace("_", "-")
        if isinstance(v, bool):
            p.add_argument(flag, dest=k, default=None, metavar="{on,off}")
        else:
            p.add_argument(flag, dest=k, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="valveseg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic deforming-valve dataset")
    p.add_argument("--config")
    _add_keys(p, PHANTOM_DEFAULTS)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a model; --mcl/--tcr select the ablation configuration")
    p.add_argument("--config")
    _add_keys(p, TRAIN_DEFAULTS, skip=("enable_mcl", "enable_tcr"))
    p.add_argument("--mcl", dest="enable_mcl", default=None, metavar="{on,off}")
    p.add_argument("--tcr", dest="enable_tcr", default=None, metavar="{on,off}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write per-phase masks for one patient or a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="patient directory or dataset root")
    p.add_argument("--subset", default=None, help="split name when --data is a dataset root")
    p.add_argument("--out", default="runs/predict")
    p.add_argument("--no-mcl", action="store_true", help="independent per-phase inference")
    p.add_argument("--save-prob", action="store_true", help="also write float32 probability maps")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", default=None)
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="side-by-side table of two evaluation reports")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check", help="gradient checks and oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("ablation", help="phantom ablation benchmark (three trainings)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
