"""Command-line entry point: ``clearhug {synth,tokenize,pretrain,probe,eval,masks}``.

Settings resolve as defaults < ``--config`` JSON < explicit flags. Every run writes
``run.json`` (resolved config, versions, input digests) to its output directory; passing
that file back through ``--config`` repeats the run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 non-finite loss or gradient.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("clearhug")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def shipped_defaults(name: str) -> dict:
    return json.loads(resources.files("clearhug").joinpath("configs", name).read_text())


def _floats(text):
    return [float(v) for v in text.split(",")]


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# (flag, key, type, help); defaults live in DEFAULTS so config files can override them
OPTIONS = {
    "synth": [
        ("--out", "out", str, "output directory"),
        ("--seed", "seed", int, "dataset seed"),
        ("--n", "n_records", int, "number of records"),
        ("--sample-rate", "sample_rate", int, "Hz"),
        ("--duration", "duration", float, "seconds per record"),
        ("--noise-std", "noise_std", float, "additive noise std (mV)"),
        ("--wander-amp", "wander_amp", float, "baseline wander amplitude (mV)"),
        ("--workers", "workers", int, "generator processes"),
    ],
    "tokenize": [
        ("--manifest", "manifest", str, "manifest JSON"),
        ("--out", "out", str, "output directory for <split>.chtk"),
        ("--N", "N", int, "beats per lead"),
        ("--T-b", "T_b", int, "samples per beat"),
        ("--rate", "target_rate", int, "resample to this rate (Hz)"),
        ("--scale", "scale", _floats, "rescale range lo,hi (omit for none)"),
        ("--scale-scope", "scale_scope", str, "record | lead"),
    ],
    "pretrain": [
        ("--data", "data", str, "directory with train.chtk and val.chtk"),
        ("--out", "out", str, "output directory"),
        ("--epochs", "epochs", int, ""),
        ("--warmup-epochs", "warmup_epochs", int, ""),
        ("--peak-lr", "peak_lr", float, ""),
        ("--min-lr", "min_lr", float, ""),
        ("--weight-decay", "weight_decay", float, ""),
        ("--betas", "betas", _floats, "beta1,beta2"),
        ("--batch-size", "batch_size", int, ""),
        ("--mask-ratio", "mask_ratio", float, ""),
        ("--seed", "seed", int, ""),
        ("--variant", "variant", str, "clear | no_ic | no_iv | no_ic_iv | full"),
        ("--policy", "policy", str, "paper_literal | consistent"),
        ("--loss-scope", "loss_scope", str, "masked | all"),
        ("--save-every", "save_every", int, "checkpoint every k epochs (0: final only)"),
        ("--d-t", "d_t", int, ""),
        ("--n-heads", "n_heads", int, ""),
        ("--enc-layers", "enc_layers", int, ""),
        ("--dec-layers", "dec_layers", int, ""),
        ("--mlp-dim", "mlp_dim", int, ""),
        ("--dropout", "dropout", float, ""),
        ("--mask-fill", "mask_fill", str, "token | zero"),
    ],
    "probe": [
        ("--encoder", "encoder", str, "pretrained checkpoint"),
        ("--data", "data", str, "directory with train/val/test .chtk"),
        ("--out", "out", str, "output directory"),
        ("--head", "head", str, "hug | averaged | weighted | single-level"),
        ("--agg", "agg", str, "mean | concat"),
        ("--fraction", "fraction", float, "fraction of the training split"),
        ("--leads", "leads", _names, "comma list of present leads"),
        ("--epochs", "epochs", int, ""),
        ("--warmup-epochs", "warmup_epochs", int, ""),
        ("--peak-lr", "peak_lr", float, ""),
        ("--min-lr", "min_lr", float, ""),
        ("--weight-decay", "weight_decay", float, ""),
        ("--betas", "betas", _floats, "beta1,beta2"),
        ("--batch-size", "batch_size", int, ""),
        ("--seed", "seed", int, ""),
        ("--policy", "policy", str, "encoder policy for cls extraction"),
    ],
    "eval": [
        ("--checkpoint", "checkpoints", str, "label=path, repeatable"),
        ("--data", "data", str, "directory with test.chtk"),
        ("--out", "out", str, "output directory"),
        ("--mask-ratio", "mask_ratio", float, ""),
        ("--seed", "seed", int, ""),
        ("--n-svg", "n_svg", int, "records drawn as SVG overlays"),
    ],
    "masks": [
        ("--n", "N", int, "beats per lead"),
        ("--ratio", "ratio", float, "masking ratio"),
        ("--variant", "variant", str, ""),
        ("--policy", "policy", str, ""),
        ("--stage", "stage", str, "encoder | decoder"),
        ("--seed", "seed", int, ""),
        ("--out", "out", str, "output directory (default: print to stdout)"),
    ],
}

REQUIRED = {
    "synth": ("out",), "tokenize": ("manifest", "out"), "pretrain": ("data", "out"),
    "probe": ("encoder", "data", "out"), "eval": ("checkpoints", "data", "out"), "masks": (),
}


def defaults(sub: str) -> dict:
    if sub == "synth":
        return {"seed": 0, "n_records": 100, "sample_rate": 100, "duration": 10.0, "noise_std": 0.02,
                "wander_amp": 0.15, "workers": 1}
    if sub == "tokenize":
        return {"N": 15, "T_b": 64, "target_rate": 100, "scale": None, "scale_scope": "record"}
    if sub == "pretrain":
        return shipped_defaults("pretrain_defaults.json")
    if sub == "probe":
        return shipped_defaults("probe_defaults.json")
    if sub == "eval":
        return {"mask_ratio": 0.8, "seed": 0, "n_svg": 3}
    return {"N": 2, "ratio": 0.5, "variant": "clear", "policy": "paper_literal", "stage": "decoder", "seed": 0}


def build_parser() -> Parser:
    parser = Parser(prog="clearhug", description="Desk-scale CLEAR-HUG ECG pretraining and probing.")
    parser.add_argument("--version", action="version", version=f"clearhug {__version__}")
    subs = parser.add_subparsers(dest="subcommand", required=True, parser_class=Parser)
    for sub, opts in OPTIONS.items():
        p = subs.add_parser(sub)
        p.add_argument("--config", help="JSON settings file (a previous run.json also works)")
        p.add_argument("--threads", type=int, help="torch threads (env CLEARHUG_THREADS; default 1). "
                       "Results are bitwise reproducible only at a fixed thread count.")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, key, typ, help_ in opts:
            action = "append" if key == "checkpoints" else "store"
            p.add_argument(flag, dest=key, type=typ, help=help_, default=argparse.SUPPRESS, action=action)
    return parser


def resolve(sub: str, args: argparse.Namespace) -> dict:
    cfg = defaults(sub)
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if "config" in loaded and "subcommand" in loaded:
            if loaded["subcommand"] != sub:
                raise UsageError(f"{args.config} records a '{loaded['subcommand']}' run, not '{sub}'")
            loaded = loaded["config"]
        known = {key for _, key, _, _ in OPTIONS[sub]} | set(cfg)
        unknown = set(loaded) - known
        if unknown:
            raise UsageError(f"unknown settings in {args.config}: {sorted(unknown)}")
        cfg.update(loaded)
    for _, key, _, _ in OPTIONS[sub]:
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    missing = [k for k in REQUIRED[sub] if cfg.get(k) in (None, [])]
    if missing:
        flags = {key: flag for flag, key, _, _ in OPTIONS[sub]}
        raise UsageError("missing required " + ", ".join(flags[k] for k in missing))
    return cfg


def digest(path) -> str:
    """sha256 of a file, or of a directory's files in sorted relative-path order."""
    p = Path(path)
    h = hashlib.sha256()
    files = [p] if p.is_file() else sorted(q for q in p.rglob("*") if q.is_file())
    for f in files:
        if p.is_dir():
            h.update(str(f.relative_to(p)).encode() + b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_run(out, sub, cfg, inputs) -> None:
    import scipy
    import torch

    run = {
        "subcommand": sub,
        "config": cfg,
        "versions": {"clearhug": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__, "torch": torch.__version__},
        "threads": torch.get_num_threads(),
        "inputs": {str(p): digest(p) for p in inputs},
    }
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True))


# -- subcommands -----------------------------------------------------------------

def run_synth(cfg):
    from .synth import SynthConfig, generate_dataset

    sc = SynthConfig(seed=cfg["seed"], n_records=cfg["n_records"], sample_rate=cfg["sample_rate"],
                     duration=cfg["duration"], noise_std=cfg["noise_std"], wander_amp=cfg["wander_amp"])
    generate_dataset(sc, cfg["out"], workers=cfg["workers"])
    write_run(cfg["out"], "synth", cfg, [])


def run_tokenize(cfg):
    from .tokenizer import tokenize_manifest

    scale = tuple(cfg["scale"]) if cfg["scale"] else None
    if scale is not None and len(scale) != 2:
        raise UsageError("--scale takes lo,hi")
    counts = tokenize_manifest(cfg["manifest"], cfg["out"], N=cfg["N"], T_b=cfg["T_b"],
                               target_rate=cfg["target_rate"], scale=scale, scale_scope=cfg["scale_scope"])
    log.info("tokenized %s", counts)
    write_run(cfg["out"], "tokenize", cfg, [cfg["manifest"]])


def _model_config(cfg):
    from .model import ModelConfig

    return ModelConfig(d_t=cfg["d_t"], n_heads=cfg["n_heads"], enc_layers=cfg["enc_layers"],
                       dec_layers=cfg["dec_layers"], mlp_dim=cfg["mlp_dim"], T_b=cfg["T_b"], N=cfg["N"],
                       dropout=cfg["dropout"], mask_fill=cfg["mask_fill"])


def run_pretrain(cfg):
    from .pretrain import TrainConfig, train
    from .tokenizer import load_tokenized

    data = Path(cfg["data"])
    train_set = load_tokenized(data / "train.chtk")
    val_path = data / "val.chtk"
    val_set = load_tokenized(val_path) if val_path.exists() else None
    tc = TrainConfig(**{k: cfg[k] for k in TrainConfig.__dataclass_fields__})
    model_cfg = _model_config({**cfg, "N": train_set.N, "T_b": train_set.T_b})
    write_run(cfg["out"], "pretrain", cfg, [p for p in (data / "train.chtk", val_path) if p.exists()])
    result = train(train_set, val_set, tc, model_cfg, out_dir=cfg["out"])
    last = result.metrics[-1]
    print(f"epoch {last['epoch']}: val masked MSE {last['val_masked_mse']:.6g} "
          f"(epoch 0: {result.metrics[0]['val_masked_mse']:.6g})")


def run_probe(cfg):
    from .evaluate import write_probe_report
    from .hug import ProbeConfig, probe_train
    from .model import load_checkpoint
    from .tokenizer import load_tokenized

    data = Path(cfg["data"])
    sets = [load_tokenized(data / f"{s}.chtk") for s in ("train", "val", "test")]
    model, _ = load_checkpoint(cfg["encoder"])
    pc = ProbeConfig(**{k: cfg[k] for k in ProbeConfig.__dataclass_fields__})
    _, report = probe_train(model, *sets, cfg=pc, policy=cfg["policy"])
    write_probe_report(report, cfg["out"])
    write_run(cfg["out"], "probe", cfg, [cfg["encoder"], *(data / f"{s}.chtk" for s in ("train", "val", "test"))])
    print(f"test macro AUC {report.macro_auc:.4f}")


def run_eval(cfg):
    from .evaluate import efficiency_for, recon_report
    from .model import load_checkpoint
    from .tokenizer import load_tokenized

    pairs = {}
    for item in cfg["checkpoints"]:
        label, sep, path = item.partition("=")
        if not sep:
            path, label = item, Path(item).stem
        pairs[label] = path
    test_path = Path(cfg["data"]) / "test.chtk"
    test_set = load_tokenized(test_path)
    loaded = {k: load_checkpoint(p) for k, p in pairs.items()}
    rows = recon_report(loaded, test_set, cfg["out"], cfg["mask_ratio"], cfg["seed"], cfg["n_svg"])
    model_cfg = next(iter(loaded.values()))[1]["config"]
    eff = efficiency_for(model_cfg, "clear", "paper_literal", cfg["mask_ratio"], cfg["seed"], cfg["out"])
    write_run(cfg["out"], "eval", cfg, [test_path, *pairs.values()])
    for r in rows:
        print(f"{r['label']:>12s} {r['variant']:>9s} masked MSE {r['masked_mse']:.6g}")
    print(f"attention pairs: sparse {eff['pair_count_sparse']} dense {eff['pair_count_dense']}")


def run_masks(cfg):
    from .mask import MaskSpec, Policy, Stage, TokenLayout, Variant, build_mask_matrix, row_size_histogram, sample_masked

    layout = TokenLayout(cfg["N"])
    valid = np.ones(cfg["N"], dtype=bool)
    K = sample_masked(layout, valid, cfg["ratio"], np.random.default_rng(cfg["seed"]))
    spec = MaskSpec(layout, K, frozenset(), Variant(cfg["variant"]))
    m = build_mask_matrix(spec, Stage(cfg["stage"]), Policy(cfg["policy"]))
    matrix_csv = "\n".join(",".join("1" if v else "0" for v in row) for row in m.allow) + "\n"
    summary = {"row_size_histogram": {str(k): v for k, v in row_size_histogram(m).items()}, "K": list(K),
               "n_masked": len(K), "positions": [int(p) for p in m.positions],
               "variant": spec.variant.value, "policy": m.policy.value, "stage": m.stage.value,
               "pair_count": m.pair_count}
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "mask.csv").write_text(matrix_csv)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        write_run(out, "masks", cfg, [])
    else:
        sys.stdout.write(matrix_csv)
        print(json.dumps(summary))


RUNNERS = {"synth": run_synth, "tokenize": run_tokenize, "pretrain": run_pretrain, "probe": run_probe,
           "eval": run_eval, "masks": run_masks}


def _set_threads(requested):
    import torch

    n = requested or int(os.environ.get("CLEARHUG_THREADS", "1"))
    torch.set_num_threads(max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")

    from .model import CheckpointError, NonFiniteError
    from .signal import IrreparableLead, ParseError
    from .tokenizer import NoHeartbeats

    sub = args.subcommand
    try:
        cfg = resolve(sub, args)
        _set_threads(args.threads)
        RUNNERS[sub](cfg)
    except UsageError as e:
        parser._subparsers._group_actions[0].choices[sub].print_usage(sys.stderr)
        print(f"clearhug {sub}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"clearhug {sub}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, IrreparableLead, NoHeartbeats, CheckpointError, OSError, ValueError, KeyError) as e:
        print(f"clearhug {sub}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
