"""Command-line surface: pretrain, finetune, eval, noise-bench, ablate, synth.

Every run claims an output directory ``<run.dir>/<run.name>/`` via a
lockfile, echoes its fully-resolved config there first, then writes its
artifacts (report.csv, summary, checkpoint).  Exit codes: 0 success, 1 input
or config error, 2 internal error.
"""

from __future__ import annotations

import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_io
from .config import format_echo, resolve_config
from .errors import FaimError, InputError
from .metrics import accuracy_and_macro_f1
from .model import FaimConfig, load_checkpoint
from .training import TrainReport, evaluate, finetune, predict_dataset, pretrain

COMMANDS = ("pretrain", "finetune", "eval", "noise-bench", "ablate", "synth")

VARIANT_LABELS = {
    "full": "FAIM",
    "no_afb": "w/o AFB",
    "no_hf": "w/o HF",
    "no_lf": "w/o LF",
    "no_hf_lf": "w/o HF+LF",
    "no_imb": "w/o IMB",
    "no_pretrain": "w/o Pretrain",
}

USAGE = """usage: faim <command> [--config FILE] [--key value ...]

commands:
  pretrain     masked-reconstruction stage; writes checkpoint + report
  finetune     supervised stage (optionally from a pretrained checkpoint)
  eval         score a checkpoint on a test file
  noise-bench  accuracy under additive Gaussian noise, one row per sigma
  ablate       train and score the named model variants
  synth        emit a synthetic corpus (train + test files)

Keys are the flat dotted names from the config registry, e.g.
  faim finetune --data.train train.tsv --train.finetune_epochs 50
"""


def model_config_from(cfg: dict) -> FaimConfig:
    return FaimConfig(
        patch_len=cfg["model.patch_len"],
        patch_stride=cfg["model.patch_stride"],
        embed_dim=cfg["model.embed_dim"],
        n_layers=cfg["model.n_layers"],
        ssm_state=cfg["imb.ssm_state"],
        conv_k1=cfg["imb.conv_k1"],
        conv_k2=cfg["imb.conv_k2"],
        conv_k3=cfg["imb.conv_k3"],
        theta_high=cfg["afb.theta_high"],
        theta_low=cfg["afb.theta_low"],
        tau=cfg["afb.tau"],
        mask_ratio=cfg["train.mask_ratio"],
        label_smooth_eps=cfg["train.label_smooth_eps"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        pretrain_epochs=cfg["train.pretrain_epochs"],
        finetune_epochs=cfg["train.finetune_epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["train.seed"],
        variant=cfg["model.variant"],
        literal_cross_pairing=cfg["afb.literal_cross_pairing"],
        concat_fusion=cfg["imb.concat_fusion"],
        share_in_proj=cfg["imb.share_in_proj"],
    )


def _load_dataset(path: str, fmt: str) -> data_io.SeriesDataset:
    if not path:
        raise InputError("no dataset path configured (set data.train / data.test)")
    if fmt == "univariate":
        return data_io.load_univariate(path)
    if fmt == "multivariate":
        return data_io.load_multivariate(path)
    raise InputError(f"data.format must be 'univariate' or 'multivariate', got {fmt!r}")


def _load_train(cfg: dict) -> data_io.SeriesDataset:
    dataset = _load_dataset(cfg["data.train"], cfg["data.format"])
    if cfg["data.normalize"]:
        dataset = data_io.znormalize(dataset)
    return dataset


def _load_test_like(cfg: dict, meta: dict) -> data_io.SeriesDataset:
    """Test split aligned to a training run: its label map, its statistics."""
    dataset = _load_dataset(cfg["data.test"], cfg["data.format"])
    label_map = meta.get("label_map")
    if label_map:
        dataset = data_io.align_labels(dataset, label_map)
    if meta.get("norm_mean") is not None:
        stats = (np.asarray(meta["norm_mean"]), np.asarray(meta["norm_std"]))
        dataset = data_io.znormalize(dataset, stats=stats)
    return dataset


def _write(path: Path, text: str) -> None:
    path.write_text(text)


class _RunDirectory:
    """Exclusive claim on an output directory for the duration of a command."""

    def __init__(self, cfg: dict, command: str):
        name = cfg["run.name"] or f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
        self.path = Path(cfg["run.dir"]) / name
        self.lock = self.path / ".lock"

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise InputError(
                f"{self.path} is already claimed by a running command "
                f"(remove {self.lock} if that run is dead)"
            ) from None
        os.close(fd)
        return self.path

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock)
        except FileNotFoundError:
            pass
        return False


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_synth(cfg: dict, out_dir: Path) -> None:
    kind = cfg["synth.kind"]
    if kind == "freq":
        ext = "tsv"
        make = lambda seed: data_io.make_synthetic_freq_dataset(
            cfg["synth.n_per_class"], cfg["synth.t"], cfg["synth.freqs"], cfg["synth.sigma"], seed
        )
        save = data_io.save_univariate
    elif kind == "motion":
        ext = "jsonl"
        make = lambda seed: data_io.make_synthetic_motion_dataset(
            cfg["synth.n_per_class"],
            cfg["synth.channels"],
            cfg["synth.t"],
            cfg["synth.classes"],
            cfg["synth.sigma"],
            seed,
        )
        save = data_io.save_multivariate
    else:
        raise InputError(f"synth.kind must be 'freq' or 'motion', got {kind!r}")
    train_path = cfg["synth.train_out"] or str(out_dir / f"train.{ext}")
    test_path = cfg["synth.test_out"] or str(out_dir / f"test.{ext}")
    save(make(cfg["synth.seed"]), train_path)
    save(make(cfg["synth.seed"] + 1), test_path)
    summary = f"kind={kind}\ntest={test_path}\ntrain={train_path}\n"
    _write(out_dir / "summary", summary)


def _maybe_test_metrics(cfg: dict, model, train_meta: dict, report: TrainReport) -> None:
    if not cfg["data.test"]:
        return
    test = _load_test_like(cfg, train_meta)
    loss, acc, f1 = evaluate(model, test, cfg["train.batch_size"])
    report.add(0, "test", loss, acc, f1, 0.0)
    report.summary["test_accuracy"] = repr(acc)
    report.summary["test_macro_f1"] = repr(f1)


def _cmd_pretrain(cfg: dict, out_dir: Path) -> None:
    started = time.perf_counter()
    dataset = _load_train(cfg)
    model_cfg = model_config_from(cfg)
    _, report = pretrain(dataset, model_cfg, checkpoint_path=str(out_dir / "checkpoint"))
    report.summary["wall_seconds"] = f"{time.perf_counter() - started:.3f}"
    _write(out_dir / "report.csv", report.to_csv(include_timing=False))
    _write(out_dir / "summary", report.summary_text())


def _cmd_finetune(cfg: dict, out_dir: Path) -> None:
    started = time.perf_counter()
    dataset = _load_train(cfg)
    model_cfg = model_config_from(cfg)
    init = None
    meta = {}
    if cfg["finetune.init"]:
        init, meta = load_checkpoint(cfg["finetune.init"])
        if meta.get("label_map"):
            dataset = data_io.align_labels(dataset, meta["label_map"])
    model, report = finetune(
        dataset, model_cfg, init=init, checkpoint_path=str(out_dir / "checkpoint")
    )
    _maybe_test_metrics(cfg, model, _meta_for(dataset, model_cfg), report)
    report.summary["wall_seconds"] = f"{time.perf_counter() - started:.3f}"
    _write(out_dir / "report.csv", report.to_csv(include_timing=False))
    _write(out_dir / "summary", report.summary_text())


def _meta_for(dataset: data_io.SeriesDataset, model_cfg: FaimConfig) -> dict:
    return {
        "label_map": dataset.label_map,
        "norm_mean": None if dataset.norm_mean is None else list(dataset.norm_mean),
        "norm_std": None if dataset.norm_std is None else list(dataset.norm_std),
        "seed": model_cfg.seed,
    }


def _cmd_eval(cfg: dict, out_dir: Path) -> None:
    if not cfg["eval.checkpoint"]:
        raise InputError("eval needs --eval.checkpoint pointing at a trained model")
    model, meta = load_checkpoint(cfg["eval.checkpoint"])
    test = _load_test_like(cfg, meta)
    loss, acc, f1 = evaluate(model, test, cfg["train.batch_size"])
    report = TrainReport()
    report.add(0, "test", loss, acc, f1, 0.0)
    report.summary["test_accuracy"] = repr(acc)
    report.summary["test_macro_f1"] = repr(f1)
    report.summary["test_loss"] = repr(loss)
    _write(out_dir / "report.csv", report.to_csv(include_timing=False))
    _write(out_dir / "summary", report.summary_text())


def _cmd_noise_bench(cfg: dict, out_dir: Path) -> None:
    if not cfg["eval.checkpoint"]:
        raise InputError("noise-bench needs --eval.checkpoint pointing at a trained model")
    model, meta = load_checkpoint(cfg["eval.checkpoint"])
    test = _load_test_like(cfg, meta)
    lines = ["sigma,accuracy,macro_f1"]
    summary = {}
    for sigma in cfg["noise.sigmas"]:
        noisy = data_io.add_gaussian_noise(test, sigma, cfg["train.seed"])
        preds = predict_dataset(model, noisy, cfg["train.batch_size"])
        _, labels = noisy.arrays()
        acc, f1 = accuracy_and_macro_f1(preds, labels, noisy.n_classes)
        lines.append(f"{repr(float(sigma))},{repr(acc)},{repr(f1)}")
        summary[f"accuracy_at_{format(sigma, 'g')}"] = repr(acc)
    _write(out_dir / "report.csv", "\n".join(lines) + "\n")
    _write(out_dir / "summary", "\n".join(f"{k}={summary[k]}" for k in sorted(summary)) + "\n")


def _cmd_ablate(cfg: dict, out_dir: Path) -> None:
    if not cfg["data.test"]:
        raise InputError("ablate needs --data.test to score the variants")
    dataset = _load_train(cfg)
    lines = ["variant,label,accuracy,macro_f1"]
    summary = {}
    for variant in cfg["ablate.variants"]:
        model_cfg = model_config_from(cfg)
        model_cfg.variant = variant
        init = None
        if variant != "no_pretrain" and model_cfg.pretrain_epochs > 0:
            init, _ = pretrain(dataset, model_cfg)
        model, _ = finetune(dataset, model_cfg, init=init)
        test = _load_test_like(cfg, _meta_for(dataset, model_cfg))
        _, acc, f1 = evaluate(model, test, cfg["train.batch_size"])
        label = VARIANT_LABELS.get(variant, variant)
        lines.append(f"{variant},{label},{repr(acc)},{repr(f1)}")
        summary[f"accuracy_{variant}"] = repr(acc)
    _write(out_dir / "report.csv", "\n".join(lines) + "\n")
    _write(out_dir / "summary", "\n".join(f"{k}={summary[k]}" for k in sorted(summary)) + "\n")


_DISPATCH = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "noise-bench": _cmd_noise_bench,
    "ablate": _cmd_ablate,
}


def run(command: str, cfg: dict) -> int:
    """Execute one command against a resolved config; returns the exit code."""
    if command not in COMMANDS:
        raise InputError(f"unknown command {command!r}; choose one of {', '.join(COMMANDS)}")
    with _RunDirectory(cfg, command) as out_dir:
        _write(out_dir / "config.echo", format_echo(cfg))
        _DISPATCH[command](cfg, out_dir)
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv or argv[0] in ("-h", "--help"):
            print(USAGE)
            return 0
        command = argv[0]
        config_path = None
        overrides: list[tuple[str, str]] = []
        i = 1
        while i < len(argv):
            arg = argv[i]
            if not arg.startswith("--"):
                raise InputError(f"expected --key, got {arg!r}")
            key = arg[2:]
            if "=" in key:
                key, value = key.split("=", 1)
                i += 1
            else:
                if i + 1 >= len(argv):
                    raise InputError(f"flag --{key} is missing its value")
                value = argv[i + 1]
                i += 2
            if key == "config":
                config_path = value
            else:
                overrides.append((key, value))
        cfg = resolve_config(config_path, overrides)
        return run(command, cfg)
    except FaimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unforeseen is an internal error
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
