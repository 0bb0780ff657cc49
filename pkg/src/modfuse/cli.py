"""Command-line surface: generate, train, eval, compare.

Every command is driven by one JSON config file (echoed verbatim into
the output directory), plus `--out`/`--seed` overrides. Exit codes are a
stable contract: 0 success, 2 configuration or input error, 3 numerical
divergence.

Only stdlib is imported at module scope: `--threads` must pin the BLAS
thread-pool environment before numpy first loads, which is the whole of
the "fully deterministic mode" switch (the training loop itself is
single-threaded by construction).
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

TOP_KEYS = {"seed", "out_dir", "generate", "train", "eval", "compare"}
GENERATE_KEYS = {
    "n_subjects", "stays_min", "stays_max", "pairing_rate", "latent_dim",
    "seq_visible", "img_visible", "task_weight_scale", "aux_weight_scale",
    "ar_coeff", "ar_noise", "obs_rate", "img_noise", "blob_amp",
    "image_side", "stay_hours", "split_fracs",
}
TRAIN_KEYS = {
    "data_dir", "mode", "n_iters", "batch_cxr", "batch_ehr", "batch_pair",
    "eval_interval", "patience", "pretrain_iters", "loss_weight_cxr",
    "loss_weight_ehr", "optimizer", "model",
}
OPTIMIZER_KEYS = {"lr", "beta1", "beta2", "eps"}
MODEL_KEYS = {"seq_hidden", "img_stages", "unified_hidden"}
EVAL_KEYS = {"data_dir", "checkpoint", "split", "regime"}
COMPARE_KEYS = {"data_dir", "split", "checkpoints"}
COMPARE_ORDER = ("ehr_only", "joint_i", "joint_ii", "unified")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modfuse",
        description="Dynamic multi-modal fusion training at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a synthetic cohort and its manifest"),
        ("train", "train one mode and save history, checkpoint, val report"),
        ("eval", "evaluate a checkpoint on a split and regime"),
        ("compare", "evaluate several checkpoints into one comparison table"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="seed override (u64)")
        p.add_argument("--threads", type=int, default=None,
                       help="thread cap; 1 = fully deterministic mode")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .errors import DivergenceError, ModfuseError

    handlers = {"generate": _cmd_generate, "train": _cmd_train,
                "eval": _cmd_eval, "compare": _cmd_compare}
    try:
        return handlers[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ModfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _fail(message: str):
    from .errors import ConfigurationError

    raise ConfigurationError(message)


def _load_config(path: Path) -> dict:
    if not path.exists():
        _fail(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _fail(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        _fail("config must be a JSON object")
    _check_keys(cfg, TOP_KEYS, "config")
    return cfg


def _check_keys(section: dict, allowed: set, where: str):
    unknown = sorted(set(section) - allowed)
    if unknown:
        _fail(f"unknown key {unknown[0]!r} in {where}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        _fail(f"missing required field {key!r} in {where}")
    return section[key]


class RunContext:
    """Resolved invocation: config dict, seed, output dir, base dir."""

    def __init__(self, args):
        self.config_path = Path(args.config).resolve()
        self.config = _load_config(self.config_path)
        self.base_dir = self.config_path.parent
        if args.seed is not None:
            self.seed = args.seed
        else:
            self.seed = _require(self.config, "seed", "config")
        if not isinstance(self.seed, int) or self.seed < 0:
            _fail("field 'seed' must be a non-negative integer")
        if args.out is not None:
            self.out_dir = Path(args.out).resolve()
        elif "out_dir" in self.config:
            self.out_dir = self.resolve(self.config["out_dir"])
        else:
            _fail("missing required field 'out_dir' (or pass --out)")
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def resolve(self, path_str: str) -> Path:
        p = Path(path_str)
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    def section(self, name: str) -> dict:
        sec = _require(self.config, name, "config")
        if not isinstance(sec, dict):
            _fail(f"section {name!r} must be a JSON object")
        return sec

    def echo_config(self):
        target = self.out_dir / "config.json"
        if target.resolve() != self.config_path:
            shutil.copyfile(self.config_path, target)


def _print_counts(counts: dict):
    print(f"{'split':<6} {'cxr':>8} {'ehr':>8} {'pairs':>8}")
    for split in ("train", "val", "test"):
        c = counts[split]
        print(f"{split:<6} {c['cxr']:>8} {c['ehr']:>8} {c['pairs']:>8}")


def _cmd_generate(args) -> int:
    from .datagen import CohortConfig, generate_cohort

    ctx = RunContext(args)
    section = ctx.section("generate")
    _check_keys(section, GENERATE_KEYS, "section 'generate'")
    _require(section, "n_subjects", "section 'generate'")
    kwargs = dict(section)
    for key in ("seq_visible", "img_visible", "split_fracs"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        config = CohortConfig(seed=ctx.seed, **kwargs)
    except (TypeError, ValueError) as exc:
        _fail(f"bad 'generate' section: {exc}")
    manifest = generate_cohort(config, ctx.out_dir)
    ctx.echo_config()
    _print_counts(manifest["counts"])
    return 0


def _model_specs(model_section: dict, image_side: int):
    from .encoders import ImgEncoderSpec, SeqEncoderSpec

    _check_keys(model_section, MODEL_KEYS, "section 'train.model'")
    seq_spec = SeqEncoderSpec(hidden_dim=int(model_section.get("seq_hidden", 64)))
    stages = model_section.get("img_stages", [[8, 1], [16, 1], [32, 1]])
    img_spec = ImgEncoderSpec(
        image_side=image_side,
        stages=tuple((int(c), int(b)) for c, b in stages),
    )
    return seq_spec, img_spec, int(model_section.get("unified_hidden", 64))


def _cohort_image_side(data_dir: Path) -> int:
    manifest = data_dir / "manifest.json"
    if manifest.exists():
        blob = json.loads(manifest.read_text())
        return int(blob.get("config", {}).get("image_side", 64))
    return 64


def _cmd_train(args) -> int:
    from .encoders import init_bundle
    from .evalkit import evaluate, write_report
    from .ingest import load_cohort, make_streams
    from .trainer import TrainConfig, train, validation_regime, write_history

    ctx = RunContext(args)
    section = ctx.section("train")
    _check_keys(section, TRAIN_KEYS, "section 'train'")
    data_dir = ctx.resolve(_require(section, "data_dir", "section 'train'"))
    mode = _require(section, "mode", "section 'train'")
    n_iters = _require(section, "n_iters", "section 'train'")

    optimizer = section.get("optimizer", {})
    _check_keys(optimizer, OPTIMIZER_KEYS, "section 'train.optimizer'")
    patience = section.get("patience")
    pretrain = section.get("pretrain_iters")
    try:
        config = TrainConfig(
            mode=mode,
            n_iters=int(n_iters),
            batch_cxr=int(section.get("batch_cxr", 16)),
            batch_ehr=int(section.get("batch_ehr", 16)),
            batch_pair=int(section.get("batch_pair", 16)),
            lr=float(optimizer.get("lr", 1e-3)),
            beta1=float(optimizer.get("beta1", 0.9)),
            beta2=float(optimizer.get("beta2", 0.999)),
            eps=float(optimizer.get("eps", 1e-8)),
            eval_interval=int(section.get("eval_interval", 100)),
            patience=None if patience is None else int(patience),
            seed=ctx.seed,
            pretrain_iters=None if pretrain is None else int(pretrain),
            loss_weight_cxr=float(section.get("loss_weight_cxr", 1.0)),
            loss_weight_ehr=float(section.get("loss_weight_ehr", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        _fail(f"bad 'train' section: {exc}")

    data = load_cohort(data_dir)
    seq_spec, img_spec, unified_hidden = _model_specs(
        section.get("model", {}), _cohort_image_side(data_dir))
    bundle = init_bundle(ctx.seed, seq_spec, img_spec, unified_hidden=unified_hidden)
    streams = make_streams(
        data, "train", (config.batch_cxr, config.batch_ehr, config.batch_pair), ctx.seed)

    result = train(bundle, data, streams, config)

    write_history(ctx.out_dir / "history.csv", result.history)
    result.bundle.save(ctx.out_dir / "best.ckpt")
    report = evaluate(result.bundle, data, "val", validation_regime(config.mode))
    write_report(report, ctx.out_dir / "eval_val.json", ctx.out_dir / "eval_val.csv")
    ctx.echo_config()
    best = "n/a" if result.best_val is None else f"{result.best_val:.4f}"
    print(f"mode={config.mode} iters={len(result.history)} "
          f"best_val_auroc={best} out={ctx.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .encoders import ModelBundle
    from .evalkit import evaluate, write_report
    from .ingest import load_cohort

    ctx = RunContext(args)
    section = ctx.section("eval")
    _check_keys(section, EVAL_KEYS, "section 'eval'")
    data_dir = ctx.resolve(_require(section, "data_dir", "section 'eval'"))
    ckpt = ctx.resolve(_require(section, "checkpoint", "section 'eval'"))
    split = _require(section, "split", "section 'eval'")
    regime = _require(section, "regime", "section 'eval'")
    if not ckpt.exists():
        _fail(f"checkpoint not found: {ckpt}")

    data = load_cohort(data_dir)
    bundle = ModelBundle.from_checkpoint(ckpt, image_side=_cohort_image_side(data_dir))
    report = evaluate(bundle, data, split, regime)
    stem = f"eval_{split}_{regime}"
    write_report(report, ctx.out_dir / f"{stem}.json", ctx.out_dir / f"{stem}.csv")
    ctx.echo_config()
    macro = {k: (f"{v:.4f}" if v is not None else "n/a") for k, v in report.macro.items()}
    print(f"split={split} regime={regime} "
          + " ".join(f"{k}={macro[k]}" for k in ("all", "acute", "mixed", "chronic")))
    return 0


def _cmd_compare(args) -> int:
    import csv as csv_mod

    from .encoders import ModelBundle
    from .evalkit import evaluate
    from .ingest import load_cohort
    from .trainer import validation_regime

    ctx = RunContext(args)
    section = ctx.section("compare")
    _check_keys(section, COMPARE_KEYS, "section 'compare'")
    data_dir = ctx.resolve(_require(section, "data_dir", "section 'compare'"))
    split = _require(section, "split", "section 'compare'")
    checkpoints = _require(section, "checkpoints", "section 'compare'")
    unknown = sorted(set(checkpoints) - set(COMPARE_ORDER))
    if unknown:
        _fail(f"unknown mode {unknown[0]!r} in section 'compare.checkpoints'")
    if not checkpoints:
        _fail("section 'compare.checkpoints' is empty")

    data = load_cohort(data_dir)
    side = _cohort_image_side(data_dir)
    rows = []
    for mode in COMPARE_ORDER:
        if mode not in checkpoints:
            continue
        ckpt = ctx.resolve(checkpoints[mode])
        if not ckpt.exists():
            _fail(f"checkpoint not found: {ckpt}")
        bundle = ModelBundle.from_checkpoint(ckpt, image_side=side)
        report = evaluate(bundle, data, split, validation_regime(mode))
        rows.append([mode] + [report.macro[g] for g in ("all", "acute", "mixed", "chronic")])

    path = ctx.out_dir / "comparison.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv_mod.writer(fh, lineterminator="\n")
        writer.writerow(["modality", "all", "acute", "mixed", "chronic"])
        for row in rows:
            writer.writerow([row[0]] + ["" if v is None else repr(v) for v in row[1:]])
    ctx.echo_config()
    print(f"{'modality':<10} {'all':>7} {'acute':>7} {'mixed':>7} {'chronic':>7}")
    for row in rows:
        cells = " ".join(f"{v:>7.4f}" if v is not None else f"{'n/a':>7}" for v in row[1:])
        print(f"{row[0]:<10} {cells}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
