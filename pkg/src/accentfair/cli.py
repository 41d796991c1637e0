"""Command-line entry point: ``accentfair <command> ...``.

Exit codes: 0 success, 1 runtime failure (including partial compare failures),
2 configuration or validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, accentsynth, fairmetrics, objectives, toymodel, trainer
from .objectives import FusionWeights

log = logging.getLogger("accentfair")

CONFIG_ERRORS = (
    accentsynth.ConfigError,
    accentsynth.ParseError,
    accentsynth.ValidationError,
    objectives.ConfigError,
    trainer.ConfigError,
    fairmetrics.ParseError,
    toymodel.ShapeError,
)


class Manifest:
    """``{out}/manifest.json``: written first, rewritten with the output list at the end."""

    def __init__(self, out: Path, command: str, config: dict, inputs: dict, seed):
        self.out = out
        self.path = out / "manifest.json"
        self.doc = {
            "run_id": f"{command}-s{seed}" if seed is not None else command,
            "command": command,
            "config": config,
            "inputs": inputs,
            "seed": seed,
            "version": __version__,
            "status": "running",
            "outputs": [],
            "failures": [],
        }
        out.mkdir(parents=True, exist_ok=True)
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, status: str = "ok") -> None:
        self.doc["status"] = status
        self.doc["outputs"] = sorted(
            str(p.relative_to(self.out)) for p in self.out.rglob("*") if p.is_file() and p != self.path
        )
        self.write()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _weights(args) -> FusionWeights:
    le, ls, ld, li = 1.0, 0.06, 1.0, 0.01
    if args.weights:
        vals = _float_list(args.weights)
        if len(vals) != 4:
            raise objectives.ConfigError("--weights expects four values: lambda_e,lambda_s,lambda_d,lambda_i")
        le, ls, ld, li = vals
    return FusionWeights(le, ls, ld, li, args.sd_lambda, not args.sd_penalty_only)


def _train_config(args, phase: str, objective: str, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        phase=phase,
        objective=objective,
        weights=_weights(args),
        learning_rate=args.lr,
        optimizer=args.optimizer,
        batch_size=args.batch_size,
        max_steps=args.max_steps,
        eval_every=args.eval_every,
        seed=seed,
        early_stop_patience=args.patience,
        sampler=args.sampler,
    )


def _load_synth_config(path: Path) -> accentsynth.SynthConfig:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise accentsynth.ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    preset = doc.pop("preset", None)
    if preset == "skewed":
        return accentsynth.skewed_config(**doc)
    if preset == "default":
        return accentsynth.default_config(**doc)
    if preset is not None:
        raise accentsynth.ConfigError(f"unknown preset {preset!r}")
    return accentsynth.SynthConfig.from_dict(doc)


# -- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _load_synth_config(Path(args.config))
    out = Path(args.out)
    m = Manifest(out, "generate", cfg.to_dict(), {"config": str(args.config)}, args.seed)
    split = accentsynth.generate(cfg, args.seed)
    accentsynth.write_dataset(split, out)
    m.finish()
    log.info("wrote %d/%d/%d utterances to %s", len(split.train), len(split.validation), len(split.test), out)
    return 0


def _finish_training(result: trainer.TrainResult, dataset, out: Path, m: Manifest, label: dict) -> None:
    report = fairmetrics.evaluate_split(result.best, dataset.test, dict(label, best_step=result.best_step),
                                        num_groups=dataset.num_groups)
    _write_json(out / "report.json", report.to_dict())
    (out / "report.txt").write_text(fairmetrics.emit_report([report], "table"), encoding="utf-8")
    m.finish()
    print(fairmetrics.emit_report([report], "table"), end="")


def cmd_pretrain(args) -> int:
    dataset = accentsynth.read_dataset(args.data)
    cfg = _train_config(args, "pretrain", "erm", args.seed)
    cfg.validate()
    mc = toymodel.ModelConfig(d=dataset.feature_dim, h=args.hidden, V=dataset.vocab_size, r=args.bottleneck)
    out = Path(args.out)
    m = Manifest(out, "pretrain", {"train": cfg.to_dict(), "model": asdict(mc)}, {"data": str(args.data)}, args.seed)
    result = trainer.pretrain(mc, dataset, cfg, out_dir=out / "checkpoints", run_id=m.doc["run_id"])
    _finish_training(result, dataset, out, m, {"model": f"h={mc.h}", "objective": "erm", "seed": args.seed})
    return 0


def cmd_finetune(args) -> int:
    dataset = accentsynth.read_dataset(args.data)
    cfg = _train_config(args, "finetune", args.objective, args.seed)
    cfg.validate(dataset.num_groups)
    base = toymodel.load_checkpoint(args.base)
    out = Path(args.out)
    run_id = f"finetune-{args.objective}-s{args.seed}"
    m = Manifest(out, "finetune", {"train": cfg.to_dict(), "bottleneck": args.bottleneck},
                 {"data": str(args.data), "base": str(args.base)}, args.seed)
    m.doc["run_id"] = run_id
    result = trainer.finetune(base, dataset, cfg, out_dir=out / "checkpoints", run_id=run_id, r=args.bottleneck)
    _finish_training(result, dataset, out, m,
                     {"model": f"h={base.config.h}", "objective": args.objective, "seed": args.seed})
    return 0


def cmd_search(args) -> int:
    dataset = accentsynth.read_dataset(args.data)
    cfg = _train_config(args, "finetune", "fusion", args.seed)
    cfg.validate(dataset.num_groups)
    base = toymodel.load_checkpoint(args.base)
    grid_s, grid_i = _float_list(args.grid_s), _float_list(args.grid_i)
    out = Path(args.out)
    m = Manifest(out, "search", {"train": cfg.to_dict(), "grid_s": grid_s, "grid_i": grid_i},
                 {"data": str(args.data), "base": str(args.base)}, args.seed)
    res = trainer.greedy_search(base, dataset, cfg, grid_s, grid_i)
    with (out / "search_log.jsonl").open("w", encoding="utf-8") as fh:
        for e in res.log:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    _write_json(out / "best_weights.json", {"weights": asdict(res.weights), "score": res.score})
    m.finish()
    print(f"lambda_s={res.weights.lambda_s} lambda_i={res.weights.lambda_i} macro={res.score:.1f}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = accentsynth.read_dataset(args.data)
    params = toymodel.load_checkpoint(args.checkpoint)
    out = Path(args.out)
    m = Manifest(out, "evaluate", {"split": args.split},
                 {"data": str(args.data), "checkpoint": str(args.checkpoint)}, None)
    utts = getattr(dataset, args.split)
    report = fairmetrics.evaluate_split(params, utts, {"model": f"h={params.config.h}", "objective": args.label},
                                        num_groups=dataset.num_groups)
    _write_json(out / "report.json", report.to_dict())
    if args.split == "test" and len(report.per_group_wer) >= 3:
        try:
            r = fairmetrics.word_length_correlation(utts, report)
            _write_json(out / "word_length_correlation.json", {"pearson_r": r})
        except fairmetrics.UndefinedMetricError as exc:
            log.warning("word-length correlation skipped: %s", exc)
    m.finish()
    print(fairmetrics.emit_report([report], "table"), end="")
    return 0


def _footer(reports: list[fairmetrics.FairnessReport]) -> str:
    by_obj: dict[str, list[float]] = {}
    for r in reports:
        key = f"{r.metadata.get('model')} {r.metadata.get('objective')}"
        by_obj.setdefault(key, []).append(r.macro_average)
    lines = ["", "macro-average WER over seeds (mean ± population std):"]
    for obj, vals in by_obj.items():
        lines.append(f"  {obj}: {np.mean(vals):.1f} ± {np.std(vals):.1f} (n={len(vals)})")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    dataset = accentsynth.read_dataset(args.data)
    objs = _str_list(args.objectives)
    seeds = _int_list(args.seeds)
    widths = _int_list(args.widths) if args.widths else []
    for o in objs:
        _train_config(args, "finetune", o, seeds[0]).validate(dataset.num_groups)
    if not widths and not args.base:
        raise trainer.ConfigError("compare needs --base or --widths")
    out = Path(args.out)
    m = Manifest(out, "compare",
                 {"objectives": objs, "seeds": seeds, "widths": widths,
                  "train": _train_config(args, "finetune", objs[0], seeds[0]).to_dict()},
                 {"data": str(args.data), "base": str(args.base) if args.base else None}, seeds[0])

    bases: list[toymodel.ParamSet] = []
    if widths:
        for h in widths:
            pcfg = trainer.TrainConfig(phase="pretrain", objective="erm", learning_rate=args.pretrain_lr,
                                       batch_size=args.batch_size, max_steps=args.pretrain_steps,
                                       eval_every=args.eval_every, seed=seeds[0])
            mc = toymodel.ModelConfig(d=dataset.feature_dim, h=h, V=dataset.vocab_size, r=max(1, min(args.bottleneck, h - 1)))
            bases.append(trainer.pretrain(mc, dataset, pcfg, out / "bases", run_id=f"base-h{h}").best)
    else:
        bases.append(toymodel.load_checkpoint(args.base))

    reports: list[fairmetrics.FairnessReport] = []
    for base in bases:
        model = f"h={base.config.h}"
        reports.append(fairmetrics.evaluate_split(base, dataset.test, {"model": model, "objective": "w/o FT", "seed": ""},
                                                  num_groups=dataset.num_groups))
        r = min(args.bottleneck, base.config.h - 1)
        for obj in objs:
            for seed in seeds:
                run_id = f"{model}-{obj}-s{seed}"
                try:
                    res = trainer.finetune(base, dataset, _train_config(args, "finetune", obj, seed), r=r)
                except Exception as exc:  # recorded, comparison continues over completed runs
                    log.error("sub-run %s failed: %s", run_id, exc)
                    m.doc["failures"].append({"run": run_id, "error": str(exc)})
                    continue
                reports.append(fairmetrics.evaluate_split(
                    res.best, dataset.test, {"model": model, "objective": obj, "seed": seed, "best_step": res.best_step},
                    num_groups=dataset.num_groups))

    finetuned = [r for r in reports if r.metadata["objective"] != "w/o FT"]
    table = fairmetrics.emit_report(reports, "table") + (_footer(finetuned) if finetuned else "")
    (out / "table.txt").write_text(table, encoding="utf-8")
    (out / "per_group.csv").write_text(fairmetrics.emit_report(reports, "csv"), encoding="utf-8")
    (out / "reports.json").write_text(fairmetrics.emit_report(reports, "json"), encoding="utf-8")
    if widths:
        lines = ["width,objective,mean_micro_wer,mean_macro_wer,mean_min_max_gap"]
        for base in bases:
            model = f"h={base.config.h}"
            for obj in ["w/o FT"] + objs:
                rs = [r for r in reports if r.metadata["model"] == model and r.metadata["objective"] == obj]
                if rs:
                    lines.append(f"{base.config.h},{obj},{np.mean([r.micro_average for r in rs]):.6f},"
                                 f"{np.mean([r.macro_average for r in rs]):.6f},{np.mean([r.min_max_gap for r in rs]):.6f}")
        (out / "width_summary.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    m.finish("partial" if m.doc["failures"] else "ok")
    print(table, end="")
    return 1 if m.doc["failures"] else 0


def cmd_audit(args) -> int:
    out = Path(args.out)
    m = Manifest(out, "audit", {}, {"pairs": str(args.pairs)}, None)
    records = fairmetrics.read_pairs(args.pairs)
    report = fairmetrics.audit(records, {"model": args.label, "objective": "audit"})
    _write_json(out / "report.json", report.to_dict())
    (out / "per_group.csv").write_text(fairmetrics.emit_report([report], "csv"), encoding="utf-8")
    m.finish()
    print(fairmetrics.emit_report([report], "table"), end="")
    return 0


# -- parser -------------------------------------------------------------------


def _add_training_args(p: argparse.ArgumentParser, objective: bool = True) -> None:
    if objective:
        p.add_argument("--objective", choices=objectives.OBJECTIVES, default="fusion")
    p.add_argument("--weights", help="lambda_e,lambda_s,lambda_d,lambda_i (default 1,0.06,1,0.01)")
    p.add_argument("--sd-lambda", type=float, default=0.06, help="coefficient inside the SD loss")
    p.add_argument("--sd-penalty-only", action="store_true", help="drop the ERM term nested inside SD")
    p.add_argument("--lr", type=float, default=4e-5)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-steps", type=int, default=500)
    p.add_argument("--eval-every", type=int, default=25)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--sampler", choices=("auto", "pooled", "balanced"), default="auto")
    p.add_argument("--bottleneck", type=int, default=12, help="adapter bottleneck width r")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="accentfair", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic grouped dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="ERM pretraining of the base model on the skewed pool")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, default=16)
    _add_training_args(p, objective=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapter finetuning under one objective")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    _add_training_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("search", help="greedy search over lambda_s then lambda_i")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    default_grid = ",".join(str(v) for v in trainer.DEFAULT_GRID)
    p.add_argument("--grid-s", default=default_grid)
    p.add_argument("--grid-i", default=default_grid)
    _add_training_args(p, objective=False)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="fairness report for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=accentsynth.SPLITS, default="test")
    p.add_argument("--label", default="-")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="finetune every objective x seed (x width) and tabulate")
    p.add_argument("--data", required=True)
    p.add_argument("--base")
    p.add_argument("--out", required=True)
    p.add_argument("--objectives", default=",".join(objectives.OBJECTIVES))
    p.add_argument("--seeds", default="0")
    p.add_argument("--widths", help="comma list of hidden sizes; pretrains one base per width")
    p.add_argument("--pretrain-steps", type=int, default=150)
    p.add_argument("--pretrain-lr", type=float, default=3e-3)
    _add_training_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("audit", help="fairness report for external reference/hypothesis pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="external")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
