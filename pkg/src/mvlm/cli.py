"""Command-line entry point: ``mvlm {forge,train,finetune,generate,evaluate,toy-data}``.

Every command reads one YAML config (top-level ``seed``/``output`` plus a
section named after the command), applies CLI overrides, and writes the
resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import torch
import yaml

from . import forge as F
from .adapters import LoraConfig, merge_lora
from .checkpoint import load_checkpoint, save_checkpoint
from .generation import GenConfig, generate
from .metrics import (Segmenter, evaluate_task, get_task, gold_answer, plot_report,
                      prompt_for_gold)
from .model import ModelConfig, build_model
from .mt import ENDPOINT_ENV, HttpMT, MockMT, MTError
from .trainer import (ABLATION_PRESETS, REALIGN_DEFAULTS, WARMUP_DEFAULTS, ImageStore, Stage, StageConfig, TrainingDiverged, finetune_config,
                      pretrain_lm, run_alignment, run_stage)

logger = logging.getLogger("mvlm")

SECTIONS = {
    "forge": {
        "sources": None, "languages": None, "assignment": "sample", "exclusion": None, "workers": 1,
        "capfilt": {"max_per_phrase": 30, "min_occurrences": 10},
        "mt": {"endpoint": None, "mock": False, "timeout": 30.0, "retries": 3},
    },
    "train": {
        "mix": None, "images": None, "preset": "full", "model": {},
        "pretrain_lm": {"steps": 0, "batch_size": 16, "lr": 3e-3},
        "warmup": {}, "realign": {},
    },
    "finetune": {
        "task": None, "data": None, "images": None, "checkpoint": None,
        "micro_batch_size": 8, "max_steps": None, "lora": {},
    },
    "generate": {
        "checkpoint": None, "task": None, "gold": None, "images": None, "gen": {},
    },
    "evaluate": {
        "task": None, "gold": None, "predictions": None, "plot": False, "normalize": True,
    },
}
TOP_LEVEL = {"seed", "output"} | set(SECTIONS)


class CLIError(Exception):
    def __init__(self, msg, code=2):
        super().__init__(msg)
        self.code = code


def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in (given or {}).items():
        if k not in defaults:
            raise CLIError(f"unknown config key {where}.{k}")
        if isinstance(defaults[k], dict) and defaults[k] and isinstance(v, dict):
            out[k] = _merge(defaults[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def load_config(path, command: str) -> dict:
    raw = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise CLIError(f"cannot read config {path}: {exc}") from None
    unknown = set(raw) - TOP_LEVEL
    if unknown:
        raise CLIError(f"unknown config key(s): {sorted(unknown)}")
    return {
        "seed": raw.get("seed", 0),
        "output": raw.get("output", "runs"),
        command: _merge(SECTIONS[command], raw.get(command, {}), command),
    }


def write_resolved(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")


def _require(section: dict, *keys, where=""):
    for k in keys:
        if section.get(k) in (None, ""):
            raise CLIError(f"config key {where}.{k} is required")


def _path(p, what: str) -> Path:
    p = Path(p)
    if not p.is_file():
        raise CLIError(f"cannot read {what}: {p}")
    return p


def read_jsonl(path) -> list:
    with open(_path(path, "file"), encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- commands

def cmd_forge(cfg: dict, args) -> Path:
    sec = cfg["forge"]
    _require(sec, "sources", "languages", where="forge")
    if args.mock_mt:
        sec["mt"]["mock"] = True
    if args.mt_endpoint:
        sec["mt"]["endpoint"] = args.mt_endpoint
    out = Path(cfg["output"])
    write_resolved(cfg, out, "forge")
    records = {}
    for ds, p in sorted(sec["sources"].items()):
        if ds not in F.DATASETS:
            raise CLIError(f"unknown source dataset {ds!r}")
        try:
            records[ds] = F.read_records(_path(p, f"{ds} corpus"), ds)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot parse {p}: {exc}") from None
    exclusion = set()
    if sec["exclusion"]:
        exclusion = {l.strip() for l in _path(sec["exclusion"], "exclusion list").read_text().splitlines() if l.strip()}
    dist = F.LanguageDistribution.from_weights(sec["languages"])
    mt_cfg = sec["mt"]
    if mt_cfg["mock"]:
        mt = MockMT()
    else:
        try:
            mt = HttpMT(mt_cfg["endpoint"], timeout=mt_cfg["timeout"], retries=mt_cfg["retries"])
        except MTError as exc:
            raise CLIError(str(exc)) from None
    try:
        mix, manifest = F.forge(
            records, dist, mt, seed=cfg["seed"], eval_exclusion=exclusion,
            capfilt_max_per_phrase=sec["capfilt"]["max_per_phrase"],
            capfilt_min_occurrences=sec["capfilt"]["min_occurrences"],
            assignment=sec["assignment"], workers=sec["workers"],
        )
    except MTError as exc:
        raise CLIError(f"translation failed: {exc}", code=3) from None
    F.write_mix(mix, out / "mix.jsonl")
    F.write_manifest(manifest, out / "manifest.json")
    logger.info("wrote %d examples (%d dropped) to %s", manifest["total"], manifest["excluded_dropped"], out)
    return out / "mix.jsonl"


def _stage(defaults: dict, given: dict, seed: int) -> StageConfig:
    d = {**defaults, "seed": seed, **given}
    if d["warmup_steps"] > d["total_steps"]:
        d["warmup_steps"] = d["total_steps"]
    return StageConfig.from_dict(d)


def cmd_train(cfg: dict, args) -> Path:
    sec = cfg["train"]
    if args.preset:
        sec["preset"] = args.preset
    _require(sec, "mix", "images", where="train")
    if sec["preset"] not in ABLATION_PRESETS:
        raise CLIError(f"unknown preset {sec['preset']!r}; choose from {sorted(ABLATION_PRESETS)}")
    out = Path(cfg["output"])
    write_resolved(cfg, out, "train")
    torch.use_deterministic_algorithms(True)
    mix = F.read_mix(_path(sec["mix"], "mix file"))
    images = ImageStore.from_npz(_path(sec["images"], "image archive"))
    model = build_model(ModelConfig.from_dict(sec["model"]), seed=cfg["seed"])
    pre = sec["pretrain_lm"]
    if pre["steps"]:
        texts = sorted({t for ex in mix for t in (ex.prompt, ex.target)})
        pretrain_lm(model, texts, steps=pre["steps"], batch_size=pre["batch_size"], lr=pre["lr"], seed=cfg["seed"])
    warm = _stage(WARMUP_DEFAULTS.to_dict(), sec["warmup"], cfg["seed"])
    realign = _stage(REALIGN_DEFAULTS.to_dict(), sec["realign"], cfg["seed"])
    try:
        run_alignment(model, mix, images, ABLATION_PRESETS[sec["preset"]], warm, realign, out)
    except TrainingDiverged as exc:
        raise CLIError(f"training diverged: {exc}", code=4) from None
    path = save_checkpoint(model, out / "final.safetensors", Stage.REALIGN.value, {"preset": sec["preset"]})
    logger.info("saved %s", path)
    return path


def task_examples(task: str, rows: list) -> list:
    """Training examples for a downstream task, rendered with its evaluation template."""
    examples = []
    for r in rows:
        ans = gold_answer(task, r)
        target = ans if isinstance(ans, str) else ans[0]
        examples.append(F.InstructionExample(
            example_id=r["example_id"], dataset=task, task=task, language=r["language"],
            prompt=prompt_for_gold(task, r), target=target, image_ids=list(r["image_ids"]),
            source=r["example_id"],
        ))
    return examples


def cmd_finetune(cfg: dict, args) -> Path:
    sec = cfg["finetune"]
    _require(sec, "task", "data", "images", "checkpoint", where="finetune")
    out = Path(cfg["output"])
    write_resolved(cfg, out, "finetune")
    torch.use_deterministic_algorithms(True)
    model, _ = load_checkpoint(_path(sec["checkpoint"], "checkpoint"))
    try:
        merge_lora(model)
    except ValueError:
        pass  # checkpoint was trained without adapters
    rows = [r for r in read_jsonl(sec["data"]) if r["language"] == "en"]
    images = ImageStore.from_npz(_path(sec["images"], "image archive"))
    lora = LoraConfig(**sec["lora"]) if sec["lora"] else None
    data = task_examples(sec["task"], rows)
    stage = finetune_config(sec["task"], len(data), sec["micro_batch_size"], cfg["seed"], lora, sec["max_steps"])
    try:
        run_stage(model, data, images, stage, log_path=out / "finetune_metrics.jsonl")
    except TrainingDiverged as exc:
        raise CLIError(f"training diverged: {exc}", code=4) from None
    return save_checkpoint(model, out / f"finetune-{sec['task']}.safetensors", Stage.FINETUNE.value)


def cmd_generate(cfg: dict, args) -> Path:
    sec = cfg["generate"]
    _require(sec, "checkpoint", "task", "gold", "images", where="generate")
    task = get_task(sec["task"])
    gen = GenConfig(**{"length_penalty": -1.0 if task.classification else 1.0, **sec["gen"]})
    sec["gen"] = gen.to_dict()
    out = Path(cfg["output"])
    write_resolved(cfg, out, "generate")
    model, _ = load_checkpoint(_path(sec["checkpoint"], "checkpoint"))
    model.eval()
    images = ImageStore.from_npz(_path(sec["images"], "image archive"))
    path = out / "predictions.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for g in read_jsonl(sec["gold"]):
            ids = g["image_ids"]
            if len(ids) != task.num_images:
                raise CLIError(f"{g['example_id']}: {task.name} expects {task.num_images} image(s)")
            res = generate(model, [images[i] for i in ids], prompt_for_gold(task.name, g), gen)
            fh.write(json.dumps({"example_id": g["example_id"], "language": g["language"],
                                 "prediction": res["text"], "score": res["score"],
                                 "truncated": res["truncated"]}, ensure_ascii=False) + "\n")
    return path


def cmd_evaluate(cfg: dict, args) -> Path:
    sec = cfg["evaluate"]
    if args.plot:
        sec["plot"] = True
    _require(sec, "task", "gold", "predictions", where="evaluate")
    out = Path(cfg["output"])
    write_resolved(cfg, out, "evaluate")
    gold = read_jsonl(sec["gold"])
    preds = read_jsonl(sec["predictions"])
    try:
        report = evaluate_task(preds, gold, sec["task"], Segmenter(), sec["normalize"],
                               predictions_source=Path(sec["predictions"]).name)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    if sec["plot"]:
        plot_report(report, out / "report.png")
    print(report.to_table(), end="")
    return out / "report.json"


def cmd_toy_data(args) -> Path:
    from .toy import write_toy_corpora

    out = Path(args.output or "toy")
    paths = write_toy_corpora(out / "data", seed=args.seed or 0)
    langs = {"en": 0.4, "de": 0.06, "fr": 0.1, "es": 0.1, "zh": 0.1, "ja": 0.08, "ru": 0.1, "bn": 0.06}
    config = {
        "seed": args.seed or 0,
        "output": str(out),
        "forge": {
            "sources": {k: str(paths[k]) for k in F.DATASETS},
            "languages": langs,
            "exclusion": str(paths["exclusion"]),
            "capfilt": {"max_per_phrase": 30, "min_occurrences": 2},
            "mt": {"mock": True},
        },
        "train": {
            "mix": str(out / "forge" / "mix.jsonl"),
            "images": str(paths["images"]),
            "pretrain_lm": {"steps": 40},
            "warmup": {"lr": 5e-3, "warmup_steps": 2, "total_steps": 10, "batch_size": 8},
            "realign": {"lr": 3e-3, "warmup_steps": 3, "total_steps": 20, "batch_size": 8},
        },
        "generate": {
            "checkpoint": str(out / "train" / "final.safetensors"), "task": "xgqa",
            "gold": str(paths["gold_xgqa"]), "images": str(paths["images"]),
            "gen": {"beam_width": 3, "max_len": 12},
        },
        "evaluate": {
            "task": "xgqa", "gold": str(paths["gold_xgqa"]),
            "predictions": str(out / "generate" / "predictions.jsonl"),
        },
    }
    cfg_path = out / "toy.yaml"
    cfg_path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    print(cfg_path)
    return cfg_path


COMMANDS = {
    "forge": cmd_forge,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvlm", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["toy-data"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--output", help="output directory (overrides config)")
        if name == "forge":
            p.add_argument("--mt-endpoint", help=f"MT service URL (else ${ENDPOINT_ENV})")
            p.add_argument("--mock-mt", action="store_true", help="use the deterministic mock translator")
        if name == "train":
            p.add_argument("--preset", choices=sorted(ABLATION_PRESETS))
        if name == "evaluate":
            p.add_argument("--plot", action="store_true", help="also write a per-language bar chart")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "toy-data":
            cmd_toy_data(args)
            return 0
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg["seed"] = args.seed
        cfg["output"] = args.output or str(Path(cfg["output"]) / args.command)
        for attr in ("mt_endpoint", "mock_mt", "preset", "plot"):
            if not hasattr(args, attr):
                setattr(args, attr, None)
        if args.command == "forge" and not args.mt_endpoint and os.environ.get(ENDPOINT_ENV):
            args.mt_endpoint = os.environ[ENDPOINT_ENV]
        COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        print(f"mvlm {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
