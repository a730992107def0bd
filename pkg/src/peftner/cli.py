"""Command-line entry point: stage orchestration, key=value run configs, and
the carbon-footprint estimator."""

from __future__ import annotations

import os


def _apply_thread_cap() -> None:
    # PEFTNER_THREADS caps worker parallelism; must land in the BLAS env vars
    # before numpy loads, hence at module import.
    cap = os.environ.get("PEFTNER_THREADS")
    if cap and cap.isdigit():
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, hpo, lora, textprep, train
from .autodiff import make_rng
from .corpus import LabeledSequence, label_inventory, parse_tokens, read_conll, write_conll
from .encoder import Encoder, EncoderConfig, load_backbone, save_backbone
from .textprep import Vocabulary, build_vocab, tokenize_words


class ConfigError(Exception):
    pass


class NegativeInput(Exception):
    pass


# -- carbon accounting ----------------------------------------------------------


@dataclass
class CarbonReport:
    power_kw: float
    hours: float
    energy_kwh: float
    intensity_g_per_kwh: float
    kg_co2: float


def estimate_carbon(power_kw: float, hours: float, intensity_g_per_kwh: float) -> CarbonReport:
    """energy_kwh = power_kw * hours; kg_co2 = energy_kwh * intensity / 1000."""
    if power_kw < 0 or hours < 0 or intensity_g_per_kwh < 0:
        raise NegativeInput("power, hours, and intensity must all be >= 0")
    energy = power_kw * hours
    return CarbonReport(power_kw, hours, energy, intensity_g_per_kwh,
                        energy * intensity_g_per_kwh / 1000.0)


# -- run configuration ------------------------------------------------------------

# key -> (type, default); default None marks the key required when its command
# runs. type "path" values are read-role inputs checked for existence.
_SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", None),
    "vocab.target_size": ("int", 5000),
    "encoder.d_model": ("int", 256),
    "encoder.n_layers": ("int", 2),
    "encoder.n_heads": ("int", 4),
    "encoder.d_ff": ("int", 1024),
    "encoder.max_positions": ("int", 512),
    "encoder.rel_buckets": ("int", 32),
    "encoder.attention_mode": ("str", "standard"),
    "encoder.dropout": ("float", 0.1),
    "lora.rank": ("int", 16),
    "lora.alpha": ("float", 32.0),
    "lora.dropout": ("float", 0.05),
    "lora.targets": ("str", "query,value"),
    "dapt.corpus": ("path", None),
    "dapt.heldout": ("path", None),
    "dapt.epochs": ("int", 3),
    "dapt.peak_lr": ("float", 0.01),
    "dapt.batch_size": ("int", 16),
    "dapt.grad_accum_steps": ("int", 2),
    "dapt.warmup_ratio": ("float", 0.1),
    "dapt.warmup_steps": ("int", 0),  # 0 = use the ratio
    "dapt.weight_decay": ("float", 0.0),
    "dapt.mask_rate": ("float", 0.15),
    "finetune.train": ("path", None),
    "finetune.dev": ("path", None),
    "finetune.backbone": ("path", None),
    "finetune.vocab": ("path", None),
    "finetune.epochs": ("int", 8),
    "finetune.patience": ("int", 3),
    "finetune.peak_lr": ("float", 0.01),
    "finetune.batch_size": ("int", 32),
    "finetune.weight_decay": ("float", 0.01),
    "finetune.warmup_ratio": ("float", 0.1),
    "finetune.label_smoothing": ("float", 0.1),
    "finetune.grad_accum_steps": ("int", 1),
    "hpo.train": ("path", None),
    "hpo.dev": ("path", None),
    "hpo.backbone": ("path", None),
    "hpo.vocab": ("path", None),
    "hpo.n_trials": ("int", 40),
    "hpo.max_epochs": ("int", 2),
    "hpo.patience": ("int", 3),
    "hpo.label_smoothing": ("float", 0.1),
    "hpo.max_sentences": ("int", 0),  # 0 = use the full training split
    "evaluate.gold": ("path", None),
    "evaluate.pred": ("path", None),
    "evaluate.pred_b": ("path", ""),  # optional second system for significance
    "evaluate.iterations": ("int", 10000),
    "predict.input": ("path", None),
    "predict.backbone": ("path", None),
    "predict.checkpoint": ("path", None),
    "predict.vocab": ("path", None),
    "predict.max_len": ("int", 256),
    "predict.overlap": ("int", 50),
    "predict.batch_size": ("int", 64),
}


class RunConfig:
    def __init__(self, values: dict, config_hash: str):
        self.values = values
        self.config_hash = config_hash

    def get(self, key: str):
        return self.values[key]

    def path(self, key: str) -> Path:
        value = self.values.get(key)
        if value in (None, ""):
            raise ConfigError(f"config key {key!r} is required by this command")
        p = Path(value)
        if not p.exists():
            raise ConfigError(f"config key {key!r}: path {p} does not exist")
        return p


def load_config(path: str | Path, seed_override: int | None = None) -> RunConfig:
    raw = Path(path).read_bytes()
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for line_no, line in enumerate(raw.decode("utf-8").split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {line_no}: unknown config key {key!r}")
        kind, _ = _SCHEMA[key]
        try:
            if kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"line {line_no}: cannot parse {value!r} as {kind}") from None
    if seed_override is not None:
        values["seed"] = seed_override
    if values["seed"] is None:
        raise ConfigError("a seed is mandatory: set 'seed' in the config or pass --seed")
    return RunConfig(values, hashlib.sha256(raw).hexdigest()[:16])


def _provenance(cfg: RunConfig, stage: str) -> dict:
    return {"config_hash": cfg.config_hash, "seed": cfg.get("seed"), "stage": stage}


def _provenance_header(cfg: RunConfig, stage: str) -> str:
    p = _provenance(cfg, stage)
    return f"# config_hash={p['config_hash']} seed={p['seed']} stage={p['stage']}\n"


def _encoder_config(cfg: RunConfig, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=vocab_size,
        d_model=cfg.get("encoder.d_model"),
        n_layers=cfg.get("encoder.n_layers"),
        n_heads=cfg.get("encoder.n_heads"),
        d_ff=cfg.get("encoder.d_ff"),
        max_positions=cfg.get("encoder.max_positions"),
        relative_position_buckets=cfg.get("encoder.rel_buckets"),
        attention_mode=cfg.get("encoder.attention_mode"),
        dropout=cfg.get("encoder.dropout"),
    )


def _lora_config(cfg: RunConfig) -> lora.LoraConfig:
    targets = tuple(t.strip() for t in cfg.get("lora.targets").split(",") if t.strip())
    return lora.LoraConfig(
        rank=cfg.get("lora.rank"),
        alpha=cfg.get("lora.alpha"),
        dropout=cfg.get("lora.dropout"),
        targets=targets,
    )


def _tokenize_corpus(sentences, vocab: Vocabulary) -> list[np.ndarray]:
    pieces = []
    for words in sentences:
        ids, _, _ = tokenize_words(words, vocab)
        if len(ids):
            pieces.append(ids)
    return pieces


# -- commands -------------------------------------------------------------------


def cmd_dapt(cfg: RunConfig, out: Path) -> int:
    seed = cfg.get("seed")
    sentences = parse_tokens(cfg.path("dapt.corpus").read_text(encoding="utf-8"))
    heldout_sentences = parse_tokens(cfg.path("dapt.heldout").read_text(encoding="utf-8"))
    vocab = build_vocab(sentences, cfg.get("vocab.target_size"))
    vocab.save(out / "vocab.txt")

    model = Encoder(_encoder_config(cfg, len(vocab)), make_rng(seed, 10))
    plan = train.TrainPlan(
        peak_lr=cfg.get("dapt.peak_lr"),
        batch_size=cfg.get("dapt.batch_size"),
        epochs=cfg.get("dapt.epochs"),
        seed=seed,
        weight_decay=cfg.get("dapt.weight_decay"),
        warmup_ratio=cfg.get("dapt.warmup_ratio"),
        warmup_steps=cfg.get("dapt.warmup_steps") or None,
        grad_accum_steps=cfg.get("dapt.grad_accum_steps"),
        mask_rate=cfg.get("dapt.mask_rate"),
    )
    result = train.train_dapt(
        model,
        _tokenize_corpus(sentences, vocab),
        _tokenize_corpus(heldout_sentences, vocab),
        plan,
        _lora_config(cfg),
    )
    merged = lora.merge(result.model)
    save_backbone(merged, out / "backbone.ckpt", _provenance(cfg, "dapt"))

    log_lines = [_provenance_header(cfg, "dapt").rstrip("\n")]
    for rec in result.epoch_log:
        log_lines.append(
            f"epoch={rec['epoch']} train_loss={rec['train_loss']:.6f} "
            f"heldout_ppl={rec['heldout_ppl']:.6f} lr={rec['lr']:.8g}"
        )
    (out / "dapt_log.txt").write_text("\n".join(log_lines) + "\n", encoding="utf-8")

    reduction = result.reduction_percent
    report = (
        _provenance_header(cfg, "dapt")
        + f"ppl_before={result.ppl_before:.6f}\n"
        + f"ppl_after={result.ppl_after:.6f}\n"
        + f"reduction_percent={reduction:.6f}\n"
    )
    (out / "dapt_report.txt").write_text(report, encoding="utf-8")
    print(f"ppl_before={result.ppl_before:.6f} ppl_after={result.ppl_after:.6f} "
          f"reduction_percent={reduction:.4f}")
    return 0


def cmd_finetune(cfg: RunConfig, out: Path) -> int:
    seed = cfg.get("seed")
    vocab = Vocabulary.load(cfg.path("finetune.vocab"))
    model, _ = load_backbone(cfg.path("finetune.backbone"))
    train_seqs = read_conll(cfg.path("finetune.train"))
    dev_seqs = read_conll(cfg.path("finetune.dev"))
    labels = label_inventory(train_seqs)
    plan = train.TrainPlan(
        peak_lr=cfg.get("finetune.peak_lr"),
        batch_size=cfg.get("finetune.batch_size"),
        epochs=cfg.get("finetune.epochs"),
        seed=seed,
        weight_decay=cfg.get("finetune.weight_decay"),
        warmup_ratio=cfg.get("finetune.warmup_ratio"),
        patience=cfg.get("finetune.patience"),
        label_smoothing=cfg.get("finetune.label_smoothing"),
        grad_accum_steps=cfg.get("finetune.grad_accum_steps"),
    )
    result = train.train_finetune(model, train_seqs, dev_seqs, plan, vocab, labels,
                                  _lora_config(cfg))
    lora.save_adapter(result.adapter, out / "task.ckpt", head=result.head,
                      provenance=_provenance(cfg, "finetune"))
    log_lines = [_provenance_header(cfg, "finetune").rstrip("\n")]
    for rec in result.history:
        log_lines.append(
            f"epoch={rec['epoch']} train_loss={rec['train_loss']:.6f} "
            f"dev_f1={rec['dev_f1']:.6f} lr={rec['lr']:.8g}"
        )
    (out / "train_log.txt").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    print(f"best_epoch={result.best_epoch} best_dev_f1={result.best_f1:.6f} "
          f"stopped_epoch={result.stopped_epoch}")
    return 0


def cmd_hpo(cfg: RunConfig, out: Path) -> int:
    seed = cfg.get("seed")
    vocab = Vocabulary.load(cfg.path("hpo.vocab"))
    backbone, _ = load_backbone(cfg.path("hpo.backbone"))
    train_seqs = read_conll(cfg.path("hpo.train"))
    dev_seqs = read_conll(cfg.path("hpo.dev"))
    cap = cfg.get("hpo.max_sentences")
    if cap:
        train_seqs = train_seqs[:cap]
    labels = label_inventory(train_seqs)
    lora_cfg = _lora_config(cfg)

    def objective(config: dict) -> float:
        plan = train.TrainPlan(
            peak_lr=config["lr"],
            batch_size=config["batch_size"],
            epochs=cfg.get("hpo.max_epochs"),
            seed=seed,
            weight_decay=config["weight_decay"],
            warmup_ratio=config["warmup_ratio"],
            patience=cfg.get("hpo.patience"),
            label_smoothing=cfg.get("hpo.label_smoothing"),
        )
        result = train.train_finetune(backbone.clone(), train_seqs, dev_seqs, plan,
                                      vocab, labels, lora_cfg)
        return result.best_f1

    best, history = hpo.run_study(
        objective, hpo.default_space(), n_trials=cfg.get("hpo.n_trials"),
        seed=seed, journal_path=out / "journal.jsonl",
    )
    lines = [_provenance_header(cfg, "hpo").rstrip("\n"),
             f"best_trial={best.trial_id}",
             f"best_value={best.value:.6f}"]
    for key in sorted(best.config):
        lines.append(f"{key}={best.config[key]}")
    (out / "best_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"best_trial={best.trial_id} best_value={best.value:.6f} "
          f"config={json.dumps(best.config, sort_keys=True)}")
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    gold = read_conll(cfg.path("evaluate.gold"))
    pred = read_conll(cfg.path("evaluate.pred"))
    report = evaluation.score_entities(gold, pred)
    text = _provenance_header(cfg, "evaluate") + evaluation.format_report(report)
    exit_code = 0
    if cfg.get("evaluate.pred_b"):
        pred_b = read_conll(cfg.path("evaluate.pred_b"))
        report_b = evaluation.score_entities(gold, pred_b)
        p_value = evaluation.approx_randomization_test(
            gold, pred, pred_b,
            iterations=cfg.get("evaluate.iterations"),
            rng=make_rng(cfg.get("seed"), 50),
        )
        significant = p_value < 0.05
        text += (
            f"\ncomparison.micro_f1_a={report.micro.f1:.6f}"
            f"\ncomparison.micro_f1_b={report_b.micro.f1:.6f}"
            f"\ncomparison.p_value={p_value:.6f}"
            f"\ncomparison.alpha=0.05"
            f"\ncomparison.significant={'yes' if significant else 'no'}\n"
        )
        exit_code = 0 if significant else 3
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return exit_code


def cmd_predict(cfg: RunConfig, out: Path) -> int:
    vocab = Vocabulary.load(cfg.path("predict.vocab"))
    model, _ = load_backbone(cfg.path("predict.backbone"))
    state, head, _ = lora.load_adapter(cfg.path("predict.checkpoint"))
    if head is None:
        raise ConfigError("predict.checkpoint carries no classification head")
    lora.apply_adapter(model, state)
    sentences = parse_tokens(cfg.path("predict.input").read_text(encoding="utf-8"))
    predictions = train.predict_corpus(
        model, head, sentences, vocab,
        max_len=cfg.get("predict.max_len"),
        overlap=cfg.get("predict.overlap"),
        batch_size=cfg.get("predict.batch_size"),
    )
    labeled = [LabeledSequence(list(words), labels)
               for words, labels in zip(sentences, predictions)]
    write_conll(out / "predictions.conll", labeled)
    print(f"sentences={len(labeled)} output={out / 'predictions.conll'}")
    return 0


def cmd_carbon(args) -> int:
    report = estimate_carbon(args.power_kw, args.hours, args.intensity)
    lines = (
        f"power_kw={report.power_kw:.6f}\n"
        f"hours={report.hours:.6f}\n"
        f"energy_kwh={report.energy_kwh:.6f}\n"
        f"intensity_g_per_kwh={report.intensity_g_per_kwh:.6f}\n"
        f"kg_co2={report.kg_co2:.6f}\n"
    )
    print(lines, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "carbon_report.txt").write_text(lines, encoding="utf-8")
    return 0


# -- entry point -------------------------------------------------------------------


def _add_config_args(sub):
    sub.add_argument("--config", required=True, help="key=value run config")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftner", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("dapt", "finetune", "hpo", "evaluate", "predict"):
        _add_config_args(subs.add_parser(name))
    carbon = subs.add_parser("carbon")
    carbon.add_argument("--power-kw", type=float, required=True, dest="power_kw")
    carbon.add_argument("--hours", type=float, required=True)
    carbon.add_argument("--intensity", type=float, required=True,
                        help="grid intensity in g CO2 per kWh")
    carbon.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "dapt": cmd_dapt,
    "finetune": cmd_finetune,
    "hpo": cmd_hpo,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "carbon":
            return cmd_carbon(args)
        cfg = load_config(args.config, seed_override=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error code=ConfigError detail={exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error code={type(exc).__name__} detail={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
