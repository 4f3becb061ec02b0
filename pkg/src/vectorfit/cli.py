"""Command-line entry point: ``pretrain``, ``finetune``, ``analyze``, ``ablate``.

Config files are flat ``key = value`` lines; ``#`` starts a comment. Keys are
``model.<field>``, ``data.<field>``, ``train.<field>``, ``avf.<field>`` and the
top-level ``out_dir``, ``seeds``, ``source``, ``ablate``. Values are typed by
the field they set: integers, floats, ``true``/``false``, ``none`` for optional
fields, and comma-separated lists for ``seeds`` and ``ablate``. ``avf.t_i`` and
``avf.t_f`` also accept ``auto`` (eleven epochs and one epoch of steps).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import (
    avf_ledger,
    delta_spectrum,
    sigma_variation,
    strength_heatmap,
    write_ledger_csv,
    write_variation_csv,
    LEDGER_HEADER,
)
from .avf import AVFConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetDescriptor, load_dataset
from .errors import CheckpointError, ContractError, DimensionError, NumericalError, ValidationError
from .models import VARIANTS, ModelSpec, build_model, count_total, count_trainable
from .trainer import MODES, RunHistory, TrainConfig, Trainer, base_model, evaluate, total_steps

log = logging.getLogger("vectorfit")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
AVF_DEFAULTS = {"t_i": "auto", "t_f": "auto", "n_f": 5, "k": 3, "beta": 0.99, "release_after_final": True}
ABLATE_HEADER = ("entry", "trainable", "total", "fraction", "loss_mean", "loss_std",
                 "acc_mean", "acc_std", "n_ok", "errors")


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DatasetDescriptor = field(default_factory=lambda: DatasetDescriptor(kind="char_lm", path="bundled:a"))
    train: dict = field(default_factory=dict)   # TrainConfig fields except ``avf``
    avf: dict | None = None                     # AVFConfig fields; ``auto`` allowed for t_i / t_f
    out_dir: str = "runs"
    seeds: tuple[int, ...] = (0,)
    source: str = ""
    ablate: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        bad = [k for k in self.train if k not in _TRAIN_FIELDS or k == "avf"]
        if bad:
            raise ValidationError(f"unknown train keys {bad}")
        if self.avf is not None:
            bad = [k for k in self.avf if k not in AVF_DEFAULTS]
            if bad:
                raise ValidationError(f"unknown avf keys {bad}")
        for e in self.ablate:
            if e not in VARIANTS and e not in MODES:
                raise ValidationError(f"ablate entry {e!r} is neither a variant nor a mode")

    def to_text(self) -> str:
        lines = []
        for prefix, obj in (("model", self.model), ("data", self.data)):
            for f in dataclasses.fields(obj):
                lines.append(f"{prefix}.{f.name} = {_fmt(getattr(obj, f.name))}")
        for k in sorted(self.train):
            lines.append(f"train.{k} = {_fmt(self.train[k])}")
        for k in sorted(self.avf or {}):
            lines.append(f"avf.{k} = {_fmt(self.avf[k])}")
        lines.append(f"out_dir = {self.out_dir}")
        lines.append(f"seeds = {','.join(map(str, self.seeds))}")
        lines.append(f"source = {self.source}")
        lines.append(f"ablate = {','.join(self.ablate)}")
        return "\n".join(lines) + "\n"


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, tp, key: str):
    """Convert ``raw`` to the annotated type ``tp``."""
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        if raw.lower() == "none" and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ValidationError(f"{key}: cannot read {raw!r} as {tp.__name__}") from None
    raise ValidationError(f"{key}: unsupported field type {tp}")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _avf_value(key: str, raw: str):
    if key in ("t_i", "t_f") and raw == "auto":
        return "auto"
    return _coerce(raw, _hints(AVFConfig)[key], f"avf.{key}")


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs[k] = v
    pairs.update(overrides or {})
    return config_from_pairs(pairs)


def config_from_pairs(pairs: dict[str, str]) -> ExperimentConfig:
    model, data, train, avf = {}, {}, {}, None
    top = {}
    model_t, data_t, train_t = _hints(ModelSpec), _hints(DatasetDescriptor), _hints(TrainConfig)
    for key, raw in pairs.items():
        section, _, name = key.partition(".")
        if section == "model" and name in model_t:
            model[name] = _coerce(raw, model_t[name], key)
        elif section == "data" and name in data_t:
            data[name] = _coerce(raw, data_t[name], key)
        elif section == "train" and name in train_t and name != "avf":
            train[name] = _coerce(raw, train_t[name], key)
        elif section == "avf" and name in AVF_DEFAULTS:
            avf = {} if avf is None else avf
            avf[name] = _avf_value(name, raw)
        elif key in ("out_dir", "source"):
            top[key] = raw
        elif key == "seeds":
            try:
                top[key] = tuple(int(s) for s in raw.split(",") if s.strip())
            except ValueError:
                raise ValidationError(f"seeds: expected comma-separated integers, got {raw!r}") from None
        elif key == "ablate":
            top[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
        else:
            raise ValidationError(f"unknown config key {key!r}")
    if "kind" not in data:
        data.setdefault("kind", "char_lm")
        data.setdefault("path", "bundled:a")
    return ExperimentConfig(ModelSpec(**model), DatasetDescriptor(**data), train, avf, **top)


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), overrides)


# -- resolution --------------------------------------------------------------

def resolve_avf(raw: dict, steps_per_epoch: int) -> AVFConfig:
    vals = {**AVF_DEFAULTS, **raw}
    if vals["t_i"] == "auto":
        vals["t_i"] = 11 * steps_per_epoch
    if vals["t_f"] == "auto":
        vals["t_f"] = steps_per_epoch
    return AVFConfig(**vals)


def train_config(exp: ExperimentConfig, data, seed: int, entry: str | None = None) -> TrainConfig:
    """TrainConfig for one run; ``entry`` (a variant or mode name) overrides the configured one."""
    tr = dict(exp.train)
    tr["seed"] = seed
    if entry is not None:
        if entry in VARIANTS:
            tr["mode"], tr["variant"] = "vectorfit", entry
        else:
            tr["mode"] = entry
    mode = tr.get("mode", "vectorfit")
    variant = tr.get("variant", "full_avf")
    wants_avf = (mode == "vectorfit" and variant == "full_avf") or mode == "random_freeze"
    if mode != "vectorfit" and variant == "full_avf":
        tr["variant"] = "full_no_avf"  # other modes use the same trainable set, without the schedule
    if exp.avf is not None and not wants_avf and entry is None:
        raise ValidationError(f"an avf schedule was given but mode={mode} variant={variant} does not use one")
    if wants_avf:
        spe = data.steps_per_epoch(tr.get("batch_size", 32))
        tr["avf"] = resolve_avf(exp.avf or {}, spe)
    return TrainConfig(**tr)


def _dtype(exp: ExperimentConfig):
    return exp.model.np_dtype


def _check_data(spec: ModelSpec, data) -> None:
    if spec.architecture == "mlp":
        if data.task != "classification":
            raise ValidationError("the mlp architecture needs a classification dataset")
        if data.n_features != spec.input_dim or data.n_classes > spec.classes:
            raise ValidationError(
                f"dataset has {data.n_features} features / {data.n_classes} classes; "
                f"model expects {spec.input_dim} / {spec.classes}")
    elif data.task != "lm":
        raise ValidationError("the transformer architecture needs a char_lm dataset")


# -- commands ----------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_pretrain(exp: ExperimentConfig) -> Path:
    """Train a dense model on the source task and save ``pretrained.sfck``."""
    data = load_dataset(exp.data, _dtype(exp))
    _check_data(exp.model, data)
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr_kwargs = {k: v for k, v in exp.train.items() if k not in ("mode", "variant")}
    cfg = TrainConfig(**{**tr_kwargs, "seed": exp.seeds[0], "mode": "full_ft", "variant": "full_no_avf"})
    trainer = Trainer.create(exp.model, data, cfg, extra_meta={"experiment": exp.to_text()})
    history = trainer.run()
    path = out / "pretrained.sfck"
    digest = save_checkpoint(trainer.checkpoint(), path)
    history.write_csv(out / "history.csv")
    train_m, val_m = evaluate(trainer.model, data, "train"), evaluate(trainer.model, data, "val")
    _write_json(out / "pretrain_summary.json", {
        "train_loss": train_m["loss"], "train_accuracy": train_m["accuracy"],
        "val_loss": val_m["loss"], "val_accuracy": val_m["accuracy"],
        "steps": trainer.step, "sha256": digest,
    })
    log.info("pretrained %d steps -> %s", trainer.step, path)
    return path


def _source_model(exp: ExperimentConfig):
    if exp.source:
        return base_model(load_checkpoint(exp.source))
    return build_model(exp.model)


def run_finetune(exp: ExperimentConfig, seed: int, entry: str | None = None, out: Path | None = None,
                 data=None) -> dict:
    """One fine-tuning run; writes artifacts to ``out`` when given and returns the summary."""
    data = load_dataset(exp.data, _dtype(exp)) if data is None else data
    model = _source_model(exp)
    _check_data(model.spec, data)
    cfg = train_config(exp, data, seed, entry)
    trainer = Trainer.create(model, data, cfg, extra_meta={"experiment": exp.to_text()})
    before = evaluate(trainer.model, data)
    init = trainer.checkpoint()
    history = trainer.run()
    after = evaluate(trainer.model, data)
    trainable, total = count_trainable(trainer.model), count_total(trainer.model)
    summary = {
        "mode": cfg.mode, "variant": cfg.variant, "seed": seed, "steps": trainer.step,
        "initial_loss": before["loss"], "initial_accuracy": before["accuracy"],
        "final_loss": after["loss"], "final_accuracy": after["accuracy"],
        "final_train_loss": history.losses[-1] if history.losses else None,
        "trainable": trainable, "total": total, "trainable_fraction": trainable / total,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(init, out / "init.sfck")
        save_checkpoint(trainer.checkpoint(), out / "final.sfck")
        history.write_csv(out / "history.csv")
        history.write_registry_csv(out / "strength.csv")
        if history.grad_log is not None:
            arrays, meta = history.grad_log_arrays()
            save_checkpoint(Checkpoint(meta, arrays), out / "gradlog.sfck")
        _write_json(out / "summary.json", summary)
    return summary


def cmd_finetune(exp: ExperimentConfig) -> list[dict]:
    data = load_dataset(exp.data, _dtype(exp))
    base = Path(exp.out_dir)
    summaries = []
    for seed in exp.seeds:
        out = base if len(exp.seeds) == 1 else base / f"seed_{seed}"
        summaries.append(run_finetune(exp, seed, out=out, data=data))
    return summaries


def _read_registry_rows(path: Path) -> list[tuple]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["step"]), int(r["layer"]), r["module"], r["kind"], float(r["S"]),
                         float(r["S_ema"]), int(r["frozen"])))
    return rows


def cmd_analyze(init_path, final_path, out_dir, strength_path=None, gradlog_path=None) -> dict[str, Path]:
    """Write spectrum, strength, variation and ledger CSVs for one run."""
    init, final = load_checkpoint(init_path), load_checkpoint(final_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("spectrum", "strength", "variation", "ledger")}
    delta_spectrum(init, final).write_csv(paths["spectrum"])
    history = RunHistory()
    if strength_path is not None and Path(strength_path).is_file():
        history.registry_rows = _read_registry_rows(Path(strength_path))
    strength_heatmap(history).write_csv(paths["strength"])
    write_variation_csv(paths["variation"], sigma_variation(init, final))
    if gradlog_path is not None and Path(gradlog_path).is_file():
        g = load_checkpoint(gradlog_path)
        write_ledger_csv(paths["ledger"], avf_ledger(RunHistory.from_grad_log_arrays(g.arrays, g.meta)))
    else:
        log.warning("no gradient log; ledger.csv holds only the header")
        with open(paths["ledger"], "w", newline="") as fh:
            csv.writer(fh).writerow(LEDGER_HEADER)
    return paths


def cmd_ablate(exp: ExperimentConfig) -> Path:
    """Run every (entry, seed) cell and tabulate mean/std of held-out loss and accuracy."""
    entries = exp.ablate or (exp.train.get("variant", "full_avf"),)
    data = load_dataset(exp.data, _dtype(exp))
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in entries:
        losses, accs, errors, counts = [], [], [], None
        for seed in exp.seeds:
            try:
                s = run_finetune(exp, seed, entry, data=data)
            except (ValidationError, ContractError, DimensionError, NumericalError, OSError) as exc:
                errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                continue
            losses.append(s["final_loss"])
            accs.append(s["final_accuracy"])
            counts = (s["trainable"], s["total"])
        trainable, total = counts if counts else ("", "")
        stat = lambda xs, f: repr(float(f(xs))) if xs else ""  # noqa: E731
        rows.append((entry, trainable, total, repr(trainable / total) if counts else "",
                     stat(losses, np.mean), stat(losses, np.std), stat(accs, np.mean), stat(accs, np.std),
                     len(losses), "; ".join(errors)))
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATE_HEADER)
        w.writerows(rows)
    return path


# -- argument handling ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vectorfit", description="Singular-vector fine-tuning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "finetune", "ablate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant")
        sp.add_argument("--mode")
        sp.add_argument("--lr")
        sp.add_argument("--avf.t-i", dest="avf_t_i")
        sp.add_argument("--avf.t-f", dest="avf_t_f")
        sp.add_argument("--avf.n-f", dest="avf_n_f")
        sp.add_argument("--avf.k", dest="avf_k")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--source", help="pretrained checkpoint (finetune/ablate)")
        sp.add_argument("--data-path", help="dataset file (csv or text)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    sp = sub.add_parser("analyze")
    sp.add_argument("--run", help="finetune output directory (uses init/final.sfck, strength.csv, gradlog.sfck)")
    sp.add_argument("--init")
    sp.add_argument("--final")
    sp.add_argument("--history", help="strength.csv from the run")
    sp.add_argument("--gradlog")
    sp.add_argument("--out", required=True)
    return p


def _overrides(args) -> dict[str, str]:
    o = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        o[k.strip()] = v.strip()
    simple = {"seed": "seeds", "variant": "train.variant", "mode": "train.mode", "lr": "train.lr",
              "avf_t_i": "avf.t_i", "avf_t_f": "avf.t_f", "avf_n_f": "avf.n_f", "avf_k": "avf.k",
              "out": "out_dir", "source": "source", "data_path": "data.path"}
    for attr, key in simple.items():
        val = getattr(args, attr)
        if val is not None:
            o[key] = str(val)
    return o


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze":
            if args.run:
                run = Path(args.run)
                cmd_analyze(run / "init.sfck", run / "final.sfck", args.out, run / "strength.csv",
                            run / "gradlog.sfck")
            elif args.init and args.final:
                cmd_analyze(args.init, args.final, args.out, args.history, args.gradlog)
            else:
                raise ValidationError("analyze needs --run or both --init and --final")
            return EXIT_OK
        overrides = _overrides(args)
        exp = load_config(args.config, overrides) if args.config else config_from_pairs(overrides)
        if args.command == "pretrain":
            print(cmd_pretrain(exp))
        elif args.command == "finetune":
            for s in cmd_finetune(exp):
                print(json.dumps(s, sort_keys=True))
        else:
            print(cmd_ablate(exp))
        return EXIT_OK
    except (ValidationError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
