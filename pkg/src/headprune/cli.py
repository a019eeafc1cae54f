"""Command-line entry point: ``headprune train | prune | analyze | report | rerun``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 ok, 2 configuration, 3 divergence, 4 checkpoint, 5 data mismatch.
Set HEADPRUNE_LOG (DEBUG, INFO, WARNING) for more or less logging.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (Thresholds, build_profiles, collect_records, write_grid, write_profiles_csv,
                       write_profiles_json, write_retained_table)
from .data import (AnnotatedCorpus, DataError, attach_annotations, generate_task, load_corpus, read_conllu)
from .gates import GateSet
from .lrp import head_relevance
from .model import ATTENTION_TYPES, CheckpointError, HeadId, ModelConfig, load_checkpoint, save_checkpoint
from .training import (TrainConfig, TrainingDiverged, default_lambdas, lambda_sweep, model_for, token_accuracy,
                       train)

log = logging.getLogger("headprune")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_DATA = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "task": {"kind": "copy", "size": 4000, "seed": 0, "heldout_size": 300, "heldout_seed": 1},
    "model": {"num_layers": 2, "num_heads": 4, "d_model": 64, "d_ff": 128},
    "train": {"max_steps": 1500, "batch_tokens": 512, "warmup_steps": 400, "scale": 0.5},
    "prune": {"lambdas": None, "max_steps": 600, "gate_types": ["encoder-self"], "freeze_decoder": False},
    "analysis": {"rarity_cutoff": 500, "positional": 0.9, "syntactic_margin": 0.10,
                 "syntactic_relative": False, "relevance_batch_tokens": 256, "relevance_sentences": 200},
}


def load_config(path) -> dict:
    """Defaults overlaid with the YAML file at ``path`` (if any)."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    for section, values in user.items():
        if section not in cfg:
            raise ConfigError(f"{p}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{p}: section {section!r} must be a mapping")
        for k, v in values.items():
            if k not in cfg[section]:
                raise ConfigError(f"{p}: unknown key {section}.{k}")
            cfg[section][k] = v
    return cfg


def _train_config(cfg: dict, seed: int, **over) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in cfg["train"].items() if k in names}
    kw.update(over)
    try:
        return TrainConfig(seed=seed, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training settings: {exc}") from exc


def _gate_types(text) -> tuple[str, ...]:
    items = text.split(",") if isinstance(text, str) else list(text)
    items = tuple(t.strip() for t in items if t.strip())
    for t in items:
        if t not in ATTENTION_TYPES:
            raise ConfigError(f"unknown attention type {t!r}; expected some of {', '.join(ATTENTION_TYPES)}")
    return items


def _lambdas(text) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --lambda list {text!r}") from exc


def _corpora(cfg: dict, corpus_path) -> tuple[AnnotatedCorpus, AnnotatedCorpus]:
    """(training corpus, held-out corpus)."""
    t = cfg["task"]
    if corpus_path:
        corpus = load_corpus(corpus_path)
        n = max(1, len(corpus) // 10)
        heldout, train_part = corpus.split(n)
        return train_part, heldout
    try:
        train_c = generate_task(t["kind"], int(t["size"]), seed=int(t["seed"]))
        held = generate_task(t["kind"], int(t["heldout_size"]), seed=int(t["heldout_seed"]))
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    held.ranks = dict(train_c.ranks)
    return train_c, held


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_manifest(out: Path, command: str, args: dict, cfg: dict, seed: int, inputs: dict,
                   outputs: list[str], started: float, extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "args": args,
        "config_path": args.get("config"),
        "config": cfg,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        doc.update(extra)
    (out / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _seed(args, cfg) -> int:
    return int(args.seed) if args.seed is not None else int(cfg["train"].get("seed", 0) or 0)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg) -> dict:
    out = _out_dir(args.out)
    seed = _seed(args, cfg)
    corpus, held = _corpora(cfg, args.corpus)
    try:
        model = model_for(corpus, seed=seed, **cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model settings: {exc}") from exc
    tc = _train_config(cfg, seed)
    res = train(model, corpus, tc)
    acc = token_accuracy(model, held)
    log.info("trained %d steps, held-out accuracy %.4f", tc.max_steps, acc)
    save_checkpoint(out / "checkpoint.npz", model, meta={"task": cfg["task"], "train": tc.to_dict(),
                                                          "heldout_accuracy": acc})
    write_csv(out / "losses.csv", ["step", "loss"], [[i, _fmt(l)] for i, l in enumerate(res.losses, 1)])
    write_csv(out / "metrics.csv", ["metric", "value"], [["heldout_token_accuracy", _fmt(acc)]])
    return {"seed": seed, "inputs": {"corpus": args.corpus}, "outputs": ["checkpoint.npz", "losses.csv", "metrics.csv"]}


def _load(path):
    if not path:
        raise ConfigError("--checkpoint is required")
    return load_checkpoint(path)


def cmd_prune(args, cfg) -> dict:
    out = _out_dir(args.out)
    seed = _seed(args, cfg)
    base, _, meta = _load(args.checkpoint)
    corpus, held = _corpora(cfg, args.corpus)
    _check_vocab(base.config, corpus)
    pc = cfg["prune"]
    lambdas = _lambdas(args.lam) if args.lam else (pc["lambdas"] or default_lambdas())
    lambdas = sorted(float(x) for x in lambdas)
    gate_types = _gate_types(args.gate_types or pc["gate_types"])
    freeze = bool(args.freeze_decoder or pc["freeze_decoder"])
    tc = _train_config(cfg, seed, max_steps=int(pc["max_steps"]), gate_types=gate_types, freeze_decoder=freeze)
    report = lambda_sweep(base, corpus, lambdas, tc, held)
    outputs = ["sweep.csv"]
    rows = []
    decoder_ok = True
    base_state = base.state()
    for i, run in enumerate(report.runs):
        sub = f"lambda_{i:02d}"
        (out / sub).mkdir(exist_ok=True)
        (out / sub / "gates.tsv").write_text("\n".join(run.gates.report_lines()) + "\n", encoding="utf-8")
        save_checkpoint(out / sub / "checkpoint.npz", run.model, run.gates,
                        meta={"lambda": run.lam, "base": str(args.checkpoint)})
        outputs += [f"{sub}/gates.tsv", f"{sub}/checkpoint.npz"]
        if freeze:
            same = all(np.array_equal(run.model.params[k].data, base_state[k]) and
                       run.model.params[k].data.tobytes() == base_state[k].tobytes()
                       for k in base.decoder_params())
            decoder_ok &= same
        r = run.retained
        rows.append([_fmt(run.lam), run.counts_str(), r["encoder-self"], r["decoder-self"], r["decoder-encoder"],
                     _fmt(run.metric), _fmt(run.loss), _fmt(run.binarized)])
    write_csv(out / "sweep.csv", ["lambda", "retained_e/d/d-e", "encoder_self", "decoder_self", "decoder_encoder",
                                  "heldout_token_accuracy", "heldout_loss", "binarized_fraction"], rows)
    extra = {"freeze_decoder": freeze, "gate_types": list(gate_types), "lambdas": lambdas,
             "monotonicity_violations": [list(v) for v in report.violations]}
    if freeze:
        extra["decoder_unchanged"] = bool(decoder_ok)
        if not decoder_ok:
            log.error("decoder parameters changed although the decoder was frozen")
    return {"seed": seed, "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus},
            "outputs": outputs, "extra": extra}


def _check_vocab(config: ModelConfig, corpus: AnnotatedCorpus):
    if len(corpus.src_vocab) != config.src_vocab or len(corpus.tgt_vocab) != config.tgt_vocab:
        raise DataError(f"corpus vocabularies ({len(corpus.src_vocab)}/{len(corpus.tgt_vocab)}) do not match "
                        f"the checkpoint ({config.src_vocab}/{config.tgt_vocab})")


def _thresholds(cfg) -> Thresholds:
    a = cfg["analysis"]
    return Thresholds(positional=float(a["positional"]), syntactic_margin=float(a["syntactic_margin"]),
                      syntactic_relative=bool(a["syntactic_relative"]))


def _retained_heads(gates: GateSet | None, model_config: ModelConfig) -> list[HeadId]:
    every = [HeadId("encoder-self", l, h) for l in range(model_config.num_layers) for h in range(model_config.num_heads)]
    if gates is None or "encoder-self" not in gates.gated_types:
        return every
    disc = gates.discretize()
    return [hid for hid in every if disc[("encoder-self", hid.layer)][hid.head] > 0]


def cmd_analyze(args, cfg) -> dict:
    out = _out_dir(args.out)
    seed = _seed(args, cfg)
    model, gates, _ = _load(args.checkpoint)
    _, held = _corpora(cfg, args.corpus)
    _check_vocab(model.config, held)
    if args.annotations:
        bad = attach_annotations(held, read_conllu(args.annotations))
        if bad:
            raise DataError(f"{bad} annotated sentences do not match the corpus tokenization")
    a = cfg["analysis"]
    disc = {k: v for k, v in gates.discretize().items()} if gates is not None else None
    sub = held if len(held) <= int(a["relevance_sentences"]) else held.split(int(a["relevance_sentences"]))[0]
    rel = head_relevance(model, sub, gates=disc, batch_tokens=int(a["relevance_batch_tokens"]))
    records = collect_records(model, held, disc)
    profiles = build_profiles(model, held, rel, disc, int(a["rarity_cutoff"]), _thresholds(cfg), records)
    write_profiles_csv(profiles, out / "profiles.csv")
    write_profiles_json(profiles, out / "profiles.json")
    rel.to_csv(out / "relevance.csv")
    write_grid(profiles, out / "grid.csv")
    outputs = ["profiles.csv", "profiles.json", "relevance.csv", "grid.csv"]
    if args.pruned:
        points = []
        for path in args.pruned:
            m, g, meta = _load(path)
            name = f"lambda={meta['lambda']}" if "lambda" in meta else Path(path).parent.name
            points.append((name, _retained_heads(g, m.config)))
        write_retained_table(profiles, points, out / "retained_functions.csv")
        outputs.append("retained_functions.csv")
    return {"seed": seed, "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus,
                                     "annotations": args.annotations, "pruned": args.pruned},
            "outputs": outputs}


def cmd_report(args, cfg) -> dict:
    """Summarize a prune output directory, optionally against head profiles."""
    out = _out_dir(args.out)
    sweep = Path(args.sweep)
    if not (sweep / "sweep.csv").is_file():
        raise ConfigError(f"{sweep} holds no sweep.csv")
    with open(sweep / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    lines = ["lambda\te/d/d-e\taccuracy"]
    for r in rows:
        lines.append(f"{float(r['lambda']):.4g}\t{r['retained_e/d/d-e']}\t{100 * float(r['heldout_token_accuracy']):.2f}")
    (out / "table.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs = ["table.tsv"]
    if args.profiles:
        from .analysis import read_profiles_json
        profiles = read_profiles_json(args.profiles)
        points = []
        for ck in sorted(sweep.glob("lambda_*/checkpoint.npz")):
            m, g, meta = load_checkpoint(ck)
            points.append((f"lambda={meta.get('lambda')}", _retained_heads(g, m.config)))
        write_retained_table(profiles, points, out / "retained_functions.csv")
        outputs.append("retained_functions.csv")
    return {"seed": _seed(args, cfg), "inputs": {"sweep": args.sweep, "profiles": args.profiles}, "outputs": outputs}


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="headprune", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML settings file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("train", help="train a base model"))
    p.add_argument("--corpus", help="corpus file (default: generate the configured task)")

    p = common(sub.add_parser("prune", help="lambda sweep of gated fine-tuning"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--lambda", dest="lam", help="comma-separated lambda values")
    p.add_argument("--gate-types", help="comma-separated attention types to gate")
    p.add_argument("--freeze-decoder", action="store_true")

    p = common(sub.add_parser("analyze", help="head relevance and function profiles"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--annotations", help="CoNLL-U file aligned with the corpus")
    p.add_argument("--pruned", nargs="*", help="pruned checkpoints for the retained-function table")

    p = common(sub.add_parser("report", help="tables from a prune output directory"))
    p.add_argument("--sweep", required=True, help="output directory of 'prune'")
    p.add_argument("--profiles", help="profiles.json from 'analyze'")

    p = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    return ap


def _execute(command: str, args: argparse.Namespace, cfg: dict) -> None:
    started = time.time()
    info = COMMANDS[command](args, cfg)
    out = Path(args.out)
    argd = {k: v for k, v in vars(args).items() if k != "command"}
    write_manifest(out, command, argd, cfg, info["seed"], info["inputs"], info["outputs"], started,
                   info.get("extra"))


def _rerun(args) -> None:
    try:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        command, recorded, cfg = doc["command"], doc["args"], doc["config"]
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from exc
    if command not in COMMANDS:
        raise ConfigError(f"manifest names unknown command {command!r}")
    ns = argparse.Namespace(**recorded)
    ns.out = args.out
    ns.seed = doc["seed"]
    _execute(command, ns, cfg)


def main(argv=None) -> int:
    level = os.environ.get("HEADPRUNE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.command == "rerun":
            _rerun(args)
        else:
            cfg = load_config(args.config)
            _execute(args.command, args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
