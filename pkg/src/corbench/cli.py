"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal invariant violation.  A JSON run config may be given with
``--config`` (or the CORBENCH_CONFIG environment variable); explicit flags
override values from the file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .dataset import (
    PROTOCOLS,
    STAGES,
    DataError,
    GenerationPlan,
    InvariantViolation,
    UnsatisfiablePlan,
    atomic_write_text,
    combo_key,
    dataset_files,
    dumps_jsonl,
    emit_baseline_prompt,
    emit_stage_records,
    explain,
    generate,
    iter_jsonl,
    read_instances,
    render_gold_trace,
    write_instances,
)
from .grid import Coord, EnvironmentFileError, resolve_environment
from .noise import SEVERITY_LABELS, CorruptionConfig, SeverityThresholds, corrupt, classify_severity
from .oracle import OrientationError, Relation
from .traces import evaluate
from .utterance import LexiconError, resolve_lexicon, shipped_lexicon

CONFIG_ENV = "CORBENCH_CONFIG"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which means "data error" here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config


def load_config(path: str | None) -> dict[str, Any]:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p} is not valid JSON: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {p} must hold a JSON object")
    return cfg


def _pairs(items: Sequence[str] | None, what: str) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key or not value:
            raise UsageError(f"--{what} expects NAME=PATH, got {item!r}")
        out[key] = value
    return out


def _config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, ensure_ascii=False).encode()).hexdigest()


def _check_paths(paths: dict[str, str], what: str) -> None:
    for name, path in paths.items():
        if not Path(path).exists():
            raise UsageError(f"{what} {name}: file not found: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    envs = {**cfg.get("environments", {}), **_pairs(args.env, "env")}
    lexes = {**cfg.get("lexicons", {}), **_pairs(args.lexicon, "lexicon")}
    _check_paths(envs, "environment")
    _check_paths(lexes, "lexicon")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("generation needs a seed (--seed or 'seed' in the config)")
    if not (args.out or cfg.get("output_dir")):
        raise UsageError("no output directory (--out or 'output_dir' in the config)")
    out_dir = Path(args.out or cfg["output_dir"])
    plan_raw = dict(cfg.get("plan", {}))
    if "corruption" in cfg:
        plan_raw["corruption"] = cfg["corruption"]
    if "thresholds" in cfg:
        plan_raw["thresholds"] = cfg["thresholds"]
    plan_raw["seed"] = int(seed)
    try:
        plan = GenerationPlan.from_dict(plan_raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad generation plan: {exc}") from None
    env_objs = {name: resolve_environment(path) for name, path in envs.items()}
    for name, env in env_objs.items():
        if env.id != name:
            env_objs[name] = type(env)(name, env.landmarks, env.width, env.height)
    lex_objs = {lang: resolve_lexicon(path) for lang, path in lexes.items()}

    instances = generate(plan, env_objs, lex_objs)
    files = dataset_files(instances)
    digests = {}
    for name, rows in files.items():
        text = dumps_jsonl(r.to_dict() for r in rows)
        atomic_write_text(out_dir / f"{name}.jsonl", text)
        digests[f"{name}.jsonl"] = hashlib.sha256(text.encode()).hexdigest()
    effective = {"plan": plan.to_dict(), "environments": envs, "lexicons": lexes}
    manifest = {
        "version": __version__,
        "seed": plan.seed,
        "config_hash": _config_hash(effective),
        "config": effective,
        "counts": {name: len(rows) for name, rows in files.items()},
        "files": digests,
    }
    atomic_write_text(out_dir / "manifest.json", json.dumps(manifest, ensure_ascii=False, indent=2) + "\n")
    print(json.dumps(manifest["counts"]))
    return 0


def cmd_corrupt(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    raw = dict(cfg.get("corruption", {}))
    if args.target_cer is not None:
        raw["target_cer"] = args.target_cer
    if args.seed is not None:
        raw["seed"] = args.seed
    if "seed" not in raw:
        raise UsageError("corruption needs a seed (--seed or corruption.seed in the config)")
    try:
        config = CorruptionConfig.from_dict(raw)
        thresholds = SeverityThresholds(**cfg.get("thresholds", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad corruption config: {exc}") from None
    lex = resolve_lexicon(args.lang)
    texts = list(args.text)
    if args.input:
        texts += [line.rstrip("\n") for line in Path(args.input).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not texts:
        raise UsageError("nothing to corrupt: give TEXT arguments or --input")
    rows = []
    for text in texts:
        transcript, achieved = corrupt(text, config, lex)
        rows.append({
            "text": text,
            "transcript": transcript,
            "cer": round(achieved, 6),
            "severity": classify_severity(text, transcript, thresholds) if text else "perfect",
        })
    _emit(dumps_jsonl(rows), args.out)
    return 0


def _parse_pos(value: str) -> Coord:
    try:
        x, y = (int(v) for v in value.strip("()").split(","))
    except ValueError:
        raise UsageError(f"--pos expects X,Y, got {value!r}") from None
    return Coord(x, y)


def cmd_oracle(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    env = resolve_environment(args.env)
    lex = resolve_lexicon(args.lang)
    if args.at:
        user = env.position(args.at)
    elif args.pos:
        user = _parse_pos(args.pos)
    else:
        raise UsageError("give the user's position with --at LANDMARK or --pos X,Y")
    cues = []
    for item in args.cue:
        rel, sep, lid = item.partition(":")
        if not sep:
            raise UsageError(f"--cue expects RELATION:LANDMARK_ID, got {item!r}")
        try:
            cues.append((Relation.parse(rel), lid))
        except ValueError:
            raise UsageError(f"unknown relation {rel!r}") from None
        env.landmark(lid)
    if not cues:
        raise UsageError("at least one --cue is required")
    facing, text = explain(env, user, cues, lex)
    print(text)
    return 0


def cmd_emit_prompts(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    rows = [
        {"instance_id": i.id, "protocol": args.protocol, "prompt": emit_baseline_prompt(i, args.protocol)}
        for i in read_instances(args.dataset)
    ]
    _emit(dumps_jsonl(rows), args.out)
    return 0


def cmd_emit_stages(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    lex = resolve_lexicon(args.lang) if args.lang else None
    instances = read_instances(args.dataset)
    if args.gold_outputs:
        rows = []
        for i in instances:
            rows.append({"instance_id": i.id, "output_text": render_gold_trace(i, lex or shipped_lexicon(i.language))[1]})
    else:
        rows = []
        for i in instances:
            for inp, target in emit_stage_records([i], args.stage, lex):
                rows.append({"instance_id": i.id, "stage": args.stage, "input": inp, "target": target})
    _emit(dumps_jsonl(rows), args.out)
    return 0


def cmd_score(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    instances = read_instances(args.dataset)
    known = {i.id for i in instances}
    outputs: dict[str, str] = {}
    for n, row in iter_jsonl(args.outputs):
        iid, text = row.get("instance_id"), row.get("output_text")
        if not isinstance(iid, str) or not isinstance(text, str):
            raise DataError(f"{args.outputs}:{n}: record needs string fields instance_id and output_text")
        if iid not in known:
            raise DataError(f"{args.outputs}:{n}: unknown instance_id {iid!r}")
        outputs[iid] = text
    report = evaluate(instances, outputs)
    table = report.format_table()
    out = args.out or cfg.get("output_dir")
    if out:
        out_dir = Path(out)
        atomic_write_text(out_dir / "report.json", json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n")
        atomic_write_text(out_dir / "report.txt", table + "\n")
    print(table)
    return 0


def composition(instances: Sequence) -> dict[str, Any]:
    """Per-subset severity histogram, combination counts and code-switch rate."""
    groups: dict[str, list] = {}
    for i in instances:
        groups.setdefault(i.subset, []).append(i)
    if len(groups) > 1:
        groups["all"] = list(instances)
    out = {}
    for subset, rows in groups.items():
        sev = Counter(i.severity for i in rows)
        out[subset] = {
            "count": len(rows),
            "severity": {k: sev.get(k, 0) for k in SEVERITY_LABELS},
            "severity_percent": {k: round(100 * sev.get(k, 0) / len(rows), 1) for k in SEVERITY_LABELS},
            "combinations": dict(sorted(Counter(combo_key(r for r, _, _ in i.cues) for i in rows).items())),
            "code_switch_rate": round(sum(i.code_switched for i in rows) / len(rows), 4),
        }
    return out


def cmd_stats(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    instances = [i for path in args.dataset for i in read_instances(path)]
    if not instances:
        raise DataError("no instances to summarize")
    stats = composition(instances)
    if args.json:
        print(json.dumps(stats, ensure_ascii=False, indent=2))
        return 0
    for subset, s in stats.items():
        print(f"[{subset}] {s['count']} instances, code-switch rate {100 * s['code_switch_rate']:.1f}%")
        for k in SEVERITY_LABELS:
            print(f"  {k:<10}{s['severity'][k]:>6}  {s['severity_percent'][k]:>5.1f}%")
        for k, v in s["combinations"].items():
            print(f"  {k:<24}{v:>6}")
    return 0


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corbench", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate the dataset files and a manifest")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--env", action="append", metavar="NAME=PATH", help="environment file override")
    g.add_argument("--lexicon", action="append", metavar="LANG=PATH", help="lexicon file override")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("corrupt", help="simulate ASR noise on text")
    c.add_argument("text", nargs="*")
    c.add_argument("--input", help="file with one text per line")
    c.add_argument("--target-cer", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--lang", default="zh-TW", help="shipped lexicon tag or lexicon path")
    c.add_argument("--out")
    c.set_defaults(func=cmd_corrupt)

    o = sub.add_parser("oracle", help="solve an orientation query and show the derivation")
    o.add_argument("--env", required=True, help="shipped environment id or path")
    o.add_argument("--at", help="landmark id the user stands at")
    o.add_argument("--pos", help="user position X,Y")
    o.add_argument("--cue", action="append", default=[], metavar="RELATION:LANDMARK_ID")
    o.add_argument("--lang", default="en")
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("emit-prompts", help="baseline prompts for a dataset file")
    e.add_argument("--dataset", required=True)
    e.add_argument("--protocol", choices=PROTOCOLS, required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_emit_prompts)

    s = sub.add_parser("emit-stages", help="curriculum stage records for a dataset file")
    s.add_argument("--dataset", required=True)
    s.add_argument("--stage", choices=STAGES, default="S4")
    s.add_argument("--lang", help="render in this lexicon instead of each instance's language")
    s.add_argument("--gold-outputs", action="store_true", help="write gold traces as a model-output file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_emit_stages)

    sc = sub.add_parser("score", help="score model outputs against a dataset file")
    sc.add_argument("--dataset", required=True)
    sc.add_argument("--outputs", required=True, help="JSONL of {instance_id, output_text}")
    sc.add_argument("--out", help="directory for report.json and report.txt")
    sc.set_defaults(func=cmd_score)

    st = sub.add_parser("stats", help="severity and composition tables")
    st.add_argument("dataset", nargs="+")
    st.add_argument("--json", action="store_true")
    st.set_defaults(func=cmd_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except BrokenPipeError:
        # downstream reader went away (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InvariantViolation, AssertionError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 3
    except (DataError, UnsatisfiablePlan, EnvironmentFileError, LexiconError, OrientationError, KeyError,
            FileNotFoundError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
