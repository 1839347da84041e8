"""Command-line interface: ``dlgc parse|check|canon|exec|repl|synth|lint``.

Exit codes: 0 success, 1 language-level error, 2 I/O or usage error,
3 an action failed at run time.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from . import ast as A
from . import syntax as S
from . import types as T
from .canonical import canonicalize
from .dialogue import DialogueState, Runtime, agent_policy, apply_user_turn, summarize
from .errors import DlgcError, LexError, MissingDataFile, ParseError, TypeCheckError, Unparseable
from .execute import Env, execute_statement, run_monitor
from .skills import load_skills
from .typecheck import Registry, resolve_library, typecheck_program

log = logging.getLogger("dlgc")

EXIT_OK, EXIT_LANG, EXIT_IO, EXIT_ACTION = 0, 1, 2, 3
CONFIG_NAME = "dlgc.toml"
NOT_UNDERSTOOD = "Sorry, I did not understand."


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class CliConfig:
    skills: list = field(default_factory=list)      # empty: bundled skills
    templates: Optional[str] = None
    here: Optional[str] = None
    now: Optional[str] = None
    seed: int = 0
    out: str = "out"

    def env(self) -> Env:
        kw = {"seed": self.seed}
        if self.here:
            try:
                lat, lon = (float(x) for x in self.here.split(","))
            except ValueError:
                raise UsageError(f"--here expects LAT,LON, got {self.here!r}")
            kw["here"] = T.Location(lat, lon, "here")
        if self.now:
            try:
                kw["now"] = T.Date.parse(self.now)
            except (DlgcError, ValueError):
                raise UsageError(f"--now expects an ISO date, got {self.now!r}")
        return Env(**kw)


def find_config(start: Path) -> Optional[Path]:
    for d in [start, *start.parents]:
        p = d / CONFIG_NAME
        if p.is_file():
            return p
    return None


def read_config(path: Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; quotes are optional."""
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip()] = val.strip().strip('"').strip("'")
    return out


def build_config(args) -> CliConfig:
    """Defaults < config file < environment < flags."""
    cfg = CliConfig()
    path = Path(args.config) if args.config else find_config(Path.cwd())
    if path is not None:
        if not path.is_file():
            raise FileNotFoundError(path)
        raw = read_config(path)
        base = path.parent
        if "skills" in raw:
            cfg.skills = [str(base / p.strip()) for p in raw["skills"].split(",") if p.strip()]
        if "templates" in raw:
            cfg.templates = str(base / raw["templates"])
        for k in ("here", "now", "out"):
            if k in raw:
                setattr(cfg, k, raw[k])
        if "seed" in raw:
            cfg.seed = int(raw["seed"])
    if os.environ.get("DLGC_SKILLS"):
        cfg.skills = [p for p in os.environ["DLGC_SKILLS"].split(os.pathsep) if p]
    if os.environ.get("DLGC_SEED"):
        cfg.seed = int(os.environ["DLGC_SEED"])
    if getattr(args, "skills", None):
        cfg.skills = list(args.skills)
    for k in ("templates", "here", "now", "out"):
        if getattr(args, k, None) is not None:
            setattr(cfg, k, getattr(args, k))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for p in cfg.skills:
        if not Path(p).exists():
            raise FileNotFoundError(p)
    if cfg.templates is not None and not Path(cfg.templates).exists():
        raise FileNotFoundError(cfg.templates)
    return cfg


def registry_for(cfg: CliConfig, only=None):
    return load_skills(cfg.skills or None, only=only)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def err(msg):
    print(msg, file=sys.stderr)


def where(path, span):
    return f"{path}:{span}" if span is not None else str(path)


def report(path, e: DlgcError):
    if isinstance(e, TypeCheckError):
        for d in e.diagnostics:
            err(f"{where(path, d.span)}: {d.code}: {d.message}")
    elif isinstance(e, (ParseError, LexError)):
        err(f"{path}:{e.span}: {type(e).__name__}: {e.message}")
    else:
        err(f"{path}: {type(e).__name__}: {e}")


def _is_node(x):
    return is_dataclass(x) and not isinstance(x, (T.Value, T.TypeExpr, A.EnvRef, A.VarRef))


def dump(node, indent=0) -> str:
    """Indented debug form of an AST (spans omitted)."""
    pad = "  " * indent
    if _is_node(node):
        lines = [f"{pad}{type(node).__name__}"]
        for f in fields(node):
            if f.name == "span":
                continue
            v = getattr(node, f.name)
            if v is None or v == () or v == A.TRUE and f.name == "filter":
                continue
            if _is_node(v) or isinstance(v, tuple) and any(_is_node(x) for x in v):
                lines.append(f"{pad}  {f.name}:")
                items = v if isinstance(v, tuple) else (v,)
                for x in items:
                    lines.append(dump(x, indent + 2))
            else:
                lines.append(f"{pad}  {f.name}: {_leaf(v)}")
        return "\n".join(lines)
    if isinstance(node, tuple):
        return "\n".join(dump(x, indent) for x in node)
    return f"{pad}{_leaf(node)}"


def _leaf(v):
    if isinstance(v, (T.Value, A.EnvRef, A.VarRef)) or v is A.Missing:
        return S.print_value(v) if not isinstance(v, A.VarRef) else v.name
    if isinstance(v, tuple):
        return "(" + ", ".join(_leaf(x) for x in v) + ")"
    if _is_node(v):
        return f"{type(v).__name__}({', '.join(_leaf(getattr(v, f.name)) for f in fields(v) if f.name != 'span')})"
    return str(v)


def read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _is_library(text):
    for line in text.splitlines():
        s = line.strip()
        if not s or s.startswith("//"):
            continue
        return s.startswith(("class", "abstract", "dialogue"))
    return False


def pretty_rows(rows) -> str:
    if not rows:
        return "(no rows)"
    cols = sorted({k for r in rows for k in r})
    cells = [[S.print_value(r[c]) if r.get(c) is not None else "null" for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(out)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_parse(args) -> int:
    text = read_text(args.file)
    try:
        if _is_library(text):
            out = "\n".join(dump(c) for c in S.parse_library(text))
        else:
            out = dump(S.parse_program(text))
    except DlgcError as e:
        report(args.file, e)
        return EXIT_LANG
    print(out)
    return EXIT_OK


def _check(args, cfg):
    """Parse and check ``args.file``; returns (typed program or None, registry)."""
    text = read_text(args.file)
    reg = registry_for(cfg)
    if _is_library(text):
        items = S.parse_library(text)
        # classes defined in the file shadow loaded ones of the same name
        mine = {getattr(c, "name", None) for c in items}
        base = Registry({k: v for k, v in reg.classes.items() if k not in mine}, reg.acts,
                        reg.lexicon, {k: v for k, v in reg.backends.items() if k not in mine})
        return None, resolve_library(items, base=base)
    return typecheck_program(S.parse_program(text), reg), reg


def cmd_check(args) -> int:
    cfg = build_config(args)
    try:
        _check(args, cfg)
    except DlgcError as e:
        report(args.file, e)
        return EXIT_LANG
    print("ok")
    return EXIT_OK


def cmd_canon(args) -> int:
    cfg = build_config(args)
    try:
        typed, reg = _check(args, cfg)
        if typed is None:
            err(f"{args.file}: canon expects a program, not a class library")
            return EXIT_LANG
        print(canonicalize(typed).text)
    except DlgcError as e:
        report(args.file, e)
        return EXIT_LANG
    return EXIT_OK


def cmd_exec(args) -> int:
    cfg = build_config(args)
    env = cfg.env()
    failed = False
    try:
        typed, reg = _check(args, cfg)
        if typed is None:
            err(f"{args.file}: exec expects a program, not a class library")
            return EXIT_LANG
        for s in canonicalize(typed).program.statements:
            if isinstance(s, A.StreamStatement):
                for tick, fired, outcomes in run_monitor(s, reg, env, args.ticks):
                    for o in outcomes:
                        failed |= not o.success
                        print(json.dumps({"tick": tick, "outcome": o.to_json()}, sort_keys=True))
                continue
            res = execute_statement(s, reg, env)
            failed |= res.failed
            if args.pretty:
                if res.rows is not None:
                    print(pretty_rows(res.rows))
                for o in res.outcomes:
                    status = "ok" if o.success else "FAILED"
                    print(f"{o.action}: {status} {o.message}".rstrip())
            else:
                for line in res.to_json_lines():
                    print(line)
    except DlgcError as e:
        report(args.file, e)
        return EXIT_LANG
    return EXIT_ACTION if failed else EXIT_OK


def cmd_lint(args) -> int:
    from .synth import lint_pair, read_tsv
    cfg = build_config(args)
    try:
        pairs = read_tsv(args.file)
    except ValueError as e:
        err(str(e))
        return EXIT_IO
    reg = registry_for(cfg)
    bad = 0
    for p in pairs:
        for v in lint_pair(p, reg):
            bad += 1
            print(f"{args.file}:{p.meta['line']}: {v.kind}: {v.value}")
    print(f"{len(pairs)} rows, {bad} violation(s)", file=sys.stderr)
    return EXIT_LANG if bad else EXIT_OK


def cmd_synth(args) -> int:
    from . import synth
    cfg = build_config(args)
    if args.depth < 1:
        raise UsageError("--depth must be at least 1")
    templates = synth.load_templates(cfg.templates)
    reg = registry_for(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    missing = [c for c in synth.CONSTRUCTS if c not in synth.template_constructs(templates)]
    for c in missing:
        err(f"templates: no template produces construct {c}")
    if missing:
        status = EXIT_LANG
    pairs = synth.expand(reg, templates, args.depth, args.limit, cfg.seed)
    for i, p in enumerate(pairs):
        p.meta["id"] = f"s{i:06d}"
    synth.write_tsv(pairs, out / "pairs.tsv")
    if args.limit == 0:
        err("warning: --limit 0, wrote an empty dataset")
    else:
        cov = synth.coverage(pairs)
        hit = sum(1 for v in cov.values() if v)
        print(f"coverage: {hit}/{len(cov)} constructs ({100.0 * hit / len(cov):.1f}%)")
        for c, n in cov.items():
            if not n:
                err(f"uncovered construct: {c}")
        if hit < len(cov):
            status = EXIT_LANG
    turns = []
    if args.dialogues:
        dialogues = synth.synthesize_dialogues(reg, templates, args.dialogues, cfg.seed,
                                               depth=args.depth, pool=pairs or None)
        ddir = out / "dialogues"
        ddir.mkdir(exist_ok=True)
        for d in dialogues:
            (ddir / f"{d.id}.txt").write_text(d.to_text(), encoding="utf-8")
            for j, p in enumerate(d.pairs()):
                p.meta["id"] = f"d{d.id}-{j}"
                turns.append(p)
        synth.write_tsv(turns, out / "dialogues.tsv")
    bad = 0
    for p in pairs + turns:
        for v in synth.lint_pair(p, reg):
            bad += 1
            err(f"lint: {p.meta['id']}: {v}")
    print(f"pairs: {len(pairs)}  dialogue turns: {len(turns)}  lint violations: {bad}")
    return EXIT_LANG if bad else status


# ---------------------------------------------------------------------------
# REPL
# ---------------------------------------------------------------------------

@dataclass
class ReplSession:
    runtime: Runtime
    state: DialogueState = field(default_factory=DialogueState)

    def turn(self, line: str):
        """Returns (acts label, agent utterance, error message or None)."""
        try:
            if line.lstrip().startswith("@"):
                typed = typecheck_program(S.parse_program(line), self.runtime.registry)
            else:
                typed = self.runtime.index.resolve(self.state, line, self.runtime.registry)
        except Unparseable:
            return "NotUnderstood", NOT_UNDERSTOOD, None
        except DlgcError as e:
            return "NotUnderstood", NOT_UNDERSTOOD, f"{type(e).__name__}: {e}"
        self.state = apply_user_turn(self.state, typed, self.runtime)
        agent = agent_policy(self.state, self.runtime)
        self.state = agent.state
        return agent.label, agent.utterance, None


def build_runtime(cfg: CliConfig, depth=2) -> Runtime:
    from .skills import snapshot
    from .synth import build_parser_index, expand, load_templates, turn_pairs
    reg = registry_for(cfg)
    templates = load_templates(cfg.templates)
    pairs = expand(reg, templates, depth, 10 ** 6, cfg.seed) + turn_pairs(reg, templates, cfg.seed)
    index = build_parser_index(pairs, reg)
    return Runtime(snapshot(reg), cfg.env(), index)


def read_scenario(path):
    """List of (utterance, expected acts or None, line number)."""
    turns = []
    for lineno, raw in enumerate(read_text(path).splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, sep, rest = line.partition(":")
        if not sep or tag not in ("U", "A"):
            raise UsageError(f"{path}:{lineno}: expected 'U:' or 'A:' line")
        if tag == "U":
            turns.append([rest.strip(), None, lineno])
        elif not turns or turns[-1][1] is not None:
            raise UsageError(f"{path}:{lineno}: 'A:' without a preceding 'U:'")
        else:
            turns[-1][1] = rest.strip()
    return [tuple(t) for t in turns]


def cmd_repl(args) -> int:
    cfg = build_config(args)
    script = read_scenario(args.replay) if args.replay else None
    session = ReplSession(build_runtime(cfg, args.depth))
    print("agent: Hello! How can I help you?")
    if script is not None:
        mismatches = 0
        for utt, expected, lineno in script:
            print(f"user: {utt}")
            label, text, problem = session.turn(utt)
            if problem:
                err(f"{args.replay}:{lineno}: {problem}")
            print(f"agent: {text}")
            print(f"-- acts: {label}")
            if args.show_state:
                print(f"-- state: {summarize(session.state)}")
            if expected is not None and expected != label:
                mismatches += 1
                err(f"{args.replay}:{lineno}: expected {expected!r}, got {label!r}")
        print(f"replayed {len(script)} turn(s), {mismatches} mismatch(es)")
        return EXIT_LANG if mismatches else EXIT_OK
    stream = sys.stdin
    while True:
        if stream.isatty():
            print("> ", end="", flush=True)
        line = stream.readline()
        if not line:
            return EXIT_OK
        line = line.strip()
        if not line:
            continue
        if line == "\\quit":
            return EXIT_OK
        label, text, problem = session.turn(line)
        if problem:
            err(problem)
        print(f"agent: {text}")
        if args.show_state:
            print(f"-- state: {summarize(session.state)}")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--skills", action="append", metavar="DIR",
                        help="skill directory or .skill file (repeatable; default: bundled)")
    common.add_argument("--config", help=f"config file (default: nearest {CONFIG_NAME})")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="dlgc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", parents=[common], help="parse a program and print its AST")
    p.add_argument("file")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("check", parents=[common], help="type-check a program or class library")
    p.add_argument("file")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("canon", parents=[common], help="print the canonical form")
    p.add_argument("file")
    p.set_defaults(func=cmd_canon)

    p = sub.add_parser("exec", parents=[common], help="execute a program")
    p.add_argument("file")
    p.add_argument("--here", help="current location as LAT,LON")
    p.add_argument("--now", help="current date (ISO)")
    p.add_argument("--ticks", type=int, default=0, help="poll monitors this many times")
    p.add_argument("--pretty", action="store_true", help="human-readable tables")
    p.set_defaults(func=cmd_exec)

    p = sub.add_parser("repl", parents=[common], help="talk to the agent")
    p.add_argument("--templates")
    p.add_argument("--here")
    p.add_argument("--now")
    p.add_argument("--depth", type=int, default=2, help="expansion depth of the parser index")
    p.add_argument("--replay", metavar="SCENARIO", help="run a scripted scenario and check acts")
    p.add_argument("--show-state", action="store_true")
    p.set_defaults(func=cmd_repl)

    p = sub.add_parser("synth", parents=[common], help="synthesize a dataset")
    p.add_argument("--templates")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--limit", type=int, default=5000)
    p.add_argument("--dialogues", type=int, default=0, metavar="N")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("lint", parents=[common], help="lint a TSV dataset")
    p.add_argument("file")
    p.set_defaults(func=cmd_lint)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_IO if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        err(f"dlgc: {e}")
        return EXIT_IO
    except (OSError, MissingDataFile) as e:
        err(f"dlgc: {e}")
        return EXIT_IO
    except DlgcError as e:
        err(f"dlgc: {type(e).__name__}: {e}")
        return EXIT_LANG


if __name__ == "__main__":
    sys.exit(main())
