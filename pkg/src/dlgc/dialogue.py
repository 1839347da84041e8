"""State-based dialogue runtime.

The state keeps, per domain (skill class), at most the last completed
statement with its top rows and at most one outstanding statement that waits
for a missing parameter or a confirmation.  User turns are programs; the agent
policy is a fixed priority list over the state.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Optional

from . import ast as A
from . import types as T
from .canonical import canonical_statement
from .errors import DlgcError, NothingToConfirm, Unparseable
from .execute import Env, execute_statement
from .syntax import print_statement, print_value
from .typecheck import Registry

TOP_K = 3


@dataclass
class Runtime:
    """What a session executes against: registry with backends, environment,
    and optionally a parser index for natural-language turns."""

    registry: Registry
    env: Env = field(default_factory=Env)
    index: Optional[object] = None


@dataclass(frozen=True)
class CompletedItem:
    statement: object
    rows: tuple             # top rows (records); action outcomes as records
    count: int
    kind: str               # "query" | "action"
    success: bool = True


@dataclass(frozen=True)
class PendingItem:
    statement: object
    phase: str              # "slot_filling" | "awaiting_confirmation"


@dataclass(frozen=True)
class Event:
    """What the last user turn caused; consumed by the policy."""
    kind: str               # "query" | "action" | "error"
    domain: str
    message: str = ""
    rows: tuple = ()


@dataclass(frozen=True)
class DialogueState:
    completed: dict = field(default_factory=dict)
    outstanding: dict = field(default_factory=dict)
    last_act: Optional[str] = None
    turn_index: int = field(default=0, compare=False)
    events: tuple = field(default=(), compare=False)
    recency: dict = field(default_factory=dict, compare=False)

    def recent_domains(self, items):
        return sorted(items, key=lambda d: (-self.recency.get(d, -1), d))


@dataclass(frozen=True)
class AgentAct:
    name: str
    arg: Optional[str] = None

    def __str__(self):
        return self.name if self.arg is None else f"{self.name}({self.arg})"


@dataclass(frozen=True)
class AgentTurn:
    acts: tuple
    utterance: str
    state: DialogueState

    @property
    def label(self):
        return " ".join(str(a) for a in self.acts)


# ---------------------------------------------------------------------------
# Applying user turns
# ---------------------------------------------------------------------------

def _sig(registry, stmt):
    if stmt.action is None:
        return None
    return registry.function(stmt.action.target)


def pending_phase(stmt, registry) -> Optional[str]:
    """Phase an unexecuted statement would wait in, or None if it can run."""
    if A.has_missing(stmt):
        return "slot_filling"
    sig = _sig(registry, stmt)
    if sig is not None and sig.confirmation:
        return "awaiting_confirmation"
    return None


def _outcome_record(o):
    rec = {"success": T.Boolean(o.success)}
    if o.message:
        rec["message"] = T.String(o.message)
    rec.update(o.outputs)
    return rec


def _run(state: DialogueState, stmt, runtime: Runtime, turn):
    """Execute ``stmt`` and record it as the domain's completed item."""
    dom = stmt.domain
    completed = dict(state.completed)
    outstanding = dict(state.outstanding)
    outstanding.pop(dom, None)
    recency = dict(state.recency, **{dom: turn})
    try:
        res = execute_statement(stmt, runtime.registry, runtime.env)
    except DlgcError as e:
        ev = Event("error", dom, str(e))
        return replace(state, outstanding=outstanding, recency=recency), ev
    if stmt.action is None:
        rows = tuple(res.rows)
        item = CompletedItem(stmt, rows[:TOP_K], len(rows), "query")
        ev = Event("query", dom, rows=rows)
    else:
        outs = [_outcome_record(o) for o in res.outcomes]
        ok = all(o.success for o in res.outcomes)
        msg = next((o.message for o in res.outcomes if not o.success), "")
        item = CompletedItem(stmt, tuple(outs[:TOP_K]), len(outs), "action", ok)
        ev = Event("action", dom, msg, rows=tuple(outs))
    completed[dom] = item
    return replace(state, completed=completed, outstanding=outstanding, recency=recency), ev


def apply_user_turn(state: DialogueState, typed, runtime: Runtime) -> DialogueState:
    """Advance the state with one user program (a TypedProgram or Program)."""
    prog = getattr(typed, "program", typed)
    act = prog.act.name
    turn = state.turn_index + 1
    base = replace(state, turn_index=turn, events=(), last_act=str(prog.act))
    if act == "Cancel":
        return replace(base, outstanding={})
    if act in ("Confirm", "Reject"):
        try:
            return confirm_or_reject(base, "yes" if act == "Confirm" else "no", runtime)
        except NothingToConfirm:
            return base
    if act != "Execute":
        return base
    events = []
    st = base
    for s in prog.statements:
        s = canonical_statement(s)
        if isinstance(s, A.StreamStatement):
            events.append(Event("error", s.domain, "monitors run outside the dialogue loop"))
            continue
        phase = pending_phase(s, runtime.registry)
        if phase is None:
            st, ev = _run(st, s, runtime, turn)
            events.append(ev)
        else:
            outstanding = dict(st.outstanding)
            outstanding[s.domain] = PendingItem(s, phase)
            st = replace(st, outstanding=outstanding,
                         recency=dict(st.recency, **{s.domain: turn}))
    return replace(st, events=tuple(events))


def confirm_or_reject(state: DialogueState, decision: str, runtime: Runtime) -> DialogueState:
    waiting = [d for d, p in state.outstanding.items() if p.phase == "awaiting_confirmation"]
    if not waiting:
        raise NothingToConfirm("no transaction is waiting for confirmation")
    dom = state.recent_domains(waiting)[0]
    act = "@Transaction.Confirm" if decision == "yes" else "@Transaction.Reject"
    if decision == "yes":
        st, ev = _run(state, state.outstanding[dom].statement, runtime, state.turn_index)
        return replace(st, events=(ev,), last_act=act)
    outstanding = dict(state.outstanding)
    del outstanding[dom]
    return replace(state, outstanding=outstanding, events=(), last_act=act)


# ---------------------------------------------------------------------------
# Agent policy
# ---------------------------------------------------------------------------

def _display(v):
    if isinstance(v, T.Entity):
        return v.display or v.id
    if isinstance(v, T.String):
        return v.value
    if isinstance(v, T.Enum):
        return v.value.replace("_", " ")
    if isinstance(v, (T.Number, T.Measure)):
        return print_value(v).replace("^^", "")
    if isinstance(v, T.Array):
        return _join([_display(x) for x in v.values])
    return print_value(v)


def _join(words):
    words = list(words)
    if len(words) <= 1:
        return "".join(words)
    return ", ".join(words[:-1]) + " and " + words[-1]


def _canon(obj, default):
    return (obj.annotation("canonical") if obj is not None else None) or default


def describe_action(stmt, registry) -> str:
    """Short imperative phrase for an action, e.g. 'book a table at X for 4 people'."""
    a = stmt.action
    sig = registry.function(a.target)
    known = {k: v for k, v in a.args if v is not A.Missing}
    best = None
    for utt in str(_canon_utt(sig)).split("|"):
        holes = re.findall(r"\$\{(\w+)\}", utt)
        if not utt.strip() or any(h not in known for h in holes):
            continue
        if best is None or len(holes) > best[0]:
            text = re.sub(r"\$\{(\w+)\}", lambda m: _shown(known[m.group(1)]), utt)
            best = (len(holes), text.strip())
    if best is not None:
        return best[1]
    bits = [f"{_canon(sig.param(k) if sig else None, k)} {_shown(v)}" for k, v in known.items()]
    return _canon(sig, a.target.name.lower()) + (" " + ", ".join(bits) if bits else "")


def _canon_utt(sig):
    return (sig.annotation("utterance") if sig is not None else None) or ""


def _shown(v):
    return "each result" if isinstance(v, A.VarRef) else _display(v)


def _refinement(stmt, rows, registry):
    q = stmt.query
    sig = registry.function(q.base)
    used = A.filter_fields(q.filter)
    best = None
    for p in sig.out_params:
        if p.name in used or p.name == "id" or not p.annotation("refine"):
            continue
        seen = set()
        for r in rows:
            v = r.get(p.name)
            vals = v.values if isinstance(v, T.Array) else (v,)
            seen.update(print_value(x) for x in vals if x is not None)
        if len(seen) > 1 and (best is None or len(seen) > best[0]):
            best = (len(seen), p)
    return best[1] if best else None


def agent_policy(state: DialogueState, runtime: Runtime) -> AgentTurn:
    reg = runtime.registry
    filling = [d for d, p in state.outstanding.items() if p.phase == "slot_filling"]
    if filling:
        stmt = state.outstanding[state.recent_domains(filling)[0]].statement
        sig = reg.function(stmt.action.target)
        name = A.missing_params(stmt, sig)[0]
        prompt = sig.param(name).annotation("prompt") or f"what {name} do you want"
        return AgentTurn((AgentAct("AskSlot", name),), prompt[0].upper() + prompt[1:] + "?", state)
    waiting = [d for d, p in state.outstanding.items() if p.phase == "awaiting_confirmation"]
    if waiting:
        stmt = state.outstanding[state.recent_domains(waiting)[0]].statement
        return AgentTurn((AgentAct("Confirm"),),
                         f"Do you want me to {describe_action(stmt, reg)}?", state)
    for ev in state.events:
        if ev.kind == "action":
            if ev.message:
                return AgentTurn((AgentAct("ReportActionError"),),
                                 f"Sorry, that did not work: {ev.message}.", state)
            ref = next((r["reference"].value for r in ev.rows if "reference" in r), None)
            tail = f" Your reference is {ref}." if ref else ""
            return AgentTurn((AgentAct("ReportActionSuccess"),), "Done." + tail, state)
        if ev.kind == "error":
            return AgentTurn((AgentAct("ReportActionError"),),
                             f"Sorry, that did not work: {ev.message}.", state)
    for ev in state.events:
        if ev.kind == "query":
            item = state.completed[ev.domain]
            return _report_query(item, ev.rows, state, reg)
    act = (state.last_act or "").rsplit(".", 1)[-1]
    if act in ("Cancel", "ThankYou"):
        return AgentTurn((AgentAct("Goodbye"),), "Goodbye!", state)
    if act == "Reject":
        return AgentTurn((AgentAct("Greet"),), "OK, I will not do that. How else can I help you?", state)
    return AgentTurn((AgentAct("Greet"),), "Hello! How can I help you?", state)


def _report_query(item, rows, state, reg):
    stmt = item.statement
    sig = reg.function(stmt.query.base)
    shown = item.rows
    acts = [AgentAct("ReportQuery", f"rows={len(shown)}, count={item.count}")]
    if stmt.query.aggregate is not None and shown:
        out = stmt.query.aggregate.output
        text = f"The {out} is {_display(shown[0][out])}."
    elif not shown:
        text = "I could not find anything matching your request."
    else:
        noun = _canon(sig, stmt.query.base.name.lower())
        if item.count == 1:
            noun = (sig.annotation("singular") if sig is not None else None) or noun
        names = [_display(r["id"]) if "id" in r else
                 ", ".join(f"{k} {_display(v)}" for k, v in sorted(r.items())) for r in shown]
        text = f"I found {item.count} {noun}. "
        text += ("Here they are: " if item.count <= TOP_K else f"The first {len(shown)} are ")
        text += _join(names) + "."
    if item.count > TOP_K and stmt.query.aggregate is None:
        p = _refinement(stmt, rows, reg)
        if p is not None:
            acts.append(AgentAct("OfferRefinement", p.name))
            text += f" Would you like a particular {_canon(p, p.name)}?"
    return AgentTurn(tuple(acts), text, state)


# ---------------------------------------------------------------------------
# Summary (parser context)
# ---------------------------------------------------------------------------

def print_row(rec) -> str:
    parts = []
    for k in sorted(rec):
        v = rec[k]
        if isinstance(v, T.Measure):
            v = T.to_base_unit(v)
        parts.append(f"{k}={'null' if v is None else print_value(v)}")
    return "{" + ", ".join(parts) + "}"


def _stmt(s):
    return print_statement(s).rstrip().rstrip(";")


def summarize(state: DialogueState) -> str:
    parts = []
    for dom in sorted(set(state.completed) | set(state.outstanding)):
        c = state.completed.get(dom)
        if c is not None:
            rows = ", ".join(print_row(r) for r in c.rows)
            parts.append(f"executed: {_stmt(c.statement)}; #{c.count} results: [{rows}];")
        p = state.outstanding.get(dom)
        if p is not None:
            parts.append(f"outstanding: {_stmt(p.statement)};")
    parts.append(f"act: {state.last_act or 'none'}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Natural-language turns
# ---------------------------------------------------------------------------

def resolve_utterance(state: DialogueState, utterance: str, index, registry=None):
    """Map an utterance to a TypedProgram through a parser index built by
    :func:`dlgc.synth.build_parser_index`.  Raises Unparseable."""
    if index is None:
        raise Unparseable(utterance)
    return index.resolve(state, utterance, registry)
