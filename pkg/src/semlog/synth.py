"""Synthetic log corpus generator.

A declarative TOML spec defines value pools, message templates with
instance slots, session structure, an anomaly-injection rate, and
optional failure classes.  Slots use the grammar ``<I:source>`` or
``<I:source:concept>`` where source is a pool name or ``@entity`` for a
value bound once per session; a named concept pairs the slot with the
nearest occurrence of that word in the template.

Generation is fully seeded: the same spec and seed give byte-identical
raw logs, annotations, and labels.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import logio
from .logio import AnnotatedMessage, LogMessage

_SLOT_RE = re.compile(r"<I:([^:<>\s]+)(?::([^:<>\s]+))?>")
_HEX_DIGITS = "0123456789abcdef"
_PLACEHOLDER = "QQSLOT%dQQ"


class SynthError(ValueError):
    """Raised for invalid generator specs."""


# ---------------------------------------------------------------------------
# Spec model
# ---------------------------------------------------------------------------

@dataclass
class Pool:
    name: str
    kind: str  # "choice" or "pattern"
    values: tuple[str, ...] = ()
    pattern: str = ""

    def draw(self, rng: np.random.Generator) -> str:
        if self.kind == "choice":
            return self.values[int(rng.integers(len(self.values)))]
        chars = []
        for ch in self.pattern:
            if ch == "#":
                chars.append(str(int(rng.integers(10))))
            elif ch == "%":
                chars.append(_HEX_DIGITS[int(rng.integers(16))])
            else:
                chars.append(ch)
        return "".join(chars)


@dataclass
class Slot:
    token_index: int
    source: str            # pool name, or "@entity"
    concept: str | None    # paired concept word, if any


@dataclass
class Template:
    name: str
    text: str
    tokens: tuple[str, ...]       # skeleton with placeholders at slot spots
    slots: tuple[Slot, ...]
    categories: tuple[str, ...]
    gold_pairs: tuple[tuple[int, int], ...]
    weight: float = 1.0


@dataclass
class SessionSpec:
    entities: dict[str, str]      # entity name -> pool name
    key_entity: str
    open: str | None
    close: str | None
    body: tuple[str, ...]
    mean_messages: float
    count: int


@dataclass
class AnomalySpec:
    rate: float
    entity: str
    normal_pool: str
    anomaly_pool: str


@dataclass
class DiagnosisSpec:
    classes: int
    entity: str
    values: tuple[str, ...]


@dataclass
class GenSpec:
    name: str
    key_concept: str
    pools: dict[str, Pool]
    templates: dict[str, Template]
    session: SessionSpec
    anomaly: AnomalySpec | None = None
    diagnosis: DiagnosisSpec | None = None


@dataclass
class SessionLabel:
    key: str
    anomaly: int
    failure_class: int  # -1 when no diagnosis classes are configured


@dataclass
class SynthResult:
    raw_lines: list[str]
    annotated: list[AnnotatedMessage]
    labels: list[SessionLabel]
    spans: list[tuple[int, int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Spec loading and template compilation
# ---------------------------------------------------------------------------

def _compile_template(name: str, entry: dict, pools: dict[str, Pool],
                      entities: dict[str, str]) -> Template:
    text = entry.get("text")
    if not isinstance(text, str) or not text.strip():
        raise SynthError("template %r has no text" % name)
    concepts = entry.get("concepts", [])
    weight = float(entry.get("weight", 1.0))
    if weight <= 0:
        raise SynthError("template %r has non-positive weight" % name)

    matches = list(_SLOT_RE.finditer(text))
    slot_meta: list[tuple[str, str | None]] = []
    skeleton_text = text
    for k, m in enumerate(matches):
        source, concept = m.group(1), m.group(2)
        if source.startswith("@"):
            if source[1:] not in entities:
                raise SynthError(
                    "template %r references unknown entity %r" % (name, source)
                )
        elif source not in pools:
            raise SynthError(
                "template %r references unknown pool %r" % (name, source)
            )
        if concept is not None and concept not in concepts:
            raise SynthError(
                "template %r pairs a slot with %r, which is not in its "
                "concepts list" % (name, concept)
            )
        slot_meta.append((source, concept))
        skeleton_text = skeleton_text.replace(m.group(0), _PLACEHOLDER % k, 1)

    skeleton = logio.tokenize(skeleton_text)
    slot_positions: dict[int, int] = {}
    for pos, token in enumerate(skeleton):
        sm = re.fullmatch(r"QQSLOT(\d+)QQ", token)
        if sm:
            slot_positions[int(sm.group(1))] = pos
    if len(slot_positions) != len(matches):
        raise SynthError(
            "template %r: a slot does not survive tokenization as a "
            "single token" % name
        )

    slots = tuple(
        Slot(token_index=slot_positions[k], source=src, concept=con)
        for k, (src, con) in enumerate(slot_meta)
    )
    categories = [logio.NONE] * len(skeleton)
    for concept in concepts:
        positions = [p for p, t in enumerate(skeleton) if t == concept]
        if not positions:
            raise SynthError(
                "template %r lists concept %r which is not one of its "
                "tokens" % (name, concept)
            )
        for p in positions:
            categories[p] = logio.CONCEPT
    gold_pairs = []
    for slot in slots:
        categories[slot.token_index] = logio.INSTANCE
        if slot.concept is None:
            continue
        candidates = [p for p, t in enumerate(skeleton) if t == slot.concept]
        nearest = min(candidates,
                      key=lambda p: (abs(p - slot.token_index), p))
        gold_pairs.append((nearest, slot.token_index))
    return Template(
        name=name, text=text, tokens=tuple(skeleton), slots=slots,
        categories=tuple(categories), gold_pairs=tuple(gold_pairs),
        weight=weight,
    )


def load_genspec(path: str) -> GenSpec:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SynthError("invalid spec file: %s" % exc) from None
    return parse_genspec(data)


def parse_genspec(data: dict) -> GenSpec:
    try:
        gen = data["generator"]
        name = gen["name"]
        key_concept = gen["key_concept"]
        pool_section = data["pools"]
        template_section = data["templates"]
        session_section = data["session"]
    except KeyError as exc:
        raise SynthError("spec is missing section %s" % exc) from None

    pools: dict[str, Pool] = {}
    for pname, entry in pool_section.items():
        kind = entry.get("kind")
        if kind == "choice":
            values = tuple(entry.get("values", ()))
            if not values:
                raise SynthError("choice pool %r has no values" % pname)
            pools[pname] = Pool(pname, "choice", values=values)
        elif kind == "pattern":
            pattern = entry.get("pattern", "")
            if not pattern:
                raise SynthError("pattern pool %r has no pattern" % pname)
            pools[pname] = Pool(pname, "pattern", pattern=pattern)
        else:
            raise SynthError("pool %r has unknown kind %r" % (pname, kind))

    entities = dict(session_section.get("entities", {}))
    for ename, pname in entities.items():
        if pname not in pools:
            raise SynthError(
                "entity %r is bound to unknown pool %r" % (ename, pname)
            )

    templates = {
        tname: _compile_template(tname, entry, pools, entities)
        for tname, entry in template_section.items()
    }

    key_entity = session_section.get("key_entity")
    if key_entity not in entities:
        raise SynthError("session key_entity %r is not an entity" % key_entity)
    open_t = session_section.get("open")
    close_t = session_section.get("close")
    body = tuple(session_section.get("body", ()))
    for tname in filter(None, (open_t, close_t, *body)):
        if tname not in templates:
            raise SynthError("session references unknown template %r" % tname)
    if not body:
        raise SynthError("session body must list at least one template")
    mean_messages = float(session_section.get("mean_messages", 0.0))
    fixed = (1 if open_t else 0) + (1 if close_t else 0)
    if mean_messages < fixed:
        raise SynthError(
            "mean_messages %.2f is below the %d fixed messages per session"
            % (mean_messages, fixed)
        )
    count = int(session_section.get("count", 0))
    if count < 1:
        raise SynthError("session count must be >= 1")
    session = SessionSpec(
        entities=entities, key_entity=key_entity, open=open_t,
        close=close_t, body=body, mean_messages=mean_messages, count=count,
    )

    anomaly = None
    if "anomaly" in data:
        a = data["anomaly"]
        anomaly = AnomalySpec(
            rate=float(a["rate"]), entity=a["entity"],
            normal_pool=a["normal_pool"], anomaly_pool=a["anomaly_pool"],
        )
        if not 0.0 <= anomaly.rate <= 1.0:
            raise SynthError("anomaly rate must be within [0, 1]")
        for pname in (anomaly.normal_pool, anomaly.anomaly_pool):
            if pname not in pools:
                raise SynthError("anomaly pool %r is unknown" % pname)

    diagnosis = None
    if "diagnosis" in data:
        d = data["diagnosis"]
        diagnosis = DiagnosisSpec(
            classes=int(d["classes"]), entity=d["entity"],
            values=tuple(d["values"]),
        )
        if diagnosis.classes < 2:
            raise SynthError("diagnosis needs at least 2 classes")
        if len(diagnosis.values) != diagnosis.classes:
            raise SynthError(
                "diagnosis lists %d values for %d classes"
                % (len(diagnosis.values), diagnosis.classes)
            )

    return GenSpec(
        name=name, key_concept=key_concept, pools=pools,
        templates=templates, session=session, anomaly=anomaly,
        diagnosis=diagnosis,
    )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _render(template: Template, values: list[str],
            source_line: int) -> AnnotatedMessage:
    tokens = list(template.tokens)
    raw = template.text
    for slot, value in zip(template.slots, values):
        tokens[slot.token_index] = value
    for m, value in zip(_SLOT_RE.finditer(template.text), values):
        raw = raw.replace(m.group(0), value, 1)
    message = LogMessage(raw=raw, tokens=tuple(tokens),
                         source_line=source_line)
    return AnnotatedMessage(
        message=message, categories=template.categories,
        gold_pairs=template.gold_pairs,
    )


def _draw_clean(pool: Pool, rng: np.random.Generator, name: str) -> str:
    value = pool.draw(rng)
    if logio.tokenize(value) != [value]:
        raise SynthError(
            "pool %r produced value %r that does not survive tokenization"
            % (name, value)
        )
    return value


def synth_generate(spec: GenSpec, seed: int = 42,
                   sessions: int | None = None) -> SynthResult:
    """Generate a corpus: raw lines, gold annotations, session labels."""
    rng = np.random.default_rng(seed)
    session = spec.session
    count = sessions if sessions is not None else session.count
    if count < 1:
        raise SynthError("session count must be >= 1")

    anomaly_flags = np.zeros(count, dtype=np.int64)
    if spec.anomaly is not None and spec.anomaly.rate > 0:
        n_anomalous = int(round(count * spec.anomaly.rate))
        n_anomalous = min(n_anomalous, count)
        if n_anomalous:
            picks = rng.choice(count, size=n_anomalous, replace=False)
            anomaly_flags[picks] = 1

    classes = np.full(count, -1, dtype=np.int64)
    if spec.diagnosis is not None:
        classes = np.arange(count) % spec.diagnosis.classes
        rng.shuffle(classes)

    body_weights = np.asarray(
        [spec.templates[t].weight for t in session.body], dtype=np.float64
    )
    body_weights /= body_weights.sum()
    fixed = (1 if session.open else 0) + (1 if session.close else 0)
    lam = session.mean_messages - fixed

    result = SynthResult(raw_lines=[], annotated=[], labels=[])
    used_keys: set[str] = set()
    line_no = 1
    for s in range(count):
        bindings: dict[str, str] = {}
        for ename in sorted(session.entities):
            pname = session.entities[ename]
            if spec.anomaly is not None and ename == spec.anomaly.entity:
                pname = (spec.anomaly.anomaly_pool if anomaly_flags[s]
                         else spec.anomaly.normal_pool)
            if ename == session.key_entity:
                value = _draw_clean(spec.pools[pname], rng, pname)
                while value in used_keys:
                    value = _draw_clean(spec.pools[pname], rng, pname)
                used_keys.add(value)
            else:
                value = _draw_clean(spec.pools[pname], rng, pname)
            bindings[ename] = value
        if spec.anomaly is not None and spec.anomaly.entity not in bindings:
            pname = (spec.anomaly.anomaly_pool if anomaly_flags[s]
                     else spec.anomaly.normal_pool)
            bindings[spec.anomaly.entity] = _draw_clean(
                spec.pools[pname], rng, pname
            )
        if spec.diagnosis is not None:
            bindings[spec.diagnosis.entity] = spec.diagnosis.values[classes[s]]

        names: list[str] = []
        if session.open:
            names.append(session.open)
        body_len = int(rng.poisson(lam)) if lam > 0 else 0
        if body_len:
            picks = rng.choice(len(session.body), size=body_len, p=body_weights)
            names.extend(session.body[int(i)] for i in picks)
        if session.close:
            names.append(session.close)

        start = len(result.annotated)
        for tname in names:
            template = spec.templates[tname]
            values = []
            for slot in template.slots:
                if slot.source.startswith("@"):
                    ename = slot.source[1:]
                    if ename not in bindings:
                        raise SynthError(
                            "template %r uses unbound entity %r"
                            % (tname, ename)
                        )
                    values.append(bindings[ename])
                else:
                    values.append(
                        _draw_clean(spec.pools[slot.source], rng, slot.source)
                    )
            annotated = _render(template, values, line_no)
            line_no += 1
            result.raw_lines.append(annotated.message.raw)
            result.annotated.append(annotated)
        result.spans.append((start, len(result.annotated)))
        result.labels.append(SessionLabel(
            key=bindings[session.key_entity],
            anomaly=int(anomaly_flags[s]),
            failure_class=int(classes[s]),
        ))
    return result


# ---------------------------------------------------------------------------
# Label file I/O (tab-separated: key, anomaly, failure_class)
# ---------------------------------------------------------------------------

def write_labels(path: str, labels: list[SessionLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("key\tanomaly\tfailure_class\n")
        for label in labels:
            fh.write("%s\t%d\t%d\n"
                     % (label.key, label.anomaly, label.failure_class))


def read_labels(path: str) -> list[SessionLabel]:
    out: list[SessionLabel] = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != "key\tanomaly\tfailure_class":
            raise SynthError("unexpected label header: %r" % header)
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise SynthError("expected 3 fields at line %d" % line_no)
            out.append(SessionLabel(
                key=fields[0], anomaly=int(fields[1]),
                failure_class=int(fields[2]),
            ))
    return out
