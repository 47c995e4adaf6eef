"""The joint parser: implicit-semantics discovery against the knowledge
base, conceptualized template extraction, and stream-level assembly.

Discovery follows the accumulation algorithm literally.  Concept and
instance pools are index sets taken from the miner categories; a pair is
"superior" when, at the moment it is processed, one endpoint is still in
the concept pool and the other still in the instance pool.  Superior
pairs feed the knowledge base; remaining instances are resolved against
accumulated knowledge; whatever is left becomes orphans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import logio
from .knowledge import KnowledgeBase, kb_add, kb_lookup
from .miner import MinerModel, MinerOutput, infer_message

TEMPLATE_WILDCARD = "<*>"


class ParseError(ValueError):
    """Raised for corrupt miner outputs or malformed parse files."""


@dataclass
class DiscoveryResult:
    """Output of one discovery pass, in processing order.

    `pairs` is superior + implicit + other: the other (non-superior)
    explicit pairs are reported but never enter the knowledge base and
    never drive template substitution.
    """

    superior_pairs: list[tuple[str, str]] = field(default_factory=list)
    implicit_pairs: list[tuple[str, str]] = field(default_factory=list)
    other_pairs: list[tuple[str, str]] = field(default_factory=list)
    concepts: list[str] = field(default_factory=list)
    instances: list[str] = field(default_factory=list)

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return self.superior_pairs + self.implicit_pairs + self.other_pairs

    @property
    def semantic_pairs(self) -> list[tuple[str, str]]:
        return self.superior_pairs + self.implicit_pairs


@dataclass
class ParseResult:
    """Conceptualized template plus the semantics mined from one message."""

    template: tuple[str, ...]
    ci_pairs: tuple[tuple[str, str], ...]
    orphan_concepts: tuple[str, ...]
    orphan_instances: tuple[str, ...]
    other_pairs: tuple[tuple[str, str], ...] = ()


def discover_implicit(miner_out: MinerOutput, message: logio.LogMessage,
                      kb: KnowledgeBase) -> tuple[DiscoveryResult, KnowledgeBase]:
    """Resolve explicit pairs and recover implicit ones from the kb.

    Returns the discovery result and the (mutated) knowledge base.
    """
    tokens = message.tokens
    n = len(tokens)
    if len(miner_out.categories) != n:
        raise ParseError("miner output does not align with the message")
    concept_pool = {i for i, c in enumerate(miner_out.categories)
                    if c == logio.CONCEPT}
    instance_pool = {i for i, c in enumerate(miner_out.categories)
                     if c == logio.INSTANCE}
    result = DiscoveryResult()

    for a, b in miner_out.explicit_pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise ParseError("explicit pair (%d, %d) out of range" % (a, b))
        if a in concept_pool and b in instance_pool:
            c_idx, i_idx = a, b
        elif b in concept_pool and a in instance_pool:
            c_idx, i_idx = b, a
        else:
            result.other_pairs.append((tokens[a], tokens[b]))
            continue
        kb_add(kb, tokens[c_idx], tokens[i_idx])
        result.superior_pairs.append((tokens[c_idx], tokens[i_idx]))
        concept_pool.discard(c_idx)
        instance_pool.discard(i_idx)

    for i_idx in sorted(instance_pool):
        found = kb_lookup(kb, tokens[i_idx])
        if found is not None:
            result.implicit_pairs.append((found, tokens[i_idx]))
            result.concepts.append(found)
            instance_pool.discard(i_idx)

    result.concepts.extend(tokens[i] for i in sorted(concept_pool))
    result.instances.extend(tokens[i] for i in sorted(instance_pool))
    return result, kb


def conceptualize(message: logio.LogMessage,
                  pairs: Sequence[tuple[str, str]],
                  orphan_instances: Sequence[str]) -> list[str]:
    """Replace instances with ⟨*concept*⟩ slots and orphans with ⟨*⟩.

    Matching is by token text; a token claimed by several pairs takes the
    first pair in order.
    """
    slot_for: dict[str, str] = {}
    for concept, instance in pairs:
        if instance not in slot_for:
            slot_for[instance] = "<*%s*>" % concept
    orphans = set(orphan_instances)
    template: list[str] = []
    for token in message.tokens:
        if token in slot_for:
            template.append(slot_for[token])
        elif token in orphans:
            template.append(TEMPLATE_WILDCARD)
        else:
            template.append(token)
    return template


def parse_message(message: logio.LogMessage, miner_out: MinerOutput,
                  kb: KnowledgeBase) -> ParseResult:
    """Discovery plus conceptualization for one already-mined message."""
    disc, _ = discover_implicit(miner_out, message, kb)
    template = conceptualize(message, disc.semantic_pairs, disc.instances)
    return ParseResult(
        template=tuple(template),
        ci_pairs=tuple(disc.semantic_pairs),
        orphan_concepts=tuple(disc.concepts),
        orphan_instances=tuple(disc.instances),
        other_pairs=tuple(disc.other_pairs),
    )


def parse_stream(messages: Iterable[logio.LogMessage], model: MinerModel,
                 table, kb: KnowledgeBase | None = None
                 ) -> tuple[list[ParseResult], KnowledgeBase]:
    """Mine and parse messages in order, threading the knowledge base."""
    if kb is None:
        kb = KnowledgeBase()
    results: list[ParseResult] = []
    for message in messages:
        miner_out = infer_message(message, model, table)
        results.append(parse_message(message, miner_out, kb))
    return results, kb


# ---------------------------------------------------------------------------
# Serialization: one JSON object per message.
# ---------------------------------------------------------------------------

def parse_record(result: ParseResult) -> dict:
    return {
        "template": list(result.template),
        "ci_pairs": [[c, i] for c, i in result.ci_pairs],
        "orphan_concepts": list(result.orphan_concepts),
        "orphan_instances": list(result.orphan_instances),
        "other_pairs": [[a, b] for a, b in result.other_pairs],
    }


def write_parse_results(path: str, results: Iterable[ParseResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(parse_record(result), ensure_ascii=False) + "\n")


def read_parse_results(path: str) -> list[ParseResult]:
    out: list[ParseResult] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(
                    "malformed parse record at line %d: %s" % (line_no, exc)
                ) from None
            try:
                out.append(ParseResult(
                    template=tuple(record["template"]),
                    ci_pairs=tuple((c, i) for c, i in record["ci_pairs"]),
                    orphan_concepts=tuple(record["orphan_concepts"]),
                    orphan_instances=tuple(record["orphan_instances"]),
                    other_pairs=tuple(
                        (a, b) for a, b in record.get("other_pairs", [])
                    ),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(
                    "invalid parse record at line %d: %s" % (line_no, exc)
                ) from None
    return out
