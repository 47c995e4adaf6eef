"""The accumulated instance→concept knowledge base.

Each instance maps to one record per concept seen with it, carrying an
occurrence count and a first-seen sequence number.  Lookup returns the
majority concept, with ties broken by age.  Persistence is a small
tab-separated format that round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

KB_MAGIC = "semlog-kb v1"


class KnowledgeError(ValueError):
    """Raised for invalid knowledge-base inputs or malformed files."""


@dataclass
class ConceptRecord:
    concept: str
    count: int
    first_seen: int


@dataclass
class KnowledgeBase:
    entries: dict[str, list[ConceptRecord]] = field(default_factory=dict)
    insert_counter: int = 0

    def add(self, concept: str, instance: str) -> None:
        kb_add(self, concept, instance)

    def lookup(self, instance: str) -> str | None:
        return kb_lookup(self, instance)

    def copy(self) -> "KnowledgeBase":
        out = KnowledgeBase(insert_counter=self.insert_counter)
        for instance, records in self.entries.items():
            out.entries[instance] = [
                ConceptRecord(r.concept, r.count, r.first_seen) for r in records
            ]
        return out


def kb_add(kb: KnowledgeBase, concept: str, instance: str) -> KnowledgeBase:
    """Record one (concept, instance) observation."""
    if not concept or not instance:
        raise KnowledgeError("concept and instance must be non-empty")
    kb.insert_counter += 1
    records = kb.entries.setdefault(instance, [])
    for record in records:
        if record.concept == concept:
            record.count += 1
            return kb
    records.append(ConceptRecord(concept, 1, kb.insert_counter))
    return kb


def kb_lookup(kb: KnowledgeBase, instance: str) -> str | None:
    """Majority concept for an instance; ties go to the oldest record."""
    records = kb.entries.get(instance)
    if not records:
        return None
    best = max(records, key=lambda r: (r.count, -r.first_seen))
    return best.concept


def kb_save(path: str, kb: KnowledgeBase) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%s counter=%d\n" % (KB_MAGIC, kb.insert_counter))
        for instance in kb.entries:
            for record in kb.entries[instance]:
                fh.write("%s\t%s\t%d\t%d\n"
                         % (instance, record.concept, record.count,
                            record.first_seen))


def kb_load(path: str) -> KnowledgeBase:
    kb = KnowledgeBase()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header:
            return kb  # an empty file is an empty knowledge base
        parts = header.split(" counter=")
        if parts[0] != KB_MAGIC or len(parts) != 2:
            raise KnowledgeError("malformed header at line 1: %r" % header)
        try:
            kb.insert_counter = int(parts[1])
        except ValueError:
            raise KnowledgeError(
                "malformed counter at line 1: %r" % parts[1]
            ) from None
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise KnowledgeError(
                    "expected 4 tab-separated fields at line %d" % line_no
                )
            instance, concept, count_s, seen_s = fields
            try:
                count, seen = int(count_s), int(seen_s)
            except ValueError:
                raise KnowledgeError(
                    "non-integer count at line %d" % line_no
                ) from None
            if count < 1 or seen < 1 or seen > kb.insert_counter:
                raise KnowledgeError("inconsistent record at line %d" % line_no)
            records = kb.entries.setdefault(instance, [])
            if any(r.concept == concept for r in records):
                raise KnowledgeError(
                    "duplicate (instance, concept) record at line %d" % line_no
                )
            records.append(ConceptRecord(concept, count, seen))
    return kb
