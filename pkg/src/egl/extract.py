"""Entity sequence extraction from raw behavior logs.

Tagging is deterministic lexicon matching: greedy longest match, left to
right, on word boundaries over the normalized text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .core import CodecError, EntityLexicon, UserEntitySequence, normalize_name

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class BehaviorLog:
    user_id: int
    timestamp: int
    text: str


def read_logs(path: str | Path) -> list[BehaviorLog]:
    """Parse JSON Lines ``{"user_id": int, "ts": int, "text": str}``."""
    logs: list[BehaviorLog] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                logs.append(BehaviorLog(int(rec["user_id"]), int(rec["ts"]), str(rec["text"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise CodecError(f"{path}:{lineno}: bad log record: {exc}") from None
    return logs


def write_logs(logs: Iterable[BehaviorLog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(
                json.dumps(
                    {"user_id": log.user_id, "ts": log.timestamp, "text": log.text},
                    separators=(",", ":"),
                )
                + "\n"
            )


class EntityTagger:
    """Reusable matcher for one lexicon; builds its candidate index once."""

    def __init__(self, lexicon: EntityLexicon):
        if len(lexicon) == 0:
            raise ValueError("cannot tag with an empty lexicon")
        self._lexicon = lexicon
        # Names grouped by first character, longest first, so the greedy scan
        # tries the longest candidate at each boundary position.
        index: dict[str, list[tuple[str, int]]] = {}
        for ent in lexicon:
            index.setdefault(ent.name[0], []).append((ent.name, ent.id))
        for cands in index.values():
            cands.sort(key=lambda t: (-len(t[0]), t[1]))
        self._index = index

    def tag(self, text: str) -> list[tuple[int, int]]:
        """Return (entity_id, offset) matches; offsets index the normalized text."""
        norm = normalize_name(text)
        out: list[tuple[int, int]] = []
        n = len(norm)
        p = 0
        while p < n:
            ch = norm[p]
            at_boundary = p == 0 or not norm[p - 1].isalnum()
            if at_boundary and ch in self._index:
                matched = False
                for name, eid in self._index[ch]:
                    end = p + len(name)
                    if norm.startswith(name, p) and (end == n or not norm[end].isalnum()):
                        out.append((eid, p))
                        p = end
                        matched = True
                        break
                if matched:
                    continue
            p += 1
        return out


def tag_entities(text: str, lexicon: EntityLexicon) -> list[tuple[int, int]]:
    """One-shot tagging; builds a fresh tagger (reuse EntityTagger in bulk loops)."""
    return EntityTagger(lexicon).tag(text)


def build_sequences(
    logs: list[BehaviorLog],
    lexicon: EntityLexicon,
    window_days: int = 30,
    now: int | None = None,
) -> list[UserEntitySequence]:
    """Build per-user chronological entity sequences from behavior logs.

    Logs older than ``window_days`` before ``now`` (default: the newest log
    timestamp) are dropped.  Users whose remaining logs tag no entities are
    omitted.  Output is independent of input log order: per-user logs are
    sorted by (timestamp, text) before tagging.
    """
    if not logs:
        return []
    if now is None:
        now = max(log.timestamp for log in logs)
    cutoff = now - window_days * SECONDS_PER_DAY

    tagger = EntityTagger(lexicon)
    by_user: dict[int, list[BehaviorLog]] = {}
    for log in logs:
        if log.timestamp >= cutoff:
            by_user.setdefault(log.user_id, []).append(log)

    sequences: list[UserEntitySequence] = []
    for uid in sorted(by_user):
        events: list[tuple[int, int]] = []
        for log in sorted(by_user[uid], key=lambda l: (l.timestamp, l.text)):
            for eid, _offset in tagger.tag(log.text):
                events.append((log.timestamp, eid))
        if events:
            sequences.append(UserEntitySequence(uid, tuple(events)))
    return sequences
