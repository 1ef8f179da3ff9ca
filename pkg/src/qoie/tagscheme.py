"""Semantic BIO tags and rule-based answer-to-passage alignment.

Training labels for the tagging decoder do not exist in tuple-format
corpora, so they are manufactured here: each answer field (subject,
predicate, arguments) is matched to passage positions, matched words get
the field's role, and the first word of every contiguous matched run is
marked B with the rest I. Everything unmatched is O.

Matching rules, in order:

1. Fields are processed arguments first (longest argument first), then
   subject, then predicate.
2. Per field, every bigram of the field is matched at all of its free
   passage occurrences (multiple occurrences are all kept).
3. Field words still uncovered after the bigram pass are matched one
   occurrence each, chosen to minimize the span from the field's leftmost
   matched position to its rightmost. Equal-width choices take the
   leftmost positions.
4. For the predicate only, equal-width choices that lie entirely between
   the matched subject and the matched arguments win over ones that do
   not (span inside [min subject position, max argument position]).
5. A passage position claimed by an earlier field is never reassigned; a
   later field must match elsewhere or drop the word.

``brute_force_align`` re-solves step 3/4 by exhaustive enumeration and is
the test oracle for ``align``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "SemanticTag",
    "TagVocab",
    "AnswerTuple",
    "AlignedExample",
    "build_tag_vocab",
    "align",
    "brute_force_align",
    "tags_to_tuple",
    "collect_role_tokens",
    "collapse_to_bio",
    "validate_tags",
]

OUTSIDE_TAG = "O"


@dataclass(frozen=True)
class SemanticTag:
    """A parsed tag: role S, P or A with argument index, boundary B or I.

    The outside tag has role "O" and no boundary. Canonical text forms are
    "S-B", "S-I", "P-B", "P-I", "A0-B", "A0-I", ... and "O".
    """

    role: str
    arg_index: int | None = None
    boundary: str | None = None

    @property
    def text(self) -> str:
        if self.role == "O":
            return OUTSIDE_TAG
        base = f"A{self.arg_index}" if self.role == "A" else self.role
        return f"{base}-{self.boundary}"

    @staticmethod
    def from_text(text: str) -> "SemanticTag":
        if text == OUTSIDE_TAG:
            return SemanticTag("O")
        try:
            base, boundary = text.split("-")
        except ValueError:
            raise ValueError(f"malformed tag {text!r}") from None
        if boundary not in ("B", "I"):
            raise ValueError(f"malformed tag {text!r}")
        if base in ("S", "P"):
            return SemanticTag(base, None, boundary)
        if base.startswith("A") and base[1:].isdigit():
            return SemanticTag("A", int(base[1:]), boundary)
        raise ValueError(f"malformed tag {text!r}")


def _role_key(tag: str) -> str | None:
    """Role part of a tag string ("S", "P", "A0", ...); None for O."""
    if tag == OUTSIDE_TAG:
        return None
    return tag.rsplit("-", 1)[0]


@dataclass(frozen=True)
class TagVocab:
    """Ordered tag alphabet with a tag <-> id bijection.

    Semantic form: S-B, S-I, P-B, P-I, A0-B, A0-I, ..., A(K-1)-I, O
    (size 5 + 2K). Plain BIO form: B, I, O.
    """

    tags: tuple[str, ...]
    k: int
    semantic: bool

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.tags)


def build_tag_vocab(k: int, semantic: bool = True) -> TagVocab:
    """Build the tag alphabet for at most ``k`` argument slots."""
    if k < 1:
        raise ValueError(f"argument slot count must be at least 1, got {k}")
    if not semantic:
        return TagVocab(("B", "I", "O"), k, False)
    tags = ["S-B", "S-I", "P-B", "P-I"]
    for i in range(k):
        tags.append(f"A{i}-B")
        tags.append(f"A{i}-I")
    tags.append(OUTSIDE_TAG)
    return TagVocab(tuple(tags), k, True)


def collapse_to_bio(tags: Sequence[str]) -> list[str]:
    """Strip roles, keeping only B/I/O."""
    return [t if t == OUTSIDE_TAG else t.rsplit("-", 1)[1] for t in tags]


@dataclass(frozen=True)
class AnswerTuple:
    """A semi-structured answer: subject, predicate, ordered arguments.

    Every field is a word sequence. Training data requires non-empty
    fields and at least one argument; model output may leave fields empty.
    """

    subject: tuple[str, ...]
    predicate: tuple[str, ...]
    arguments: tuple[tuple[str, ...], ...]

    @staticmethod
    def from_strings(subject: str, predicate: str, arguments: Iterable[str]) -> "AnswerTuple":
        return AnswerTuple(
            tuple(subject.split()),
            tuple(predicate.split()),
            tuple(tuple(a.split()) for a in arguments),
        )

    def to_strings(self) -> dict:
        return {
            "subject": " ".join(self.subject),
            "predicate": " ".join(self.predicate),
            "arguments": [" ".join(a) for a in self.arguments],
        }


@dataclass(frozen=True)
class AlignedExample:
    """Passage words and one tag string per word."""

    passage: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.passage) != len(self.tags):
            raise ValueError("passage and tags must have equal length")


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def _ordered_fields(answer: AnswerTuple, k: int, stats: dict | None) -> list[tuple[str, tuple[str, ...]]]:
    """Fields in processing order with their roles.

    Arguments go first, longest first (stable on ties), then subject, then
    predicate. Argument slots beyond k-1 overflow into the last slot.
    """
    args = []
    for i, arg in enumerate(answer.arguments):
        slot = min(i, k - 1)
        if i >= k and stats is not None:
            stats["overflow_arguments"] = stats.get("overflow_arguments", 0) + 1
        args.append((f"A{slot}", arg))
    args.sort(key=lambda item: -len(item[1]))
    return args + [("S", answer.subject), ("P", answer.predicate)]


def _match_bigrams(field: Sequence[str], passage: Sequence[str], free, mine: set[int]) -> None:
    """Claim every free occurrence of every field bigram into ``mine``.

    A position already claimed by this same field still counts as free for
    further bigrams of the field, so overlapping bigrams chain into one run.
    """
    for a, b in zip(field, field[1:]):
        for j in range(len(passage) - 1):
            if passage[j] == a and passage[j + 1] == b:
                if (free[j] or j in mine) and (free[j + 1] or j + 1 in mine):
                    mine.add(j)
                    mine.add(j + 1)


def _single_occurrences(field: Sequence[str], passage: Sequence[str], free, mine: set[int]) -> list[list[int]]:
    """Free occurrence lists for field word types not covered by bigrams."""
    covered = {passage[j] for j in mine}
    lists = []
    seen = set()
    for word in field:
        if word in covered or word in seen:
            continue
        seen.add(word)
        occ = [j for j in range(len(passage)) if passage[j] == word and free[j]]
        if occ:
            lists.append(occ)
    return lists


def _assignment_key(
    chosen: Sequence[int],
    fixed: set[int],
    role: str,
    subject_min: int | None,
    argument_max: int | None,
) -> tuple:
    """Ordering key: span width, then (predicate only) outside-ness of the
    span relative to [subject min, argument max], then leftmost positions."""
    positions = sorted(fixed.union(chosen))
    width = positions[-1] - positions[0] if positions else 0
    outside = 0
    if role == "P" and positions and subject_min is not None and argument_max is not None:
        if not (subject_min <= positions[0] and positions[-1] <= argument_max):
            outside = 1
    return (width, outside, tuple(sorted(chosen)))


def _choose_singles(
    occ_lists: list[list[int]],
    fixed: set[int],
    role: str,
    subject_min: int | None,
    argument_max: int | None,
) -> list[int]:
    """Pick one occurrence per word minimizing the assignment key.

    For any candidate left edge, taking each word's leftmost occurrence at
    or after that edge dominates every assignment with the same left edge,
    so scanning left edges over the union of occurrence positions finds
    the optimum without enumerating the full product.
    """
    if not occ_lists:
        return []
    edges = sorted({p for occ in occ_lists for p in occ})
    best_key = None
    best = None
    for edge in edges:
        chosen = []
        for occ in occ_lists:
            at_or_after = [p for p in occ if p >= edge]
            if not at_or_after:
                chosen = None
                break
            chosen.append(at_or_after[0])
        if chosen is None:
            continue
        key = _assignment_key(chosen, fixed, role, subject_min, argument_max)
        if best_key is None or key < best_key:
            best_key = key
            best = chosen
    return best if best is not None else []


def _runs_to_tags(passage_len: int, claims: dict[str, set[int]]) -> list[str]:
    """Turn per-role position sets into B/I/O strings."""
    role_at: dict[int, str] = {}
    for role, positions in claims.items():
        for j in positions:
            role_at[j] = role
    tags = []
    for j in range(passage_len):
        role = role_at.get(j)
        if role is None:
            tags.append(OUTSIDE_TAG)
        elif j > 0 and role_at.get(j - 1) == role:
            tags.append(f"{role}-I")
        else:
            tags.append(f"{role}-B")
    return tags


def _align_engine(
    answer: AnswerTuple,
    passage: Sequence[str],
    k_args: int,
    stats: dict | None,
    single_chooser,
) -> AlignedExample:
    passage = tuple(w.lower() for w in passage)
    if not passage:
        raise ValueError("passage must be non-empty")
    free = [True] * len(passage)
    claims: dict[str, set[int]] = {}
    subject_min: int | None = None
    argument_max: int | None = None
    for role, field in _ordered_fields(answer, k_args, stats):
        field = tuple(w.lower() for w in field)
        mine: set[int] = set(claims.get(role, set()))
        _match_bigrams(field, passage, free, mine)
        occ_lists = _single_occurrences(field, passage, free, mine)
        mine.update(single_chooser(occ_lists, mine, role, subject_min, argument_max))
        if not mine and field and stats is not None:
            stats["unmatched_fields"] = stats.get("unmatched_fields", 0) + 1
        if mine:
            claims[role] = mine
            for j in mine:
                free[j] = False
            if role == "S":
                subject_min = min(mine) if subject_min is None else min(subject_min, min(mine))
            elif role.startswith("A"):
                peak = max(mine)
                argument_max = peak if argument_max is None else max(argument_max, peak)
    return AlignedExample(passage, tuple(_runs_to_tags(len(passage), claims)))


def align(
    answer: AnswerTuple,
    passage: Sequence[str],
    k_args: int = 4,
    stats: dict | None = None,
) -> AlignedExample:
    """Manufacture the tag row for ``answer`` over ``passage``.

    Matching is exact on lowercased tokens. A field that matches nothing
    contributes no tags and increments ``stats["unmatched_fields"]`` when
    a stats dict is supplied.
    """
    return _align_engine(answer, passage, k_args, stats, _choose_singles)


def _enumerate_singles(
    occ_lists: list[list[int]],
    fixed: set[int],
    role: str,
    subject_min: int | None,
    argument_max: int | None,
) -> list[int]:
    """Oracle chooser: try every combination of occurrence picks."""
    if not occ_lists:
        return []
    best_key = None
    best: tuple[int, ...] = ()
    for combo in itertools.product(*occ_lists):
        key = _assignment_key(combo, fixed, role, subject_min, argument_max)
        if best_key is None or key < best_key:
            best_key = key
            best = combo
    return list(best)


def brute_force_align(
    answer: AnswerTuple,
    passage: Sequence[str],
    k_args: int = 4,
    stats: dict | None = None,
) -> AlignedExample:
    """Exhaustive reference alignment for short passages.

    Identical field order and bigram pass as ``align``, but the
    single-word step enumerates every occurrence assignment and keeps the
    minimum-width one under the same tie-breaks. Passages are capped at 14
    words to bound the enumeration.
    """
    if len(passage) > 14:
        raise ValueError(f"passage too long for brute force ({len(passage)} > 14 words)")
    return _align_engine(answer, passage, k_args, stats, _enumerate_singles)


# ---------------------------------------------------------------------------
# Reconstruction and validation
# ---------------------------------------------------------------------------


def collect_role_tokens(tags: Sequence[str], tokens: Sequence) -> tuple[list, list, list[list]]:
    """Group tokens by role in sequence order.

    Returns (subject tokens, predicate tokens, argument token lists).
    Argument slots run from 0 to the highest index present; trailing empty
    slots are dropped. Works on words or subword ids alike.
    """
    if len(tags) != len(tokens):
        raise ValueError(f"tags length {len(tags)} != tokens length {len(tokens)}")
    subject: list = []
    predicate: list = []
    args: dict[int, list] = {}
    for tag, token in zip(tags, tokens):
        role = _role_key(tag)
        if role is None:
            continue
        if role == "S":
            subject.append(token)
        elif role == "P":
            predicate.append(token)
        else:
            args.setdefault(int(role[1:]), []).append(token)
    max_slot = max(args) if args else -1
    argument_lists = [args.get(i, []) for i in range(max_slot + 1)]
    return subject, predicate, argument_lists


def tags_to_tuple(tags: Sequence[str], passage: Sequence[str]) -> AnswerTuple:
    """Rebuild an answer tuple from a tag row: words with the same role
    are concatenated in passage order; roles with no words come out empty."""
    subject, predicate, argument_lists = collect_role_tokens(tags, passage)
    return AnswerTuple(tuple(subject), tuple(predicate), tuple(tuple(a) for a in argument_lists))


def validate_tags(tags: Sequence[str]) -> list[str]:
    """Report structural violations: an I tag must directly follow a B or
    I tag of the same role. Returns one message per violation."""
    violations = []
    for i, tag in enumerate(tags):
        parsed = SemanticTag.from_text(tag) if "-" in tag or tag == OUTSIDE_TAG else None
        if parsed is None:
            # Plain BIO form.
            if tag == "I" and (i == 0 or tags[i - 1] == OUTSIDE_TAG):
                violations.append(f"position {i}: I tag without preceding B/I")
            continue
        if parsed.boundary != "I":
            continue
        role = _role_key(tag)
        prev_role = _role_key(tags[i - 1]) if i > 0 else None
        if prev_role != role:
            violations.append(
                f"position {i}: {tag} not preceded by a {role} tag"
            )
    return violations
