"""Aggregator prompt layout: prefix, ordered precursor answer slots, suffix.

Tokens are opaque integer ids throughout; nothing here tokenizes text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from treemoa.topology import AgentId


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class SlotSpec:
    precursor: AgentId
    separator: tuple[int, ...] = ()


@dataclass(frozen=True)
class PromptTemplate:
    prefix: tuple[int, ...] = ()
    slots: tuple[SlotSpec, ...] = ()
    suffix: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix", tuple(self.prefix))
        object.__setattr__(self, "suffix", tuple(self.suffix))
        object.__setattr__(self, "slots", tuple(self.slots))
        precs = [s.precursor for s in self.slots]
        if len(set(precs)) != len(precs):
            raise PromptError("a precursor may own at most one slot")

    @property
    def precursors(self) -> tuple[AgentId, ...]:
        return tuple(s.precursor for s in self.slots)

    def without(self, dropped: Iterable[AgentId]) -> "PromptTemplate":
        """The same template with the slots of ``dropped`` precursors removed."""
        dropped = set(dropped)
        return PromptTemplate(self.prefix, tuple(s for s in self.slots if s.precursor not in dropped), self.suffix)

    def length(self, output_lens: Mapping[AgentId, int]) -> int:
        return (
            len(self.prefix)
            + sum(len(s.separator) + output_lens[s.precursor] for s in self.slots)
            + len(self.suffix)
        )


@dataclass(frozen=True)
class Segment:
    """One contiguous range of an aggregator prompt.

    ``kind`` is ``prefix``, ``slot`` or ``suffix``; ``blocked_by`` is the
    precursor whose output fills a slot (None for the dependency-free parts).
    """

    kind: str
    start: int
    end: int
    blocked_by: AgentId | None = None

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class AssembledPrompt:
    tokens: tuple[int, ...]
    segment_map: tuple[Segment, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.tokens)


def assemble(template: PromptTemplate, outputs: Mapping[AgentId, Sequence[int]]) -> AssembledPrompt:
    tokens: list[int] = list(template.prefix)
    segments = [Segment("prefix", 0, len(tokens))]
    for slot in template.slots:
        if slot.precursor not in outputs:
            raise PromptError(f"missing output for precursor {slot.precursor}")
        start = len(tokens)
        tokens.extend(slot.separator)
        tokens.extend(outputs[slot.precursor])
        segments.append(Segment("slot", start, len(tokens), slot.precursor))
    start = len(tokens)
    tokens.extend(template.suffix)
    segments.append(Segment("suffix", start, len(tokens)))
    return AssembledPrompt(tuple(tokens), tuple(segments))


@dataclass(frozen=True)
class SegmentDescriptor:
    kind: str
    tokens: tuple[int, ...] = ()
    blocked_by: AgentId | None = None
    separator: tuple[int, ...] = ()


def segment(template: PromptTemplate) -> list[SegmentDescriptor]:
    """Dependency-labelled segments in prefill order.

    The prefix is free; each slot is blocked by its precursor; the suffix
    becomes free once every slot is filled. With no slots the prefix and
    suffix collapse into a single free segment.
    """
    if not template.slots:
        return [SegmentDescriptor("prefix", template.prefix + template.suffix)]
    out = [SegmentDescriptor("prefix", template.prefix)]
    out.extend(SegmentDescriptor("slot", blocked_by=s.precursor, separator=s.separator) for s in template.slots)
    out.append(SegmentDescriptor("suffix", template.suffix))
    return out


def fill_segments(segments: Sequence[SegmentDescriptor], outputs: Mapping[AgentId, Sequence[int]]) -> tuple[int, ...]:
    """Concatenate segments in order, filling each slot with its precursor's output."""
    tokens: list[int] = []
    for seg in segments:
        if seg.kind == "slot":
            tokens.extend(seg.separator)
            tokens.extend(outputs[seg.blocked_by])
        else:
            tokens.extend(seg.tokens)
    return tuple(tokens)
