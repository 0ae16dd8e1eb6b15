"""Shell router: turns an agent request plus precursor token streams into
``prefill_only`` increments and a final ``generate`` call.

Protocol, per request:

1. No dependencies: forward straight to ``generate``.
2. Dependencies: the prompt is split into prefix, one slot per precursor, and
   suffix. The prefix is prefilled at once; the first slot is watched.
3. Chunks arriving in the active slot's prompt cache are fetched, appended and
   prefilled incrementally, one call in flight at a time; whatever piled up
   meanwhile goes out as the next call. A slot is complete when its precursor
   has finished and every one of its tokens is fetched; only then may the next
   slot start (the KV prefix must stay contiguous). A call that completes a
   slot carries on into the following segments' available tokens, so one
   startup overhead covers the whole tail.
4. After the last slot the suffix is prefilled and ``generate`` is issued with
   the full prompt, by then almost entirely resident in KV.

Backends without a ``prefill_only`` entrypoint get accumulate-then-generate:
the router waits for every precursor and sends the assembled prompt in one
``generate`` call.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

from treemoa.prompt import PromptTemplate, SlotSpec, assemble
from treemoa.topology import AgentId


class RouterError(RuntimeError):
    pass


class Backend(Protocol):
    supports_prefill_only: bool

    def prefill_only(self, agent: AgentId, start: int, tokens: Sequence[int]) -> None: ...

    def generate(self, agent: AgentId, tokens: Sequence[int]) -> None: ...

    def release(self, agent: AgentId, upto: int) -> None: ...


class ApcQueue:
    """Agent prompt cache for one (successor, precursor) pair: a FIFO of
    decoded chunks, single producer (the precursor's decode stream) and single
    consumer (the router)."""

    def __init__(self, precursor: AgentId) -> None:
        self.precursor = precursor
        self.pending: deque[tuple[float, tuple[int, ...]]] = deque()
        self.received: list[int] = []
        self.done = False

    def push(self, tokens: Sequence[int], t: float = 0.0) -> None:
        if self.done:
            raise RouterError(f"chunk from {self.precursor} after its stream ended")
        chunk = tuple(tokens)
        self.received.extend(chunk)
        if chunk:
            self.pending.append((t, chunk))

    def drain(self) -> list[int]:
        out: list[int] = []
        while self.pending:
            out.extend(self.pending.popleft()[1])
        return out


class SlotPhase(str, enum.Enum):
    WAITING = "waiting"
    FILLING = "filling"
    COMPLETE = "complete"
    CANCELLED = "cancelled"


@dataclass
class SlotState:
    spec: SlotSpec
    phase: SlotPhase = SlotPhase.WAITING
    start: int | None = None
    prefilled: int = 0
    held: list[int] = field(default_factory=list)

    @property
    def precursor(self) -> AgentId:
        return self.spec.precursor


class ShellRouter:
    def __init__(
        self,
        agent: AgentId,
        template: PromptTemplate,
        backend: Backend,
        incremental: bool = True,
        clock: Callable[[], float] = lambda: 0.0,
        min_fetch_interval: float = 0.0,
        call_later: Callable[[float, Callable[[], None]], None] | None = None,
        call_soon: Callable[[Callable[[], None]], None] | None = None,
    ) -> None:
        """``call_soon``, when given, defers the reaction to an input until the
        host has delivered every other input for the same instant, so inputs
        that coincide in time are batched into one call."""
        self.agent = agent
        self.template = template
        self.backend = backend
        self.incremental = incremental and getattr(backend, "supports_prefill_only", False)
        self.clock = clock
        self.min_fetch_interval = min_fetch_interval
        self.call_later = call_later
        self.call_soon = call_soon
        self._soon_pending = False
        self.apc = {s.precursor: ApcQueue(s.precursor) for s in template.slots}
        self.slots = [SlotState(s) for s in template.slots]
        self.tokens: list[int] = []
        self.calls: list[dict[str, Any]] = []
        self.reclaimed_tokens = 0
        self.generated = False
        self.stopped = False
        self._cursor = 0
        self._in_flight: list[tuple[int | None, int]] | None = None  # (slot index or None, tokens) per part
        self._last_fetch = float("-inf")
        self._wake_pending = False
        self._pumping = False
        self._again = False

    # -- inputs -------------------------------------------------------------

    @property
    def dependencies(self) -> tuple[AgentId, ...]:
        return self.template.precursors

    def start(self) -> None:
        if not self.slots:
            self._generate(list(self.template.prefix) + list(self.template.suffix))
            return
        self.pump()

    def on_chunk(self, precursor: AgentId, tokens: Sequence[int], final: bool = False) -> None:
        """Queue a decoded chunk. ``final`` marks the last chunk of the stream,
        so the slot completes in the same step as its tail arrives."""
        q = self.apc[precursor]
        if self._slot(precursor).phase == SlotPhase.CANCELLED:
            return
        q.push(tokens, self.clock())
        if final:
            q.done = True
        self._kick()

    def on_precursor_done(self, precursor: AgentId) -> None:
        if self._slot(precursor).phase == SlotPhase.CANCELLED:
            return
        self.apc[precursor].done = True
        self._kick()

    def on_precursor_cancelled(self, precursor: AgentId) -> None:
        slot = self._slot(precursor)
        if slot.phase == SlotPhase.COMPLETE:
            raise RouterError(f"{self.agent}: cannot drop completed slot of {precursor}")
        if slot.phase == SlotPhase.CANCELLED:
            return
        was_filling = slot.phase == SlotPhase.FILLING
        slot.phase = SlotPhase.CANCELLED
        self.apc[precursor].pending.clear()
        if was_filling and not self._in_flight_on(slot):
            self._reclaim(slot)
        self._kick()

    def on_prefill_done(self) -> None:
        if self._in_flight is None:
            raise RouterError(f"{self.agent}: prefill completion with nothing in flight")
        parts = self._in_flight
        self._in_flight = None
        for idx, n in parts:
            if idx is not None:
                self.slots[idx].prefilled += n
        for idx, _ in parts:
            if idx is not None and self.slots[idx].phase == SlotPhase.CANCELLED:
                self._reclaim(self.slots[idx])
        self._kick()

    def stop(self) -> None:
        """The routed agent itself was cancelled."""
        self.stopped = True

    # -- state machine ------------------------------------------------------

    def surviving_template(self) -> PromptTemplate:
        return self.template.without(s.precursor for s in self.slots if s.phase == SlotPhase.CANCELLED)

    def expected_prompt(self) -> tuple[int, ...]:
        """The prompt assembled from the surviving precursors' complete outputs."""
        tmpl = self.surviving_template()
        return assemble(tmpl, {p: self.apc[p].received for p in tmpl.precursors}).tokens

    def _kick(self) -> None:
        if self.call_soon is None:
            self.pump()
            return
        if self._soon_pending:
            return
        self._soon_pending = True

        def run() -> None:
            self._soon_pending = False
            self.pump()

        self.call_soon(run)

    def pump(self) -> None:
        if self._pumping:
            self._again = True
            return
        self._pumping = True
        try:
            while True:
                self._again = False
                self._step()
                if not self._again:
                    break
        finally:
            self._pumping = False

    def _step(self) -> None:
        if self.generated or self.stopped or self._in_flight is not None:
            return
        if not self.incremental:
            resolved = all(s.phase == SlotPhase.CANCELLED or self.apc[s.precursor].done for s in self.slots)
            if resolved:
                self._generate(list(self.expected_prompt()))
            return
        # Collect one prefill_only call. Segments are walked in order and the
        # call keeps growing past a segment only if that segment is complete,
        # so the KV prefix stays contiguous and backlog costs one overhead.
        k = len(self.slots)
        tokens: list[int] = []
        parts: list[tuple[int | None, int]] = []
        labels: list[str] = []
        while True:
            if self._cursor == 0:
                self._cursor = 1
                if self.template.prefix:
                    tokens += self.template.prefix
                    parts.append((None, len(self.template.prefix)))
                    labels.append("prefix")
                continue
            if self._cursor <= k:
                idx = self._cursor - 1
                slot = self.slots[idx]
                if slot.phase == SlotPhase.CANCELLED:
                    self._cursor += 1
                    continue
                q = self.apc[slot.precursor]
                if slot.phase == SlotPhase.WAITING:
                    slot.phase = SlotPhase.FILLING
                    slot.start = len(self.tokens) + len(tokens)
                    slot.held = list(slot.spec.separator)
                if q.pending and not tokens and self._throttled():
                    return
                chunk = q.drain()
                if chunk or (q.done and slot.held):
                    piece = slot.held + chunk
                    slot.held = []
                    tokens += piece
                    parts.append((idx, len(piece)))
                    labels.append(f"slot:{slot.precursor}")
                if q.done:
                    slot.phase = SlotPhase.COMPLETE
                    self._cursor += 1
                    continue
                break
            if self._cursor == k + 1:
                self._cursor += 1
                if self.template.suffix:
                    tokens += self.template.suffix
                    parts.append((None, len(self.template.suffix)))
                    labels.append("suffix")
                continue
            break
        if tokens:
            self._last_fetch = self.clock()
            self._issue(tokens, parts, "+".join(labels))
            return
        if self._cursor > k + 1:
            if self.tokens != list(self.expected_prompt()):
                raise RouterError(f"{self.agent}: incrementally built prompt diverged from the assembled prompt")
            self._generate(list(self.tokens))

    def _throttled(self) -> bool:
        if self.min_fetch_interval <= 0:
            return False
        wait = self._last_fetch + self.min_fetch_interval - self.clock()
        if wait <= 0:
            return False
        if self.call_later is None:
            return False
        if not self._wake_pending:
            self._wake_pending = True

            def wake() -> None:
                self._wake_pending = False
                self.pump()

            self.call_later(wait, wake)
        return True

    def _in_flight_on(self, slot: SlotState) -> bool:
        return self._in_flight is not None and any(
            idx is not None and self.slots[idx] is slot for idx, _ in self._in_flight
        )

    def _reclaim(self, slot: SlotState) -> None:
        if slot.start is None:
            return
        n = len(self.tokens) - slot.start
        if n > 0:
            del self.tokens[slot.start:]
            self.reclaimed_tokens += slot.prefilled
            self.calls.append({"t": self.clock(), "call": "release", "upto": slot.start, "n": n})
            self.backend.release(self.agent, slot.start)
        slot.held = []

    def _issue(self, tokens: list[int], parts: list[tuple[int | None, int]], segment: str) -> None:
        start = len(self.tokens)
        self.tokens.extend(tokens)
        self._in_flight = parts
        self.calls.append({"t": self.clock(), "call": "prefill_only", "start": start, "n": len(tokens),
                           "segment": segment})
        self.backend.prefill_only(self.agent, start, tokens)

    def _generate(self, tokens: list[int]) -> None:
        self.generated = True
        self.calls.append({"t": self.clock(), "call": "generate", "n": len(tokens)})
        self.backend.generate(self.agent, tokens)

    def _slot(self, precursor: AgentId) -> SlotState:
        for s in self.slots:
            if s.precursor == precursor:
                return s
        raise RouterError(f"{self.agent} has no slot for {precursor}")
