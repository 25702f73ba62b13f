"""Composite edit prompts: an ordered list of instructions, each a run of token ids."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Prompt:
    """Ordered instructions; ``labels`` optionally names the edit atom behind each one."""

    instructions: tuple = ()
    labels: tuple | None = None

    def __post_init__(self):
        instr = tuple(tuple(int(t) for t in ins) for ins in self.instructions)
        if any(len(ins) == 0 for ins in instr):
            raise ValueError("instructions must contain at least one token")
        object.__setattr__(self, "instructions", instr)
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != len(instr):
                raise ValueError("one label per instruction")
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.instructions)

    @property
    def n_tokens(self) -> int:
        return sum(len(ins) for ins in self.instructions)

    def spans(self) -> list:
        """Inclusive (start, end) token positions of each instruction after packing."""
        out, pos = [], 0
        for ins in self.instructions:
            out.append((pos, pos + len(ins) - 1))
            pos += len(ins)
        return out

    def without(self, i: int) -> "Prompt":
        """The prompt with instruction ``i`` removed; remaining spans re-pack."""
        if not 0 <= i < len(self):
            raise IndexError(f"instruction {i} out of range for K={len(self)}")
        instr = self.instructions[:i] + self.instructions[i + 1:]
        labels = None if self.labels is None else self.labels[:i] + self.labels[i + 1:]
        return Prompt(instr, labels)

    def collapsed(self) -> "Prompt":
        """All instructions merged into one (the single-instruction view)."""
        if not self.instructions:
            return self
        merged = tuple(t for ins in self.instructions for t in ins)
        return Prompt((merged,), None)


EMPTY = Prompt()
