"""Control actions shared by the simulator and the loading controller."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class ActionKind(str, Enum):
    OPTICAL_PUMPING = "OpticalPumping"
    DEPUMPING = "Depumping"
    WEAK_REPUMPING = "WeakRepumping"
    PUSH_OUT = "PushOut"
    ATOM_CHECK = "AtomCheck"


DEFAULT_DURATIONS_US = {
    ActionKind.OPTICAL_PUMPING: 5000,
    ActionKind.DEPUMPING: 500,
    ActionKind.WEAK_REPUMPING: 1000,
    ActionKind.PUSH_OUT: 200,
    ActionKind.ATOM_CHECK: 1000,
}


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    duration_us: int = 0
    with_repumper: bool = False

    def __post_init__(self):
        if self.duration_us == 0:
            object.__setattr__(self, "duration_us", DEFAULT_DURATIONS_US[self.kind])
        if self.duration_us <= 0:
            raise ValueError("action duration must be positive")
        if self.with_repumper and self.kind is not ActionKind.ATOM_CHECK:
            raise ValueError("only AtomCheck takes a repumper")

    @property
    def label(self) -> str:
        if self.kind is ActionKind.ATOM_CHECK:
            return "AtomCheck+R" if self.with_repumper else "AtomCheck"
        return self.kind.value

    @classmethod
    def check(cls, with_repumper: bool = False, duration_us: int = 0) -> "Action":
        return cls(ActionKind.ATOM_CHECK, duration_us, with_repumper)
