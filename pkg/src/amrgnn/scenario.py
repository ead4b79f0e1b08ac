"""Material and crack-scenario configuration shared by the oracle and the records."""
from __future__ import annotations

from dataclasses import asdict, dataclass
import math


class InvalidScenario(ValueError):
    pass


CRACK_KINDS = ("left-edge", "center", "right-edge")
LOAD_MODES = ("tension", "shear")


@dataclass(frozen=True)
class MaterialParams:
    E: float = 210e9
    nu: float = 0.3
    Gc: float = 2.7
    d: float = 0.0125
    eta: float = 1e-6

    def __post_init__(self):
        if not self.E > 0:
            raise InvalidScenario("E must be positive")
        if not -1 < self.nu < 0.5:
            raise InvalidScenario("nu must lie in (-1, 0.5)")
        if not self.Gc > 0 or not self.d > 0:
            raise InvalidScenario("Gc and d must be positive")
        if not 0 < self.eta < 1e-2:
            raise InvalidScenario("eta must be a small positive floor")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScenarioConfig:
    """Initial crack and loading.

    ``crack_position`` is the height of the crack mouth for edge cracks and
    of the crack centre for center cracks; the centre crack sits at mid-width.
    ``crack_angle`` rotates the crack counter-clockwise from the direction
    pointing into the domain (mirrored for right-edge cracks).
    ``shear_sign`` orients the shear load along +x (1) or -x (-1).
    """

    kind: str = "left-edge"
    mode: str = "tension"
    crack_length: float = 0.25
    crack_position: float = 0.25
    crack_angle: float = 0.0
    load_increment: float = 1e-6
    steps: int = 20
    shear_sign: int = 1

    def __post_init__(self):
        if self.kind not in CRACK_KINDS:
            raise InvalidScenario(f"unknown crack kind {self.kind!r}")
        if self.mode not in LOAD_MODES:
            raise InvalidScenario(f"unknown loading mode {self.mode!r}")
        if not self.load_increment > 0:
            raise InvalidScenario("load_increment must be positive")
        if self.steps < 0 or self.crack_length < 0:
            raise InvalidScenario("steps and crack_length must be non-negative")
        if self.shear_sign not in (1, -1):
            raise InvalidScenario("shear_sign must be +1 or -1")

    def segment(self, side: float) -> tuple[tuple[float, float], tuple[float, float]]:
        """End points of the initial crack in meters."""
        c, s = math.cos(self.crack_angle), math.sin(self.crack_angle)
        y = self.crack_position
        if self.kind == "left-edge":
            return (0.0, y), (self.crack_length * c, y + self.crack_length * s)
        if self.kind == "right-edge":
            return (side, y), (side - self.crack_length * c, y + self.crack_length * s)
        h = 0.5 * self.crack_length
        x0 = 0.5 * side
        return (x0 - h * c, y - h * s), (x0 + h * c, y + h * s)

    def load_vector(self) -> tuple[float, float]:
        """Top-edge displacement increment ``(u0, v0)`` per load step."""
        if self.mode == "tension":
            return 0.0, self.load_increment
        return self.shear_sign * self.load_increment, 0.0

    def mirrored(self) -> "ScenarioConfig":
        kind = {"left-edge": "right-edge", "right-edge": "left-edge", "center": "center"}[self.kind]
        return ScenarioConfig(kind, self.mode, self.crack_length, self.crack_position,
                              -self.crack_angle if self.kind == "center" else self.crack_angle,
                              self.load_increment, self.steps,
                              -self.shear_sign if self.mode == "shear" else self.shear_sign)

    def to_dict(self) -> dict:
        return asdict(self)
