from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhysicsConstants:
    """Proton gyromagnetic ratio (Hz/T) and vacuum permeability (T m/A)."""

    gamma: float = 42.5774768e6
    mu0: float = 4e-7 * np.pi

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be positive")
        if not (np.isfinite(self.mu0) and self.mu0 > 0):
            raise ValueError("mu0 must be positive")


DEFAULT_CONSTANTS = PhysicsConstants()

# Nominal remanence (T) of the two cube grades; override per run if measured.
REMANENCE = {"N42": 1.30, "N52": 1.45}

CUBE_SIDE_1IN = 0.0254
