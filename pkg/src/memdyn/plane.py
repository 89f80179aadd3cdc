"""The vulnerability plane: (FPR, TPR) states, trajectories and grid cells.

A sample's state at one checkpoint is the point (fpr, tpr) in the unit
square. The diagonal fpr == tpr carries no membership signal; the
advantage tpr - fpr measures how far above it a sample sits.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Sequence

import numpy as np


@dataclasses.dataclass(frozen=True)
class VulnerabilityState:
    fpr: float
    tpr: float

    def __post_init__(self):
        for name in ("fpr", "tpr"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def advantage(self) -> float:
        return advantage(self)


def advantage(state: VulnerabilityState) -> float:
    return state.tpr - state.fpr


@dataclasses.dataclass(frozen=True)
class Trajectory:
    """One sample's states at every analysed checkpoint, in epoch order."""

    sample_id: int
    checkpoints: tuple[int, ...]
    states: tuple[VulnerabilityState, ...]

    def __post_init__(self):
        if not self.states:
            raise ValueError("trajectory must hold at least one state")
        if len(self.states) != len(self.checkpoints):
            raise ValueError(
                f"{len(self.states)} states for {len(self.checkpoints)} checkpoints"
            )
        if any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ValueError("checkpoints must be strictly increasing")

    @classmethod
    def from_arrays(cls, sample_id, checkpoints, fpr, tpr) -> "Trajectory":
        states = tuple(VulnerabilityState(float(f), float(t)) for f, t in zip(fpr, tpr))
        return cls(sample_id, tuple(int(c) for c in checkpoints), states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def advantages(self) -> np.ndarray:
        return np.array([s.tpr - s.fpr for s in self.states])

    @property
    def coords(self) -> np.ndarray:
        """(T, 2) array of (fpr, tpr)."""
        return np.array([(s.fpr, s.tpr) for s in self.states], dtype=float)


def velocity(traj: Trajectory, t: int) -> np.ndarray:
    """Displacement (dfpr, dtpr) from checkpoint t to t + 1."""
    if not 0 <= t < len(traj) - 1:
        raise IndexError(f"velocity index {t} out of range for {len(traj)} states")
    a, b = traj.states[t], traj.states[t + 1]
    return np.array([b.fpr - a.fpr, b.tpr - a.tpr])


def speed(traj: Trajectory, t: int) -> float:
    return float(np.hypot(*velocity(traj, t)))


def path_length(traj: Trajectory) -> float:
    """Total absolute change of advantage along the trajectory."""
    return _advantage_path(traj.advantages)


def prefix_path_length(traj: Trajectory, upto: int) -> float:
    """Path length accumulated over the transitions before checkpoint ``upto``."""
    if not 0 <= upto < len(traj):
        raise IndexError(f"upto={upto} out of range for {len(traj)} states")
    return _advantage_path(traj.advantages[: upto + 1])


def _advantage_path(alpha: np.ndarray) -> float:
    if len(alpha) < 2:
        return 0.0
    return float(np.abs(np.diff(alpha)).sum())


def path_lengths(alpha: np.ndarray) -> np.ndarray:
    """Cumulative path length per checkpoint for an (M, T) advantage table.

    Column t holds the path length of each sample up to checkpoint t, so the
    last column is the full path length.
    """
    alpha = np.asarray(alpha, dtype=float)
    steps = np.abs(np.diff(alpha, axis=1))
    out = np.zeros_like(alpha)
    out[:, 1:] = np.cumsum(steps, axis=1)
    return out


@dataclasses.dataclass(frozen=True)
class GridCell:
    """Band indices are 1-based; ``tpr_band`` comes first, as in S_31."""

    tpr_band: int
    fpr_band: int

    @property
    def label(self) -> str:
        return f"S{self.tpr_band}{self.fpr_band}"


@dataclasses.dataclass(frozen=True)
class PlaneGrid:
    resolution: int = 3

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError("grid resolution must be >= 2")

    @property
    def n_cells(self) -> int:
        return self.resolution * self.resolution


TRANSITION_GRID = PlaneGrid(3)


def band(x, resolution: int) -> np.ndarray:
    """0-based band index; the closed top edge 1.0 falls in the last band."""
    b = np.floor(np.asarray(x, dtype=float) * resolution).astype(int)
    return np.clip(b, 0, resolution - 1)


def cell_of(state: VulnerabilityState, grid: PlaneGrid = TRANSITION_GRID) -> GridCell:
    return GridCell(
        int(band(state.tpr, grid.resolution)) + 1,
        int(band(state.fpr, grid.resolution)) + 1,
    )


def cell_index(fpr, tpr, resolution: int = 3) -> np.ndarray:
    """Flat 0-based cell index, row-major over (tpr band, fpr band).

    For the 3x3 grid, S_ij maps to 3 * (i - 1) + (j - 1): S_11 -> 0, S_31 -> 6.
    """
    return band(tpr, resolution) * resolution + band(fpr, resolution)


def cell_label(index: int, resolution: int = 3) -> str:
    return GridCell(index // resolution + 1, index % resolution + 1).label


def stack_trajectories(trajs: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Dense (M, T) fpr and tpr tables from aligned trajectories."""
    if not trajs:
        raise ValueError("empty population")
    T = len(trajs[0])
    if any(len(t) != T for t in trajs):
        raise ValueError("trajectories are not aligned")
    coords = np.stack([t.coords for t in trajs])
    return coords[..., 0], coords[..., 1]
