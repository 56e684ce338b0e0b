"""Frozen metrics row schema and CSV helpers shared by the loop and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

METRICS_HEADER = (
    "iteration,task,adaptation_mode,filter_mode,n_rollouts,n_success,"
    "success_rate,mean_episode_length,seed"
)


class MetricsError(ValueError):
    """Malformed metrics CSV."""

    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    task: str
    adaptation_mode: str
    filter_mode: str
    n_rollouts: int
    n_success: int
    success_rate: float
    mean_episode_length: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success_rate {self.success_rate} outside [0, 1]")

    def to_csv(self) -> str:
        return (
            f"{self.iteration},{self.task},{self.adaptation_mode},{self.filter_mode},"
            f"{self.n_rollouts},{self.n_success},{self.success_rate:.6f},"
            f"{self.mean_episode_length:.4f},{self.seed}"
        )


def parse_metrics(text: str) -> list[MetricsRow]:
    lines = text.strip().splitlines()
    if not lines:
        raise MetricsError("empty metrics file", 1)
    if lines[0].strip() != METRICS_HEADER:
        raise MetricsError(f"bad header {lines[0]!r}", 1)
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise MetricsError(f"expected 9 fields, got {len(parts)}", i)
        try:
            rows.append(
                MetricsRow(
                    iteration=int(parts[0]),
                    task=parts[1],
                    adaptation_mode=parts[2],
                    filter_mode=parts[3],
                    n_rollouts=int(parts[4]),
                    n_success=int(parts[5]),
                    success_rate=float(parts[6]),
                    mean_episode_length=float(parts[7]),
                    seed=int(parts[8]),
                )
            )
        except ValueError as e:
            raise MetricsError(str(e), i) from e
    return rows
