"""Per-step run records, per-user-count aggregates and their CSV forms."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

STEP_FIELDS = ["step", "users", "p99_ms", "qos_violation", "total_cores", "reward"]
SUMMARY_FIELDS = ["users", "steps", "mean_cores", "max_cores", "mean_p99_ms", "violation_rate"]


@dataclass
class RunMetrics:
    """Columns of per-step records; actions are stored as fractions of the caps."""

    m: int
    columns: dict = field(default_factory=lambda: {k: [] for k in STEP_FIELDS})
    actions: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.columns["step"])

    def add(self, step: int, users: int, p99_ms: float, qos_ms: float, total_cores: float,
            reward: float, action) -> None:
        c = self.columns
        c["step"].append(int(step))
        c["users"].append(int(users))
        c["p99_ms"].append(float(p99_ms))
        c["qos_violation"].append(int(p99_ms > qos_ms))
        c["total_cores"].append(float(total_cores))
        c["reward"].append(float(reward))
        self.actions.append(np.asarray(action, dtype=np.float64).copy())

    def array(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name])

    def action_matrix(self) -> np.ndarray:
        return np.array(self.actions).reshape(len(self), self.m)

    def summary(self) -> list[dict]:
        """One row per user count (ascending) plus a final ``all`` row over every step."""
        users = self.array("users")
        rows = [self._aggregate(users == u, int(u)) for u in np.unique(users)]
        if len(self):
            rows.append(self._aggregate(np.ones(len(self), bool), "all"))
        return rows

    def _aggregate(self, mask, label) -> dict:
        cores = self.array("total_cores")[mask]
        return {"users": label, "steps": int(mask.sum()), "mean_cores": float(cores.mean()),
                "max_cores": float(cores.max()), "mean_p99_ms": float(self.array("p99_ms")[mask].mean()),
                "violation_rate": float(self.array("qos_violation")[mask].mean())}

    def overall(self) -> dict:
        return self.summary()[-1]

    def truncate(self, n: int) -> None:
        for v in self.columns.values():
            del v[n:]
        del self.actions[n:]

    # array form for checkpoints
    def to_arrays(self, prefix: str = "metrics") -> dict:
        out = {f"{prefix}.{k}": np.asarray(v, dtype=np.int64 if k in ("step", "users", "qos_violation")
                                           else np.float64) for k, v in self.columns.items()}
        out[f"{prefix}.actions"] = self.action_matrix()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, m: int, prefix: str = "metrics") -> "RunMetrics":
        rm = cls(m)
        for k in STEP_FIELDS:
            rm.columns[k] = arrays[f"{prefix}.{k}"].tolist()
        rm.actions = list(np.asarray(arrays[f"{prefix}.actions"]).reshape(-1, m))
        return rm


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def export_metrics(metrics: RunMetrics, path) -> None:
    """Per-step CSV: the fixed columns then ``a0 .. a{M-1}`` (action fractions)."""
    header = STEP_FIELDS + [f"a{i}" for i in range(metrics.m)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        acts = metrics.actions
        for i in range(len(metrics)):
            w.writerow([_fmt(metrics.columns[k][i]) for k in STEP_FIELDS] + [_fmt(x) for x in acts[i]])


def export_summary(metrics: RunMetrics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for row in metrics.summary():
            w.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])


def read_metrics(path) -> RunMetrics:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = len(header) - len(STEP_FIELDS)
    rm = RunMetrics(m)
    for row in body:
        rec = dict(zip(header, row))
        for k in STEP_FIELDS:
            rm.columns[k].append(int(rec[k]) if k in ("step", "users", "qos_violation") else float(rec[k]))
        rm.actions.append(np.array([float(x) for x in row[len(STEP_FIELDS):]]))
    return rm
