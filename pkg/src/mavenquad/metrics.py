"""Trajectory recording, CSV export at a fixed precision, and flight metrics.

Every metric is computed on values rounded to 9 significant digits (the CSV
export precision), so recomputing a metric from an exported file reproduces
the in-memory number exactly.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


def round9(v: float) -> float:
    """Round to 9 significant digits through the decimal representation."""
    return float(f"{v:.9g}")


_round9_arr = np.vectorize(round9, otypes=[np.float64])


def round9_array(arr) -> np.ndarray:
    return _round9_arr(np.asarray(arr, dtype=np.float64))


@dataclass
class Trajectory:
    """One episode at full resolution; n+1 rows for an n-step episode.

    Row k holds the state at step k, the action taken from that state
    (zeros on the terminal row), and the latent posterior used at that
    step (the prior on row 0, the post-episode posterior on the last row).
    z_mu/z_var are None for methods without an encoder.
    """

    t: np.ndarray                   # (n+1,) s
    p: np.ndarray                   # (n+1,3) m
    v: np.ndarray                   # (n+1,3) m/s
    w: np.ndarray                   # (n+1,3) rad/s
    throttle: np.ndarray            # (n+1,) normalized [0,1]
    rate_cmd: np.ndarray            # (n+1,3) rad/s commanded body rates
    waypoint_index: np.ndarray      # (n+1,) waypoints passed so far
    n_waypoints: int
    status: int                     # final termination status
    z_mu: np.ndarray = None         # (n+1,D) or None
    z_var: np.ndarray = None

    @property
    def steps(self) -> int:
        return len(self.t) - 1

    def rounded(self) -> "Trajectory":
        z_mu = None if self.z_mu is None else round9_array(self.z_mu)
        z_var = None if self.z_var is None else round9_array(self.z_var)
        return Trajectory(
            t=round9_array(self.t), p=round9_array(self.p),
            v=round9_array(self.v), w=round9_array(self.w),
            throttle=round9_array(self.throttle),
            rate_cmd=round9_array(self.rate_cmd),
            waypoint_index=np.asarray(self.waypoint_index, dtype=np.int64),
            n_waypoints=self.n_waypoints, status=self.status,
            z_mu=z_mu, z_var=z_var)


def trajectory_metrics(traj: Trajectory) -> dict:
    """Completion/velocity/throttle metrics at export precision.

    success: the track's final acceptance sphere was entered. The clock
    stops on the row where the last waypoint registers as passed. Velocity
    and throttle statistics cover rows up to that point (the whole episode
    on failures); the terminal row's zero action never counts.
    """
    r = traj.rounded()
    done = np.flatnonzero(r.waypoint_index >= traj.n_waypoints)
    success = done.size > 0
    n_rows = len(r.t)
    if success:
        k_end = int(done[0])
        completion_time = r.t[k_end]
    else:
        k_end = n_rows - 1
        completion_time = float("nan")

    seg = np.linalg.norm(np.diff(r.p[:k_end + 1], axis=0), axis=1)
    # exactly-rounded sum: independently coded reimplementations agree bitwise
    path_length = math.fsum(seg.tolist())
    avg_vel = path_length / completion_time if success and \
        completion_time > 0.0 else float("nan")
    speeds = np.linalg.norm(r.v[:k_end + 1], axis=1)
    max_vel = float(speeds.max()) if speeds.size else 0.0
    n_act = max(k_end, 1) if success else max(n_rows - 1, 1)
    high = int(np.count_nonzero(r.throttle[:k_end if success else n_rows - 1]
                                > 0.8))
    throttle_frac = 100.0 * high / n_act
    return {"success": bool(success),
            "completion_time": float(completion_time),
            "avg_vel": float(avg_vel), "max_vel": max_vel,
            "throttle_frac": float(throttle_frac), "steps": traj.steps,
            "status": int(traj.status)}


# ---------------------------------------------------------------------------
# CSV export / import

_BASE_COLS = ["t", "px", "py", "pz", "vx", "vy", "vz", "wx", "wy", "wz",
              "throttle", "wcx", "wcy", "wcz"]


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def export_trajectory(traj: Trajectory, path: str) -> None:
    """CSV with one row per step plus the initial state; 9 sig. digits."""
    r = traj.rounded()
    cols = list(_BASE_COLS)
    d = 0
    if r.z_mu is not None:
        d = r.z_mu.shape[1]
        cols += [f"z_mu_{j + 1}" for j in range(d)]
        cols += [f"z_var_{j + 1}" for j in range(d)]
    cols.append("waypoint_index")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for k in range(len(r.t)):
            row = [_fmt(r.t[k])]
            row += [_fmt(x) for x in r.p[k]]
            row += [_fmt(x) for x in r.v[k]]
            row += [_fmt(x) for x in r.w[k]]
            row.append(_fmt(r.throttle[k]))
            row += [_fmt(x) for x in r.rate_cmd[k]]
            if d:
                row += [_fmt(x) for x in r.z_mu[k]]
                row += [_fmt(x) for x in r.z_var[k]]
            row.append(str(int(r.waypoint_index[k])))
            wr.writerow(row)


def load_trajectory(path: str, n_waypoints: int,
                    status: int = -1) -> Trajectory:
    """Re-import an exported trajectory; track length is not stored in the
    file, so the caller supplies it (and optionally the final status)."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[float(x) for x in row] for row in rd]
    data = np.asarray(rows, dtype=np.float64)
    col = {name: i for i, name in enumerate(header)}
    if [h for h in header if not h.startswith("z_")] != \
            _BASE_COLS + ["waypoint_index"]:
        raise ValueError(f"{path}: unrecognized trajectory header")
    d = sum(1 for h in header if h.startswith("z_mu_"))
    z_mu = z_var = None
    if d:
        z_mu = data[:, col["z_mu_1"]:col["z_mu_1"] + d]
        z_var = data[:, col["z_var_1"]:col["z_var_1"] + d]
    return Trajectory(
        t=data[:, col["t"]], p=data[:, col["px"]:col["px"] + 3],
        v=data[:, col["vx"]:col["vx"] + 3], w=data[:, col["wx"]:col["wx"] + 3],
        throttle=data[:, col["throttle"]],
        rate_cmd=data[:, col["wcx"]:col["wcx"] + 3],
        waypoint_index=data[:, col["waypoint_index"]].astype(np.int64),
        n_waypoints=n_waypoints, status=status, z_mu=z_mu, z_var=z_var)


# ---------------------------------------------------------------------------
# evaluation report

REPORT_COLS = ["method", "task_id", "mass", "fault_rotor", "fault_loss",
               "track", "success", "status", "steps", "completion_time",
               "avg_vel", "max_vel", "throttle_frac"]


@dataclass
class EvalReport:
    """Per-trial metric rows plus per-(method, task) aggregates."""

    rows: list = field(default_factory=list)

    def add(self, method: str, task_desc: dict, track: str, metrics: dict):
        self.rows.append({"method": method, "track": track,
                          **task_desc, **metrics})

    def aggregates(self) -> list:
        """success rate (%) and means per (method, task), insertion order."""
        groups = {}
        for row in self.rows:
            key = (row["method"], row["task_id"], row["mass"],
                   row["fault_rotor"], row["fault_loss"])
            groups.setdefault(key, []).append(row)
        out = []
        for (method, tid, mass, rotor, loss), rows in groups.items():
            succ = [r for r in rows if r["success"]]
            agg = {"method": method, "task_id": tid, "mass": mass,
                   "fault_rotor": rotor, "fault_loss": loss,
                   "n_trials": len(rows),
                   "success_rate": round9(100.0 * len(succ) / len(rows))}
            for name in ("completion_time", "avg_vel", "max_vel",
                         "throttle_frac"):
                vals = [r[name] for r in succ]
                agg[f"mean_{name}"] = round9(float(np.mean(vals))) \
                    if vals else float("nan")
            out.append(agg)
        return out

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(REPORT_COLS)
            for row in self.rows:
                out = []
                for c in REPORT_COLS:
                    v = row[c]
                    if isinstance(v, bool):
                        out.append("1" if v else "0")
                    elif isinstance(v, float):
                        out.append(_fmt(v))
                    else:
                        out.append(str(v))
                wr.writerow(out)

    def write_summary(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"aggregates": self.aggregates(),
                       "n_trials": len(self.rows)}, fh, indent=2,
                      sort_keys=True)

    def success_rate(self, method=None, task_id=None) -> float:
        rows = [r for r in self.rows
                if (method is None or r["method"] == method)
                and (task_id is None or r["task_id"] == task_id)]
        if not rows:
            raise ValueError("no matching trials")
        return 100.0 * sum(r["success"] for r in rows) / len(rows)
