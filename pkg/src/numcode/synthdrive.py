"""Synthetic driving dialogues from a unicycle model.

Three tasks share one episode generator:

* ``speed`` - predict the next speed from a short speed history (1 number out)
* ``traj``  - predict ``T`` ego-frame waypoints from speed/accel/yaw rate (2T out)
* ``copy``  - echo one input number (diagnostic for the encoding path)

Vehicle frame: origin at the current position, heading along +x, angles in
degrees counter-clockwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import DigitCodec

TASKS = ("speed", "traj", "copy")
HISTORY = 4
SPLIT_STRIDE = 10_000_000
TEST_OFFSET = 5_000_000

_codec = DigitCodec(2)


@dataclass(frozen=True)
class EpisodeParams:
    seed: int = 0
    horizon: int = 3
    dt: float = 0.5
    speed_range: tuple[float, float] = (3.0, 15.0)
    accel_range: tuple[float, float] = (-1.0, 1.0)
    max_yaw_rate: float = 10.0
    speed_noise: float = 0.02
    obs_noise: float = 0.05
    copy_range: tuple[float, float] = (0.0, 10.0)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for lo, hi in (self.speed_range, self.accel_range, self.copy_range):
            if not lo < hi:
                raise ValueError(f"degenerate range ({lo}, {hi})")
        if self.max_yaw_rate < 0:
            raise ValueError("max_yaw_rate must be non-negative")


@dataclass
class Episode:
    params: EpisodeParams
    speed0: float
    accel: float
    yaw_rate: float  # deg/s
    history_speeds: list[float]
    history_headings: list[float]
    history_positions: list[tuple[float, float]]
    future_speeds: list[float]  # v_0 .. v_T
    future_headings: list[float]  # theta_0 .. theta_T, degrees
    waypoints: list[tuple[float, float]]  # p_1 .. p_T
    observation: list[float]
    copy_value: float
    dialogues: dict[str, list[dict]] = field(default_factory=dict)

    @property
    def next_speed(self) -> float:
        return self.future_speeds[1]


def _step(p, v, theta_deg, dt):
    th = math.radians(theta_deg)
    return (p[0] + v * dt * math.cos(th), p[1] + v * dt * math.sin(th))


def generate_episode(params: EpisodeParams) -> Episode:
    rng = np.random.default_rng(params.seed)
    v0 = float(rng.uniform(*params.speed_range))
    a = float(rng.uniform(*params.accel_range))
    w = float(rng.uniform(-params.max_yaw_rate, params.max_yaw_rate)) if params.max_yaw_rate else 0.0
    dt, T = params.dt, params.horizon

    future_speeds = [v0 + a * t * dt for t in range(T + 1)]
    future_headings = [w * t * dt for t in range(T + 1)]
    waypoints = []
    p = (0.0, 0.0)
    for t in range(T):
        p = _step(p, future_speeds[t], future_headings[t], dt)
        waypoints.append(p)

    ks = range(-(HISTORY - 1), 1)
    hist_speeds = [v0 + a * k * dt + float(rng.normal(0.0, params.speed_noise)) for k in ks]
    hist_headings = [w * k * dt for k in ks]
    # integrate backwards from the origin so that history ends at p_0
    hist_pos = [(0.0, 0.0)]
    for k in range(-1, -HISTORY, -1):
        v, th = v0 + a * k * dt, math.radians(w * k * dt)
        prev = hist_pos[0]
        hist_pos.insert(0, (prev[0] - v * dt * math.cos(th), prev[1] - v * dt * math.sin(th)))

    obs = np.array([v0 / 10.0, a, w / 10.0, 1.0]) + rng.normal(0.0, params.obs_noise, size=4)
    copy_value = float(rng.uniform(*params.copy_range))
    ep = Episode(
        params=params, speed0=v0, accel=a, yaw_rate=w,
        history_speeds=hist_speeds, history_headings=hist_headings,
        history_positions=hist_pos, future_speeds=future_speeds,
        future_headings=future_headings, waypoints=waypoints,
        observation=[float(x) for x in obs], copy_value=copy_value,
    )
    ep.dialogues = {task: _dialogue(ep, task) for task in TASKS}
    return ep


def fmt(x: float) -> str:
    return _codec.format(x)


def _dialogue(ep: Episode, task: str) -> list[dict]:
    if task == "speed":
        hist = " ".join(fmt(v) for v in ep.history_speeds)
        return [
            {"role": "user", "text": f"<image>speeds {hist} m/s. next speed?"},
            {"role": "assistant", "text": f"speed {fmt(ep.next_speed)} m/s"},
        ]
    if task == "traj":
        pts = " ".join(f"({fmt(x)}, {fmt(y)})" for x, y in ep.waypoints)
        return [
            {"role": "user", "text": (
                f"<image>speed {fmt(ep.speed0)} m/s, accel {fmt(ep.accel)}, "
                f"yaw {fmt(ep.yaw_rate)} deg/s. waypoints?"
            )},
            {"role": "assistant", "text": pts},
        ]
    if task == "copy":
        return [
            {"role": "user", "text": f"<image>copy {fmt(ep.copy_value)} now"},
            {"role": "assistant", "text": fmt(ep.copy_value)},
        ]
    raise ValueError(f"unknown task {task!r}")


def answer_slots(task: str, horizon: int = 3) -> int:
    return {"speed": 1, "traj": 2 * horizon, "copy": 1}[task]


def episode_record(ep: Episode, task: str, split: str) -> dict:
    return {
        "id": f"{task}-{split}-{ep.params.seed}",
        "seed": ep.params.seed,
        "task": task,
        "turns": ep.dialogues[task],
        "numbers_policy_id": "default",
        "obs": [ep.observation],
    }


def split_seeds(n_train: int, n_test: int, base_seed: int) -> tuple[list[int], list[int]]:
    if max(n_train, n_test) > TEST_OFFSET:
        raise ValueError(f"split sizes above {TEST_OFFSET} would overlap")
    base = base_seed * SPLIT_STRIDE
    return (
        [base + i for i in range(n_train)],
        [base + TEST_OFFSET + i for i in range(n_test)],
    )


def make_records(task: str, seeds, split: str, params: EpisodeParams) -> list[dict]:
    return [
        episode_record(generate_episode(_with_seed(params, s)), task, split) for s in seeds
    ]


def _with_seed(params: EpisodeParams, seed: int) -> EpisodeParams:
    kw = asdict(params)
    kw["seed"] = seed
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}
    return EpisodeParams(**kw)


def write_jsonl(path: str | Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def make_split(
    n_train: int,
    n_test: int,
    base_seed: int,
    out_dir: str | Path,
    task: str = "speed",
    params: EpisodeParams | None = None,
) -> tuple[Path, Path]:
    """Write ``train.jsonl``, ``test.jsonl`` and a ``data_manifest.json`` sidecar."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    params = params or EpisodeParams()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_seeds, test_seeds = split_seeds(n_train, n_test, base_seed)
    train_path, test_path = out_dir / "train.jsonl", out_dir / "test.jsonl"
    write_jsonl(train_path, make_records(task, train_seeds, "train", params))
    write_jsonl(test_path, make_records(task, test_seeds, "test", params))
    manifest = {
        "task": task, "n_train": n_train, "n_test": n_test, "base_seed": base_seed,
        "episode_params": asdict(params),
        "train_seed_range": [train_seeds[0], train_seeds[-1]] if train_seeds else [],
        "test_seed_range": [test_seeds[0], test_seeds[-1]] if test_seeds else [],
    }
    (out_dir / "data_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return train_path, test_path
