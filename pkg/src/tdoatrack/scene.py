"""Synthetic ground truth: array geometry, trajectories, and observations.

Pairwise delays are kept in samples at the configured rate everywhere;
conversion to seconds happens only at I/O boundaries. The delay for pair
(i, j) is (|m_i - s| - |m_j - s|) / c scaled by the sample rate, so the full
delay vector of an N-microphone array has D = N(N-1)/2 entries in canonical
pair order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .signal import PhatCorrelation, mic_pairs


@dataclass(frozen=True)
class MicArray:
    """Microphone positions (N, 3) in meters plus the speed of sound."""

    positions: np.ndarray
    speed_of_sound: float = 343.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        object.__setattr__(self, "positions", pos)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
            raise ValueError("positions must be an (N >= 2, 3) array")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        for i, j in mic_pairs(pos.shape[0]):
            if np.array_equal(pos[i], pos[j]):
                raise ValueError(f"microphones {i} and {j} coincide")
        if self.speed_of_sound <= 0:
            raise ValueError("speed_of_sound must be positive")

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    @property
    def n_pairs(self) -> int:
        n = self.n_mics
        return n * (n - 1) // 2

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return mic_pairs(self.n_mics)

    def pair_index_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = np.array(self.pairs, dtype=int)
        return pairs[:, 0], pairs[:, 1]

    def max_pairwise_distance(self) -> float:
        i, j = self.pair_index_arrays()
        return float(np.linalg.norm(self.positions[i] - self.positions[j], axis=1).max())


def num_mics_for(n_pairs: int) -> int:
    """Invert D = N(N-1)/2; raises when D is not a valid pair count."""
    n = (1 + math.isqrt(1 + 8 * n_pairs)) // 2
    if n * (n - 1) // 2 != n_pairs:
        raise ValueError(f"{n_pairs} is not N*(N-1)/2 for any integer N")
    return n


def max_delay_samples_for(array: MicArray, sample_rate: float) -> int:
    """Lag bound from geometry: delays beyond time-of-flight are impossible."""
    return int(math.ceil(sample_rate * array.max_pairwise_distance()
                         / array.speed_of_sound))


def tdoa_of(source, array: MicArray, sample_rate: float) -> np.ndarray:
    """Ideal pairwise delay vector (samples) for one source point."""
    s = np.asarray(source, dtype=float)
    if s.shape != (3,) or not np.all(np.isfinite(s)):
        raise ValueError("source must be a finite 3-d point")
    dists = np.linalg.norm(array.positions - s, axis=1)
    i, j = array.pair_index_arrays()
    return (dists[i] - dists[j]) * (sample_rate / array.speed_of_sound)


def tdoa_batch(sources, array: MicArray, sample_rate: float) -> np.ndarray:
    """Vectorized tdoa_of over (S, 3) source points; returns (S, D)."""
    pts = np.asarray(sources, dtype=float).reshape(-1, 3)
    dists = np.linalg.norm(pts[:, None, :] - array.positions[None, :, :], axis=2)
    i, j = array.pair_index_arrays()
    return (dists[:, i] - dists[:, j]) * (sample_rate / array.speed_of_sound)


@dataclass(frozen=True)
class Trajectory:
    """Time-stamped waypoints interpolated piecewise-linearly.

    Queries outside the time span clamp to the endpoint positions.
    """

    times: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.points, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "points", p)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("need at least one waypoint")
        if p.shape != (t.size, 3):
            raise ValueError("points must have shape (n_waypoints, 3)")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("waypoint timestamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise ValueError("waypoints must be finite")

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def sample_trajectory(traj: Trajectory, frame_times) -> np.ndarray:
    """Positions at the given times; returns (T, 3)."""
    t = np.atleast_1d(np.asarray(frame_times, dtype=float))
    out = np.empty((t.size, 3))
    for axis in range(3):
        out[:, axis] = np.interp(t, traj.times, traj.points[:, axis])
    return out


@dataclass(frozen=True)
class ObservationModel:
    """Stochastic stand-in for PHAT correlations corrupted by spurious peaks."""

    true_peak_amp: float = 1.0
    spurious_rate: float = 1.0
    spurious_amp_range: tuple[float, float] = (0.5, 1.5)
    miss_prob: float = 0.05
    noise_floor_sigma: float = 0.05

    def __post_init__(self):
        lo, hi = self.spurious_amp_range
        if self.true_peak_amp <= 0 or lo <= 0 or hi < lo:
            raise ValueError("peak amplitudes must be positive with lo <= hi")
        if not 0 <= self.miss_prob <= 1:
            raise ValueError("miss_prob must lie in [0, 1]")
        if self.spurious_rate < 0 or self.noise_floor_sigma < 0:
            raise ValueError("spurious_rate and noise_floor_sigma must be >= 0")


def synth_observation(truth: np.ndarray, model: ObservationModel,
                      max_delay_samples: int, rng) -> list[PhatCorrelation]:
    """Synthesize one frame of per-pair correlations around a truth vector.

    Each pair gets a Gaussian noise floor, the true peak at round(delay)
    unless missed, and Poisson(spurious_rate) spurious peaks at uniform lags.
    Draw order is fixed per pair, so a seed reproduces this bit-exactly.
    """
    rng = np.random.default_rng(rng)
    truth = np.asarray(truth, dtype=float)
    n_mics = num_mics_for(truth.size)
    m = max_delay_samples
    out = []
    for p, (i, j) in enumerate(mic_pairs(n_mics)):
        values = rng.normal(0.0, model.noise_floor_sigma, 2 * m + 1)
        missed = rng.uniform() < model.miss_prob
        if not missed:
            lag = int(round(truth[p]))
            if abs(lag) > m:
                raise ValueError(f"truth delay {truth[p]} outside lag range +-{m}")
            values[lag + m] += model.true_peak_amp
        for _ in range(rng.poisson(model.spurious_rate)):
            lag = int(rng.integers(-m, m + 1))
            amp = rng.uniform(*model.spurious_amp_range)
            values[lag + m] += amp
        out.append(PhatCorrelation(pair=(i, j), values=values))
    return out


@dataclass(frozen=True)
class Box:
    """Axis-aligned region; a zero-volume box degenerates to its boundary."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("box corners must be 3-d points")
        if np.any(hi < lo):
            raise ValueError("box must satisfy lo <= hi")

    def sample(self, rng, n: int) -> np.ndarray:
        rng = np.random.default_rng(rng)
        return rng.uniform(self.lo, self.hi, size=(n, 3))


def generate_training_set(array: MicArray, region: Box, n: int,
                          sample_rate: float, rng) -> np.ndarray:
    """n ideal delay vectors from sources sampled uniformly in the region."""
    if n < 1:
        raise ValueError("n must be >= 1")
    points = region.sample(rng, n)
    return tdoa_batch(points, array, sample_rate)


def remove_outliers(vectors: np.ndarray, max_residual: float = 2.0) -> np.ndarray:
    """Drop vectors whose worst triangle-identity residual exceeds the bound.

    Ideal delays satisfy d(i,j) + d(j,k) - d(i,k) = 0 for every triple; only
    measured data ever trips this. Residual units are samples.
    """
    vectors = np.asarray(vectors, dtype=float)
    n = num_mics_for(vectors.shape[1])
    index = {pair: p for p, pair in enumerate(mic_pairs(n))}
    worst = np.zeros(vectors.shape[0])
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                res = np.abs(vectors[:, index[(i, j)]] + vectors[:, index[(j, k)]]
                             - vectors[:, index[(i, k)]])
                worst = np.maximum(worst, res)
    return vectors[worst <= max_residual]


@dataclass(frozen=True)
class Scene:
    """One synthetic room: geometry, source path, and observation noise."""

    array: MicArray
    room: Box
    trajectory: Trajectory
    observation: ObservationModel = ObservationModel()
    seed: int = 0


# ---------------------------------------------------------------------------
# Built-in scenes. The default array mirrors a 7-microphone interactive
# display: four mics at the display corners on one wall and three on the
# ceiling of a 10 x 13 x 5 m room, giving D = 21 tracked delays.

def default_array() -> MicArray:
    positions = np.array([
        [4.0, 0.0, 1.0],
        [6.0, 0.0, 1.0],
        [4.0, 0.0, 2.2],
        [6.0, 0.0, 2.2],
        [2.5, 4.0, 5.0],
        [7.5, 4.0, 5.0],
        [5.0, 9.0, 5.0],
    ])
    return MicArray(positions=positions)


def default_room() -> Box:
    # Training region: source heights people actually produce sound at.
    return Box(lo=np.array([0.5, 0.5, 0.8]), hi=np.array([9.5, 12.5, 2.2]))


def demo_scene(kind: str = "central", seed: int = 7) -> Scene:
    """Canned walking paths: 'central' stays mid-room, 'near_mic' skims the wall mics."""
    if kind == "central":
        times = [0.0, 19.01, 38.02, 57.03]
        points = [[4.0, 7.5, 1.6], [4.8, 6.8, 1.6], [5.8, 6.9, 1.6], [6.5, 7.8, 1.6]]
    elif kind == "near_mic":
        times = [0.0, 18.0, 30.0, 42.0, 57.03]
        points = [[5.0, 5.5, 1.6], [4.6, 1.1, 1.6], [6.0, 0.85, 1.6],
                  [6.3, 2.0, 1.6], [6.5, 5.5, 1.6]]
    else:
        raise ValueError(f"unknown demo scene {kind!r}")
    traj = Trajectory(times=np.array(times), points=np.array(points))
    return Scene(array=default_array(), room=default_room(), trajectory=traj,
                 observation=ObservationModel(), seed=seed)


# ---------------------------------------------------------------------------
# Serialization

def scene_to_dict(scene: Scene) -> dict:
    return {
        "mics": scene.array.positions.tolist(),
        "speed_of_sound": scene.array.speed_of_sound,
        "room": {"lo": scene.room.lo.tolist(), "hi": scene.room.hi.tolist()},
        "trajectory": [{"t": float(t), "pos": p.tolist()}
                       for t, p in zip(scene.trajectory.times, scene.trajectory.points)],
        "observation": {
            "true_peak_amp": scene.observation.true_peak_amp,
            "spurious_rate": scene.observation.spurious_rate,
            "spurious_amp_range": list(scene.observation.spurious_amp_range),
            "miss_prob": scene.observation.miss_prob,
            "noise_floor_sigma": scene.observation.noise_floor_sigma,
        },
        "seed": scene.seed,
    }


def scene_from_dict(data: dict) -> Scene:
    obs = data.get("observation", {})
    amp_range = obs.get("spurious_amp_range")
    model = ObservationModel(
        true_peak_amp=obs.get("true_peak_amp", 1.0),
        spurious_rate=obs.get("spurious_rate", 1.0),
        spurious_amp_range=tuple(amp_range) if amp_range else (0.5, 1.5),
        miss_prob=obs.get("miss_prob", 0.05),
        noise_floor_sigma=obs.get("noise_floor_sigma", 0.05),
    )
    waypoints = data["trajectory"]
    traj = Trajectory(times=np.array([w["t"] for w in waypoints]),
                      points=np.array([w["pos"] for w in waypoints]))
    return Scene(
        array=MicArray(positions=np.array(data["mics"]),
                       speed_of_sound=data.get("speed_of_sound", 343.0)),
        room=Box(lo=np.array(data["room"]["lo"]), hi=np.array(data["room"]["hi"])),
        trajectory=traj,
        observation=model,
        seed=int(data.get("seed", 0)),
    )


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scene_to_dict(scene), fh, sort_keys=False)


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


def pair_names(n_mics: int) -> list[str]:
    return [f"d_{i}_{j}" for i, j in mic_pairs(n_mics)]


def training_to_csv(vectors: np.ndarray, path) -> None:
    """Write delay vectors as CSV, one per line, canonical pair order."""
    vectors = np.asarray(vectors, dtype=float)
    names = pair_names(num_mics_for(vectors.shape[1]))
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for row in vectors:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def training_from_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        n_cols = len(header.strip().split(","))
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size and data.shape[1] != n_cols:
        raise ValueError("CSV rows do not match header width")
    return data


def trajectory_to_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("t,x,y,z\n")
        for t, p in zip(traj.times, traj.points):
            fh.write(f"{t:.17g}," + ",".join(f"{x:.17g}" for x in p) + "\n")


def trajectory_from_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(times=data[:, 0], points=data[:, 1:4])
