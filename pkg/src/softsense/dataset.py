"""Command generation, 10 Hz episode recording, normalization statistics,
and the SSD1 on-disk dataset format.

A dataset is one continuous episode: the arm blends between successive
random targets (one second per segment) while the finger and boxes evolve
at 1 kHz, and every 0.1 s a multi-modal sample is recorded.  Samples are
stored columnar; `sample(i)` materializes the record view.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from softsense._binio import (Reader, append_crc, check_magic_version,
                              verify_trailing_crc)
from softsense.config import SimConfig, dump_config, parse_config
from softsense.renderer import IMAGE_SIZE, frame_to_u8, render
from softsense.simcore import (ARM_REST, COMMAND_HIGH, COMMAND_LOW,
                               SAMPLE_EVERY, SEGMENT_DURATION, ArmState,
                               BoxBody, Command, FingerState,
                               InstabilityError, World, _advance, _axis_codes,
                               link_inertias, pack_params, spawn_boxes)

SSD1_MAGIC = b"SSD1"
SSD1_VERSION = 1
SAMPLES_PER_COMMAND = 10
FRAME_BYTES = IMAGE_SIZE * IMAGE_SIZE * 3

SCENARIOS = ("empty", "cluttered")

N_Q = 20
N_F = 20
N_A = 3
Q_CHANNELS = slice(0, N_Q)
F_CHANNELS = slice(N_Q, N_Q + N_F)
A_CHANNELS = slice(N_Q + N_F, N_Q + N_F + N_A)
N_CHANNELS = N_Q + N_F + N_A

_CMD_LOW = np.array(COMMAND_LOW)
_CMD_SPAN = np.array(COMMAND_HIGH) - np.array(COMMAND_LOW)


def smooth_step(x0: float, x1: float, u: float) -> float:
    """Cubic blend from x0 (u=0) to x1 (u=1) with zero endpoint slope."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"blend parameter u={u} outside [0, 1]")
    return x0 + (x1 - x0) * (3.0 * u * u - 2.0 * u * u * u)


def generate_commands(n: int, rng_seed: int) -> list[Command]:
    """n uniform targets inside the command box, reproducible from the seed."""
    if n < 1:
        raise ValueError("need at least one command")
    rng = np.random.default_rng(rng_seed)
    draws = rng.uniform(np.array(COMMAND_LOW), np.array(COMMAND_HIGH),
                        size=(n, 3))
    return [Command(*row).validate() for row in draws]


def normalize_action(command) -> np.ndarray:
    """Map a command to [-1, 1] per coordinate range."""
    arr = np.asarray(command, dtype=np.float64)
    return (2.0 * (arr - _CMD_LOW) / _CMD_SPAN - 1.0).astype(np.float32)


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean/std over finger_q (20) | forces (20) | action (3)."""

    mean: np.ndarray           # (43,) f32
    std: np.ndarray            # (43,) f32
    clamped: np.ndarray        # (43,) bool, True where std was degenerate

    def standardize(self, values: np.ndarray, channels: slice) -> np.ndarray:
        return (values - self.mean[channels]) / self.std[channels]

    def destandardize(self, values: np.ndarray, channels: slice) -> np.ndarray:
        return values * self.std[channels] + self.mean[channels]


@dataclass(frozen=True)
class Sample:
    index: int
    action: Command
    arm_q: np.ndarray     # (3,) f32
    finger_q: np.ndarray  # (20,) f32
    forces: np.ndarray    # (20,) f32
    frame: np.ndarray | None  # (64, 64, 3) u8

    @property
    def action_normalized(self) -> np.ndarray:
        return normalize_action(self.action)


@dataclass
class Dataset:
    scenario: str
    seed: int
    config_text: str
    indices: np.ndarray    # (n,) u32
    actions: np.ndarray    # (n, 3) f32, raw units
    arm_q: np.ndarray      # (n, 3) f32
    finger_q: np.ndarray   # (n, 20) f32
    forces: np.ndarray     # (n, 20) f32
    frames: np.ndarray | None  # (n, 64, 64, 3) u8
    norm: NormStats | None = field(default=None)

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    @property
    def has_vision(self) -> bool:
        return self.frames is not None

    def sample(self, i: int) -> Sample:
        return Sample(index=int(self.indices[i]),
                      action=Command(*map(float, self.actions[i])),
                      arm_q=self.arm_q[i],
                      finger_q=self.finger_q[i],
                      forces=self.forces[i],
                      frame=None if self.frames is None else self.frames[i])

    @property
    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def sim_config(self) -> SimConfig:
        return parse_config(self.config_text)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if (a.scenario, a.seed, a.config_text, a.has_vision) != \
            (b.scenario, b.seed, b.config_text, b.has_vision):
        return False
    for lhs, rhs in ((a.indices, b.indices), (a.actions, b.actions),
                     (a.arm_q, b.arm_q), (a.finger_q, b.finger_q),
                     (a.forces, b.forces)):
        if lhs.shape != rhs.shape or not np.array_equal(lhs, rhs):
            return False
    if a.has_vision and not np.array_equal(a.frames, b.frames):
        return False
    if (a.norm is None) != (b.norm is None):
        return False
    if a.norm is not None:
        return (np.array_equal(a.norm.mean, b.norm.mean)
                and np.array_equal(a.norm.std, b.norm.std)
                and np.array_equal(a.norm.clamped, b.norm.clamped))
    return True


def compute_norm_stats(ds: Dataset) -> NormStats:
    """Population mean/std per channel; degenerate channels get std 1."""
    if len(ds) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    table = np.concatenate([ds.finger_q, ds.forces, ds.actions], axis=1)
    table = table.astype(np.float64)
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    clamped = std < 1e-8
    std = np.where(clamped, 1.0, std)
    return NormStats(mean=mean.astype(np.float32),
                     std=std.astype(np.float32),
                     clamped=clamped)


def run_episode(scenario: str, commands: list[Command], sim: SimConfig,
                rng_seed: int, with_vision: bool) -> Dataset:
    """Execute every command for one second each, sampling at 10 Hz.

    The cluttered scenario spawns seeded random boxes before the run.
    Raises InstabilityError (no partial output) if integration blows up.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    commands = [Command(*c).validate() for c in commands]
    n_samples = len(commands) * SAMPLES_PER_COMMAND

    boxes: tuple[BoxBody, ...] = ()
    if scenario == "cluttered":
        boxes = spawn_boxes(sim.boxes, np.random.default_rng([rng_seed, 1]))

    cfg = sim.finger
    n = cfg.n_joints
    theta = np.zeros(n)
    omega = np.zeros(n)
    box_pose = np.array([b.pose for b in boxes]).reshape(len(boxes), 3)
    box_vel = np.zeros((len(boxes), 3))
    box_half = np.array([b.half_extents for b in boxes]).reshape(len(boxes), 3)
    box_mass = np.array([b.mass for b in boxes])
    axis_code = _axis_codes(cfg)
    inertia = link_inertias(cfg)
    params = pack_params(sim)

    indices = np.arange(n_samples, dtype=np.uint32)
    actions = np.zeros((n_samples, 3), dtype=np.float32)
    arm_hist = np.zeros((n_samples, 3), dtype=np.float32)
    q_hist = np.zeros((n_samples, N_Q), dtype=np.float32)
    f_hist = np.zeros((n_samples, N_F), dtype=np.float32)
    frames = (np.zeros((n_samples, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
              if with_vision else None)

    arm_q_out = np.zeros(3)
    link_normal = np.zeros(n)
    seg_q0 = np.array(ARM_REST)
    k = 0
    for command in commands:
        seg_target = np.array(command)
        seg_state = np.array([0.0])
        for _ in range(SAMPLES_PER_COMMAND):
            status = _advance(theta, omega, seg_q0, seg_target, seg_state,
                              SEGMENT_DURATION, box_pose, box_vel, box_half,
                              box_mass, axis_code, inertia, params,
                              SAMPLE_EVERY, 1e-3, arm_q_out, link_normal)
            if status != 0:
                raise InstabilityError(
                    f"integration diverged at sample {k}; no data written")
            actions[k] = command
            arm_hist[k] = arm_q_out
            q_hist[k] = theta
            f_hist[k] = link_normal
            if with_vision:
                world = World(sim=sim, arm=ArmState(*arm_q_out),
                              finger=FingerState(theta.copy(), omega.copy()),
                              boxes=tuple(
                                  BoxBody(box_half[i].copy(), box_pose[i].copy(),
                                          box_vel[i].copy(), float(box_mass[i]))
                                  for i in range(len(boxes))),
                              time=0.0, target=command, segment_start=seg_q0,
                              segment_time=float(seg_state[0]))
                frames[k] = frame_to_u8(render(world))
            k += 1
        seg_q0 = arm_q_out.copy()

    ds = Dataset(scenario=scenario, seed=rng_seed,
                 config_text=dump_config(sim), indices=indices,
                 actions=actions, arm_q=arm_hist, finger_q=q_hist,
                 forces=f_hist, frames=frames)
    ds.norm = compute_norm_stats(ds)
    return ds


# --- SSD1 format -------------------------------------------------------------
#
# Little-endian layout:
#   magic "SSD1" | version u32 | scenario u8 | has_vision u8 | reserved u16
#   seed u64 | sample count u32 | config length u32 | config UTF-8
#   NormStats mean 43 f32 | NormStats std 43 f32
#   per sample: index u32 | action 3 f32 | arm_q 3 f32 | finger_q 20 f32 |
#               forces 20 f32 | [frame 12288 u8]
#   CRC32 (u32) of everything before it.


def record_size(has_vision: bool) -> int:
    return 4 + 4 * (3 + 3 + N_Q + N_F) + (FRAME_BYTES if has_vision else 0)


def header_size(config_text: str) -> int:
    return 4 + 4 + 1 + 1 + 2 + 8 + 4 + 4 + len(config_text.encode("utf-8")) \
        + 2 * N_CHANNELS * 4


def file_size(n_samples: int, has_vision: bool, config_text: str) -> int:
    """Exact SSD1 file size: header + records + trailing CRC32."""
    return header_size(config_text) + n_samples * record_size(has_vision) + 4


def save(ds: Dataset, path) -> None:
    if ds.norm is None:
        raise ValueError("dataset has no normalization stats; compute first")
    cfg_bytes = ds.config_text.encode("utf-8")
    parts = [SSD1_MAGIC,
             struct.pack("<IBBH", SSD1_VERSION, SCENARIOS.index(ds.scenario),
                         1 if ds.has_vision else 0, 0),
             struct.pack("<QI", ds.seed, len(ds)),
             struct.pack("<I", len(cfg_bytes)), cfg_bytes,
             np.asarray(ds.norm.mean, dtype="<f4").tobytes(),
             np.asarray(ds.norm.std, dtype="<f4").tobytes()]
    for i in range(len(ds)):
        parts.append(struct.pack("<I", int(ds.indices[i])))
        parts.append(np.asarray(ds.actions[i], dtype="<f4").tobytes())
        parts.append(np.asarray(ds.arm_q[i], dtype="<f4").tobytes())
        parts.append(np.asarray(ds.finger_q[i], dtype="<f4").tobytes())
        parts.append(np.asarray(ds.forces[i], dtype="<f4").tobytes())
        if ds.has_vision:
            parts.append(np.ascontiguousarray(ds.frames[i], dtype=np.uint8)
                         .tobytes())
    with open(path, "wb") as fh:
        fh.write(append_crc(b"".join(parts)))


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    payload = verify_trailing_crc(blob)
    r = Reader(payload)
    check_magic_version(r, SSD1_MAGIC, SSD1_VERSION)
    scenario_code = r.u8()
    has_vision = r.u8() != 0
    r.u16()  # reserved
    seed = r.u64()
    count = r.u32()
    config_text = r.take(r.u32()).decode("utf-8")
    mean = np.frombuffer(r.take(4 * N_CHANNELS), dtype="<f4").copy()
    std = np.frombuffer(r.take(4 * N_CHANNELS), dtype="<f4").copy()
    if scenario_code >= len(SCENARIOS):
        raise ValueError(f"unknown scenario code {scenario_code}")

    indices = np.zeros(count, dtype=np.uint32)
    actions = np.zeros((count, 3), dtype=np.float32)
    arm_q = np.zeros((count, 3), dtype=np.float32)
    finger_q = np.zeros((count, N_Q), dtype=np.float32)
    forces = np.zeros((count, N_F), dtype=np.float32)
    frames = (np.zeros((count, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
              if has_vision else None)
    for i in range(count):
        indices[i] = r.u32()
        actions[i] = np.frombuffer(r.take(12), dtype="<f4")
        arm_q[i] = np.frombuffer(r.take(12), dtype="<f4")
        finger_q[i] = np.frombuffer(r.take(4 * N_Q), dtype="<f4")
        forces[i] = np.frombuffer(r.take(4 * N_F), dtype="<f4")
        if has_vision:
            frames[i] = np.frombuffer(r.take(FRAME_BYTES), dtype=np.uint8) \
                .reshape(IMAGE_SIZE, IMAGE_SIZE, 3)

    # the flag is not persisted; clamping writes exactly 1.0, so recover it
    clamped = std == 1.0
    norm = NormStats(mean=mean, std=std, clamped=clamped)
    return Dataset(scenario=SCENARIOS[scenario_code], seed=seed,
                   config_text=config_text, indices=indices, actions=actions,
                   arm_q=arm_q, finger_q=finger_q, forces=forces,
                   frames=frames, norm=norm)


def file_digest(path) -> int:
    """CRC32 of the whole file, for cheap determinism comparisons."""
    with open(path, "rb") as fh:
        return zlib.crc32(fh.read())
