"""Rigid-link physics of the passive finger on a cylindrical arm.

The finger is a chain of `n_joints` equal links joined by torsional
spring-damper joints whose axes alternate between flexion/extension and
adduction/abduction.  The arm is position-controlled and tracks smoothed
commands exactly; only the finger and the boxes have dynamics.

Modelling choices (all deliberate, all testable):
  * Each joint integrates against a fixed diagonal inertia equal to the
    straight-chain inertia of the links distal to it.  Joint damping is
    folded into the update implicitly, so stiff damping cannot blow up.
  * The finger coordinates live in the frame that translates and rotates
    with the boom tip; moving that frame injects the standard fictitious
    forces (frame acceleration, Euler, centrifugal, Coriolis) on every
    link.  With commands frozen these vanish and the chain is passive.
  * Contact is a penalty spring-damper at one probe point per link (the
    distal endpoint) against the ground plane and box sides, with
    regularized Coulomb friction clamped at mu times the normal force.
  * Boxes slide on the ground plane (x, y, yaw) under contact reactions
    and exact Coulomb ground friction.

The 1 kHz inner loop is compiled with numba; `step` wraps a single tick
of the same kernel that `advance` runs for whole sample intervals, so
both paths produce bit-identical trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from numba import njit

from softsense.config import BoxSpawnParams, FingerConfig, SimConfig

PHYSICS_DT = 1e-3           # s, fixed integrator step
SEGMENT_DURATION = 1.0      # s, one command segment
SAMPLE_EVERY = 100          # physics steps per 10 Hz sample

ARM_REST = (math.pi, -0.5, 0.75)

COMMAND_LOW = (3 * math.pi / 4, -1.0, 0.0)
COMMAND_HIGH = (5 * math.pi / 4, 0.0, 1.5)


class InstabilityError(RuntimeError):
    """Raised when integration produces non-finite state or |angle| >= pi."""


class Command(NamedTuple):
    """Target arm configuration (rotary q1, vertical q2, sliding q3)."""

    q1: float
    q2: float
    q3: float

    def validate(self) -> "Command":
        for value, lo, hi, name in zip(self, COMMAND_LOW, COMMAND_HIGH,
                                       ("q1", "q2", "q3")):
            if not (lo <= value <= hi):
                raise ValueError(
                    f"command {name}={value} outside [{lo}, {hi}]")
        return self


@dataclass(frozen=True)
class ArmState:
    q1: float
    q2: float
    q3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.q1, self.q2, self.q3], dtype=np.float64)


@dataclass(frozen=True)
class FingerState:
    angles: np.ndarray              # (n,) rad
    angular_velocities: np.ndarray  # (n,) rad/s

    @staticmethod
    def rest(n_joints: int) -> "FingerState":
        return FingerState(np.zeros(n_joints), np.zeros(n_joints))


@dataclass(frozen=True)
class BoxBody:
    half_extents: np.ndarray  # (3,) m
    pose: np.ndarray          # (3,) x, y, yaw; center rides at z = hz
    velocity: np.ndarray      # (3,) vx, vy, yaw rate
    mass: float


@dataclass(frozen=True)
class World:
    """Complete simulation state; a plain value, safe to copy and share."""

    sim: SimConfig
    arm: ArmState
    finger: FingerState
    boxes: tuple[BoxBody, ...]
    time: float
    # Command-tracking context: the arm blends from segment_start toward
    # target over segment_duration seconds of segment_time.
    target: Command
    segment_start: np.ndarray
    segment_time: float
    segment_duration: float = SEGMENT_DURATION


@dataclass(frozen=True)
class ContactForces:
    per_link_normal: np.ndarray          # (n,) N, total normal magnitude
    box_wrenches: np.ndarray             # (n_boxes, 3) Fx, Fy, torque_z


@dataclass(frozen=True)
class KinematicFrames:
    """World-frame placement of every moving body part."""

    boom_tip: np.ndarray                 # (3,)
    joint_positions: np.ndarray          # (n+1, 3); row n is the fingertip
    link_rotations: np.ndarray           # (n, 3, 3)
    joint_axes: np.ndarray               # (n, 3)


def make_world(sim: SimConfig, boxes: tuple[BoxBody, ...] = ()) -> World:
    """World at the documented rest configuration, arm holding still."""
    rest = Command(*ARM_REST)
    return World(sim=sim,
                 arm=ArmState(*ARM_REST),
                 finger=FingerState.rest(sim.finger.n_joints),
                 boxes=tuple(boxes),
                 time=0.0,
                 target=rest,
                 segment_start=np.array(ARM_REST),
                 segment_time=SEGMENT_DURATION)


def spawn_boxes(params: BoxSpawnParams, rng: np.random.Generator) -> tuple[BoxBody, ...]:
    """Seeded random boxes in the workspace annulus, min_separation apart."""
    boxes: list[BoxBody] = []
    guard = 0
    while len(boxes) < params.count:
        guard += 1
        if guard > 10_000:
            raise RuntimeError("box spawn could not satisfy min_separation")
        radius = rng.uniform(params.spawn_radius_min, params.spawn_radius_max)
        angle = rng.uniform(params.spawn_angle_min, params.spawn_angle_max)
        x, y = radius * math.cos(angle), radius * math.sin(angle)
        if any((b.pose[0] - x) ** 2 + (b.pose[1] - y) ** 2
               < params.min_separation ** 2 for b in boxes):
            continue
        half = rng.uniform(params.half_extent_min, params.half_extent_max, size=3)
        yaw = rng.uniform(0.0, 2 * math.pi)
        mass = params.density * 8.0 * half[0] * half[1] * half[2]
        boxes.append(BoxBody(half_extents=half,
                             pose=np.array([x, y, yaw]),
                             velocity=np.zeros(3),
                             mass=mass))
    return tuple(boxes)


def link_inertias(cfg: FingerConfig) -> np.ndarray:
    """Straight-chain moment of inertia seen by each joint (about its axis)."""
    n, m, length = cfg.n_joints, cfg.link_mass, cfg.link_length
    out = np.empty(n)
    for i in range(n):
        total = 0.0
        for j in range(i, n):
            d = (j - i + 0.5) * length
            total += m * d * d + m * length * length / 12.0
        out[i] = total
    return out


def _axis_codes(cfg: FingerConfig) -> np.ndarray:
    return np.array([0 if tag == "FE" else 1 for tag in cfg.axis_pattern()],
                    dtype=np.int64)


# --- numba kernels ----------------------------------------------------------
#
# State crosses the Python/numba border as flat float64 arrays.  Parameter
# vector layout (indices named here once, used below):
#   0 link_length    1 link_mass      2 spring_k      3 joint_damping
#   4 mount_pitch    5 gravity        6 penalty_k     7 penalty_c
#   8 friction_mu    9 friction_eps  10 link_radius  11 column_height
#  12 base_offset   13 box_ground_mu


def pack_params(sim: SimConfig) -> np.ndarray:
    f, c = sim.finger, sim.contact
    return np.array([f.link_length, f.link_mass, f.spring_k, f.joint_damping,
                     f.mount_pitch, sim.gravity,
                     c.penalty_stiffness, c.penalty_damping,
                     c.friction_mu, c.friction_vel_eps, f.link_radius,
                     sim.arm.column_height, sim.arm.base_offset,
                     sim.boxes.ground_friction_mu])


@njit(cache=True)
def _smooth_blend(q0, q1, u):
    s = u * u * (3.0 - 2.0 * u)
    return q0 + (q1 - q0) * s


@njit(cache=True)
def _arm_profile(seg_q0, seg_target, seg_t, seg_T, q, v, a):
    """Cubic-blend arm trajectory and its first two time derivatives."""
    if seg_t >= seg_T:
        for k in range(3):
            q[k] = seg_target[k]
            v[k] = 0.0
            a[k] = 0.0
        return
    u = seg_t / seg_T
    du = (6.0 * u - 6.0 * u * u) / seg_T
    ddu = (6.0 - 12.0 * u) / (seg_T * seg_T)
    for k in range(3):
        span = seg_target[k] - seg_q0[k]
        q[k] = _smooth_blend(seg_q0[k], seg_target[k], u)
        v[k] = span * du
        a[k] = span * ddu


@njit(cache=True)
def _fk(arm_q, theta, axis_code, length, mount_pitch, column_h, base_off,
        pos, rot, axes):
    """Chain kinematics: joint positions (n+1,3), rotations, world axes."""
    n = theta.shape[0]
    c1, s1 = math.cos(arm_q[0]), math.sin(arm_q[0])
    rho = base_off + arm_q[2]
    pos[0, 0] = rho * c1
    pos[0, 1] = rho * s1
    pos[0, 2] = column_h + arm_q[1]

    cp, sp = math.cos(mount_pitch), math.sin(mount_pitch)
    # R = Rz(q1) @ Ry(mount_pitch)
    r00, r01, r02 = c1 * cp, -s1, c1 * sp
    r10, r11, r12 = s1 * cp, c1, s1 * sp
    r20, r21, r22 = -sp, 0.0, cp
    for i in range(n):
        if axis_code[i] == 0:
            axes[i, 0], axes[i, 1], axes[i, 2] = r01, r11, r21
        else:
            axes[i, 0], axes[i, 1], axes[i, 2] = r00, r10, r20
        ct, st = math.cos(theta[i]), math.sin(theta[i])
        if axis_code[i] == 0:
            # R @ Ry(theta): columns 0 and 2 mix
            n00 = r00 * ct - r02 * st
            n10 = r10 * ct - r12 * st
            n20 = r20 * ct - r22 * st
            n02 = r00 * st + r02 * ct
            n12 = r10 * st + r12 * ct
            n22 = r20 * st + r22 * ct
            r00, r10, r20, r02, r12, r22 = n00, n10, n20, n02, n12, n22
        else:
            # R @ Rx(theta): columns 1 and 2 mix
            n01 = r01 * ct + r02 * st
            n11 = r11 * ct + r12 * st
            n21 = r21 * ct + r22 * st
            n02 = -r01 * st + r02 * ct
            n12 = -r11 * st + r12 * ct
            n22 = -r21 * st + r22 * ct
            r01, r11, r21, r02, r12, r22 = n01, n11, n21, n02, n12, n22
        rot[i, 0, 0], rot[i, 0, 1], rot[i, 0, 2] = r00, r01, r02
        rot[i, 1, 0], rot[i, 1, 1], rot[i, 1, 2] = r10, r11, r12
        rot[i, 2, 0], rot[i, 2, 1], rot[i, 2, 2] = r20, r21, r22
        pos[i + 1, 0] = pos[i, 0] - length * r02
        pos[i + 1, 1] = pos[i, 1] - length * r12
        pos[i + 1, 2] = pos[i, 2] - length * r22


@njit(cache=True)
def _chain_relative_velocities(theta_dot, pos, axes, joint_vel, ang_vel):
    """Point velocities from joint motion alone (arm frame held fixed)."""
    n = theta_dot.shape[0]
    wx = wy = wz = 0.0
    joint_vel[0, 0] = joint_vel[0, 1] = joint_vel[0, 2] = 0.0
    for i in range(n):
        wx += axes[i, 0] * theta_dot[i]
        wy += axes[i, 1] * theta_dot[i]
        wz += axes[i, 2] * theta_dot[i]
        ang_vel[i, 0], ang_vel[i, 1], ang_vel[i, 2] = wx, wy, wz
        dx = pos[i + 1, 0] - pos[i, 0]
        dy = pos[i + 1, 1] - pos[i, 1]
        dz = pos[i + 1, 2] - pos[i, 2]
        joint_vel[i + 1, 0] = joint_vel[i, 0] + wy * dz - wz * dy
        joint_vel[i + 1, 1] = joint_vel[i, 1] + wz * dx - wx * dz
        joint_vel[i + 1, 2] = joint_vel[i, 2] + wx * dy - wy * dx


@njit(cache=True)
def _contact_at_point(px, py, pz, vx, vy, vz, radius,
                      box_pose, box_half, box_vel,
                      k_pen, c_pen, mu, v_eps,
                      force, box_forces):
    """Penalty contact of one probe sphere against ground and all boxes.

    Accumulates the force on the finger into `force` (3,), reactions into
    `box_forces` (n_boxes, 3), and returns the total normal magnitude.
    """
    normal_total = 0.0
    fx = fy = fz = 0.0

    # ground plane z = 0
    depth = radius - pz
    if depth > 0.0:
        normal = k_pen * depth + c_pen * (-vz)
        if normal > 0.0:
            normal_total += normal
            speed = math.sqrt(vx * vx + vy * vy)
            scale = -mu * normal / (speed + v_eps)
            fx += scale * vx
            fy += scale * vy
            fz += normal

    for b in range(box_pose.shape[0]):
        bx, by, yaw = box_pose[b, 0], box_pose[b, 1], box_pose[b, 2]
        hx, hy, hz = box_half[b, 0], box_half[b, 1], box_half[b, 2]
        cy, sy = math.cos(yaw), math.sin(yaw)
        # probe center in the box frame (box center rides at z = hz)
        lx = cy * (px - bx) + sy * (py - by)
        ly = -sy * (px - bx) + cy * (py - by)
        lz = pz - hz
        qx = min(max(lx, -hx), hx)
        qy = min(max(ly, -hy), hy)
        qz = min(max(lz, -hz), hz)
        dx, dy, dz = lx - qx, ly - qy, lz - qz
        dist2 = dx * dx + dy * dy + dz * dz
        if dist2 > 0.0:
            dist = math.sqrt(dist2)
            depth = radius - dist
            if depth <= 0.0:
                continue
            nx_l, ny_l, nz_l = dx / dist, dy / dist, dz / dist
        else:
            # probe center inside the box: exit through the nearest face
            ex, ey, ez = hx - abs(lx), hy - abs(ly), hz - abs(lz)
            if ex <= ey and ex <= ez:
                nx_l = 1.0 if lx >= 0.0 else -1.0
                ny_l = nz_l = 0.0
                depth = radius + ex
            elif ey <= ez:
                ny_l = 1.0 if ly >= 0.0 else -1.0
                nx_l = nz_l = 0.0
                depth = radius + ey
            else:
                nz_l = 1.0 if lz >= 0.0 else -1.0
                nx_l = ny_l = 0.0
                depth = radius + ez
        nx = cy * nx_l - sy * ny_l
        ny = sy * nx_l + cy * ny_l
        nz = nz_l
        # box point velocity at the contact (planar rigid motion)
        wb = box_vel[b, 2]
        vbx = box_vel[b, 0] - wb * (py - by)
        vby = box_vel[b, 1] + wb * (px - bx)
        rvx, rvy, rvz = vx - vbx, vy - vby, vz
        approach = -(rvx * nx + rvy * ny + rvz * nz)
        normal = k_pen * depth + c_pen * approach
        if normal <= 0.0:
            continue
        normal_total += normal
        tx = rvx - (rvx * nx + rvy * ny + rvz * nz) * nx
        ty = rvy - (rvx * nx + rvy * ny + rvz * nz) * ny
        tz = rvz - (rvx * nx + rvy * ny + rvz * nz) * nz
        tspeed = math.sqrt(tx * tx + ty * ty + tz * tz)
        fscale = -mu * normal / (tspeed + v_eps)
        cfx = normal * nx + fscale * tx
        cfy = normal * ny + fscale * ty
        cfz = normal * nz + fscale * tz
        fx += cfx
        fy += cfy
        fz += cfz
        box_forces[b, 0] -= cfx
        box_forces[b, 1] -= cfy
        box_forces[b, 2] -= (px - bx) * cfy - (py - by) * cfx

    force[0] += fx
    force[1] += fy
    force[2] += fz
    return normal_total


@njit(cache=True)
def _contact_pass(pos, point_vel, box_pose, box_half, box_vel, par,
                  link_force, link_normal, box_forces):
    """Contact at every link's distal endpoint; world-frame velocities in."""
    n = pos.shape[0] - 1
    for i in range(n):
        link_normal[i] = _contact_at_point(
            pos[i + 1, 0], pos[i + 1, 1], pos[i + 1, 2],
            point_vel[i + 1, 0], point_vel[i + 1, 1], point_vel[i + 1, 2],
            par[10], box_pose, box_half, box_vel,
            par[6], par[7], par[8], par[9],
            link_force[i], box_forces)


@njit(cache=True)
def _advance(theta, omega, seg_q0, seg_target, seg_state, seg_T,
             box_pose, box_vel, box_half, box_mass,
             axis_code, inertia, par, n_steps, dt,
             arm_q_out, link_normal_out):
    """Run n_steps of 1 kHz physics in place.  Returns 0, or 1 on blow-up.

    arm_q_out receives the arm configuration after the final step;
    link_normal_out receives the last step's per-link normal magnitudes.
    """
    n = theta.shape[0]
    nb = box_pose.shape[0]
    length, mass = par[0], par[1]
    spring_k, damping = par[2], par[3]
    gravity = par[5]

    pos = np.empty((n + 1, 3))
    rot = np.empty((n, 3, 3))
    axes = np.empty((n, 3))
    joint_vel = np.empty((n + 1, 3))
    ang_vel = np.empty((n, 3))
    link_force = np.empty((n, 3))
    link_moment = np.empty((n, 3))
    box_forces = np.empty((nb, 3))
    arm_q = np.empty(3)
    arm_v = np.empty(3)
    arm_a = np.empty(3)
    world_point_vel = np.empty((n + 1, 3))
    contact_force = np.empty((n, 3))

    for _ in range(n_steps):
        seg_state[0] += dt
        _arm_profile(seg_q0, seg_target, seg_state[0], seg_T,
                     arm_q, arm_v, arm_a)
        _fk(arm_q, theta, axis_code, length, par[4], par[11], par[12],
            pos, rot, axes)
        _chain_relative_velocities(omega, pos, axes, joint_vel, ang_vel)

        # boom-tip translational velocity/acceleration and frame rotation
        c1, s1 = math.cos(arm_q[0]), math.sin(arm_q[0])
        rho = par[12] + arm_q[2]
        w1, al1 = arm_v[0], arm_a[0]
        vbx = arm_v[2] * c1 - rho * s1 * w1
        vby = arm_v[2] * s1 + rho * c1 * w1
        vbz = arm_v[1]
        abx = arm_a[2] * c1 - 2.0 * arm_v[2] * s1 * w1 - rho * c1 * w1 * w1 - rho * s1 * al1
        aby = arm_a[2] * s1 + 2.0 * arm_v[2] * c1 * w1 - rho * s1 * w1 * w1 + rho * c1 * al1
        abz = arm_a[1]

        # world-frame velocity of each joint/tip point
        for i in range(n + 1):
            rx = pos[i, 0] - pos[0, 0]
            ry = pos[i, 1] - pos[0, 1]
            world_point_vel[i, 0] = vbx - w1 * ry + joint_vel[i, 0]
            world_point_vel[i, 1] = vby + w1 * rx + joint_vel[i, 1]
            world_point_vel[i, 2] = vbz + joint_vel[i, 2]

        # per-link force (at center) from gravity and frame motion, plus
        # the moment of both about the world origin
        for i in range(n):
            cx = 0.5 * (pos[i, 0] + pos[i + 1, 0])
            cy = 0.5 * (pos[i, 1] + pos[i + 1, 1])
            cz = 0.5 * (pos[i, 2] + pos[i + 1, 2])
            rx, ry = cx - pos[0, 0], cy - pos[0, 1]
            # center velocity in the arm frame
            relx = joint_vel[i, 0] + 0.5 * (joint_vel[i + 1, 0] - joint_vel[i, 0])
            rely = joint_vel[i, 1] + 0.5 * (joint_vel[i + 1, 1] - joint_vel[i, 1])
            relz = joint_vel[i, 2] + 0.5 * (joint_vel[i + 1, 2] - joint_vel[i, 2])
            # a_frame + alpha x r + w x (w x r) + 2 w x v_rel, rotation about z
            fict_x = abx - al1 * ry - w1 * w1 * rx - 2.0 * w1 * rely
            fict_y = aby + al1 * rx - w1 * w1 * ry + 2.0 * w1 * relx
            fict_z = abz
            fx = -mass * fict_x
            fy = -mass * fict_y
            fz = -mass * (fict_z + gravity)
            link_force[i, 0] = fx
            link_force[i, 1] = fy
            link_force[i, 2] = fz
            link_moment[i, 0] = cy * fz - cz * fy
            link_moment[i, 1] = cz * fx - cx * fz
            link_moment[i, 2] = cx * fy - cy * fx

        # contact forces act at the distal endpoints
        box_forces[:] = 0.0
        contact_force[:] = 0.0
        _contact_pass(pos, world_point_vel, box_pose, box_half, box_vel, par,
                      contact_force, link_normal_out, box_forces)
        for i in range(n):
            px, py, pz = pos[i + 1, 0], pos[i + 1, 1], pos[i + 1, 2]
            fx, fy, fz = contact_force[i, 0], contact_force[i, 1], contact_force[i, 2]
            link_force[i, 0] += fx
            link_force[i, 1] += fy
            link_force[i, 2] += fz
            link_moment[i, 0] += py * fz - pz * fy
            link_moment[i, 1] += pz * fx - px * fz
            link_moment[i, 2] += px * fy - py * fx

        # suffix sums turn per-link wrenches into joint torques in O(n)
        sfx = sfy = sfz = 0.0
        smx = smy = smz = 0.0
        for i in range(n - 1, -1, -1):
            sfx += link_force[i, 0]
            sfy += link_force[i, 1]
            sfz += link_force[i, 2]
            smx += link_moment[i, 0]
            smy += link_moment[i, 1]
            smz += link_moment[i, 2]
            tx = smx - (pos[i, 1] * sfz - pos[i, 2] * sfy)
            ty = smy - (pos[i, 2] * sfx - pos[i, 0] * sfz)
            tz = smz - (pos[i, 0] * sfy - pos[i, 1] * sfx)
            torque = (axes[i, 0] * tx + axes[i, 1] * ty + axes[i, 2] * tz
                      - spring_k * theta[i])
            new_omega = (omega[i] + dt * torque / inertia[i]) / \
                (1.0 + dt * damping / inertia[i])
            omega[i] = new_omega
            theta[i] += dt * new_omega
            if not (math.isfinite(theta[i]) and math.isfinite(omega[i])) \
                    or abs(theta[i]) >= math.pi:
                return 1

        # planar box integration with exact Coulomb ground friction
        for b in range(nb):
            hx, hy, hz = box_half[b, 0], box_half[b, 1], box_half[b, 2]
            # crude box-box separation: circumscribed-disc penalty
            for o in range(nb):
                if o == b:
                    continue
                ddx = box_pose[b, 0] - box_pose[o, 0]
                ddy = box_pose[b, 1] - box_pose[o, 1]
                dist = math.sqrt(ddx * ddx + ddy * ddy)
                reach = math.sqrt(hx * hx + hy * hy) + \
                    math.sqrt(box_half[o, 0] ** 2 + box_half[o, 1] ** 2)
                if 0.0 < dist < reach:
                    push = par[6] * (reach - dist) / dist
                    box_forces[b, 0] += push * ddx
                    box_forces[b, 1] += push * ddy
            m_b = box_mass[b]
            inertia_b = m_b * (hx * hx + hy * hy) / 3.0
            box_vel[b, 0] += dt * box_forces[b, 0] / m_b
            box_vel[b, 1] += dt * box_forces[b, 1] / m_b
            box_vel[b, 2] += dt * box_forces[b, 2] / inertia_b
            decel = par[13] * gravity * dt
            speed = math.sqrt(box_vel[b, 0] ** 2 + box_vel[b, 1] ** 2)
            if speed > 0.0:
                drop = min(decel, speed)
                box_vel[b, 0] *= (speed - drop) / speed
                box_vel[b, 1] *= (speed - drop) / speed
            spin = abs(box_vel[b, 2])
            if spin > 0.0:
                arm_len = 0.4 * (hx + hy)
                drop = min(par[13] * gravity * m_b * arm_len * dt / inertia_b, spin)
                box_vel[b, 2] -= math.copysign(drop, box_vel[b, 2])
            box_pose[b, 0] += dt * box_vel[b, 0]
            box_pose[b, 1] += dt * box_vel[b, 1]
            box_pose[b, 2] += dt * box_vel[b, 2]

    arm_q_out[:] = 0.0
    _arm_profile(seg_q0, seg_target, seg_state[0], seg_T,
                 arm_q_out, arm_v, arm_a)
    return 0


@njit(cache=True)
def _contact_snapshot(theta, omega, arm_q, arm_v_zero, box_pose, box_vel,
                      box_half, axis_code, par, link_normal, box_forces):
    """Contact forces of a static-arm snapshot of the current state."""
    n = theta.shape[0]
    pos = np.empty((n + 1, 3))
    rot = np.empty((n, 3, 3))
    axes = np.empty((n, 3))
    joint_vel = np.empty((n + 1, 3))
    ang_vel = np.empty((n, 3))
    _fk(arm_q, theta, axis_code, par[0], par[4], par[11], par[12],
        pos, rot, axes)
    _chain_relative_velocities(omega, pos, axes, joint_vel, ang_vel)
    link_force = np.zeros((n, 3))
    box_forces[:] = 0.0
    _contact_pass(pos, joint_vel, box_pose, box_half, box_vel, par,
                  link_force, link_normal, box_forces)


# --- public operations -------------------------------------------------------


def forward_kinematics(arm: ArmState, finger: FingerState,
                       cfg: FingerConfig, sim: SimConfig | None = None) -> KinematicFrames:
    """Place every finger link in the world frame.

    The boom tip hangs the chain; each link extends along its frame's
    local -z by link_length.  Joint i's world axis depends only on the
    frames of joints before it.
    """
    sim = sim or SimConfig(finger=cfg)
    n = cfg.n_joints
    pos = np.empty((n + 1, 3))
    rot = np.empty((n, 3, 3))
    axes = np.empty((n, 3))
    _fk(arm.as_array(), np.asarray(finger.angles, dtype=np.float64),
        _axis_codes(cfg), cfg.link_length, cfg.mount_pitch,
        sim.arm.column_height, sim.arm.base_offset, pos, rot, axes)
    return KinematicFrames(boom_tip=pos[0].copy(), joint_positions=pos,
                           link_rotations=rot, joint_axes=axes)


def _box_arrays(boxes: tuple[BoxBody, ...]):
    nb = len(boxes)
    pose = np.zeros((nb, 3))
    vel = np.zeros((nb, 3))
    half = np.zeros((nb, 3))
    mass = np.zeros(nb)
    for i, b in enumerate(boxes):
        pose[i] = b.pose
        vel[i] = b.velocity
        half[i] = b.half_extents
        mass[i] = b.mass
    return pose, vel, half, mass


def contact_forces(world: World) -> ContactForces:
    """Per-link total normal magnitude plus planar reactions on each box."""
    cfg = world.sim.finger
    n = cfg.n_joints
    pose, vel, half, _ = _box_arrays(world.boxes)
    link_normal = np.zeros(n)
    box_forces = np.zeros((max(len(world.boxes), 1), 3))
    _contact_snapshot(np.asarray(world.finger.angles, dtype=np.float64),
                      np.asarray(world.finger.angular_velocities, dtype=np.float64),
                      world.arm.as_array(), np.zeros(3), pose, vel, half,
                      _axis_codes(cfg), pack_params(world.sim),
                      link_normal, box_forces)
    return ContactForces(per_link_normal=link_normal,
                         box_wrenches=box_forces[:len(world.boxes)])


def _retarget(world: World, command: Command) -> World:
    """Begin a new blend segment when the commanded target changes."""
    if command == world.target:
        return world
    return replace(world,
                   target=command,
                   segment_start=world.arm.as_array(),
                   segment_time=0.0)


def step(world: World, command: Command, dt: float = PHYSICS_DT) -> World:
    """One fixed 1 ms physics tick toward `command`; returns the new World."""
    if abs(dt - PHYSICS_DT) > 1e-15:
        raise ValueError(f"physics step is fixed at {PHYSICS_DT} s")
    command = Command(*command).validate()
    world = _retarget(world, command)
    cfg = world.sim.finger

    theta = np.array(world.finger.angles, dtype=np.float64)
    omega = np.array(world.finger.angular_velocities, dtype=np.float64)
    seg_state = np.array([world.segment_time])
    pose, vel, half, mass = _box_arrays(world.boxes)
    arm_q_out = np.zeros(3)
    link_normal = np.zeros(cfg.n_joints)

    status = _advance(theta, omega,
                      np.asarray(world.segment_start, dtype=np.float64),
                      np.array(command, dtype=np.float64), seg_state,
                      world.segment_duration,
                      pose, vel, half, mass,
                      _axis_codes(cfg), link_inertias(cfg), pack_params(world.sim),
                      1, dt, arm_q_out, link_normal)
    if status != 0:
        raise InstabilityError(
            "finger state went non-finite or |angle| >= pi; "
            "stiffness/damping are mis-tuned for dt=1e-3")

    boxes = tuple(replace(b, pose=pose[i].copy(), velocity=vel[i].copy())
                  for i, b in enumerate(world.boxes))
    return replace(world,
                   arm=ArmState(*arm_q_out),
                   finger=FingerState(angles=theta, angular_velocities=omega),
                   boxes=boxes,
                   time=world.time + dt,
                   segment_time=float(seg_state[0]))


def mechanical_energy(world: World) -> float:
    """Finger kinetic + spring + gravitational energy.

    The gravitational zero is the straight-hanging configuration under the
    current boom tip, so a resting untouched finger reads exactly the
    spring energy of its pose.
    """
    cfg = world.sim.finger
    frames = forward_kinematics(world.arm, world.finger, cfg, world.sim)
    inertia = link_inertias(cfg)
    omega = np.asarray(world.finger.angular_velocities)
    theta = np.asarray(world.finger.angles)
    kinetic = 0.5 * float(np.sum(inertia * omega ** 2))
    spring = 0.5 * cfg.spring_k * float(np.sum(theta ** 2))
    pos = frames.joint_positions
    centers_z = 0.5 * (pos[:-1, 2] + pos[1:, 2])
    hang_z = frames.boom_tip[2] - (np.arange(cfg.n_joints) + 0.5) * cfg.link_length
    grav = world.sim.gravity * cfg.link_mass * float(np.sum(centers_z - hang_z))
    return kinetic + spring + grav
