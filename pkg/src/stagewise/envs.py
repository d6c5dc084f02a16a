"""Seeded desk-scale manipulation simulations with engineered stage ambiguity.

Three task families share the same mechanics: a point arm with a gripper
moves in the unit workspace via bounded displacement commands
``(dx, dy, dz, dgrip)``. Observations expose object slots
(position, color one-hot, presence), arm pose and gripper opening, and
deliberately carry no stage counter, pressed/unpressed flag, wet/dry flag
or placement count: frames at the recurring decision pose are identical
across stages while the correct action differs.

Poses are quantized to ``POSE_DECIMALS`` after every step (actuator
resolution) and object layouts are quantized at reset, so a proportional
controller reaches its waypoints *exactly* and the recurring raised-arm
observation is bitwise reproducible within an episode.

Held objects are inside the closed gripper and therefore absent from the
object slots; a grasped block's slot is restocked immediately (the table
holds spare blocks of both colors at all times), and a block released
away from the tray rolls off the table.

Observations end with a momentary end-effector contact flag (touching or
holding an object), standard force-sensing proprioception. It carries no
stage information: every press/grasp feels identical and the flag is zero
at the recurring raised decision pose (or constant where something is
held), so the observation-level stage ambiguity is untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, Episode

FAMILIES = ("push_buttons", "sort_blocks", "wipe_dish")
VARIANTS = ("standard", "distracting", "infinite")

POSE_DECIMALS = 9
VIEW_POSE = np.array([0.5, 0.5, 0.75])
Z_HOVER = 0.25
Z_LOW = 0.02       # descend target for press/grasp
Z_TOUCH = 0.05     # dip/wipe descend target
Z_PLACE = 0.12     # release height over the tray
PLACE_Z_MAX = 0.2
DIP_Z_MAX = 0.1
GRIP_CLOSED_THRESHOLD = 0.5

PUSH_BUTTON_COLORS = ("yellow", "pink", "blue", "gray")
SORT_BLOCK_COLORS = ("red", "blue", "yellow", "green")
RED, BLUE, YELLOW, GREEN = 0, 1, 2, 3
# slot index -> color id; slots 4 and 5 hold out-of-distribution distractors
SORT_SLOT_COLORS = (RED, RED, BLUE, BLUE, YELLOW, GREEN)
WIPE_OBJECTS = ("cloth", "basin", "dish")


class ConfigurationError(ValueError):
    """Unknown task family/variant combination or invalid parameters."""


@dataclass(frozen=True)
class TaskSpec:
    """Task family, variant, and the fixed thresholds of the simulation."""

    family: str
    variant: str = "standard"
    press_radius: float = 0.05
    lift_height: float = 0.1
    a_max: float = 0.2
    horizon: int = 200
    infinite_horizon: int = 2500
    max_grasps: int = 50

    @property
    def d_s(self) -> int:
        if self.family == "sort_blocks":
            return 2 if self.variant == "infinite" else 4
        return 3


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    stage: int
    done: bool
    stage_successes: tuple[bool, ...]
    events: tuple[tuple[str, int], ...]


def _norm_clamped(delta: np.ndarray, a_max: float) -> np.ndarray:
    n = float(np.linalg.norm(delta))
    if n > a_max:
        return delta * (a_max / n)
    return delta


class ManipulationEnv:
    """Shared arm/gripper mechanics; subclasses add objects and events."""

    action_dim = 4

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.arm = VIEW_POSE.copy()
        self.grip = 1.0
        self.stage = 0
        self.t = 0
        self.done = False
        self.failed = False
        self.stage_successes: list[bool] = []
        self.event_log: list[tuple[int, str, int]] = []
        self._events: list[tuple[str, int]] = []
        self._rng = np.random.default_rng(0)

    @property
    def d_s(self) -> int:
        return self.spec.d_s

    @property
    def obs_dim(self) -> int:
        return self.observe().size

    def _horizon(self) -> int:
        return self.spec.infinite_horizon if self.spec.variant == "infinite" else self.spec.horizon

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self.arm = VIEW_POSE.copy()
        self.grip = 1.0
        self.stage = 0
        self.t = 0
        self.done = False
        self.failed = False
        self.stage_successes = [False] * self.d_s
        self.event_log = []
        self._events = []
        self._exp_phase = "raise"
        self._reset_world(self._rng)
        return self.observe()

    def step(self, action: Sequence[float]) -> StepResult:
        if self.done:
            raise RuntimeError("episode is done; call reset")
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (self.action_dim,):
            raise ValueError(f"action must have dimension {self.action_dim}, got {a.shape}")
        a = np.clip(a, -self.spec.a_max, self.spec.a_max)
        self.arm = np.round(np.clip(self.arm + a[:3], 0.0, 1.0), POSE_DECIMALS)
        prev_grip = self.grip
        self.grip = float(np.round(np.clip(self.grip + a[3], 0.0, 1.0), POSE_DECIMALS))
        self._events = []
        self._update_world(prev_grip)
        self.t += 1
        if not self.done and self.t >= self._horizon():
            self.done = True
        return StepResult(self.observe(), self.stage, self.done, tuple(self.stage_successes), tuple(self._events))

    def _log(self, kind: str, value: int) -> None:
        self._events.append((kind, int(value)))
        self.event_log.append((self.t, kind, int(value)))

    def _sample_layout(self, rng: np.random.Generator, n_points: int, min_sep: float) -> np.ndarray:
        """Rejection-sample ``n_points`` positions with pairwise separation."""
        while True:
            pts = np.round(rng.uniform(0.15, 0.85, size=(n_points, 2)), POSE_DECIMALS)
            if n_points == 1:
                return pts
            d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
            if d[np.triu_indices(n_points, k=1)].min() >= min_sep:
                return pts

    def _move_action(self, target_xyz: np.ndarray, grip_target: float) -> np.ndarray:
        delta = _norm_clamped(np.asarray(target_xyz) - self.arm, self.spec.a_max)
        dgrip = float(np.clip(grip_target - self.grip, -self.spec.a_max, self.spec.a_max))
        return np.concatenate([delta, [dgrip]])

    def _arm_at(self, target_xyz) -> bool:
        return bool(np.array_equal(self.arm, np.asarray(target_xyz)))

    def _arm_near(self, target_xyz, tol: float = 0.04) -> bool:
        return float(np.linalg.norm(self.arm - np.asarray(target_xyz))) <= tol

    def _over(self, target_xy, z_max: float, xy_tol: float = 0.03) -> bool:
        return float(np.linalg.norm(self.arm[:2] - np.asarray(target_xy))) <= xy_tol and self.arm[2] <= z_max

    def _xy_dist(self, point: np.ndarray) -> float:
        return float(np.linalg.norm(self.arm[:2] - point))

    # subclass API ---------------------------------------------------------
    def _reset_world(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _update_world(self, prev_grip: float) -> None:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self) -> np.ndarray:
        raise NotImplementedError


class PushButtonsEnv(ManipulationEnv):
    """Press the yellow, pink, then blue button; buttons never change looks.

    The distracting variant adds a gray button that is never a target.
    """

    def _reset_world(self, rng: np.random.Generator) -> None:
        self.n_buttons = 4 if self.spec.variant == "distracting" else 3
        pts = self._sample_layout(rng, self.n_buttons, min_sep=0.25)
        self.button_pos = np.zeros((4, 2))
        self.button_pos[: self.n_buttons] = pts
        self._prev_zone: int | None = None
        self._exp_stage = 0
        self._exp_pressed: np.ndarray | None = None

    def _zone(self) -> int | None:
        if self.arm[2] > Z_TOUCH:
            return None
        for j in range(self.n_buttons):
            if self._xy_dist(self.button_pos[j]) <= self.spec.press_radius:
                return j
        return None

    def _update_world(self, prev_grip: float) -> None:
        zone = self._zone()
        if zone is not None and zone != self._prev_zone:
            if zone == self.stage:
                self._log("press", zone)
                self.stage_successes[self.stage] = True
                self.stage += 1
                if self.stage >= self.d_s:
                    self.stage = self.d_s - 1
                    self.done = True
            else:
                self._log("wrong_press", zone)
                self.failed = True
                self.done = True
        self._prev_zone = zone

    def observe(self) -> np.ndarray:
        slots = []
        for j in range(4):
            color = np.zeros(4)
            color[j] = 1.0
            present = 1.0 if j < self.n_buttons else 0.0
            slots.append(np.concatenate([self.button_pos[j] * present, color, [present]]))
        contact = 1.0 if self._zone() is not None else 0.0
        return np.concatenate(slots + [self.arm, [self.grip, contact]])

    def expert_action(self) -> np.ndarray:
        if self._exp_stage != self.stage:
            # finish the press firmly before raising: bottoming out keeps
            # the arm inside the pressed zone for a couple of frames
            self._exp_pressed = self.button_pos[self._exp_stage].copy()
            self._exp_stage = self.stage
            self._exp_phase = "press_finish"
        if self._exp_phase == "press_finish":
            if self.arm[2] > 0.03:
                return self._move_action([self._exp_pressed[0], self._exp_pressed[1], Z_LOW], grip_target=1.0)
            self._exp_phase = "raise"
        if self._exp_phase == "raise" and self._arm_at(VIEW_POSE):
            self._exp_phase = "align"
            self.event_log.append((self.t, "reach_onset", int(self.stage)))
        bx, by = self.button_pos[self.stage]
        if self._exp_phase == "align" and self._arm_near([bx, by, Z_HOVER]):
            self._exp_phase = "descend"
        if self._exp_phase == "raise":
            target = VIEW_POSE
        elif self._exp_phase == "align":
            target = np.array([bx, by, Z_HOVER])
        else:
            target = np.array([bx, by, Z_LOW])
        return self._move_action(target, grip_target=1.0)


class SortBlocksEnv(ManipulationEnv):
    """Place blocks into the tray alternating red, blue, red, blue.

    The table always shows two blocks of each color: a grasped block's
    slot is restocked immediately from the spare supply. Grasping a block
    of the wrong color (or a distractor) ends the episode. The infinite
    variant never terminates on success and counts consecutive correct
    grasps up to ``max_grasps``; setting ``free_order = True`` disables
    the color-order rule for intervention experiments.
    """

    free_order: bool = False

    def _reset_world(self, rng: np.random.Generator) -> None:
        self.n_slots = 6 if self.spec.variant == "distracting" else 4
        pts = self._sample_layout(rng, self.n_slots + 1, min_sep=0.18)
        self.tray = pts[0]
        self.block_pos = np.zeros((6, 2))
        self.block_pos[: self.n_slots] = pts[1:]
        self.block_present = np.zeros(6, dtype=bool)
        self.block_present[: self.n_slots] = True
        self.holding: int | None = None
        self.lifted = False
        self.grasp_count = 0

    def _target_color(self) -> int:
        if self.spec.variant == "infinite":
            return (RED, BLUE)[self.stage]
        return (RED, BLUE, RED, BLUE)[self.stage]

    def _respawn(self, slot: int) -> None:
        others = [self.block_pos[j] for j in range(6) if self.block_present[j] and j != slot]
        others.append(self.tray)
        while True:
            p = np.round(self._rng.uniform(0.15, 0.85, size=2), POSE_DECIMALS)
            if min(float(np.linalg.norm(p - q)) for q in others) >= 0.18:
                self.block_pos[slot] = p
                return

    def _update_world(self, prev_grip: float) -> None:
        if self.holding is None and self.grip < GRIP_CLOSED_THRESHOLD and self.arm[2] <= Z_TOUCH:
            dists = [
                (self._xy_dist(self.block_pos[j]), j)
                for j in range(6)
                if self.block_present[j] and self._xy_dist(self.block_pos[j]) <= self.spec.press_radius
            ]
            if dists:
                _, j = min(dists)
                color = SORT_SLOT_COLORS[j]
                if self.free_order or color == self._target_color():
                    self._log("grasp", color)
                    self.holding = color
                    self.lifted = False
                    self._respawn(j)
                    if self.spec.variant == "infinite" and not self.free_order:
                        self.grasp_count += 1
                        for s in range(min(self.grasp_count, self.d_s)):
                            self.stage_successes[s] = True
                        self.stage = self.grasp_count % 2
                        if self.grasp_count >= self.spec.max_grasps:
                            self.done = True
                else:
                    self._log("wrong_grasp", color)
                    self.failed = True
                    self.done = True
                    return
        if self.holding is not None and self.arm[2] >= self.spec.lift_height:
            self.lifted = True
        if self.holding is not None and prev_grip < GRIP_CLOSED_THRESHOLD <= self.grip:
            in_tray = self._xy_dist(self.tray) <= self.spec.press_radius and self.arm[2] <= PLACE_Z_MAX
            if in_tray and self.lifted:
                self._log("place", self.holding)
                if self.spec.variant != "infinite" and not self.free_order:
                    self.stage_successes[self.stage] = True
                    self.stage += 1
                    if self.stage >= self.d_s:
                        self.stage = self.d_s - 1
                        self.done = True
            else:
                # dropped away from the tray: the block rolls off the table
                self._log("drop", self.holding)
            self.holding = None
            self.lifted = False

    def _touching_block(self) -> bool:
        if self.arm[2] > Z_TOUCH:
            return False
        return any(
            self.block_present[j] and self._xy_dist(self.block_pos[j]) <= self.spec.press_radius
            for j in range(6)
        )

    def observe(self) -> np.ndarray:
        slots = []
        for j in range(6):
            color = np.zeros(4)
            color[SORT_SLOT_COLORS[j]] = 1.0
            present = 1.0 if self.block_present[j] else 0.0
            slots.append(np.concatenate([self.block_pos[j] * present, color * present, [present]]))
        contact = 1.0 if (self.holding is not None or self._touching_block()) else 0.0
        return np.concatenate(slots + [self.tray, self.arm, [self.grip, contact]])

    def _canonical_block(self, color: int) -> int:
        # the expert always reaches for the lowest-indexed block of the
        # target color: the choice is a pure function of the observation,
        # so demonstrations stay unimodal given (observation, stage)
        for j in range(6):
            if self.block_present[j] and SORT_SLOT_COLORS[j] == color:
                return j
        raise RuntimeError("no block of the target color on the table")

    def expert_action(self) -> np.ndarray:
        ph = self._exp_phase
        if ph == "release" and self.holding is None:
            ph = "raise"
        if ph == "raise" and self._arm_at(VIEW_POSE):
            ph = "align"
            self.event_log.append((self.t, "reach_onset", int(self.stage)))
        if ph in ("align", "descend"):
            bx, by = self.block_pos[self._canonical_block(self._target_color())]
            if ph == "align" and self._arm_near([bx, by, Z_HOVER]):
                ph = "descend"
            if ph == "descend" and self._over([bx, by], z_max=0.045):
                ph = "close"
        if ph == "close" and self.holding is not None:
            ph = "lift"
        if ph == "lift" and self.arm[2] >= Z_HOVER - 0.03:
            ph = "carry"
        if ph == "carry" and self._arm_near([self.tray[0], self.tray[1], Z_PLACE]):
            ph = "release"
        self._exp_phase = ph

        if ph == "raise":
            return self._move_action(VIEW_POSE, grip_target=1.0)
        if ph == "align":
            bx, by = self.block_pos[self._canonical_block(self._target_color())]
            return self._move_action([bx, by, Z_HOVER], grip_target=1.0)
        if ph == "descend":
            bx, by = self.block_pos[self._canonical_block(self._target_color())]
            return self._move_action([bx, by, Z_LOW], grip_target=1.0)
        if ph == "close":
            bx, by = self.block_pos[self._canonical_block(self._target_color())]
            return self._move_action([bx, by, Z_LOW], grip_target=0.0)
        if ph == "lift":
            return self._move_action([self.arm[0], self.arm[1], Z_HOVER], grip_target=0.0)
        if ph == "carry":
            return self._move_action([self.tray[0], self.tray[1], Z_PLACE], grip_target=0.0)
        # release: keep centering over the tray while the gripper opens
        return self._move_action([self.tray[0], self.tray[1], Z_PLACE], grip_target=1.0)


class WipeDishEnv(ManipulationEnv):
    """Grab the cloth, dip it into the basin, then wipe the dish.

    Wetness is hidden: after the grasp and after the dip the raised-arm
    observation is identical, yet one demands heading to the basin and
    the other to the dish. Wiping with a dry cloth or re-dipping a wet
    one fails the episode.
    """

    def _reset_world(self, rng: np.random.Generator) -> None:
        pts = self._sample_layout(rng, 3, min_sep=0.3)
        self.cloth_pos, self.basin, self.dish = pts[0], pts[1], pts[2]
        self.holding = False
        self.wet = False
        self._in_basin = False
        self._in_dish = False
        self._exp_stage = 0

    def _update_world(self, prev_grip: float) -> None:
        if (
            not self.holding
            and self.grip < GRIP_CLOSED_THRESHOLD
            and self.arm[2] <= Z_TOUCH
            and self._xy_dist(self.cloth_pos) <= self.spec.press_radius
        ):
            self.holding = True
            self._log("grasp_cloth", 0)
            if self.stage == 0:
                self.stage_successes[0] = True
                self.stage = 1
        if self.holding and prev_grip < GRIP_CLOSED_THRESHOLD <= self.grip:
            self.holding = False
            self.cloth_pos = self.arm[:2].copy()
            self._log("drop_cloth", 0)

        in_basin = self._xy_dist(self.basin) <= self.spec.press_radius and self.arm[2] <= DIP_Z_MAX
        in_dish = self._xy_dist(self.dish) <= self.spec.press_radius and self.arm[2] <= DIP_Z_MAX
        if in_basin and not self._in_basin and self.holding:
            if self.stage == 1:
                self._log("dip", 1)
                self.wet = True
                self.stage_successes[1] = True
                self.stage = 2
            else:
                self._log("wrong_dip", self.stage)
                self.failed = True
                self.done = True
        if in_dish and not self._in_dish and self.holding and not self.done:
            if self.stage == 2 and self.wet:
                self._log("wipe", 2)
                self.stage_successes[2] = True
                self.done = True
            else:
                self._log("dry_wipe", self.stage)
                self.failed = True
                self.done = True
        self._in_basin = in_basin
        self._in_dish = in_dish

    def observe(self) -> np.ndarray:
        cloth_present = 0.0 if self.holding else 1.0
        slots = []
        for j, (pos, present) in enumerate(
            [(self.cloth_pos, cloth_present), (self.basin, 1.0), (self.dish, 1.0)]
        ):
            ident = np.zeros(3)
            ident[j] = 1.0
            slots.append(np.concatenate([np.asarray(pos) * present, ident, [present]]))
        touching = (
            self.holding
            or (self.arm[2] <= Z_TOUCH and self._xy_dist(self.cloth_pos) <= self.spec.press_radius)
            or (self.arm[2] <= DIP_Z_MAX and self._xy_dist(self.basin) <= self.spec.press_radius)
            or (self.arm[2] <= DIP_Z_MAX and self._xy_dist(self.dish) <= self.spec.press_radius)
        )
        contact = 1.0 if touching else 0.0
        return np.concatenate(slots + [self.arm, [self.grip, contact]])

    def expert_action(self) -> np.ndarray:
        if self._exp_stage != self.stage:
            self._exp_stage = self.stage
            self._exp_phase = "raise"
        if self._exp_phase == "raise" and self._arm_at(VIEW_POSE):
            self._exp_phase = "align"
            self.event_log.append((self.t, "reach_onset", int(self.stage)))
        # the cloth must be in hand before heading anywhere (re-grasp after drops)
        grasp_mode = not self.holding
        target_xy = self.cloth_pos if grasp_mode else (self.cloth_pos, self.basin, self.dish)[self.stage]
        grip_target = 1.0 if grasp_mode else 0.0
        descend_z = Z_LOW if grasp_mode else Z_TOUCH
        if self._exp_phase == "align" and self._arm_near([target_xy[0], target_xy[1], Z_HOVER]):
            self._exp_phase = "descend"
        if self._exp_phase == "descend" and grasp_mode and self._over(target_xy, z_max=0.045):
            self._exp_phase = "close"
        if self._exp_phase == "close" and not grasp_mode:
            self._exp_phase = "raise"
        if self._exp_phase == "raise":
            return self._move_action(VIEW_POSE, grip_target)
        if self._exp_phase == "align":
            return self._move_action([target_xy[0], target_xy[1], Z_HOVER], grip_target)
        if self._exp_phase == "descend":
            return self._move_action([target_xy[0], target_xy[1], descend_z], grip_target)
        return self._move_action([target_xy[0], target_xy[1], Z_LOW], grip_target=0.0)  # close on the cloth


_ENV_CLASSES = {
    "push_buttons": PushButtonsEnv,
    "sort_blocks": SortBlocksEnv,
    "wipe_dish": WipeDishEnv,
}

_ALLOWED_VARIANTS = {
    "push_buttons": ("standard", "distracting"),
    "sort_blocks": ("standard", "distracting", "infinite"),
    "wipe_dish": ("standard",),
}


def make_task(spec: TaskSpec) -> ManipulationEnv:
    """Instantiate the environment for a task spec, validating the combo."""
    if spec.family not in _ENV_CLASSES:
        raise ConfigurationError(f"unknown task family {spec.family!r}")
    if spec.variant not in _ALLOWED_VARIANTS[spec.family]:
        raise ConfigurationError(f"variant {spec.variant!r} not available for {spec.family!r}")
    if not (0 < spec.a_max <= 1.0) or spec.press_radius <= 0:
        raise ConfigurationError("invalid actuation bound or success radius")
    return _ENV_CLASSES[spec.family](spec)


def scripted_expert(env: ManipulationEnv) -> np.ndarray:
    """Privileged proportional controller toward the current stage target."""
    return env.expert_action()


def episode_seed(seed: int, index: int) -> int:
    """Deterministic per-episode seed, independent of generation order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def rollout_expert(env: ManipulationEnv, seed: int, action_noise: float = 0.0) -> Episode:
    """Run the scripted expert to episode end and record all frames.

    ``action_noise`` adds zero-mean Gaussian jitter to the *executed*
    command so the recorded states cover a tube around the nominal path,
    while the recorded action stays the expert controller's clean
    corrective command for that state (the controller re-plans every
    step). The raise phase stays clean so the recurring view-pose
    observation remains bitwise reproducible.
    """
    obs = env.reset(seed)
    noise_rng = np.random.default_rng(seed + 1) if action_noise > 0 else None
    observations, actions, stages = [], [], []
    done = False
    while not done:
        action = env.expert_action()
        executed = action
        if noise_rng is not None and env._exp_phase != "raise":
            executed = np.clip(
                action + noise_rng.normal(0.0, action_noise, 4), -env.spec.a_max, env.spec.a_max
            )
        observations.append(obs)
        actions.append(action)
        stages.append(env.stage)
        result = env.step(executed)
        obs, done = result.observation, result.done
    meta = {
        "task": f"{env.spec.family}/{env.spec.variant}",
        "seed": int(seed),
        "true_stages": [int(s) for s in stages],
        "events": [[int(t), kind, int(v)] for t, kind, v in env.event_log],
        "stage_successes": [bool(s) for s in env.stage_successes],
        "failed": bool(env.failed),
    }
    return Episode(observations=np.array(observations), actions=np.array(actions), meta=meta)


DEMO_ACTION_NOISE = 0.015


def generate_dataset(
    env: ManipulationEnv, n_episodes: int, seed: int, action_noise: float = DEMO_ACTION_NOISE
) -> Dataset:
    """Expert demonstrations with ground-truth stages hidden in episode meta.

    Episodes use seeds derived from ``(seed, index)`` so the result does
    not depend on generation order. Demonstrations carry small corrective
    action jitter by default; pass ``action_noise=0`` for clean rollouts.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    episodes = [rollout_expert(env, episode_seed(seed, i), action_noise) for i in range(n_episodes)]
    return Dataset(episodes, env.spec.family, env.spec.variant, env.d_s)
