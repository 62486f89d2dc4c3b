"""A 2-D tabletop playground: point agent with a gripper, two colored blocks,
a goal zone, a toggle button and a sliding door handle.

The table is the unit square. Dynamics are deterministic given actions; all
randomness enters through reset(seed). Rendering is a coarse top-down raster
plus an egocentric crop, both cheap enough to call tens of thousands of times.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# -- tasks and language ------------------------------------------------------

TASKS = ("lift_red", "lift_blue", "place_in_zone", "press_button",
         "open_slider", "close_slider")
TASK_INDEX = {t: i for i, t in enumerate(TASKS)}

TEMPLATES = {
    "lift_red": (
        "lift the red block",
        "pick up the red block",
        "grab the red block",
        "raise the red block",
    ),
    "lift_blue": (
        "lift the blue block",
        "pick up the blue block",
        "grab the blue block",
        "raise the blue block",
    ),
    "place_in_zone": (
        "place the block in the zone",
        "put the block into the zone",
        "move the block to the zone",
        "drop the block in the zone",
    ),
    "press_button": (
        "press the button",
        "push the button",
        "toggle the button",
        "hit the button",
    ),
    "open_slider": (
        "open the slider",
        "slide the handle right",
        "push the slider right",
        "move the slider to the right",
    ),
    "close_slider": (
        "close the slider",
        "slide the handle left",
        "push the slider left",
        "move the slider to the left",
    ),
}

PAD_TOKEN = "<pad>"
MAX_TOKENS = 8


def _build_vocab():
    words = set()
    for phrases in TEMPLATES.values():
        for p in phrases:
            words.update(p.split())
    return (PAD_TOKEN,) + tuple(sorted(words))


VOCAB = _build_vocab()
WORD_INDEX = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text: str) -> np.ndarray:
    """Lowercase whitespace tokenizer onto the fixed vocab, padded to MAX_TOKENS."""
    ids = [WORD_INDEX[w] for w in text.lower().split()]
    if len(ids) > MAX_TOKENS:
        raise ValueError(f"instruction too long: {text!r}")
    return np.array(ids + [0] * (MAX_TOKENS - len(ids)), dtype=np.int64)


@dataclass(frozen=True)
class Instruction:
    task: str
    text: str
    tokens: np.ndarray = field(compare=False, repr=False, default=None)


def sample_instruction(task: str, rng) -> Instruction:
    text = TEMPLATES[task][rng.integers(len(TEMPLATES[task]))]
    return Instruction(task=task, text=text, tokens=tokenize(text))


# -- geometry ----------------------------------------------------------------

STEP_SIZE = 0.08
GRASP_RADIUS = 0.06
ZONE = (0.05, 0.25, 0.05, 0.25)  # x0, x1, y0, y1
BUTTON_POS = np.array([0.85, 0.15])
BUTTON_RADIUS = 0.07
SLIDER_Y = 0.9
SLIDER_X0, SLIDER_X1 = 0.3, 0.7
SLIDER_GRAB = 0.06
SLIDER_OPEN_AT = 0.7   # slider position counted as open
SLIDER_CLOSED_AT = 0.3
SPAWN_BOX = (0.3, 0.7, 0.3, 0.7)
ACTION_DIM = 3  # dx, dy, grip (grip > 0 closes)


def slider_handle_x(pos: float) -> float:
    return SLIDER_X0 + (SLIDER_X1 - SLIDER_X0) * pos


def in_zone(p) -> bool:
    return ZONE[0] <= p[0] <= ZONE[1] and ZONE[2] <= p[1] <= ZONE[3]


@dataclass
class WorldState:
    agent: np.ndarray
    gripper_closed: bool
    red: np.ndarray
    blue: np.ndarray
    red_held: bool
    blue_held: bool
    button_on: bool
    button_contact: bool
    slider: float
    slider_grabbed: bool
    t: int

    def copy(self) -> "WorldState":
        return replace(self, agent=self.agent.copy(), red=self.red.copy(),
                       blue=self.blue.copy())


@dataclass
class Observation:
    static: np.ndarray   # [H, W, 3] float32 in [0, 1]
    ego: np.ndarray      # [h, w, 3]
    proprio: np.ndarray  # (x, y, grip in {0, 1})


@dataclass
class Action:
    """Continuous command in [-1, 1]^3; grip > 0 closes the gripper."""
    delta: np.ndarray

    @staticmethod
    def clip(raw: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0)


# -- task predicates ---------------------------------------------------------

def _pred_lift(color: str):
    def pred(before: WorldState, now: WorldState) -> bool:
        return getattr(now, f"{color}_held") and not getattr(before, f"{color}_held")
    return pred


def _pred_place(before: WorldState, now: WorldState) -> bool:
    for name in ("red", "blue"):
        placed = in_zone(getattr(now, name)) and not getattr(now, f"{name}_held")
        was = in_zone(getattr(before, name)) and not getattr(before, f"{name}_held")
        if placed and not was:
            return True
    return False


def _pred_button(before: WorldState, now: WorldState) -> bool:
    return now.button_on != before.button_on


def _pred_open(before: WorldState, now: WorldState) -> bool:
    return now.slider >= SLIDER_OPEN_AT and before.slider < SLIDER_OPEN_AT


def _pred_close(before: WorldState, now: WorldState) -> bool:
    return now.slider <= SLIDER_CLOSED_AT and before.slider > SLIDER_CLOSED_AT


PREDICATES = {
    "lift_red": _pred_lift("red"),
    "lift_blue": _pred_lift("blue"),
    "place_in_zone": _pred_place,
    "press_button": _pred_button,
    "open_slider": _pred_open,
    "close_slider": _pred_close,
}


def evaluate_success(task: str, before: WorldState, now: WorldState) -> bool:
    if task not in PREDICATES:
        raise ValueError(f"unknown task {task!r}")
    return PREDICATES[task](before, now)


# -- rendering ---------------------------------------------------------------

_BG = (0.15, 0.15, 0.15)
_ZONE_C = (0.10, 0.35, 0.10)
_TRACK_C = (0.35, 0.35, 0.35)
_HANDLE_C = (0.10, 0.75, 0.80)
_BUTTON_OFF = (0.55, 0.55, 0.10)
_BUTTON_ON = (1.00, 1.00, 0.25)
_RED_C = (1.00, 0.15, 0.15)
_BLUE_C = (0.20, 0.30, 1.00)
_AGENT_OPEN = (1.00, 1.00, 1.00)
_AGENT_CLOSED = (0.65, 0.65, 0.65)


def _blit(img, cx, cy, half, color):
    """Fill a (2*half+1)-wide square (or 2-wide when half==0.5) around a point."""
    S = img.shape[0]
    px, py = int(cx * S), int((1.0 - cy) * S)  # row 0 is the far edge
    lo = int(np.floor(half))
    hi = int(np.ceil(half))
    r0, r1 = max(py - lo, 0), min(py + hi + 1, S)
    c0, c1 = max(px - lo, 0), min(px + hi + 1, S)
    img[r0:r1, c0:c1] = color


def render_static(state: WorldState, size: int = 16) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = _BG
    # zone
    r0 = int((1.0 - ZONE[3]) * size)
    r1 = int(np.ceil((1.0 - ZONE[2]) * size))
    c0, c1 = int(ZONE[0] * size), int(np.ceil(ZONE[1] * size))
    img[r0:r1, c0:c1] = _ZONE_C
    # slider track and handle
    tr = int((1.0 - SLIDER_Y) * size)
    img[tr, int(SLIDER_X0 * size) : int(np.ceil(SLIDER_X1 * size)) + 1] = _TRACK_C
    _blit(img, slider_handle_x(state.slider), SLIDER_Y, 0.5, _HANDLE_C)
    # button
    _blit(img, BUTTON_POS[0], BUTTON_POS[1], 1, _BUTTON_ON if state.button_on else _BUTTON_OFF)
    # agent under the blocks so a held block stays visible
    _blit(img, state.agent[0], state.agent[1], 1,
          _AGENT_CLOSED if state.gripper_closed else _AGENT_OPEN)
    _blit(img, state.red[0], state.red[1], 0.5, _RED_C)
    _blit(img, state.blue[0], state.blue[1], 0.5, _BLUE_C)
    return img


def render_ego(static_img: np.ndarray, state: WorldState, size: int = 8) -> np.ndarray:
    """Crop of the table render centered on the agent, clamped at borders."""
    S = static_img.shape[0]
    px = int(state.agent[0] * S)
    py = int((1.0 - state.agent[1]) * S)
    r0 = min(max(py - size // 2, 0), S - size)
    c0 = min(max(px - size // 2, 0), S - size)
    return static_img[r0 : r0 + size, c0 : c0 + size].copy()


# -- environment -------------------------------------------------------------

class PlayTable:
    """Deterministic step dynamics; layout randomness only at reset."""

    def __init__(self, static_size: int = 16, ego_size: int = 8, action_dim: int = ACTION_DIM):
        if action_dim < 3:
            raise ValueError("action_dim must be >= 3 (dx, dy, grip)")
        self.static_size = static_size
        self.ego_size = ego_size
        self.action_dim = action_dim
        self.state: WorldState | None = None

    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = SPAWN_BOX
        while True:
            red = rng.uniform((x0, y0), (x1, y1))
            blue = rng.uniform((x0, y0), (x1, y1))
            if np.linalg.norm(red - blue) > 0.12:
                break
        self.state = WorldState(
            agent=np.array([0.5, 0.5]), gripper_closed=False,
            red=red, blue=blue, red_held=False, blue_held=False,
            button_on=False, button_contact=False,
            slider=float(rng.uniform(0.35, 0.65)), slider_grabbed=False, t=0,
        )
        return self.observe()

    def observe(self) -> Observation:
        s = self.state
        static = render_static(s, self.static_size)
        ego = render_ego(static, s, self.ego_size)
        proprio = np.array([s.agent[0], s.agent[1], 1.0 if s.gripper_closed else 0.0],
                           dtype=np.float32)
        return Observation(static=static, ego=ego, proprio=proprio)

    def step(self, action) -> Observation:
        if self.state is None:
            raise RuntimeError("reset() before step()")
        a = Action.clip(action)
        if a.shape != (self.action_dim,):
            raise ValueError(f"action shape {a.shape}, expected ({self.action_dim},)")
        s = self.state
        s.agent = np.clip(s.agent + a[:2] * STEP_SIZE, 0.02, 0.98)
        want_closed = a[-1] > 0.0

        if want_closed and not s.gripper_closed:
            self._try_grasp(s)
            # empty-handed close next to the handle latches onto the slider
            if (not (s.red_held or s.blue_held)
                    and abs(s.agent[1] - SLIDER_Y) < SLIDER_GRAB
                    and abs(s.agent[0] - slider_handle_x(s.slider)) < SLIDER_GRAB):
                s.slider_grabbed = True
        if not want_closed:
            s.red_held = False
            s.blue_held = False
            s.slider_grabbed = False
        s.gripper_closed = want_closed

        if s.red_held:
            s.red = s.agent.copy()
        if s.blue_held:
            s.blue = s.agent.copy()
        if s.slider_grabbed:
            s.slider = float(np.clip((s.agent[0] - SLIDER_X0) / (SLIDER_X1 - SLIDER_X0), 0.0, 1.0))

        contact = s.gripper_closed and np.linalg.norm(s.agent - BUTTON_POS) < BUTTON_RADIUS
        if contact and not s.button_contact:
            s.button_on = not s.button_on
        s.button_contact = contact

        s.t += 1
        return self.observe()

    @staticmethod
    def _try_grasp(s: WorldState):
        """Closing over a block grabs the nearest one in reach; one at a time."""
        dr = np.linalg.norm(s.agent - s.red)
        db = np.linalg.norm(s.agent - s.blue)
        if min(dr, db) >= GRASP_RADIUS:
            return
        if dr <= db:
            s.red_held = True
        else:
            s.blue_held = True


# -- scripted demonstrator ---------------------------------------------------

_ARRIVE = 0.03
_PLAN_TIMEOUT = 80


def _feasible_tasks(s: WorldState):
    out = []
    for task in TASKS:
        if task == "lift_red" and s.red_held:
            continue
        if task == "lift_blue" and s.blue_held:
            continue
        if task == "place_in_zone" and in_zone(s.red) and in_zone(s.blue):
            continue
        if task == "open_slider" and s.slider >= 0.6:
            continue
        if task == "close_slider" and s.slider <= 0.4:
            continue
        out.append(task)
    return out


class ScriptedPlayer:
    """Noisy waypoint state machine that wanders between subtasks forever.

    Logs a (step, task) completion event the first time its current subtask's
    predicate fires relative to the subtask's start state. noise=0 gives the
    deterministic oracle controller used by the evaluation harness.
    """

    def __init__(self, env: PlayTable, rng, noise: float = 0.3, fixed_task: str | None = None):
        self.env = env
        self.rng = rng
        self.noise = noise
        self.fixed_task = fixed_task
        self.plan = []
        self.task = None
        self.start_state = None
        self.done_logged = False
        self.plan_age = 0
        self.events: list[tuple[int, int]] = []

    def set_task(self, task: str):
        """Pin the next plans to one task (oracle mode for the eval harness)."""
        self.fixed_task = task
        self.plan = []
        self.task = None

    # plan primitives are tuples: ("goto", target, carry), ("grip", close),
    # ("hold", steps, carry)

    def _new_plan(self):
        s = self.env.state
        self.task = self.fixed_task or str(self.rng.choice(_feasible_tasks(s)))
        self.start_state = s.copy()
        self.done_logged = False
        self.plan_age = 0
        rng = self.rng
        p = []
        holding = s.red_held or s.blue_held
        if self.task in ("lift_red", "lift_blue"):
            color = self.task.split("_")[1]
            if holding:
                p.append(("grip", False))
            p.append(("goto", lambda st, c=color: getattr(st, c), False))
            p.append(("grip", True))
            p.append(("hold", int(rng.integers(3, 8)), True))
            if rng.random() < 0.6:  # carry somewhere, then set down
                drop = rng.uniform((0.15, 0.2), (0.85, 0.75))
                p.append(("goto", lambda st, d=drop: d, True))
                p.append(("grip", False))
        elif self.task == "place_in_zone":
            if not holding:
                p.append(("goto", _nearest_loose_block, False))
                p.append(("grip", True))
            target = rng.uniform((ZONE[0] + 0.04, ZONE[2] + 0.04), (ZONE[1] - 0.04, ZONE[3] - 0.04))
            p.append(("goto", lambda st, d=target: d, True))
            p.append(("grip", False))
            p.append(("goto", lambda st: np.array([0.45, 0.45]), False))
        elif self.task == "press_button":
            if holding:
                p.append(("grip", False))
            p.append(("goto", lambda st: BUTTON_POS, False))
            p.append(("grip", True))
            p.append(("grip", False))
            back = rng.uniform((0.35, 0.35), (0.65, 0.65))
            p.append(("goto", lambda st, d=back: d, False))
        else:  # slider tasks
            if holding:
                p.append(("grip", False))
            p.append(("goto", lambda st: np.array([slider_handle_x(st.slider), SLIDER_Y]), False))
            p.append(("grip", True))
            pos = 0.92 if self.task == "open_slider" else 0.08
            p.append(("goto", lambda st, x=slider_handle_x(pos): np.array([x, SLIDER_Y]), True))
            p.append(("grip", False))
            p.append(("goto", lambda st: np.array([0.5, 0.6]), False))
        self.plan = p

    def act(self) -> np.ndarray:
        """Next action for the current plan, drawing a fresh plan when done."""
        if not self.plan or self.plan_age > _PLAN_TIMEOUT:
            self._new_plan()
        self.plan_age += 1
        s = self.env.state
        kind = self.plan[0][0]
        grip = 1.0 if s.gripper_closed else -1.0
        if kind == "grip":
            close = self.plan.pop(0)[1]
            return self._noisy(np.array([0.0, 0.0]), 1.0 if close else -1.0, xy_noise=0.3)
        if kind == "hold":
            _, steps, carry = self.plan[0]
            self.plan[0] = ("hold", steps - 1, carry)
            if steps <= 1:
                self.plan.pop(0)
            return self._noisy(self.rng.normal(0.0, 0.2, 2) if self.noise else np.zeros(2),
                               1.0 if carry else -1.0, xy_noise=0.0)
        _, target_fn, carry = self.plan[0]
        target = np.asarray(target_fn(s), dtype=np.float64)
        delta = target - s.agent
        if np.linalg.norm(delta) < _ARRIVE:
            self.plan.pop(0)
            return self.act() if self.plan else self._noisy(np.zeros(2), grip, 0.0)
        return self._noisy(np.clip(delta / STEP_SIZE, -1.0, 1.0), 1.0 if carry else -1.0)

    def _noisy(self, xy, grip, xy_noise=None):
        scale = self.noise if xy_noise is None else xy_noise * self.noise
        if scale:
            xy = xy + self.rng.normal(0.0, scale, 2)
        a = np.zeros(self.env.action_dim)
        a[0:2] = np.clip(xy, -1.0, 1.0)
        a[-1] = grip
        return a

    def observe_step(self):
        """Check the running subtask after an env step; log its completion once.

        The event index is the time of the first observation in which the
        completed state is visible (state.t was already advanced by step()).
        """
        if self.task is None or self.done_logged:
            return
        if evaluate_success(self.task, self.start_state, self.env.state):
            self.events.append((self.env.state.t, TASK_INDEX[self.task]))
            self.done_logged = True


def _nearest_loose_block(s: WorldState) -> np.ndarray:
    cands = [p for p, held in ((s.red, s.red_held), (s.blue, s.blue_held))
             if not held and not in_zone(p)]
    if not cands:
        cands = [p for p, held in ((s.red, s.red_held), (s.blue, s.blue_held)) if not held]
    d = [np.linalg.norm(s.agent - c) for c in cands]
    return cands[int(np.argmin(d))]
