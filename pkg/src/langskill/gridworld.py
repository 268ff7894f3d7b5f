"""Partially observable grid environment with compositional language goals.

A single rectangular room with border walls, a handful of colored objects
(keys and balls can be picked up, boxes can be toggled open), and an agent
with a heading. Goals are ordered chains of subgoals rendered to text
("go to the red ball, then open the blue box"). The observation is a 7x7
egocentric window in front of the agent with integer (type, color, state)
channels. Reward is sparse: 1 on the step that completes the final
subgoal, 0 otherwise.

A scripted expert plans with breadth-first search (fixed N,E,S,W
tie-breaking) and emits demonstrations together with the step indices at
which each subgoal completed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from collections import deque
from typing import Optional

import numpy as np

from .corpus import Trajectory


@dataclass(frozen=True)
class ActionDef:
    id: int
    name: str


ACTIONS: tuple[ActionDef, ...] = (
    ActionDef(0, "turn left"),
    ActionDef(1, "turn right"),
    ActionDef(2, "move forward"),
    ActionDef(3, "pick up"),
    ActionDef(4, "drop"),
    ActionDef(5, "toggle"),
)
ACTION_NAMES: tuple[str, ...] = tuple(a.name for a in ACTIONS)

LEVELS = ("single-subgoal", "two-subgoal", "composite-long")
HORIZONS = {"single-subgoal": 120, "two-subgoal": 240, "composite-long": 400}

# integer vocabularies for the observation channels
TYPE_CODES = {"floor": 0, "wall": 1, "key": 2, "ball": 3, "box": 4}
COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
COLOR_CODES = {c: i for i, c in enumerate(COLORS)}
STATE_NONE, STATE_CLOSED, STATE_OPEN = 0, 1, 2

PICKABLE_TYPES = ("key", "ball")
TOGGLEABLE_TYPES = ("box",)

VIEW_SIZE = 7
WALL_CELL = (TYPE_CODES["wall"], 0, 0)

# headings: 0=north, 1=east, 2=south, 3=west; (dx, dy) with y growing south
DIR_VECS = ((0, -1), (1, 0), (0, 1), (-1, 0))
# BFS neighbor expansion order, the expert's tie-breaking rule
BFS_ORDER = (0, 1, 2, 3)


@dataclass
class ObjectSpec:
    type: str
    color: str
    x: int
    y: int
    state: int = STATE_NONE


@dataclass(frozen=True)
class Subgoal:
    kind: str  # goto | pickup | drop | open
    color: str
    type: str

    def text(self) -> str:
        if self.kind == "goto":
            return f"go to the {self.color} {self.type}"
        if self.kind == "pickup":
            return f"pick up the {self.color} {self.type}"
        if self.kind == "drop":
            return f"drop the {self.color} {self.type}"
        if self.kind == "open":
            return f"open the {self.color} {self.type}"
        raise ValueError(f"unknown subgoal kind {self.kind!r}")


def goal_text_for(subgoals: list[Subgoal]) -> str:
    return ", then ".join(sg.text() for sg in subgoals)


@dataclass
class TaskSpec:
    seed: int
    level: str
    goal_text: str
    size: int
    objects: list[ObjectSpec]
    agent_x: int
    agent_y: int
    agent_dir: int
    subgoal_list: list[Subgoal]
    horizon: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "level": self.level,
            "goal_text": self.goal_text,
            "size": self.size,
            "objects": [
                {"type": o.type, "color": o.color, "x": o.x, "y": o.y, "state": o.state}
                for o in self.objects
            ],
            "agent": {"x": self.agent_x, "y": self.agent_y, "dir": self.agent_dir},
            "subgoals": [
                {"kind": s.kind, "color": s.color, "type": s.type} for s in self.subgoal_list
            ],
            "horizon": self.horizon,
        }

    @staticmethod
    def from_dict(d: dict) -> "TaskSpec":
        return TaskSpec(
            seed=d["seed"],
            level=d["level"],
            goal_text=d["goal_text"],
            size=d["size"],
            objects=[ObjectSpec(**o) for o in d["objects"]],
            agent_x=d["agent"]["x"],
            agent_y=d["agent"]["y"],
            agent_dir=d["agent"]["dir"],
            subgoal_list=[Subgoal(**s) for s in d["subgoals"]],
            horizon=d["horizon"],
        )


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


class ExpertPlanningError(RuntimeError):
    """The scripted expert could not solve the task."""


class GridWorld:
    """Deterministic single-agent environment for one TaskSpec at a time."""

    def __init__(self, task: TaskSpec | None = None):
        self.task: TaskSpec | None = None
        if task is not None:
            self.reset(task)

    # -- episode control ---------------------------------------------------

    def reset(self, task: TaskSpec | None = None) -> np.ndarray:
        if task is not None:
            self._check_layout(task)
            self.task = task
        if self.task is None:
            raise ValueError("no task to reset")
        t = self.task
        self.objects = [ObjectSpec(o.type, o.color, o.x, o.y, o.state) for o in t.objects]
        self.agent_x, self.agent_y, self.agent_dir = t.agent_x, t.agent_y, t.agent_dir
        self.carrying: Optional[ObjectSpec] = None
        self.progress = 0
        self.steps = 0
        self.done = False
        return self.observe()

    @staticmethod
    def _check_layout(task: TaskSpec) -> None:
        if task.size < 4:
            raise ValueError("grid too small")
        seen_cells: set[tuple[int, int]] = set()
        seen_idents: set[tuple[str, str]] = set()
        for o in task.objects:
            if not (1 <= o.x <= task.size - 2 and 1 <= o.y <= task.size - 2):
                raise ValueError(f"object {o.color} {o.type} outside the room interior")
            if (o.x, o.y) in seen_cells:
                raise ValueError(f"two objects share cell ({o.x},{o.y})")
            seen_cells.add((o.x, o.y))
            if (o.color, o.type) in seen_idents:
                raise ValueError(f"duplicate object identity {o.color} {o.type}")
            seen_idents.add((o.color, o.type))
            if o.type not in ("key", "ball", "box"):
                raise ValueError(f"unknown object type {o.type!r}")
        if not (1 <= task.agent_x <= task.size - 2 and 1 <= task.agent_y <= task.size - 2):
            raise ValueError("agent outside the room interior")
        if (task.agent_x, task.agent_y) in seen_cells:
            raise ValueError("agent placed on an object")
        if task.agent_dir not in (0, 1, 2, 3):
            raise ValueError("bad agent heading")
        for sg in task.subgoal_list:
            if not any(o.color == sg.color and o.type == sg.type for o in task.objects):
                raise ValueError(f"subgoal references missing object {sg.color} {sg.type}")
        if task.goal_text != goal_text_for(task.subgoal_list):
            raise ValueError("goal_text does not match the subgoal list")

    # -- world queries -------------------------------------------------------

    def object_at(self, x: int, y: int) -> Optional[ObjectSpec]:
        for o in self.objects:
            if o.x == x and o.y == y:
                return o
        return None

    def find_object(self, color: str, type_: str) -> Optional[ObjectSpec]:
        for o in self.objects:
            if o.color == color and o.type == type_:
                return o
        return None

    def is_wall(self, x: int, y: int) -> bool:
        s = self.task.size
        return not (1 <= x <= s - 2 and 1 <= y <= s - 2)

    def front_cell(self) -> tuple[int, int]:
        dx, dy = DIR_VECS[self.agent_dir]
        return self.agent_x + dx, self.agent_y + dy

    # -- dynamics ------------------------------------------------------------

    def step(self, action_id: int) -> StepResult:
        if self.done:
            raise RuntimeError("episode finished; reset before stepping again")
        if not (0 <= action_id < len(ACTIONS)):
            raise ValueError(f"invalid action id {action_id}")

        fx, fy = self.front_cell()
        if action_id == 0:
            self.agent_dir = (self.agent_dir - 1) % 4
        elif action_id == 1:
            self.agent_dir = (self.agent_dir + 1) % 4
        elif action_id == 2:
            if not self.is_wall(fx, fy) and self.object_at(fx, fy) is None:
                self.agent_x, self.agent_y = fx, fy
        elif action_id == 3:
            target = self.object_at(fx, fy)
            if target is not None and target.type in PICKABLE_TYPES and self.carrying is None:
                self.objects.remove(target)
                self.carrying = target
        elif action_id == 4:
            if (
                self.carrying is not None
                and not self.is_wall(fx, fy)
                and self.object_at(fx, fy) is None
            ):
                self.carrying.x, self.carrying.y = fx, fy
                self.objects.append(self.carrying)
                self.carrying = None
        elif action_id == 5:
            target = self.object_at(fx, fy)
            if target is not None and target.type in TOGGLEABLE_TYPES:
                target.state = STATE_OPEN if target.state == STATE_CLOSED else STATE_CLOSED

        self.steps += 1
        subgoals = self.task.subgoal_list
        while self.progress < len(subgoals) and self._subgoal_done(subgoals[self.progress]):
            self.progress += 1

        reward = 0.0
        if self.progress == len(subgoals):
            reward = 1.0
            self.done = True
        elif self.steps >= self.task.horizon:
            self.done = True
        return StepResult(self.observe(), reward, self.done)

    def _subgoal_done(self, sg: Subgoal) -> bool:
        if sg.kind == "goto":
            obj = self.find_object(sg.color, sg.type)
            return obj is not None and (obj.x, obj.y) == self.front_cell()
        if sg.kind == "pickup":
            c = self.carrying
            return c is not None and c.color == sg.color and c.type == sg.type
        if sg.kind == "drop":
            return self.carrying is None and self.find_object(sg.color, sg.type) is not None
        if sg.kind == "open":
            obj = self.find_object(sg.color, sg.type)
            return obj is not None and obj.state == STATE_OPEN
        raise ValueError(f"unknown subgoal kind {sg.kind!r}")

    # -- observation ---------------------------------------------------------

    def observe(self) -> np.ndarray:
        """7x7x3 egocentric window; the agent sits at the bottom-center cell
        facing up, cells beyond the walls read as wall."""
        fwd = DIR_VECS[self.agent_dir]
        right = DIR_VECS[(self.agent_dir + 1) % 4]
        window = np.zeros((VIEW_SIZE, VIEW_SIZE, 3), dtype=np.int64)
        for wr in range(VIEW_SIZE):
            for wc in range(VIEW_SIZE):
                fo = (VIEW_SIZE - 1) - wr
                ro = wc - VIEW_SIZE // 2
                wx = self.agent_x + fwd[0] * fo + right[0] * ro
                wy = self.agent_y + fwd[1] * fo + right[1] * ro
                window[wr, wc] = self._encode_cell(wx, wy, me=(fo == 0 and ro == 0))
        return window

    def _encode_cell(self, x: int, y: int, me: bool = False) -> tuple[int, int, int]:
        if me:
            if self.carrying is not None:
                c = self.carrying
                return (TYPE_CODES[c.type], COLOR_CODES[c.color], c.state)
            return (TYPE_CODES["floor"], 0, STATE_NONE)
        if self.is_wall(x, y):
            return WALL_CELL
        obj = self.object_at(x, y)
        if obj is None:
            return (TYPE_CODES["floor"], 0, STATE_NONE)
        return (TYPE_CODES[obj.type], COLOR_CODES[obj.color], obj.state)


# -- task sampling -------------------------------------------------------------


def _sample_layout(
    rng: np.random.Generator, size: int, min_objects: int
) -> tuple[list[ObjectSpec], int, int, int]:
    n_objects = int(rng.integers(max(4, min_objects), 7))
    combos = [(t, c) for t in ("key", "ball", "box") for c in COLORS]
    picked = [combos[i] for i in rng.choice(len(combos), size=n_objects, replace=False)]
    interior = [(x, y) for x in range(1, size - 1) for y in range(1, size - 1)]
    cells = [interior[i] for i in rng.choice(len(interior), size=n_objects + 1, replace=False)]
    objects = []
    for (type_, color), (x, y) in zip(picked, cells[:-1]):
        state = STATE_CLOSED if type_ == "box" else STATE_NONE
        objects.append(ObjectSpec(type_, color, x, y, state))
    ax, ay = cells[-1]
    adir = int(rng.integers(0, 4))
    return objects, ax, ay, adir


def _sample_subgoals(rng: np.random.Generator, objects: list[ObjectSpec], n: int) -> list[Subgoal]:
    available = list(objects)
    out: list[Subgoal] = []
    while len(out) < n:
        slots_left = n - len(out)
        kinds = ["goto"]
        if any(o.type in TOGGLEABLE_TYPES for o in available):
            kinds.append("open")
        if slots_left >= 2 and any(o.type in PICKABLE_TYPES for o in available):
            kinds.append("fetch")  # pickup immediately followed by drop
        if slots_left == 1 and any(o.type in PICKABLE_TYPES for o in available):
            kinds.append("pickup")
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "goto":
            pool = available
        elif kind == "open":
            pool = [o for o in available if o.type in TOGGLEABLE_TYPES]
        else:
            pool = [o for o in available if o.type in PICKABLE_TYPES]
        obj = pool[int(rng.integers(0, len(pool)))]
        available.remove(obj)
        if kind == "fetch":
            out.append(Subgoal("pickup", obj.color, obj.type))
            out.append(Subgoal("drop", obj.color, obj.type))
        else:
            out.append(Subgoal(kind, obj.color, obj.type))
    return out


def sample_task(level: str, rng_seed: int, size: int = 10) -> TaskSpec:
    """Deterministically sample a solvable task for the given level."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")
    rng = np.random.default_rng([rng_seed, LEVELS.index(level)])
    for _ in range(64):
        if level == "single-subgoal":
            n = 1
        elif level == "two-subgoal":
            n = 2
        else:
            n = int(rng.integers(3, 6))
        objects, ax, ay, adir = _sample_layout(rng, size, min_objects=n)
        subgoals = _sample_subgoals(rng, objects, n)
        # a starting pose must not satisfy the first subgoal before any action
        first = subgoals[0]
        if first.kind == "goto":
            target = next(o for o in objects if o.color == first.color and o.type == first.type)
            dx, dy = DIR_VECS[adir]
            while (ax + dx, ay + dy) == (target.x, target.y):
                adir = (adir + 1) % 4
                dx, dy = DIR_VECS[adir]
        task = TaskSpec(
            seed=rng_seed,
            level=level,
            goal_text=goal_text_for(subgoals),
            size=size,
            objects=objects,
            agent_x=ax,
            agent_y=ay,
            agent_dir=adir,
            subgoal_list=subgoals,
            horizon=HORIZONS[level],
        )
        try:
            scripted_expert(task)
        except ExpertPlanningError:
            continue
        return task
    raise ExpertPlanningError(f"no solvable layout found for level={level} seed={rng_seed}")


# -- the scripted expert ---------------------------------------------------------


def _bfs_path(env: GridWorld, goal_cells: set[tuple[int, int]]) -> list[tuple[int, int]] | None:
    """Shortest cell path from the agent to any goal cell over free floor,
    expanding neighbors in N,E,S,W order. Returns the cell sequence
    including the start, or None when unreachable."""
    start = (env.agent_x, env.agent_y)
    if start in goal_cells:
        return [start]
    parent: dict[tuple[int, int], tuple[int, int]] = {start: start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for d in BFS_ORDER:
            dx, dy = DIR_VECS[d]
            nxt = (cur[0] + dx, cur[1] + dy)
            if nxt in parent:
                continue
            if env.is_wall(*nxt) or env.object_at(*nxt) is not None:
                continue
            parent[nxt] = cur
            if nxt in goal_cells:
                path = [nxt]
                while path[-1] != start:
                    path.append(parent[path[-1]])
                return path[::-1]
            queue.append(nxt)
    return None


def _turns_to(cur_dir: int, want_dir: int) -> list[int]:
    diff = (want_dir - cur_dir) % 4
    if diff == 0:
        return []
    if diff == 1:
        return [1]
    if diff == 3:
        return [0]
    return [1, 1]


def _dir_between(a: tuple[int, int], b: tuple[int, int]) -> int:
    delta = (b[0] - a[0], b[1] - a[1])
    return DIR_VECS.index(delta)


def _plan_approach(env: GridWorld, obj: ObjectSpec) -> list[int]:
    """Actions that walk the agent to a cell adjacent to obj and face it."""
    adjacent = set()
    for d in range(4):
        dx, dy = DIR_VECS[d]
        cell = (obj.x + dx, obj.y + dy)
        if cell == (env.agent_x, env.agent_y) or (
            not env.is_wall(*cell) and env.object_at(*cell) is None
        ):
            adjacent.add(cell)
    path = _bfs_path(env, adjacent)
    if path is None:
        raise ExpertPlanningError(f"no path to {obj.color} {obj.type}")
    actions: list[int] = []
    cur_dir = env.agent_dir
    for a, b in zip(path, path[1:]):
        want = _dir_between(a, b)
        actions.extend(_turns_to(cur_dir, want))
        actions.append(2)
        cur_dir = want
    face = _dir_between(path[-1], (obj.x, obj.y))
    actions.extend(_turns_to(cur_dir, face))
    return actions


def _plan_subgoal(env: GridWorld, sg: Subgoal) -> list[int]:
    if sg.kind == "drop":
        return [4]
    obj = env.find_object(sg.color, sg.type)
    if obj is None:
        raise ExpertPlanningError(f"target {sg.color} {sg.type} not on the grid")
    actions = _plan_approach(env, obj)
    if sg.kind == "pickup":
        actions.append(3)
    elif sg.kind == "open":
        actions.append(5)
    return actions


def scripted_expert(task: TaskSpec) -> tuple[Trajectory, list[int]]:
    """Solve the task, returning the demonstration and the subgoal
    boundaries: boundaries[i] is the number of actions taken once subgoal i
    completed, so boundaries[-1] == len(actions)."""
    env = GridWorld(task)
    obs = env.reset()
    observations: list[np.ndarray] = []
    actions: list[int] = []
    boundaries: list[int] = []
    for i in range(len(task.subgoal_list)):
        if env.progress != i:
            # a cascade closed two subgoals on one step; the boundaries
            # would degenerate, so reject the task
            raise ExpertPlanningError(f"subgoal {i} completed without its own actions")
        plan = _plan_subgoal(env, task.subgoal_list[i])
        advanced = False
        for a in plan:
            observations.append(obs)
            actions.append(a)
            result = env.step(a)
            obs = result.observation
            if env.progress > i:
                advanced = True
                break
        if not advanced:
            raise ExpertPlanningError(
                f"plan for subgoal {i} ({task.subgoal_list[i].text()!r}) did not complete it"
            )
        boundaries.append(len(actions))
    if not env.done or env.progress != len(task.subgoal_list):
        raise ExpertPlanningError("episode did not terminate on the final subgoal")
    traj = Trajectory(
        goal_text=task.goal_text,
        observations=np.stack(observations),
        actions=np.asarray(actions, dtype=np.int64),
    )
    return traj, boundaries


def subgoal_texts(task: TaskSpec) -> list[str]:
    return [sg.text() for sg in task.subgoal_list]
