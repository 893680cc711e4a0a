"""Synthetic driving clips with planted ego-object interactions.

Every clip contains the same cast of objects at label-independent image
positions: one stuff object per planted goal class and one "crossing" thing
per planted cause class, plus plain distractor things. Labels are carried
only by depth. The goal label names the stuff object whose 3D distance to
the ego drops within ``mu_stuff`` for a few mid-clip frames; the cause label
names the crossing thing that comes within ``mu_thing`` of the ego. Global
feature statistics are therefore identical across labels, and only a model
that relates 3D positions to object appearance can tell the classes apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from .features import BoundingBox, FeatureMap, StuffMask, select_top_k
from .geometry import MU_STUFF, MU_THING, CameraIntrinsics, ego_pixel

GOAL_CLASSES = (
    "background", "intersection_passing", "left_turn", "right_turn", "left_lane_change",
    "right_lane_change", "left_lane_branch", "right_lane_branch", "crosswalk_passing",
    "railroad_passing", "merge", "u_turn",
)
CAUSE_CLASSES = (
    "background", "stop_for_congestion", "stop_for_sign", "stop_for_red_light",
    "stop_for_crossing_vehicle", "deviate_for_parked_vehicle", "stop_for_crossing_pedestrian",
)
THING_CLASSES = ("car", "person", "bicycle", "motorcycle", "bus", "train", "truck")
STUFF_CLASSES = (
    "crosswalk", "lane_marking", "lane_separator", "road", "service_lane",
    "traffic_island", "traffic_light", "traffic_sign",
)
MODIFIERS = ("left", "right", "crossing", "parked", "branch_left", "branch_right")

DEFAULT_GOALS = ("left_lane_change", "right_lane_change", "crosswalk_passing", "merge")
DEFAULT_CAUSES = ("stop_for_crossing_vehicle", "stop_for_crossing_pedestrian")


def _lane(x_bottom: float, x_top: float, y_top: float, half_width: float) -> Callable:
    def inside(x, y):
        # x position of the lane line at height y, linear between bottom and y_top
        frac = (1.0 - y) / (1.0 - y_top)
        return (y >= y_top) & (np.abs(x - (x_bottom + frac * (x_top - x_bottom))) <= half_width)
    return inside


def _rect(x0: float, x1: float, y0: float, y1: float) -> Callable:
    return lambda x, y: (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


@dataclass(frozen=True)
class StuffPlant:
    cls: str
    modifier: str | None
    region: Callable  # (x_frac, y_frac) cell centers -> bool


@dataclass(frozen=True)
class ThingPlant:
    cls: str
    modifier: str


GOAL_PLANTS: dict[str, StuffPlant] = {
    "left_lane_change": StuffPlant("lane_marking", "left", _lane(0.12, 0.36, 0.74, 0.04)),
    "right_lane_change": StuffPlant("lane_marking", "right", _lane(0.88, 0.64, 0.74, 0.04)),
    "crosswalk_passing": StuffPlant("crosswalk", None, _rect(0.34, 0.66, 0.78, 0.86)),
    "merge": StuffPlant("lane_separator", None, _rect(0.91, 1.0, 0.82, 1.0)),
    "left_lane_branch": StuffPlant("lane_marking", "branch_left", _rect(0.0, 0.07, 0.68, 0.8)),
    "right_lane_branch": StuffPlant("lane_marking", "branch_right", _rect(0.93, 1.0, 0.74, 0.8)),
}
CAUSE_PLANTS: dict[str, ThingPlant] = {
    "stop_for_crossing_vehicle": ThingPlant("car", "crossing"),
    "stop_for_crossing_pedestrian": ThingPlant("person", "crossing"),
    "deviate_for_parked_vehicle": ThingPlant("truck", "parked"),
}
DISTRACTOR_CLASSES = ("car", "person")

THING_SLOTS = 6
THING_BAND = (0.5, 0.62)  # vertical range of thing box centers, as a fraction of frame height
HORIZON = 0.45
SKY_DEPTH = 50.0
THING_NEAR_DEPTH = (1.2, 2.5)
THING_FAR_DEPTH = (8.0, 12.0)
STUFF_NEAR_DEPTH = (0.95, 1.1)
STUFF_FAR_DEPTH = (2.2, 4.0)
DISTRACTOR_NEAR_PROB = 0.6


class InfeasibleSpec(ValueError):
    """The requested scene cannot be laid out."""


class SignatureBank:
    """One random unit vector per class and modifier name, fixed by the dataset seed."""

    def __init__(self, seed: int, D: int):
        names = sorted(set(THING_CLASSES) | set(STUFF_CLASSES) | set(MODIFIERS))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5157]))
        vecs = rng.normal(size=(len(names), D))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        self.D = D
        self.vectors = dict(zip(names, vecs))

    def signature(self, cls: str, modifier: str | None = None) -> np.ndarray:
        v = self.vectors[cls].copy()
        if modifier is not None:
            v += self.vectors[modifier]
        return v


@dataclass(frozen=True)
class SceneSpec:
    T: int = 20
    image_width: int = 224
    image_height: int = 224
    feature_width: int = 28
    feature_height: int = 28
    D: int = 16
    goal_classes: tuple[str, ...] = DEFAULT_GOALS
    cause_classes: tuple[str, ...] = DEFAULT_CAUSES
    n_distractors: int = 2
    goal: str = "background"
    cause: str = "background"
    # target 3D distance of the causal object during its event; None = a near distance
    goal_distance: float | None = None
    cause_distance: float | None = None
    noise: float = 0.1
    mu_thing: float = MU_THING
    mu_stuff: float = MU_STUFF
    seed: int = 0
    dataset_seed: int = 0

    @property
    def n_things(self) -> int:
        return len(self.cause_classes) + self.n_distractors

    @property
    def n_stuff(self) -> int:
        return len(self.goal_classes)

    def validate(self) -> None:
        if self.T < 1 or self.D < 1:
            raise InfeasibleSpec("T and D must be >= 1")
        for g in self.goal_classes:
            if g not in GOAL_PLANTS:
                raise InfeasibleSpec(f"no planted relation for goal class {g!r}")
        for c in self.cause_classes:
            if c not in CAUSE_PLANTS:
                raise InfeasibleSpec(f"no planted relation for cause class {c!r}")
        if self.goal != "background" and self.goal not in self.goal_classes:
            raise InfeasibleSpec(f"goal {self.goal!r} is not among the planted classes")
        if self.cause != "background" and self.cause not in self.cause_classes:
            raise InfeasibleSpec(f"cause {self.cause!r} is not among the planted classes")
        if self.n_things > THING_SLOTS:
            raise InfeasibleSpec(f"{self.n_things} things do not fit in {THING_SLOTS} slots")
        if self.feature_width > self.image_width or self.feature_height > self.image_height:
            raise InfeasibleSpec("feature map cannot be larger than the frame")
        if self.image_width / THING_SLOTS < 24:
            raise InfeasibleSpec("frame too narrow for the thing layout")


@dataclass
class ThingObject:
    box: BoundingBox
    plant: str | None  # cause class this object can trigger, None for distractors
    depth: np.ndarray  # (T,) depth painted over the box

    @property
    def kind(self) -> str:
        return self.box.cls if self.plant is None else f"{self.box.cls}:{CAUSE_PLANTS[self.plant].modifier}"


@dataclass
class StuffObject:
    mask: StuffMask
    coarse: np.ndarray  # (feature_height, feature_width) bool
    plant: str
    depth: np.ndarray  # (T,)


@dataclass
class SceneClip:
    spec: SceneSpec
    features: FeatureMap
    depth: np.ndarray  # (T, H, W) float32
    intrinsics: CameraIntrinsics
    things: list[ThingObject]
    stuff: list[StuffObject]
    goal_labels: np.ndarray  # (T,) indices into ("background", *goal_classes)
    cause_labels: np.ndarray
    causal_thing: int = -1
    causal_stuff: int = -1
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.features.T

    @property
    def goal(self) -> int:
        return int(self.goal_labels[0])

    @property
    def cause(self) -> int:
        return int(self.cause_labels[0])

    def detections(self, t: int) -> list[BoundingBox]:
        return [obj.box for obj in self.things]

    def stuff_masks(self, t: int) -> list[StuffMask]:
        return [obj.mask for obj in self.stuff]


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    return CameraIntrinsics(float(width), float(width), width / 2, height / 2)


def ground_depth(width: int, height: int) -> np.ndarray:
    """Ground-plane depth falling from the horizon to 1.0 at the bottom row."""
    v = np.arange(height, dtype=np.float64)
    horizon = HORIZON * height
    below = v > horizon + 1e-9
    col = np.full(height, SKY_DEPTH)
    col[below] = np.minimum(SKY_DEPTH, (height - 1 - horizon) / (v[below] - horizon))
    return np.repeat(col[:, None], width, axis=1)


def _ray(u: float, v: float, intr: CameraIntrinsics) -> np.ndarray:
    return np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])


def _min_dist(rays: np.ndarray, depth: float, ego: np.ndarray) -> float:
    return float(np.linalg.norm(depth * rays - ego, axis=1).min())


def depth_for_distance(rays: np.ndarray, ego: np.ndarray, target: float) -> float:
    """Depth (beyond the closest approach) at which the nearest ray point sits ``target`` from ego."""
    lo = float(max((rays @ ego) / (rays * rays).sum(axis=1)))
    if _min_dist(rays, lo, ego) >= target:
        return lo
    hi = lo + 1.0
    while _min_dist(rays, hi, ego) < target:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if _min_dist(rays, mid, ego) < target:
            lo = mid
        else:
            hi = mid
    return hi


def _event_window(rng: np.random.Generator, T: int) -> tuple[int, int]:
    length = int(rng.integers(2, max(2, T // 5) + 1)) if T >= 2 else 1
    length = min(length, T)
    lo, hi = T // 4, max(T // 4, T // 2)
    start = int(rng.integers(lo, hi + 1))
    start = min(start, T - length)
    return start, length


def _upsample(coarse: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = coarse.shape
    rows = np.minimum((np.arange(H) * h) // H, h - 1)
    cols = np.minimum((np.arange(W) * w) // W, w - 1)
    return coarse[rows][:, cols]


def stuff_template(plant: StuffPlant, w: int, h: int, W: int, H: int) -> np.ndarray:
    """Coarse cells of a stuff region, avoiding the cell under the ego pixel."""
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    cells = plant.region(xs[None, :], ys[:, None])
    eu, ev = ego_pixel(W, H)
    cells[min(ev * h // H, h - 1), min(eu * w // W, w - 1)] = False
    if not cells.any():
        raise InfeasibleSpec(f"stuff region for {plant.cls} is empty on a {w}x{h} grid")
    return cells


def generate_clip(spec: SceneSpec, bank: SignatureBank | None = None) -> SceneClip:
    """Build one clip; identical specs give bit-identical clips."""
    spec.validate()
    bank = bank or SignatureBank(spec.dataset_seed, spec.D)
    rng = np.random.default_rng(np.random.SeedSequence([spec.dataset_seed, spec.seed, 0xC11F]))
    T, W, H, w, h = spec.T, spec.image_width, spec.image_height, spec.feature_width, spec.feature_height
    intr = default_intrinsics(W, H)
    eu, ev = ego_pixel(W, H)
    ground = ground_depth(W, H)
    ego = float(ground[ev, eu]) * _ray(eu, ev, intr)

    # stuff objects: static masks, depth schedule carries the label
    stuff: list[StuffObject] = []
    goal_hit = None
    for plant_name in spec.goal_classes:
        plant = GOAL_PLANTS[plant_name]
        coarse = stuff_template(plant, w, h, W, H)
        ys, xs = np.nonzero(coarse)
        rays = np.stack([_ray((x + 0.5) * W / w, (y + 0.5) * H / h, intr) for y, x in zip(ys, xs)])
        depth = rng.uniform(*STUFF_FAR_DEPTH, size=T)
        if plant_name == spec.goal:
            start, length = _event_window(rng, T)
            if spec.goal_distance is None:
                near = rng.uniform(*STUFF_NEAR_DEPTH)
            else:
                near = depth_for_distance(rays, ego, spec.goal_distance)
            depth[start:start + length] = near
            if min(_min_dist(rays, d, ego) for d in depth) <= spec.mu_stuff:
                goal_hit = len(stuff)
        full = _upsample(coarse, H, W)
        stuff.append(StuffObject(StuffMask(full, plant.cls), coarse, plant_name, depth.astype(np.float32)))

    # thing objects: random slot per object, boxes static
    kinds: list[tuple[str, str | None]] = [(CAUSE_PLANTS[c].cls, c) for c in spec.cause_classes]
    kinds += [(DISTRACTOR_CLASSES[i % len(DISTRACTOR_CLASSES)], None) for i in range(spec.n_distractors)]
    slots = rng.permutation(THING_SLOTS)[: len(kinds)]
    slot_w = W / THING_SLOTS
    things: list[ThingObject] = []
    cause_hit = None
    for (cls, plant_name), slot in zip(kinds, slots):
        bw = rng.uniform(0.7, 0.85) * slot_w
        bh = rng.uniform(0.15, 0.2) * H
        cx = (slot + 0.5) * slot_w + rng.uniform(-0.05, 0.05) * slot_w
        cy = rng.uniform(*THING_BAND) * H
        box = BoundingBox(
            float(np.floor(cx - bw / 2)), float(np.floor(cy - bh / 2)),
            float(np.ceil(cx + bw / 2)), float(np.ceil(cy + bh / 2)),
            cls, float(np.round(rng.uniform(0.5, 1.0), 4)),
        )
        u = np.floor((box.x0 + box.x1) / 2 + 0.5)
        v = np.floor((box.y0 + box.y1) / 2 + 0.5)
        ray = _ray(u, v, intr)[None, :]
        depth = rng.uniform(*THING_FAR_DEPTH, size=T)
        if plant_name is None:
            if rng.random() < DISTRACTOR_NEAR_PROB:
                length = int(rng.integers(min(3, T), max(3, T // 2) + 1)) if T >= 3 else T
                start = int(rng.integers(0, T - length + 1))
                depth[start:start + length] = rng.uniform(*THING_NEAR_DEPTH, size=length)
        elif plant_name == spec.cause:
            start, length = _event_window(rng, T)
            if spec.cause_distance is None:
                depth[start:start + length] = rng.uniform(*THING_NEAR_DEPTH, size=length)
            else:
                depth[start:start + length] = depth_for_distance(ray, ego, spec.cause_distance)
            if min(_min_dist(ray, d, ego) for d in depth) <= spec.mu_thing:
                cause_hit = len(things)
        things.append(ThingObject(box, plant_name, depth.astype(np.float32)))

    # depth maps: ground, then stuff, then things
    depth_maps = np.empty((T, H, W), dtype=np.float32)
    depth_maps[:] = ground.astype(np.float32)
    for obj in stuff:
        depth_maps[:, obj.mask.mask] = obj.depth[:, None]
    for obj in things:
        b = obj.box
        depth_maps[:, int(b.y0):int(b.y1), int(b.x0):int(b.x1)] = obj.depth[:, None, None]

    # feature maps: class signatures painted into object regions, plus noise
    canvas = np.zeros((h, w, spec.D))
    for obj in stuff:
        plant = GOAL_PLANTS[obj.plant]
        canvas[obj.coarse] += bank.signature(plant.cls, plant.modifier)
    fx = (np.arange(w) + 0.5) * W / w
    fy = (np.arange(h) + 0.5) * H / h
    for obj in things:
        b = obj.box
        cols = (fx >= b.x0) & (fx < b.x1)
        rows = (fy >= b.y0) & (fy < b.y1)
        mod = CAUSE_PLANTS[obj.plant].modifier if obj.plant else None
        canvas[np.ix_(rows, cols)] += bank.signature(b.cls, mod)
    values = canvas[None] + rng.normal(scale=spec.noise, size=(T, h, w, spec.D))

    goal_idx = 0 if goal_hit is None else 1 + spec.goal_classes.index(spec.goal)
    cause_idx = 0 if cause_hit is None else 1 + spec.cause_classes.index(spec.cause)
    return SceneClip(
        spec=spec,
        features=FeatureMap(values.astype(np.float32), W, H),
        depth=depth_maps,
        intrinsics=intr,
        things=things,
        stuff=stuff,
        goal_labels=np.full(T, goal_idx, dtype=np.int64),
        cause_labels=np.full(T, cause_idx, dtype=np.int64),
        causal_thing=-1 if cause_hit is None else cause_hit,
        causal_stuff=-1 if goal_hit is None else goal_hit,
    )


@dataclass
class Dataset:
    """Clip specs of one split; clips are generated on demand to keep memory flat."""

    specs: list[SceneSpec]
    bank: SignatureBank

    def __len__(self) -> int:
        return len(self.specs)

    def clip(self, i: int) -> SceneClip:
        return generate_clip(self.specs[i], self.bank)

    def clips(self) -> Iterator[SceneClip]:
        for i in range(len(self.specs)):
            yield self.clip(i)


def balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Round-robin class assignment, shuffled: class ``c`` gets ``n // C + (c < n % C)`` items."""
    return rng.permutation(np.arange(n) % n_classes)


def make_dataset(n_train: int, n_eval: int, seed: int = 0, template: SceneSpec | None = None,
                 ) -> tuple[Dataset, Dataset, dict]:
    """Train/eval splits with disjoint clip seeds and a per-class frame count report."""
    template = template or SceneSpec()
    template = replace(template, dataset_seed=seed)
    template.validate()
    bank = SignatureBank(seed, template.D)
    goals = ("background",) + tuple(template.goal_classes)
    causes = ("background",) + tuple(template.cause_classes)
    report: dict = {}
    splits = []
    for split_id, (name, n) in enumerate((("train", n_train), ("eval", n_eval))):
        rng = np.random.default_rng(np.random.SeedSequence([seed, split_id, 0xDA7A]))
        g = balanced_labels(n, len(goals), rng)
        c = balanced_labels(n, len(causes), rng)
        specs = [
            replace(template, goal=goals[g[i]], cause=causes[c[i]], seed=split_id * 1_000_000 + i)
            for i in range(n)
        ]
        splits.append(Dataset(specs, bank))
        report[name] = {
            "clips": n,
            "goal_frames": {k: int((g == i).sum()) * template.T for i, k in enumerate(goals)},
            "cause_frames": {k: int((c == i).sum()) * template.T for i, k in enumerate(causes)},
        }
    return splits[0], splits[1], report
