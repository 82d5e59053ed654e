"""Scenario documents: JSON schema, validation, and the bundled set.

A scenario file is a single JSON object:

    {
      "mode": "rbm2d" | "rbm3d" | "vehicle2d",
      "dt": 0.001, "t_end": 3.5, "seed": 7,
      "oracle_every": 10,                  # optional, 0 disables audits
      "params": { ... controller gains, all optional ... },
      "vehicle": {"wheelbase": 2.7, "cm_ratio": 0.5},   # vehicle mode
      "target_speed": 5.0,                               # vehicle mode
      "bodies": [
        {"id": 1, "p": [...],
         "yaw": 0.0 | "R": [row-major],    # omitted: face the goal
         "axes": [...] | "axes_range": [[lo, hi], ...],  # seeded draw
         "goal": {"p": [...], "yaw"/"R": optional},      # rbm modes
         "path": {"point": [...], "direction": [...]},   # vehicle mode
         "static": false,
         "speed": 5.0, "steering": 0.0}                  # vehicle mode
      ],
      "generate": {"kind": "two_group_swap", ...}        # optional
    }

Geometry left unstated by a document is resolved deterministically from
the scenario seed (axis draws, generated goal assignments), so a file
plus its seed pins the whole run.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .controllers import ControllerParams, LinePath
from .dynamics import VehicleParams, VehicleState
from .geometry import EllipsoidShape, Pose, ShapedBody
from .simulator import Scenario, ScenarioError

_J2 = np.array([[0.0, -1.0], [1.0, 0.0]])


class ScenarioFormatError(ValueError):
    """The scenario document itself is malformed (schema, types)."""


def bundled_names():
    """Names accepted by load_scenario in place of a path."""
    root = resources.files(__package__) / "scenario_data"
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".json"))


def load_scenario(source, overrides=None) -> Scenario:
    """Build a Scenario from a file path or a bundled name.

    overrides, when given, replaces top-level keys (dt, t_end, seed,
    oracle_every) before the document is interpreted.
    """
    text, label = _read_source(source)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(
            f"{label}: invalid JSON at line {exc.lineno}, "
            f"column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ScenarioFormatError(f"{label}: top level must be an object")
    doc.setdefault("name", label)
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                doc[key] = value
    return build_scenario(doc)


def _read_source(source):
    source = str(source)
    if "/" not in source and not source.endswith(".json"):
        ref = resources.files(__package__) / "scenario_data" / (
            source + ".json")
        if not ref.is_file():
            raise ScenarioFormatError(
                f"no bundled scenario {source!r}; available: "
                + ", ".join(bundled_names()))
        return ref.read_text(), source
    try:
        with open(source) as fh:
            return fh.read(), source
    except OSError as exc:
        raise ScenarioFormatError(f"cannot read {source}: {exc}") from exc


def _need(doc, key, kind, where):
    if key not in doc:
        raise ScenarioFormatError(f"{where}: missing key {key!r}")
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ScenarioFormatError(f"{where}: {key!r} must be a number")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ScenarioFormatError(f"{where}: {key!r} must be an integer")
        return value
    if not isinstance(value, kind):
        raise ScenarioFormatError(
            f"{where}: {key!r} must be {kind.__name__}")
    return value


def _vector(doc, key, d, where):
    raw = _need(doc, key, list, where)
    if len(raw) != d or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool)
            for x in raw):
        raise ScenarioFormatError(
            f"{where}: {key!r} must be a list of {d} numbers")
    return np.array(raw, dtype=float)


def _face_rotation(d, direction):
    """Rotation whose first column points along direction (identity when
    the direction vanishes)."""
    direction = np.asarray(direction, dtype=float)
    n = float(np.sqrt(direction @ direction))
    if n < 1e-12:
        return np.eye(d)
    x = direction / n
    if d == 2:
        return np.stack([x, _J2 @ x], axis=1)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(x)))] = 1.0
    b1 = helper - (helper @ x) * x
    b1 = b1 / np.sqrt(b1 @ b1)
    b2 = np.cross(x, b1)
    return np.stack([x, b1, b2], axis=1)


def _rotation_from(doc, d, fallback, where):
    if "R" in doc and "yaw" in doc:
        raise ScenarioFormatError(f"{where}: give either 'R' or 'yaw'")
    if "R" in doc:
        raw = _need(doc, "R", list, where)
        if len(raw) != d * d:
            raise ScenarioFormatError(
                f"{where}: 'R' must have {d * d} row-major entries")
        return np.array(raw, dtype=float).reshape(d, d)
    if "yaw" in doc:
        if d != 2:
            raise ScenarioFormatError(f"{where}: 'yaw' is 2D-only")
        yaw = _need(doc, "yaw", float, where)
        c, s = np.cos(yaw), np.sin(yaw)
        return np.array([[c, -s], [s, c]])
    return fallback()


def _axes_from(doc, d, rng, where):
    if ("axes" in doc) == ("axes_range" in doc):
        raise ScenarioFormatError(
            f"{where}: give exactly one of 'axes' or 'axes_range'")
    if "axes" in doc:
        q = _vector(doc, "axes", d, where)
    else:
        ranges = _need(doc, "axes_range", list, where)
        if len(ranges) != d:
            raise ScenarioFormatError(
                f"{where}: 'axes_range' needs {d} [lo, hi] entries")
        q = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
    if not np.all(q > 0):
        raise ScenarioFormatError(f"{where}: axes must be positive")
    return q


def build_scenario(doc: dict) -> Scenario:
    """Interpret a parsed scenario document."""
    where = doc.get("name", "scenario")
    mode = _need(doc, "mode", str, where)
    if mode not in ("rbm2d", "rbm3d", "vehicle2d"):
        raise ScenarioFormatError(f"{where}: unknown mode {mode!r}")
    d = 3 if mode == "rbm3d" else 2
    dt = _need(doc, "dt", float, where)
    t_end = _need(doc, "t_end", float, where)
    seed = _need(doc, "seed", int, where)
    oracle_every = doc.get("oracle_every", 10)
    if not isinstance(oracle_every, int) or oracle_every < 0:
        raise ScenarioFormatError(
            f"{where}: 'oracle_every' must be a nonnegative integer")

    params_doc = doc.get("params", {})
    if not isinstance(params_doc, dict):
        raise ScenarioFormatError(f"{where}: 'params' must be an object")
    try:
        params = ControllerParams(**params_doc)
    except TypeError as exc:
        raise ScenarioFormatError(f"{where}: bad 'params': {exc}") from exc

    body_docs = list(doc.get("bodies", []))
    gen = doc.get("generate")
    rng = np.random.default_rng([seed, 0xA5])
    if gen is not None:
        body_docs += _generate(gen, mode, rng, where)
    if not body_docs:
        raise ScenarioFormatError(f"{where}: no bodies")

    bodies, goals, statics = [], {}, set()
    vehicles, paths = {}, {}
    for bdoc in body_docs:
        bid = _need(bdoc, "id", int, where)
        label = f"{where}: body {bid}"
        p = _vector(bdoc, "p", d, label)
        axes = _axes_from(bdoc, d, rng, label)
        static = bool(bdoc.get("static", False))

        goal_pose = None
        if mode == "vehicle2d":
            pdoc = _need(bdoc, "path", dict, label)
            path = LinePath(point=_vector(pdoc, "point", 2, label),
                            direction=_vector(pdoc, "direction", 2, label))
            R = _rotation_from(bdoc, d,
                               lambda: _face_rotation(2, path.direction),
                               label)
            pose = Pose(R=R, p=p)
            vehicles[bid] = VehicleState(
                pose=pose, speed=_need(bdoc, "speed", float, label),
                steering=float(bdoc.get("steering", 0.0)))
            paths[bid] = path
        else:
            if "goal" in bdoc:
                gdoc = _need(bdoc, "goal", dict, label)
                gp = _vector(gdoc, "p", d, label)
                R = _rotation_from(bdoc, d,
                                   lambda: _face_rotation(d, gp - p), label)
                goal_R = _rotation_from(gdoc, d, lambda: R.copy(),
                                        f"{label} goal")
                goal_pose = Pose(R=goal_R, p=gp)
            else:
                R = _rotation_from(bdoc, d, lambda: np.eye(d), label)
                if not static:
                    raise ScenarioFormatError(
                        f"{label}: moving bodies need a goal")
            pose = Pose(R=R, p=p)

        bodies.append(ShapedBody(bid, pose, EllipsoidShape(axes)))
        if goal_pose is not None:
            goals[bid] = goal_pose
        if static:
            statics.add(bid)

    kwargs = {}
    if mode == "vehicle2d":
        vdoc = doc.get("vehicle", {})
        try:
            kwargs["vehicle_params"] = VehicleParams(**vdoc)
        except TypeError as exc:
            raise ScenarioFormatError(
                f"{where}: bad 'vehicle': {exc}") from exc
        kwargs["target_speed"] = float(doc.get("target_speed", 5.0))

    try:
        return Scenario(mode=mode, bodies=bodies, params=params, dt=dt,
                        t_end=t_end, seed=seed, oracle_every=oracle_every,
                        goals=goals, static_ids=frozenset(statics),
                        vehicles=vehicles, paths=paths,
                        name=str(doc.get("name", "scenario")), **kwargs)
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioFormatError(f"{where}: {exc}") from exc


def _generate(gen, mode, rng, where):
    """Expand a 'generate' block into body documents."""
    if not isinstance(gen, dict):
        raise ScenarioFormatError(f"{where}: 'generate' must be an object")
    kind = gen.get("kind")
    if kind != "two_group_swap":
        raise ScenarioFormatError(
            f"{where}: unknown generate kind {kind!r}")
    if mode != "rbm3d":
        raise ScenarioFormatError(
            f"{where}: two_group_swap generates 3D bodies only")
    corners = gen.get("corners")
    if (not isinstance(corners, list) or len(corners) != 2
            or any(len(c) != 3 for c in corners)):
        raise ScenarioFormatError(
            f"{where}: generate.corners must be two 3-vectors")
    spacing = float(gen.get("spacing", 2.5))
    major = float(gen.get("major", 1.0))
    lo, hi = gen.get("minor_range", [0.3, 0.7])

    offsets = np.array([[dx, dy, dz] for dx in (0.0, spacing)
                        for dy in (0.0, spacing) for dz in (0.0, spacing)])
    slots = [np.array(corners[0], dtype=float) + off for off in offsets]
    slots += [np.array(corners[1], dtype=float) + off for off in offsets]
    starts = list(range(16))
    # each group's goals are the opposite corner's slots, reshuffled
    goal_slots = (list(rng.permutation(np.arange(8, 16)))
                  + list(rng.permutation(np.arange(0, 8))))
    ids = [int(i) + 1 for i in rng.permutation(np.arange(16))]

    docs = []
    for k in range(16):
        q = [major, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))]
        docs.append({
            "id": ids[k],
            "p": [float(x) for x in slots[starts[k]]],
            "axes": q,
            "goal": {"p": [float(x) for x in slots[int(goal_slots[k])]]},
        })
    return docs
