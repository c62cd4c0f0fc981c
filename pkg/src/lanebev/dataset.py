"""Deterministic synthetic multi-camera scenes and the on-disk dataset format.

A scene is a short temporal sequence (default 4 frames) of 7-view camera
images of a procedurally generated road, with per-frame lane-segment
groundtruth in the ego frame.  Scenario kinds: straight, curve,
intersection (crossing road with pedestrian crossings).

Determinism: every float stored in a Scene is passed through the same
9-significant-digit formatter used by the on-disk text format, so
``load(save(scene)) == scene`` holds bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .segments import (CLASS_CROSSWALK, CLASS_LANE, LaneSegment, densify_polyline,
                       longest_run_inside, polyline_normals, resample_polyline)


class DatasetError(Exception):
    pass


class ParseError(DatasetError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


class UnsupportedVersionError(DatasetError):
    pass


class InventoryError(DatasetError):
    pass


FORMAT_VERSION = 1
CAMERA_ORDER = ("front", "front-left", "front-right", "back-left", "back-right",
                "back", "front-center-narrow")
SCENARIO_KINDS = ("straight", "curve", "intersection")


def quant9(x: float) -> float:
    """Round-trip a float through the on-disk 9-significant-digit format."""
    return float(f"{float(x):.9g}")


def quant9_arr(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.array([[quant9(v) for v in row] for row in np.atleast_2d(a.reshape(-1, a.shape[-1]))],
                    dtype=np.float64).reshape(a.shape)


def fmt9(x: float) -> str:
    return f"{float(x):.9g}"


# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    r: np.ndarray       # 3x3, p_cam = r @ p_ego + t
    t: np.ndarray       # 3
    width: int
    height: int

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (self.name == other.name
                and (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
                and np.array_equal(self.r, other.r) and np.array_equal(self.t, other.t)
                and (self.width, self.height) == (other.width, other.height))


def _camera_from_pose(name, fx, fy, cx, cy, position, yaw, pitch, width, height):
    """Build a pinhole camera from an ego-frame pose.

    Ego frame: x forward, y left, z up.  Camera frame: x right, y down,
    z along the optical axis.  yaw rotates about ego z (left positive);
    pitch tilts the axis downward.
    """
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    axis = np.array([cp * cy_, cp * sy_, -sp])
    right = np.array([sy_, -cy_, 0.0])
    down = np.cross(axis, right)
    r = np.stack([right, down, axis])
    t = -r @ np.asarray(position, dtype=np.float64)
    return Camera(name, quant9(fx), quant9(fy), quant9(cx), quant9(cy),
                  quant9_arr(r), np.array([quant9(v) for v in t]), width, height)


def build_camera_rig(width: int = 96, height: int = 64) -> list[Camera]:
    """Seven cameras covering a full 360 degrees around the ego vehicle."""
    cx, cy = width / 2.0, height / 2.0
    fx_wide, fy_wide = width * 0.27, height * 0.25
    pos = (0.0, 0.0, 1.6)
    pitch = np.deg2rad(35.0)
    yaws = {"front": 0.0, "front-left": 60.0, "front-right": -60.0,
            "back-left": 120.0, "back-right": -120.0, "back": 180.0}
    cams = [_camera_from_pose(n, fx_wide, fy_wide, cx, cy, pos, np.deg2rad(d), pitch,
                              width, height) for n, d in yaws.items()]
    cams.append(_camera_from_pose("front-center-narrow", width * 1.3, width * 1.3, cx, cy,
                                  pos, 0.0, np.deg2rad(8.0), width, height))
    order = {n: i for i, n in enumerate(CAMERA_ORDER)}
    cams.sort(key=lambda c: order[c.name])
    return cams


def project(point3d, camera: Camera):
    """Ego-frame 3D point to pixel (u, v), or None if behind / off-image."""
    p = camera.r @ np.asarray(point3d, dtype=np.float64) + camera.t
    z = p[2]
    if z <= 1e-9:
        return None
    u = camera.fx * p[0] / z + camera.cx
    v = camera.fy * p[1] / z + camera.cy
    if not (0.0 <= u < camera.width and 0.0 <= v < camera.height):
        return None
    return (u, v)


# ---------------------------------------------------------------------------
# scene data


@dataclass
class MultiViewFrame:
    images: np.ndarray          # [7, 1, H, W] float64 in [0,1]
    cameras: list[Camera]
    ego_pose: tuple[float, float, float]   # (x, y, yaw) in world frame
    t_index: int

    def __eq__(self, other):
        if not isinstance(other, MultiViewFrame):
            return NotImplemented
        return (self.t_index == other.t_index and self.ego_pose == other.ego_pose
                and self.cameras == other.cameras
                and np.array_equal(self.images, other.images))


@dataclass
class Scene:
    scene_id: str
    frames: list[MultiViewFrame]
    groundtruth: list[list[LaneSegment]]   # per frame, ego frame
    scenario_kind: str
    seed: int

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.scene_id == other.scene_id and self.scenario_kind == other.scenario_kind
                and self.seed == other.seed and self.frames == other.frames
                and self.groundtruth == other.groundtruth)


@dataclass(frozen=True)
class GenParams:
    frames: int = 4
    image_width: int = 96
    image_height: int = 64
    n_points: int = 10                      # P, points per gt polyline
    x_min: float = -24.0
    x_max: float = 24.0
    y_min: float = -12.0
    y_max: float = 12.0
    extent_margin: float = 2.0              # keeps boundaries inside the extent
    min_lanes: int = 2
    max_lanes: int = 6


# ---------------------------------------------------------------------------
# world geometry


def _lane_offsets(n_lanes, width):
    return (np.arange(n_lanes) - (n_lanes - 1) / 2.0) * width


def _straight_world(rng, p: GenParams):
    n_lanes = int(rng.integers(p.min_lanes, p.max_lanes + 1))
    width = float(rng.uniform(3.0, 4.0))
    xs = np.linspace(-60.0, 140.0, 101)
    lanes = [{"centerline": np.stack([xs, np.full_like(xs, off)], axis=1),
              "width": width, "class_id": CLASS_LANE}
             for off in _lane_offsets(n_lanes, width)]
    ego_lane = int(rng.integers(0, n_lanes))
    return lanes, [], lanes[ego_lane]["centerline"]


def _curve_world(rng, p: GenParams):
    n_lanes = int(rng.integers(p.min_lanes, p.max_lanes + 1))
    width = float(rng.uniform(3.0, 4.0))
    radius = float(rng.uniform(40.0, 100.0)) * (1 if rng.random() < 0.5 else -1)
    span = 160.0 / abs(radius)
    theta = np.linspace(-0.2 * span, 0.8 * span, 121)
    lanes = []
    for off in _lane_offsets(n_lanes, width):
        r_i = radius - off * np.sign(radius)
        cx_ = 0.0
        cy_ = radius
        sgn = np.sign(radius)
        x = cx_ + abs(r_i) * np.sin(theta)
        y = cy_ - sgn * abs(r_i) * np.cos(theta)
        lanes.append({"centerline": np.stack([x, y], axis=1), "width": width,
                      "class_id": CLASS_LANE})
    ego_lane = int(rng.integers(0, n_lanes))
    return lanes, [], lanes[ego_lane]["centerline"]


def _intersection_world(rng, p: GenParams, speed):
    n_lanes = int(rng.integers(p.min_lanes, p.max_lanes + 1))
    width = float(rng.uniform(3.0, 4.0))
    xs = np.linspace(-60.0, 140.0, 101)
    lanes = [{"centerline": np.stack([xs, np.full_like(xs, off)], axis=1),
              "width": width, "class_id": CLASS_LANE}
             for off in _lane_offsets(n_lanes, width)]
    ego_lane = int(rng.integers(0, n_lanes))

    # crossing road placed so its crosswalk stays inside the BEV extent for
    # the whole sequence (ego approaches but never reaches it)
    x_cross = speed * (p.frames - 1) + float(rng.uniform(4.0, 8.0))
    n_cross = int(rng.integers(2, 5))
    cross_width = float(rng.uniform(3.0, 4.0))
    ys = np.linspace(-50.0, 50.0, 51)
    for off in _lane_offsets(n_cross, cross_width):
        lanes.append({"centerline": np.stack([np.full_like(ys, x_cross + off), ys], axis=1),
                      "width": cross_width, "class_id": CLASS_LANE})

    half_main = n_lanes * width / 2.0
    half_cross = n_cross * cross_width / 2.0
    crosswalks = []
    for xc in (x_cross - half_cross - 1.2, x_cross + half_cross + 1.2):
        yy = np.linspace(-half_main - 0.8, half_main + 0.8, 9)
        crosswalks.append({"centerline": np.stack([np.full_like(yy, xc), yy], axis=1),
                           "width": 1.2, "class_id": CLASS_CROSSWALK})
    return lanes, crosswalks, lanes[ego_lane]["centerline"]


def _world_to_ego(points, pose):
    x, y, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, s], [-s, c]])
    return (np.asarray(points) - np.array([x, y])) @ rot.T


def _ego_poses(ego_path, speed, n_frames, straight):
    """Ego pose (x, y, yaw) per frame, following the given lane centerline."""
    dense = densify_polyline(ego_path, 0.5)
    from .segments import arclength
    s = arclength(dense)
    s0 = s[np.argmin(np.hypot(dense[:, 0], dense[:, 1]))]  # start near world origin
    poses = []
    for k in range(n_frames):
        target = s0 + k * speed
        x = np.interp(target, s, dense[:, 0])
        y = np.interp(target, s, dense[:, 1])
        if straight:
            yaw = 0.0
        else:
            i = min(np.searchsorted(s, target), len(dense) - 2)
            d = dense[i + 1] - dense[i]
            yaw = np.arctan2(d[1], d[0])
        poses.append((quant9(x), quant9(y), quant9(yaw)))
    return poses


def _gt_for_frame(lanes, crosswalks, pose, p: GenParams):
    m = p.extent_margin
    segs = []
    from .segments import arclength
    for item in lanes + crosswalks:
        ego_poly = _world_to_ego(densify_polyline(item["centerline"], 1.0), pose)
        run = longest_run_inside(ego_poly, p.x_min + m, p.x_max - m, p.y_min + m, p.y_max - m)
        if run is None:
            continue
        if arclength(run)[-1] < (3.0 if item["class_id"] == CLASS_LANE else 1.5):
            continue
        center = resample_polyline(run, p.n_points)
        normals = polyline_normals(center)
        half = item["width"] / 2.0
        left = center + normals * half
        right = center - normals * half
        segs.append(LaneSegment(quant9_arr(center), quant9_arr(left), quant9_arr(right),
                                item["class_id"], 1.0))
    return segs


# ---------------------------------------------------------------------------
# rendering


def _min_dist_to_segments(pts, seg_a, seg_b):
    """Min distance from each 2D point to any segment, chunked over points."""
    if len(seg_a) == 0:
        return np.full(len(pts), np.inf)
    # float32 + squared distances: rendering only needs ~centimeter accuracy
    pts32 = pts.astype(np.float32)
    a32 = seg_a.astype(np.float32)
    ab = (seg_b - seg_a).astype(np.float32)
    ab2 = np.maximum((ab * ab).sum(axis=1), np.float32(1e-12))
    out = np.empty(len(pts), dtype=np.float32)
    for lo in range(0, len(pts), 4096):
        chunk = pts32[lo:lo + 4096]
        ap = chunk[:, None, :] - a32[None]
        tt = np.clip((ap[..., 0] * ab[None, :, 0] + ap[..., 1] * ab[None, :, 1]) / ab2[None], 0.0, 1.0)
        dx = ap[..., 0] - tt * ab[None, :, 0]
        dy = ap[..., 1] - tt * ab[None, :, 1]
        out[lo:lo + 4096] = (dx * dx + dy * dy).min(axis=1)
    return np.sqrt(out.astype(np.float64))


def _polylines_to_segments(polys):
    a, b = [], []
    for poly in polys:
        a.append(poly[:-1])
        b.append(poly[1:])
    if not a:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(a), np.concatenate(b)


SKY_VALUE = 0.05
GROUND_VALUE = 0.45
RENDER_FAR = 75.0


def _render_camera(cam: Camera, marking_polys, crosswalk_polys):
    """Ray-cast the ground plane and shade lane markings, ego frame."""
    h, w = cam.height, cam.width
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy,
                         np.ones_like(uu)], axis=-1)
    dirs_ego = dirs_cam @ cam.r  # == dirs_cam @ (r^T)^T, rows transform back
    center = -cam.r.T @ cam.t
    dz = dirs_ego[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = np.where(dz < -1e-9, -center[2] / dz, np.inf)
    gx = center[0] + t_hit * dirs_ego[..., 0]
    gy = center[1] + t_hit * dirs_ego[..., 1]
    ground = np.isfinite(t_hit) & (t_hit > 0) & (np.hypot(gx, gy) <= RENDER_FAR)

    img = np.full((h, w), SKY_VALUE)
    pts = np.stack([gx[ground], gy[ground]], axis=1)
    val = np.full(len(pts), GROUND_VALUE)

    ma, mb = _polylines_to_segments(marking_polys)
    if len(ma):
        d = _min_dist_to_segments(pts, ma, mb)
        alpha = np.clip((0.18 - d) / 0.08, 0.0, 1.0)
        val = np.maximum(val, GROUND_VALUE + (1.0 - GROUND_VALUE) * alpha)
    ca, cb = _polylines_to_segments(crosswalk_polys)
    if len(ca):
        d = _min_dist_to_segments(pts, ca, cb)
        alpha = np.clip((0.6 - d) / 0.1, 0.0, 1.0)
        val = np.maximum(val, GROUND_VALUE + 0.4 * alpha)

    img[ground] = val
    return np.round(img * 255.0) / 255.0


def _render_frame(cams, lanes, crosswalks, pose):
    markings = []
    for item in lanes:
        if item["class_id"] != CLASS_LANE:
            continue
        center = _world_to_ego(densify_polyline(item["centerline"], 6.0), pose)
        keep = np.hypot(center[:, 0], center[:, 1]) < RENDER_FAR + 10
        if not keep.any():
            continue
        center = center[keep]  # lanes are simple arcs; the kept run is contiguous
        if len(center) < 2:
            continue
        normals = polyline_normals(center)
        half = item["width"] / 2.0
        markings.append(center + normals * half)
        markings.append(center - normals * half)
    cw = [_world_to_ego(item["centerline"], pose) for item in crosswalks]
    return np.stack([_render_camera(c, markings, cw)[None] for c in cams])


# ---------------------------------------------------------------------------
# generation


def generate_scene(seed: int, scenario_kind: str, params: GenParams | None = None) -> Scene:
    """Procedurally build one scene; fully determined by (seed, kind, params)."""
    if scenario_kind not in SCENARIO_KINDS:
        raise ValueError(f"unknown scenario kind {scenario_kind!r}; valid: {SCENARIO_KINDS}")
    p = params or GenParams()
    rng = np.random.default_rng(seed)
    if scenario_kind == "intersection":
        speed = float(rng.uniform(3.0, 4.5))
        lanes, crosswalks, ego_path = _intersection_world(rng, p, speed)
    else:
        speed = float(rng.uniform(3.0, 6.0))
        if scenario_kind == "straight":
            lanes, crosswalks, ego_path = _straight_world(rng, p)
        else:
            lanes, crosswalks, ego_path = _curve_world(rng, p)

    poses = _ego_poses(ego_path, speed, p.frames, straight=scenario_kind == "straight")
    cams = build_camera_rig(p.image_width, p.image_height)
    frames, gt = [], []
    for k, pose in enumerate(poses):
        images = _render_frame(cams, lanes, crosswalks, pose)
        frames.append(MultiViewFrame(images, cams, pose, k))
        gt.append(_gt_for_frame(lanes, crosswalks, pose, p))
    return Scene(f"scene_{seed:08d}", frames, gt, scenario_kind, seed)


def scenario_for_seed(seed: int) -> str:
    return SCENARIO_KINDS[seed % len(SCENARIO_KINDS)]


# ---------------------------------------------------------------------------
# on-disk format


def _write_pgm(path, img):
    h, w = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def _read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    try:
        header_end = 0
        fields = []
        pos = 0
        while len(fields) < 4:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(raw) and not raw[pos:pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        if fields[0] != b"P5":
            raise ParseError(path, 0, f"not a binary PGM (magic {fields[0]!r})")
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        pos += 1  # single whitespace after maxval
        pixels = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
        if pixels.size != w * h:
            raise ParseError(path, pos, f"truncated pixel data: {pixels.size} of {w * h} bytes")
        return pixels.reshape(h, w).astype(np.float64) / 255.0
    except (ValueError, IndexError) as e:
        raise ParseError(path, 0, f"malformed PGM header: {e}") from None


def _seg_to_line(frame_idx, seg: LaneSegment) -> str:
    def pts(a):
        return " ".join(f"{fmt9(x)} {fmt9(y)}" for x, y in a)
    return (f"SEG {frame_idx} {seg.class_id} {len(seg.centerline)} "
            f"{pts(seg.centerline)} | {pts(seg.left_boundary)} | {pts(seg.right_boundary)}")


def save_dataset(scenes, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write(f"version {FORMAT_VERSION}\n")
        for sc in scenes:
            f.write(f"scene {sc.scene_id}\n")
    for sc in scenes:
        sdir = os.path.join(out_dir, sc.scene_id)
        os.makedirs(sdir, exist_ok=True)
        for frame in sc.frames:
            for k in range(len(frame.cameras)):
                _write_pgm(os.path.join(sdir, f"frame_{frame.t_index}_cam_{k}.pgm"),
                           frame.images[k, 0])
        with open(os.path.join(sdir, "annotations.txt"), "w") as f:
            f.write(f"META {sc.scenario_kind} {sc.seed} {len(sc.frames)}\n")
            for k, cam in enumerate(sc.frames[0].cameras):
                r = " ".join(fmt9(v) for v in cam.r.reshape(-1))
                t = " ".join(fmt9(v) for v in cam.t)
                f.write(f"CAM {k} {fmt9(cam.fx)} {fmt9(cam.fy)} {fmt9(cam.cx)} {fmt9(cam.cy)} {r} {t}\n")
            for frame in sc.frames:
                x, y, yaw = frame.ego_pose
                f.write(f"EGO {frame.t_index} {fmt9(x)} {fmt9(y)} {fmt9(yaw)}\n")
            for idx, segs in enumerate(sc.groundtruth):
                for seg in segs:
                    f.write(_seg_to_line(idx, seg) + "\n")


def _parse_annotations(path):
    meta = None
    cams_raw = {}
    egos = {}
    segs = {}
    offset = 0
    with open(path, "rb") as f:
        raw = f.read()
    for line in raw.split(b"\n"):
        text = line.decode("utf-8", errors="replace").strip()
        line_off = offset
        offset += len(line) + 1
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        try:
            if parts[0] == "META":
                meta = (parts[1], int(parts[2]), int(parts[3]))
            elif parts[0] == "CAM":
                k = int(parts[1])
                vals = [float(v) for v in parts[2:]]
                if len(vals) != 16:
                    raise ValueError(f"CAM needs 16 floats, got {len(vals)}")
                cams_raw[k] = vals
            elif parts[0] == "EGO":
                egos[int(parts[1])] = (float(parts[2]), float(parts[3]), float(parts[4]))
            elif parts[0] == "SEG":
                fr, cls, n = int(parts[1]), int(parts[2]), int(parts[3])
                blob = " ".join(parts[4:])
                chunks = [c.split() for c in blob.split("|")]
                if len(chunks) != 3:
                    raise ValueError("SEG needs centerline | left | right")
                arrs = []
                for c in chunks:
                    vals = [float(v) for v in c]
                    if len(vals) != 2 * n:
                        raise ValueError(f"expected {2 * n} coords, got {len(vals)}")
                    arrs.append(np.array(vals).reshape(n, 2))
                segs.setdefault(fr, []).append(LaneSegment(arrs[0], arrs[1], arrs[2], cls, 1.0))
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
        except (ValueError, IndexError) as e:
            raise ParseError(path, line_off, str(e)) from None
    if meta is None:
        raise ParseError(path, 0, "missing META line")
    return meta, cams_raw, egos, segs


def load_dataset(dir_path) -> list[Scene]:
    manifest = os.path.join(dir_path, "manifest.txt")
    scene_ids = []
    offset = 0
    with open(manifest, "rb") as f:
        raw = f.read()
    for line in raw.split(b"\n"):
        text = line.decode().strip()
        line_off = offset
        offset += len(line) + 1
        if not text:
            continue
        parts = text.split()
        if parts[0] == "version":
            if int(parts[1]) != FORMAT_VERSION:
                raise UnsupportedVersionError(
                    f"dataset format version {parts[1]} unsupported (expected {FORMAT_VERSION})")
        elif parts[0] == "scene":
            scene_ids.append(parts[1])
        else:
            raise ParseError(manifest, line_off, f"unknown manifest record {parts[0]!r}")
    return [_load_scene(dir_path, sid) for sid in scene_ids]


def _load_scene(dir_path, scene_id) -> Scene:
    sdir = os.path.join(dir_path, scene_id)
    meta, cams_raw, egos, segs = _parse_annotations(os.path.join(sdir, "annotations.txt"))
    kind, seed, n_frames = meta
    # image size from the first camera file
    first = os.path.join(sdir, "frame_0_cam_0.pgm")
    if not os.path.exists(first):
        raise InventoryError(f"{sdir}: missing camera file frame_0_cam_0.pgm")
    img0 = _read_pgm(first)
    h, w = img0.shape
    cameras = []
    for k in sorted(cams_raw):
        fx, fy, cx, cy, *rest = cams_raw[k]
        cameras.append(Camera(CAMERA_ORDER[k], fx, fy, cx, cy,
                              np.array(rest[:9]).reshape(3, 3), np.array(rest[9:]), w, h))
    frames = []
    gt = []
    for t in range(n_frames):
        images = np.empty((len(cameras), 1, h, w))
        for k in range(len(cameras)):
            path = os.path.join(sdir, f"frame_{t}_cam_{k}.pgm")
            if not os.path.exists(path):
                raise InventoryError(f"{sdir}: missing camera file frame_{t}_cam_{k}.pgm")
            images[k, 0] = _read_pgm(path)
        if t not in egos:
            raise ParseError(os.path.join(sdir, "annotations.txt"), 0, f"missing EGO record for frame {t}")
        frames.append(MultiViewFrame(images, cameras, egos[t], t))
        gt.append(segs.get(t, []))
    return Scene(scene_id, frames, gt, kind, seed)
