"""Readers and writers for trajectories, depth maps, tracks and point clouds.

* trajectories: TUM text, ``timestamp tx ty tz qx qy qz qw``
* depth maps: PFM (single channel, little-endian), one file per frame
* tracks: ``.trk.json`` (self-describing) or ``.trk.bin`` (packed float64)
* query depths: ``depths.bin`` (magic, L, N, then L*N float64)
* point clouds: binary little-endian PLY
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .tracks import TrackTensor

TRK_MAGIC = b"DTRK"
DEPTHS_MAGIC = b"DQDP"
FORMAT_VERSION = 1


# -- trajectories --------------------------------------------------------

def write_tum(path, poses, timestamps=None):
    path = Path(path)
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=float)
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, p in zip(timestamps, poses):
        vals = [ts, *p.t, *p.quaternion]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    path.write_text("\n".join(lines) + "\n")


def read_tum(path) -> tuple[np.ndarray, list]:
    """Return ``(timestamps, poses)``; comment and blank lines are skipped."""
    times, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vals = [float(x) for x in parts]
        times.append(vals[0])
        poses.append(Pose.from_quaternion(vals[4:8], vals[1:4]))
    return np.array(times), poses


# -- PFM depth maps ------------------------------------------------------

def write_pfm(path, image):
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("only single-channel PFM is supported")
    H, W = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        W, H = (int(x) for x in dims.split())
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(W * H * channels * 4), dtype=dtype)
    if data.size != W * H * channels:
        raise ValueError(f"{path}: truncated PFM data")
    img = data.reshape(H, W, channels)[::-1]
    img = img[..., 0] if channels == 1 else img
    return img.astype(np.float64)


def depth_filename(frame: int) -> str:
    return f"depth_{frame:05d}.pfm"


def write_depth_dir(directory, depth_maps):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(depth_maps):
        write_pfm(directory / depth_filename(i), d)


def read_depth_dir(directory) -> np.ndarray:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"depth directory not found: {directory}")
    files = sorted(directory.glob("*.pfm"), key=lambda p: [int(s) if s.isdigit() else s
                                                            for s in re.split(r"(\d+)", p.name)])
    if not files:
        raise FileNotFoundError(f"no .pfm files in {directory}")
    return np.stack([read_pfm(p) for p in files])


# -- intrinsics ----------------------------------------------------------

def write_intrinsics(path, k: CameraIntrinsics):
    Path(path).write_text(json.dumps(k.to_dict(), indent=2) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


# -- tracks --------------------------------------------------------------

def write_tracks_json(path, tracks: TrackTensor):
    L, N, S = tracks.sequence_length, tracks.queries_per_frame, tracks.window_size
    header = {"L": L, "N": N, "S": S, "convention": "displacement-dyn",
              "intrinsics": tracks.intrinsics.to_dict() if tracks.intrinsics else None}
    windows = []
    for t in range(L):
        for n in range(N):
            windows.append({
                "source_frame": t,
                "query": tracks.query[t, n].tolist(),
                "total": tracks.total[t, n].tolist(),
                "dynamic": tracks.dynamic[t, n].tolist(),
                "visibility": tracks.visibility[t, n].tolist(),
                "dynamic_label": float(tracks.dynamic_label[t, n]),
            })
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps({"header": header, "windows": windows}, separators=(",", ":")))


def read_tracks_json(path) -> TrackTensor:
    doc = json.loads(Path(path).read_text())
    h = doc["header"]
    if h.get("convention", "displacement-dyn") != "displacement-dyn":
        raise ValueError(f"unsupported track convention {h['convention']!r}")
    L, N, S = h["L"], h["N"], h["S"]
    if len(doc["windows"]) != L * N:
        raise ValueError(f"expected {L * N} windows, found {len(doc['windows'])}")
    query = np.zeros((L, N, 3))
    total = np.zeros((L, N, S, 3))
    dyn = np.zeros((L, N, S, 3))
    vis = np.zeros((L, N, S))
    lab = np.zeros((L, N))
    counters = np.zeros(L, dtype=int)
    for w in doc["windows"]:
        t = w["source_frame"]
        n = counters[t]
        counters[t] += 1
        query[t, n] = w["query"]
        total[t, n] = w["total"]
        dyn[t, n] = w["dynamic"]
        vis[t, n] = w["visibility"]
        lab[t, n] = w["dynamic_label"]
    k = CameraIntrinsics.from_dict(h["intrinsics"]) if h.get("intrinsics") else None
    return TrackTensor(query, total, dyn, vis, lab, k)


_TRK_HEADER = struct.Struct("<4sIIII?4d2I")


def write_tracks_bin(path, tracks: TrackTensor):
    L, N, S = tracks.sequence_length, tracks.queries_per_frame, tracks.window_size
    k = tracks.intrinsics
    kv = (k.fx, k.fy, k.cx, k.cy, k.width, k.height) if k else (0.0, 0.0, 0.0, 0.0, 0, 0)
    with open(path, "wb") as f:
        f.write(_TRK_HEADER.pack(TRK_MAGIC, FORMAT_VERSION, L, N, S, k is not None, *kv))
        # one record per window: query, total, dynamic, visibility, label
        rec = np.concatenate([
            tracks.query.reshape(L * N, 3),
            tracks.total.reshape(L * N, S * 3),
            tracks.dynamic.reshape(L * N, S * 3),
            tracks.visibility.reshape(L * N, S),
            tracks.dynamic_label.reshape(L * N, 1),
        ], axis=1)
        f.write(rec.astype("<f8").tobytes())


def read_tracks_bin(path) -> TrackTensor:
    raw = Path(path).read_bytes()
    magic, version, L, N, S, has_k, fx, fy, cx, cy, w, h = _TRK_HEADER.unpack_from(raw)
    if magic != TRK_MAGIC:
        raise ValueError(f"{path}: not a binary track file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    width = 3 + 7 * S + 1
    data = np.frombuffer(raw, dtype="<f8", offset=_TRK_HEADER.size)
    if data.size != L * N * width:
        raise ValueError(f"{path}: expected {L * N * width} values, found {data.size}")
    rec = data.reshape(L * N, width).astype(np.float64)
    o = 0
    query = rec[:, o:o + 3].reshape(L, N, 3); o += 3
    total = rec[:, o:o + 3 * S].reshape(L, N, S, 3); o += 3 * S
    dyn = rec[:, o:o + 3 * S].reshape(L, N, S, 3); o += 3 * S
    vis = rec[:, o:o + S].reshape(L, N, S); o += S
    lab = rec[:, o].reshape(L, N)
    k = CameraIntrinsics(fx, fy, cx, cy, w, h) if has_k else None
    return TrackTensor(query, total, dyn, vis, lab, k)


def write_tracks(path, tracks: TrackTensor):
    path = Path(path)
    (write_tracks_bin if path.name.endswith(".bin") else write_tracks_json)(path, tracks)


def read_tracks(path) -> TrackTensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"track file not found: {path}")
    return (read_tracks_bin if path.name.endswith(".bin") else read_tracks_json)(path)


# -- query depths ----------------------------------------------------------

def write_query_depths(path, depths):
    depths = np.asarray(depths, dtype="<f8")
    L, N = depths.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", DEPTHS_MAGIC, L, N))
        f.write(depths.tobytes())


def read_query_depths(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, L, N = struct.unpack_from("<4sII", raw)
    if magic != DEPTHS_MAGIC:
        raise ValueError(f"{path}: not a query-depth file")
    return np.frombuffer(raw, dtype="<f8", offset=12, count=L * N).reshape(L, N).astype(np.float64)


# -- point clouds ----------------------------------------------------------

PLY_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("frame", "<i4")])


def write_ply(path, points, frames):
    points = np.asarray(points, dtype=float)
    frames = np.asarray(frames)
    verts = np.empty(len(points), dtype=PLY_DTYPE)
    verts["x"], verts["y"], verts["z"] = points[:, 0], points[:, 1], points[:, 2]
    verts["frame"] = frames
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(points)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              "property int frame\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(verts.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii")
    if "binary_little_endian" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n = int(re.search(r"element vertex (\d+)", header).group(1))
    verts = np.frombuffer(raw, dtype=PLY_DTYPE, count=n, offset=end)
    pts = np.stack([verts["x"], verts["y"], verts["z"]], axis=1)
    return pts, verts["frame"].astype(np.int64)
