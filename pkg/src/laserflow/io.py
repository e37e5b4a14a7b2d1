"""On-disk formats: range images, datasets, checkpoints and detections.

Every JSON document carries ``schema`` and ``version`` fields. Binary blobs
are raw little-endian float32 in row-major order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from laserflow import netcore as nc
from laserflow.clustering import Detection
from laserflow.geometry import Pose, RangeImage, RasterConfig
from laserflow.simulator import SweepSequence
from laserflow.trajectory import BoxTrajectory

VERSION = 1
POINT_CHANNELS = ("x", "y", "z")
LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def write_json(path: Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_json(path: Path, schema: str | None = None) -> dict:
    doc = json.loads(Path(path).read_text())
    if schema is not None and doc.get("schema") != schema:
        raise FormatError(f"{path}: expected schema {schema!r}, found {doc.get('schema')!r}")
    if doc.get("version", VERSION) > VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')}")
    return doc


# -- range images -------------------------------------------------------------

def save_range_image(img: RangeImage, stem: Path) -> tuple[Path, Path]:
    """Write ``stem.json`` and ``stem.bin``; exact return points ride along as extra channels."""
    stem = Path(stem)
    channels = list(img.channels)
    data = img.raster
    if img.points is not None:
        data = np.concatenate([data, img.points.astype(np.float32)], -1)
        channels += list(POINT_CHANNELS)
    h, w = img.shape
    manifest = {"schema": "range_image", "version": VERSION, "H": h, "W": w, "channels": channels,
                "sweep_index": img.sweep_index, "pose": img.pose.to_list(), "dropped": img.dropped,
                "blob": stem.name + ".bin"}
    write_json(stem.with_suffix(".json"), manifest)
    blob = stem.with_suffix(".bin")
    blob.write_bytes(np.ascontiguousarray(data, dtype=LE_F32).tobytes())
    return stem.with_suffix(".json"), blob


def load_range_image(manifest_path: Path) -> RangeImage:
    manifest_path = Path(manifest_path)
    m = read_json(manifest_path, "range_image")
    channels = list(m["channels"])
    raw = np.frombuffer((manifest_path.parent / m["blob"]).read_bytes(), dtype=LE_F32)
    if raw.size != m["H"] * m["W"] * len(channels):
        raise FormatError(f"{manifest_path}: blob size does not match manifest")
    data = raw.reshape(m["H"], m["W"], len(channels)).astype(np.float32)
    points = None
    if channels[-3:] == list(POINT_CHANNELS):
        points = data[..., -3:].astype(np.float64)
        data = data[..., :-3]
        channels = channels[:-3]
    return RangeImage(data, Pose.from_list(m["pose"]), int(m["sweep_index"]), tuple(channels), points,
                      int(m.get("dropped", 0)))


# -- datasets -----------------------------------------------------------------

def save_dataset(seqs: list[SweepSequence], out_dir: Path, config: dict | None = None) -> None:
    """One directory per scene holding its sweeps and labels, plus a top-level manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = []
    for k, seq in enumerate(seqs):
        name = f"scene_{k:05d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        sweeps = []
        for s, img in enumerate(seq.sweeps):
            js, _ = save_range_image(img, sdir / f"sweep_{s:02d}")
            sweeps.append(js.name)
        labels = {
            "schema": "labels", "version": VERSION,
            "class_ids": seq.class_ids.tolist(),
            "actor_ids": seq.actor_ids.tolist(),
            "actor_classes": list(seq.actor_classes),
            "step_dt": seq.step_dt,
            "trajectories": [t.to_json(seq.step_dt) for t in seq.trajectories],
        }
        write_json(sdir / "labels.json", labels)
        scene_doc = {"schema": "scene", "version": VERSION, "sweeps": sweeps, "labels": "labels.json",
                     "raster": seq.raster.to_dict(), "meta": seq.meta}
        write_json(sdir / "scene.json", scene_doc)
        scenes.append(name)
    write_json(out / "dataset.json", {"schema": "dataset", "version": VERSION, "scenes": scenes,
                                      "config": config or {}})


def load_scene(sdir: Path) -> SweepSequence:
    sdir = Path(sdir)
    doc = read_json(sdir / "scene.json", "scene")
    labels = read_json(sdir / doc["labels"], "labels")
    sweeps = [load_range_image(sdir / name) for name in doc["sweeps"]]
    return SweepSequence(
        sweeps=sweeps,
        class_ids=np.asarray(labels["class_ids"], dtype=np.int64),
        actor_ids=np.asarray(labels["actor_ids"], dtype=np.int64),
        trajectories=[BoxTrajectory.from_json(t) for t in labels["trajectories"]],
        actor_classes=[int(c) for c in labels["actor_classes"]],
        raster=RasterConfig.from_dict(doc["raster"]),
        step_dt=float(labels["step_dt"]),
        meta=doc.get("meta", {}),
    )


def load_dataset(data_dir: Path) -> tuple[list[SweepSequence], dict]:
    data_dir = Path(data_dir)
    if not (data_dir / "dataset.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {data_dir}")
    doc = read_json(data_dir / "dataset.json", "dataset")
    return [load_scene(data_dir / name) for name in doc["scenes"]], doc.get("config", {})


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(params: dict[str, nc.LayerParams], path: Path, iteration: int, extra: dict | None = None) -> None:
    """JSON header with layer names and shapes next to one float32 blob."""
    path = Path(path)
    layers = []
    chunks = []
    for name in sorted(params):
        p = params[name]
        layers.append({"name": name, "kernel": list(p.kernel.shape), "bias": list(p.bias.shape)})
        chunks += [p.kernel.ravel(), p.bias.ravel()]
    header = {"schema": "checkpoint", "version": VERSION, "iteration": int(iteration), "layers": layers,
              "blob": path.with_suffix(".bin").name, **(extra or {})}
    write_json(path.with_suffix(".json"), header)
    blob = np.concatenate(chunks).astype(LE_F32) if chunks else np.zeros(0, LE_F32)
    path.with_suffix(".bin").write_bytes(blob.tobytes())


def load_checkpoint(path: Path) -> tuple[dict[str, nc.LayerParams], dict]:
    path = Path(path).with_suffix(".json")
    header = read_json(path, "checkpoint")
    raw = np.frombuffer((path.parent / header["blob"]).read_bytes(), dtype=LE_F32)
    params = {}
    off = 0
    for layer in header["layers"]:
        ks, bs = tuple(layer["kernel"]), tuple(layer["bias"])
        nk, nb = int(np.prod(ks)), int(np.prod(bs))
        if off + nk + nb > raw.size:
            raise FormatError(f"{path}: blob shorter than header")
        kernel = raw[off:off + nk].reshape(ks).astype(np.float32)
        bias = raw[off + nk:off + nk + nb].reshape(bs).astype(np.float32)
        off += nk + nb
        params[layer["name"]] = nc.LayerParams(kernel, bias)
    if off != raw.size:
        raise FormatError(f"{path}: blob longer than header")
    return params, header


# -- detections ---------------------------------------------------------------

def save_detections(frames: list[list[Detection]], path: Path, step: float = 0.5) -> None:
    write_json(path, {"schema": "detections", "version": VERSION, "step": step,
                      "frames": [[d.to_json(step) for d in frame] for frame in frames]})


def load_detections(path: Path) -> list[list[Detection]]:
    doc = read_json(path, "detections")
    return [[Detection.from_json(d) for d in frame] for frame in doc["frames"]]
