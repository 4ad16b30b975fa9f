"""On-disk dataset: scenes, posed RGB-D frames, BEV targets, annotations.

Layout under a dataset root:

    manifest                     JSON: format version + scene list
    <scene>/scene.json           room, objects, seed
    <scene>/frame_<k>.rgb.png    8-bit RGB
    <scene>/frame_<k>.depth.raw  header '<II' (H, W) + little-endian float32 rows
    <scene>/cameras              JSON lines, one record per frame:
                                 fx fy cx cy width height rotation(row-major 9) translation(3)
    <scene>/bev.png              ground-truth top-down render
    <scene>/annotations          JSON lines: task in {qa, caption, ground},
                                 text, target ids (+ answer for qa)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

from .geometry import CameraExtrinsics, CameraIntrinsics
from .scenes import (
    ObjectSpec,
    PosedFrame,
    SceneAnnotations,
    SceneGenConfig,
    SceneSpec,
    generate_scene,
    make_annotations,
    render_bev_gt,
    render_views,
    scene_bev_config,
)

MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    """Raised for missing or corrupt dataset files; message names the file."""


@dataclass
class SceneBundle:
    """Everything belonging to one scene."""

    name: str
    scene: SceneSpec
    frames: List[PosedFrame]
    bev: np.ndarray
    annotations: SceneAnnotations


def build_scene_bundle(seed: int, name: str | None = None, num_views: int = 8,
                       resolution: int = 64, bev_resolution: int = 64,
                       gen_cfg: SceneGenConfig | None = None) -> SceneBundle:
    """Generate, render and annotate one scene; pure function of its arguments."""
    scene = generate_scene(seed, gen_cfg)
    frames = render_views(scene, num_views=num_views, resolution=resolution)
    bev = render_bev_gt(scene, scene_bev_config(scene, bev_resolution))
    ann = make_annotations(scene, np.random.default_rng(seed + 777))
    return SceneBundle(name=name or f"scene_{seed:05d}", scene=scene, frames=frames, bev=bev, annotations=ann)


def generate_dataset(seed: int, num_scenes: int, num_views: int = 8, resolution: int = 64,
                     bev_resolution: int = 64, gen_cfg: SceneGenConfig | None = None) -> List[SceneBundle]:
    return [
        build_scene_bundle(seed + k, name=f"scene_{k:04d}", num_views=num_views,
                           resolution=resolution, bev_resolution=bev_resolution, gen_cfg=gen_cfg)
        for k in range(num_scenes)
    ]


def _write_png(path: Path, img: np.ndarray):
    arr = np.clip(np.asarray(img, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing image file {path}")
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def _write_depth(path: Path, depth: np.ndarray):
    depth = np.ascontiguousarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", depth.shape[0], depth.shape[1]))
        f.write(depth.tobytes())


def _read_depth(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing depth file {path}")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"corrupt depth file {path}: truncated header")
    h, w = struct.unpack("<II", raw[:8])
    expected = 8 + h * w * 4
    if len(raw) != expected:
        raise DatasetError(f"corrupt depth file {path}: expected {expected} bytes, got {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).copy()


def _scene_to_json(scene: SceneSpec) -> dict:
    return {
        "room_size": scene.room_size.tolist(),
        "seed": scene.seed,
        "objects": [
            {"id": o.id, "cls": o.cls, "color": o.color,
             "box_min": o.box_min.tolist(), "box_max": o.box_max.tolist()}
            for o in scene.objects
        ],
    }


def _scene_from_json(d: dict) -> SceneSpec:
    objects = [ObjectSpec(id=o["id"], cls=o["cls"], color=o["color"],
                          box_min=o["box_min"], box_max=o["box_max"]) for o in d["objects"]]
    return SceneSpec(room_size=d["room_size"], objects=objects, seed=d["seed"])


def write_dataset(root, bundles: List[SceneBundle]):
    """Serialize bundles to root (created if needed); lossless for depth."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"version": MANIFEST_VERSION, "scenes": []}
    for b in bundles:
        sdir = root / b.name
        sdir.mkdir(exist_ok=True)
        (sdir / "scene.json").write_text(json.dumps(_scene_to_json(b.scene), indent=1))
        cam_lines = []
        for k, f in enumerate(b.frames):
            _write_png(sdir / f"frame_{k}.rgb.png", f.rgb)
            _write_depth(sdir / f"frame_{k}.depth.raw", f.depth)
            cam_lines.append(json.dumps({
                "frame": k, "fx": f.K.fx, "fy": f.K.fy, "cx": f.K.cx, "cy": f.K.cy,
                "width": f.K.width, "height": f.K.height,
                "rotation": f.T.rotation.reshape(-1).tolist(),
                "translation": f.T.translation.tolist(),
            }))
        (sdir / "cameras").write_text("\n".join(cam_lines) + "\n")
        _write_png(sdir / "bev.png", b.bev)
        ann_lines = []
        for q, a in b.annotations.qa:
            ann_lines.append(json.dumps({"task": "qa", "text": q, "answer": a, "target_ids": []}))
        for oid, cap in b.annotations.captions:
            ann_lines.append(json.dumps({"task": "caption", "text": cap, "target_ids": [oid]}))
        for expr, targets in b.annotations.grounding:
            ann_lines.append(json.dumps({"task": "ground", "text": expr, "target_ids": sorted(targets)}))
        (sdir / "annotations").write_text("\n".join(ann_lines) + "\n")
        manifest["scenes"].append({"name": b.name, "num_frames": len(b.frames), "seed": b.scene.seed})
    (root / "manifest").write_text(json.dumps(manifest, indent=1))


def read_dataset(root) -> List[SceneBundle]:
    """Load a dataset written by write_dataset; errors name the bad file."""
    root = Path(root)
    mpath = root / "manifest"
    if not mpath.exists():
        raise DatasetError(f"missing manifest file {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt manifest file {mpath}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version in {mpath}")

    bundles = []
    for entry in manifest["scenes"]:
        sdir = root / entry["name"]
        spath = sdir / "scene.json"
        if not spath.exists():
            raise DatasetError(f"missing scene file {spath}")
        scene = _scene_from_json(json.loads(spath.read_text()))

        cpath = sdir / "cameras"
        if not cpath.exists():
            raise DatasetError(f"missing camera sidecar {cpath}")
        cam_records = [json.loads(line) for line in cpath.read_text().splitlines() if line.strip()]
        cams = {r["frame"]: r for r in cam_records}

        frames = []
        for k in range(entry["num_frames"]):
            if k not in cams:
                raise DatasetError(f"missing camera sidecar record for frame {k} in {cpath}")
            r = cams[k]
            K = CameraIntrinsics(fx=r["fx"], fy=r["fy"], cx=r["cx"], cy=r["cy"],
                                 width=r["width"], height=r["height"])
            T = CameraExtrinsics(rotation=np.array(r["rotation"]).reshape(3, 3),
                                 translation=np.array(r["translation"]))
            rgb = _read_png(sdir / f"frame_{k}.rgb.png")
            depth = _read_depth(sdir / f"frame_{k}.depth.raw")
            frames.append(PosedFrame(rgb=rgb, depth=depth, K=K, T=T, index=k))

        bev = _read_png(sdir / "bev.png")
        apath = sdir / "annotations"
        if not apath.exists():
            raise DatasetError(f"missing annotations file {apath}")
        qa, captions, grounding = [], [], []
        for line in apath.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["task"] == "qa":
                qa.append((rec["text"], rec["answer"]))
            elif rec["task"] == "caption":
                captions.append((rec["target_ids"][0], rec["text"]))
            elif rec["task"] == "ground":
                grounding.append((rec["text"], frozenset(rec["target_ids"])))
            else:
                raise DatasetError(f"unknown task tag {rec['task']!r} in {apath}")
        ann = SceneAnnotations(qa=qa, captions=captions, grounding=grounding)
        bundles.append(SceneBundle(name=entry["name"], scene=scene, frames=frames, bev=bev, annotations=ann))
    return bundles
