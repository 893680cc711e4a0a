"""On-disk clip container.

``<name>.clip`` layout (all little-endian)::

    8s   magic  b"EGOCLIP\\0"
    u32  format version
    u32  T, H, W, h, w, D, n_stuff     (frame size H x W, feature map h x w)
    f32  features   T*h*w*D   (t, row, col, channel)
    f32  depth      T*H*W
    u8   stuff masks, bit-packed, n_stuff*H*W
    u8   coarse stuff masks, bit-packed, n_stuff*h*w

``<name>.json`` holds the scene spec, intrinsics, boxes, per-object depth
schedules and labels.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .features import BoundingBox, FeatureMap, StuffMask
from .geometry import CameraIntrinsics
from .synthetic import SceneClip, SceneSpec, StuffObject, ThingObject

MAGIC = b"EGOCLIP\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIII")


class ClipFormatError(ValueError):
    pass


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_clip(clip: SceneClip, path) -> tuple[Path, Path]:
    path = Path(path)
    T, H, W = clip.depth.shape
    h, w, D = clip.features.values.shape[1:]
    n_stuff = len(clip.stuff)
    full = np.stack([s.mask.mask for s in clip.stuff]) if n_stuff else np.zeros((0, H, W), bool)
    coarse = np.stack([s.coarse for s in clip.stuff]) if n_stuff else np.zeros((0, h, w), bool)
    with open(path.with_suffix(".clip"), "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, H, W, h, w, D, n_stuff))
        fh.write(_f32(clip.features.values))
        fh.write(_f32(clip.depth))
        fh.write(np.packbits(full.astype(bool), axis=None).tobytes())
        fh.write(np.packbits(coarse.astype(bool), axis=None).tobytes())
    side = {
        "version": VERSION,
        "spec": dataclasses.asdict(clip.spec),
        "intrinsics": dataclasses.asdict(clip.intrinsics),
        "things": [
            {"box": dataclasses.asdict(o.box), "plant": o.plant, "depth": o.depth.tolist()} for o in clip.things
        ],
        "stuff": [{"cls": s.mask.cls, "plant": s.plant, "depth": s.depth.tolist()} for s in clip.stuff],
        "goal_labels": clip.goal_labels.tolist(),
        "cause_labels": clip.cause_labels.tolist(),
        "causal_thing": clip.causal_thing,
        "causal_stuff": clip.causal_stuff,
        "meta": clip.meta,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)
    return path.with_suffix(".clip"), path.with_suffix(".json")


def _read(buf: memoryview, offset: int, count: int, dtype) -> tuple[np.ndarray, int]:
    nbytes = count * np.dtype(dtype).itemsize
    if offset + nbytes > len(buf):
        raise ClipFormatError("clip file truncated")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset), offset + nbytes


def _unpack_bits(buf, offset, n_bits, shape) -> tuple[np.ndarray, int]:
    nbytes = (n_bits + 7) // 8
    raw, offset = _read(buf, offset, nbytes, np.uint8)
    return np.unpackbits(raw, count=n_bits).astype(bool).reshape(shape), offset


def load_clip(path) -> SceneClip:
    path = Path(path)
    try:
        data = path.with_suffix(".clip").read_bytes()
        side = json.loads(path.with_suffix(".json").read_text())
    except FileNotFoundError as exc:
        raise ClipFormatError(f"missing clip file: {exc.filename}") from exc
    if len(data) < _HEADER.size:
        raise ClipFormatError("clip file too short")
    magic, version, T, H, W, h, w, D, n_stuff = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ClipFormatError(f"{path}: not a clip file")
    if version != VERSION:
        raise ClipFormatError(f"{path}: unsupported clip format version {version}")
    buf = memoryview(data)
    off = _HEADER.size
    feats, off = _read(buf, off, T * h * w * D, "<f4")
    depth, off = _read(buf, off, T * H * W, "<f4")
    full, off = _unpack_bits(buf, off, n_stuff * H * W, (n_stuff, H, W))
    coarse, off = _unpack_bits(buf, off, n_stuff * h * w, (n_stuff, h, w))

    spec_d = side["spec"]
    for key in ("goal_classes", "cause_classes"):
        spec_d[key] = tuple(spec_d[key])
    spec = SceneSpec(**spec_d)
    things = [
        ThingObject(BoundingBox(**o["box"]), o["plant"], np.asarray(o["depth"], dtype=np.float32))
        for o in side["things"]
    ]
    stuff = [
        StuffObject(StuffMask(full[i].copy(), s["cls"]), coarse[i].copy(), s["plant"],
                    np.asarray(s["depth"], dtype=np.float32))
        for i, s in enumerate(side["stuff"])
    ]
    return SceneClip(
        spec=spec,
        features=FeatureMap(feats.astype(np.float32).reshape(T, h, w, D), spec.image_width, spec.image_height),
        depth=depth.astype(np.float32).reshape(T, H, W),
        intrinsics=CameraIntrinsics(**side["intrinsics"]),
        things=things,
        stuff=stuff,
        goal_labels=np.asarray(side["goal_labels"], dtype=np.int64),
        cause_labels=np.asarray(side["cause_labels"], dtype=np.int64),
        causal_thing=side["causal_thing"],
        causal_stuff=side["causal_stuff"],
        meta=side.get("meta", {}),
    )


def load_hdd_clip(video_path, annotation_path):
    """Placeholder for real driving footage.

    A real loader must return a :class:`SceneClip` whose feature maps come
    from a video backbone, with thing boxes from an instance segmenter,
    full-resolution stuff masks from a semantic segmenter, per-frame relative
    depth from a monocular depth network, camera intrinsics and per-frame
    goal / cause labels.
    """
    raise NotImplementedError("HDD ingestion is not part of this package")
