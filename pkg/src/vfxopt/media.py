"""Video frame handling: resize, fps resampling, vertical composites.

Videos are lists of uint8 RGB frames plus an fps, optionally tagged with
a segment label ("A" reference, "B" previous, "C" current) for composite
assembly.  Composites are stacked top to bottom in input order after
normalizing every clip to the smallest input width (aspect preserved)
and the first clip's fps; shorter clips hold their last frame.

On disk a clip is a directory of numbered PNG frames plus a
``manifest.json`` sidecar.  Composites get an extended manifest that
records per-segment geometry so a consumer can split the stack again.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from PIL import Image

SEGMENT_LABELS = ("A", "B", "C")
MANIFEST_NAME = "manifest.json"
_FRAME_PATTERN = "frame_{:05d}.png"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class MediaError(Exception):
    """Frame-directory or manifest problem."""


def _round_half_away(x: float) -> int:
    # Positive inputs only in this module.
    return int(np.floor(x + 0.5))


@dataclass
class VideoFrames:
    """A clip: same-sized uint8 RGB frames at a fixed rate."""

    frames: list
    fps: float
    label: str = ""

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("a clip needs at least one frame")
        if self.fps <= 0:
            raise ValueError(f"fps must be > 0, got {self.fps}")
        if self.label not in ("",) + SEGMENT_LABELS:
            raise ValueError(f"label must be one of {SEGMENT_LABELS} or empty, got {self.label!r}")
        first = self.frames[0]
        for i, frame in enumerate(self.frames):
            if not isinstance(frame, np.ndarray) or frame.dtype != np.uint8:
                raise ValueError(f"frame {i} must be a uint8 array")
            if frame.ndim != 3 or frame.shape[2] != 3:
                raise ValueError(f"frame {i} must be HxWx3, got {frame.shape}")
            if frame.shape != first.shape:
                raise ValueError(
                    f"frame {i} shape {frame.shape} differs from frame 0 {first.shape}"
                )

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def duration(self) -> float:
        return len(self.frames) / self.fps


def _resize_frame(frame: np.ndarray, width: int, height: int) -> np.ndarray:
    in_h, in_w = frame.shape[:2]
    if (in_h, in_w) == (height, width):
        return frame
    # Pixel centers at (i + 0.5) / n in both images; edges clamp.
    xs = (np.arange(width, dtype=np.float64) + 0.5) * (in_w / width) - 0.5
    ys = (np.arange(height, dtype=np.float64) + 0.5) * (in_h / height) - 0.5
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0c = np.clip(x0.astype(np.int64), 0, in_w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, in_w - 1)
    y0c = np.clip(y0.astype(np.int64), 0, in_h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, in_h - 1)
    img = frame.astype(np.float64)
    top = img[np.ix_(y0c, x0c)] * (1.0 - fx)[None, :, None] + img[np.ix_(y0c, x1c)] * fx[None, :, None]
    bottom = img[np.ix_(y1c, x0c)] * (1.0 - fx)[None, :, None] + img[np.ix_(y1c, x1c)] * fx[None, :, None]
    blended = top * (1.0 - fy)[:, None, None] + bottom * fy[:, None, None]
    # Round half away from zero, then clamp to 8 bits.
    return np.clip(np.floor(blended + 0.5), 0, 255).astype(np.uint8)


def resize_bilinear(video: VideoFrames, width: int, height: int) -> VideoFrames:
    """Bilinear resample every frame to width x height."""
    if width < 1 or height < 1:
        raise ValueError(f"target geometry must be positive, got {width}x{height}")
    return VideoFrames(
        [_resize_frame(f, width, height) for f in video.frames], video.fps, video.label
    )


def resample_fps(video: VideoFrames, target_fps: float) -> VideoFrames:
    """Pick nearest-timestamp frames to hit target_fps; duration kept within one period."""
    if target_fps <= 0:
        raise ValueError(f"target fps must be > 0, got {target_fps}")
    n_src = len(video.frames)
    if n_src == 1:
        return VideoFrames(list(video.frames), target_fps, video.label)
    n_out = max(1, _round_half_away(n_src * target_fps / video.fps))
    picked = []
    for j in range(n_out):
        idx = min(n_src - 1, _round_half_away(j * video.fps / target_fps))
        picked.append(video.frames[idx])
    return VideoFrames(picked, target_fps, video.label)


def _normalize_segments(videos: Sequence[VideoFrames]) -> list[VideoFrames]:
    target_w = min(v.width for v in videos)
    reference_fps = videos[0].fps
    out = []
    for v in videos:
        target_h = max(1, _round_half_away(v.height * target_w / v.width))
        out.append(resample_fps(resize_bilinear(v, target_w, target_h), reference_fps))
    return out


def vstack_videos(videos: Sequence[VideoFrames]) -> VideoFrames:
    """Stack 2 or 3 clips vertically, reference clip first and on top.

    All clips are normalized to the minimum input width and the first
    clip's fps; clips shorter than the longest hold their last frame.
    """
    if len(videos) < 2:
        raise ValueError(f"need at least 2 clips to composite, got {len(videos)}")
    if len(videos) > 3:
        raise ValueError(f"composites take at most 3 clips, got {len(videos)}")
    normalized = _normalize_segments(videos)
    count = max(len(v.frames) for v in normalized)
    stacked = []
    for t in range(count):
        rows = [v.frames[min(t, len(v.frames) - 1)] for v in normalized]
        stacked.append(np.concatenate(rows, axis=0))
    return VideoFrames(stacked, videos[0].fps)


def composite_manifest(
    videos: Sequence[VideoFrames], sources: Optional[Sequence[str]] = None
) -> dict:
    """Describe a composite: stack geometry plus per-segment placement."""
    normalized = _normalize_segments(videos)
    if sources is None:
        sources = ["" for _ in videos]
    if len(sources) != len(videos):
        raise ValueError("one source reference per clip required")
    segments = []
    y = 0
    for original, norm, source in zip(videos, normalized, sources):
        segments.append(
            {
                "label": original.label,
                "source": source,
                "width": norm.width,
                "height": norm.height,
                "frame_count": len(norm.frames),
                "y_offset": y,
            }
        )
        y += norm.height
    count = max(len(v.frames) for v in normalized)
    return {
        "fps": videos[0].fps,
        "width": normalized[0].width,
        "height": y,
        "frame_count": count,
        "segments": segments,
    }


def encode_frame_png(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_frame_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _video_manifest(video: VideoFrames) -> dict:
    return {
        "fps": video.fps,
        "label": video.label,
        "frame_count": len(video.frames),
        "width": video.width,
        "height": video.height,
    }


def _dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def save_frames(video: VideoFrames, directory: str, manifest: Optional[dict] = None) -> None:
    """Write numbered PNG frames plus a manifest sidecar."""
    os.makedirs(directory, exist_ok=True)
    for i, frame in enumerate(video.frames):
        with open(os.path.join(directory, _FRAME_PATTERN.format(i)), "wb") as fh:
            fh.write(encode_frame_png(frame))
    full = dict(manifest) if manifest is not None else _video_manifest(video)
    full.setdefault("fps", video.fps)
    full.setdefault("frame_count", len(video.frames))
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write(_dump_manifest(full))


def load_frames(directory: str) -> tuple[VideoFrames, dict]:
    """Read a frame directory back; returns the clip and its manifest."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise MediaError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MediaError(f"unparseable manifest {manifest_path}: {exc}") from exc
    count = manifest.get("frame_count")
    if not isinstance(count, int) or count < 1:
        raise MediaError(f"manifest {manifest_path} lacks a valid frame_count")
    frames = []
    for i in range(count):
        frame_path = os.path.join(directory, _FRAME_PATTERN.format(i))
        if not os.path.isfile(frame_path):
            raise MediaError(f"missing frame file: {frame_path}")
        with open(frame_path, "rb") as fh:
            frames.append(decode_frame_png(fh.read()))
    video = VideoFrames(frames, float(manifest["fps"]), manifest.get("label", ""))
    return video, manifest


def pack_video_zip(video: VideoFrames, manifest: Optional[dict] = None) -> bytes:
    """Bundle PNG frames + manifest into zip bytes (the VLM wire payload).

    Entry timestamps are pinned so identical inputs give identical bytes.
    """
    full = dict(manifest) if manifest is not None else _video_manifest(video)
    full.setdefault("fps", video.fps)
    full.setdefault("frame_count", len(video.frames))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for i, frame in enumerate(video.frames):
            info = zipfile.ZipInfo(_FRAME_PATTERN.format(i), date_time=_ZIP_EPOCH)
            zf.writestr(info, encode_frame_png(frame))
        info = zipfile.ZipInfo(MANIFEST_NAME, date_time=_ZIP_EPOCH)
        zf.writestr(info, _dump_manifest(full))
    return buf.getvalue()


def unpack_video_zip(data: bytes) -> tuple[VideoFrames, dict]:
    """Inverse of pack_video_zip."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise MediaError(f"video payload is not a zip archive: {exc}") from exc
    with zf:
        names = set(zf.namelist())
        if MANIFEST_NAME not in names:
            raise MediaError("video payload lacks a manifest")
        manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
        count = manifest.get("frame_count")
        if not isinstance(count, int) or count < 1:
            raise MediaError("video payload manifest lacks a valid frame_count")
        frames = []
        for i in range(count):
            name = _FRAME_PATTERN.format(i)
            if name not in names:
                raise MediaError(f"video payload missing frame entry {name}")
            frames.append(decode_frame_png(zf.read(name)))
    video = VideoFrames(frames, float(manifest["fps"]), manifest.get("label", ""))
    return video, manifest
