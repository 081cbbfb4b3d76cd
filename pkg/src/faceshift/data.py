"""Dataset manifests and image IO.

A dataset is a directory of images plus a JSON-lines manifest, one record per
frame. Factor vectors are stored at full precision in the manifest; images are
8-bit PNG or binary PPM depending on the config flag.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import faces
from .faces import DEFAULT_SPEC, FaceScene, FaceSpaceSpec
from .utils import derive_seed, rng_for


@dataclass
class FrameRecord:
    """One manifest line. Paths are relative to the manifest's directory."""

    seed: int
    split: str
    identity_id: int
    sequence_id: int
    frame_id: int
    style_id: int
    identity_factors: list
    expression_factors: list
    pose_factors: list
    image: str
    landmarks: str
    mask: str
    # Augmentation provenance; unset for generator-rendered frames.
    source_frame_ref: str | None = None
    fit_confidence: float | None = None
    gamma: float | None = None

    def scene(self) -> FaceScene:
        return FaceScene(
            identity_factors=np.array(self.identity_factors),
            expression_factors=np.array(self.expression_factors),
            pose_factors=np.array(self.pose_factors),
            style_id=self.style_id,
            seed=self.seed,
        )

    def to_json(self) -> str:
        d = asdict(self)
        if self.source_frame_ref is None:
            d.pop("source_frame_ref"), d.pop("fit_confidence"), d.pop("gamma")
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "FrameRecord":
        return cls(**json.loads(line))


def save_image(img: np.ndarray, path: Path, image_format: str = "png") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(img, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if image_format == "png":
        PILImage.fromarray(arr, mode="RGB").save(path)
    elif image_format == "ppm":
        with open(path, "wb") as f:
            f.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
            f.write(arr.tobytes())
    else:
        raise ValueError(f"unknown image format {image_format!r}")


def load_image(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        with open(path, "rb") as f:
            magic = f.readline().strip()
            if magic != b"P6":
                raise ValueError(f"{path}: not a binary PPM")
            w, h = map(int, f.readline().split())
            maxval = int(f.readline())
            arr = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
        return arr.astype(np.float32) / maxval
    arr = np.asarray(PILImage.open(path).convert("RGB"))
    return arr.astype(np.float32) / 255.0


def load_mask(path: Path) -> np.ndarray:
    return (load_image(path)[..., 0] >= 0.5).astype(np.uint8)


def write_manifest(records, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_manifest(path: Path) -> list:
    with open(path) as f:
        return [FrameRecord.from_json(line) for line in f if line.strip()]


def frame_paths(split: str, identity_id: int, sequence_id: int, frame_id: int, style_id: int, ext: str):
    stem = f"{split}_{identity_id:03d}_{sequence_id:02d}_{frame_id:02d}_s{style_id}"
    return (f"images/{stem}.{ext}", f"landmarks/{stem}.{ext}", f"masks/{stem}.{ext}")


def generate_split(
    out_dir: Path,
    split: str,
    n_identities: int,
    n_sequences: int,
    n_frames: int,
    style_ids,
    spec: FaceSpaceSpec = DEFAULT_SPEC,
    image_format: str = "png",
    seed: int = 0,
) -> list:
    """Render a split to disk and return its manifest records.

    Every frame gets a style drawn round-robin from `style_ids`; geometry is
    sampled per frame, identity per identity index (fixed across its frames).
    """
    out_dir = Path(out_dir)
    ext = "png" if image_format == "png" else "ppm"
    records = []
    style_ids = list(style_ids)
    for ident in range(n_identities):
        id_factors = faces.sample_identity(ident, split, spec)
        for seq in range(n_sequences):
            for fr in range(n_frames):
                fseed = derive_seed("frame", seed, split, ident, seq, fr)
                rng = np.random.default_rng(fseed)
                style = style_ids[(ident * n_sequences * n_frames + seq * n_frames + fr) % len(style_ids)]
                scene = FaceScene(
                    identity_factors=id_factors,
                    expression_factors=faces.sample_expression(rng, spec),
                    pose_factors=faces.sample_pose(rng, spec),
                    style_id=style,
                    seed=fseed,
                )
                img_p, lm_p, mk_p = frame_paths(split, ident, seq, fr, style, ext)
                save_image(faces.render(scene, spec), out_dir / img_p, image_format)
                save_image(faces.render_landmarks(scene, spec), out_dir / lm_p, image_format)
                save_image(faces.render_mask(scene, spec).astype(np.float32), out_dir / mk_p, image_format)
                records.append(FrameRecord(
                    seed=fseed, split=split, identity_id=ident, sequence_id=seq, frame_id=fr,
                    style_id=style,
                    identity_factors=list(map(float, scene.identity_factors)),
                    expression_factors=list(map(float, scene.expression_factors)),
                    pose_factors=list(map(float, scene.pose_factors)),
                    image=img_p, landmarks=lm_p, mask=mk_p,
                ))
    write_manifest(records, out_dir / f"{split}.jsonl")
    return records


def group_by_identity_style(records) -> dict:
    groups: dict = {}
    for i, r in enumerate(records):
        groups.setdefault((r.identity_id, r.style_id), []).append(i)
    return groups
