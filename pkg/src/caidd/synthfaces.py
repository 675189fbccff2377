"""Procedural synthetic faces with ground-truth identity, region masks and gaze.

Faces are drawn as ellipses on a smooth textured background: a skin oval,
two eyes whose pupils are offset by the gaze direction, a nose and a mouth.
The identity vector alone fixes the face geometry and skin tone; pose,
gaze, lighting and background only change how that identity is rendered.

Region indices follow the order used by the parsing surrogate:
0 skin, 1 eyes, 2 nose, 3 mouth, 4 background.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ContractError

log = logging.getLogger(__name__)

REGIONS = ("skin", "eyes", "nose", "mouth", "background")
N_REGIONS = len(REGIONS)
IDENTITY_DIM = 8
SUPERSAMPLE = 4


@dataclass(frozen=True)
class FaceParams:
    identity_vector: tuple[float, ...]
    pose_yaw: float = 0.0
    gaze: tuple[float, float, float] = (0.0, 0.0, 1.0)
    lighting: float = 1.0
    background_seed: int = 0

    def validate(self) -> None:
        iv = np.asarray(self.identity_vector, dtype=np.float64)
        if iv.shape != (IDENTITY_DIM,) or not np.all(np.abs(iv) <= 1.0):
            raise ContractError(f"identity_vector must be {IDENTITY_DIM} values in [-1, 1]")
        if not -0.5 <= self.pose_yaw <= 0.5:
            raise ContractError(f"pose_yaw must lie in [-0.5, 0.5], got {self.pose_yaw}")
        g = np.asarray(self.gaze, dtype=np.float64)
        if g.shape != (3,) or abs(np.linalg.norm(g) - 1.0) > 1e-6:
            raise ContractError("gaze must be a unit 3-vector")
        if not 0.5 <= self.lighting <= 1.5:
            raise ContractError(f"lighting must lie in [0.5, 1.5], got {self.lighting}")


@dataclass
class LabeledFace:
    image: torch.Tensor  # [3, S, S] in [-1, 1]
    params: FaceParams
    gt_masks: np.ndarray  # [N_REGIONS, S, S] bool
    gt_gaze: np.ndarray
    identity_index: int = 0
    eye_boxes: list = field(default_factory=list)  # [(x0, y0, x1, y1)] in pixels


@dataclass(frozen=True)
class _Geometry:
    face: tuple  # (cx, cy, ax, ay)
    eyes: tuple  # ((cx, cy, rx, ry), (cx, cy, rx, ry))
    pupils: tuple  # ((cx, cy, r), (cx, cy, r))
    nose: tuple
    mouth: tuple
    skin_rgb: tuple


def _geometry(p: FaceParams) -> _Geometry:
    v = np.asarray(p.identity_vector, dtype=np.float64)
    yaw = p.pose_yaw
    ax = 0.27 + 0.05 * v[0]
    ay = 0.34 + 0.05 * v[1]
    ax_vis = ax * (1 - 0.25 * yaw * yaw)
    cx, cy = 0.5, 0.52
    shift = 0.5 * ax * math.sin(yaw)

    spacing = 0.115 + 0.03 * v[2]
    eye_r = 0.07 + 0.015 * v[3]
    eyes, pupils = [], []
    gx, gy = float(p.gaze[0]), float(p.gaze[1])
    for side in (-1, 1):
        fore = math.cos(yaw) * (1 + 0.35 * side * math.sin(yaw))
        rx, ry = eye_r * fore, eye_r * 0.65
        ex, ey = cx + shift + side * spacing * math.cos(yaw), 0.45
        pr = 0.5 * ry
        px = ex + gx * (rx - pr) * 0.9
        py = ey - gy * (ry - pr) * 0.9
        eyes.append((ex, ey, rx, ry))
        pupils.append((px, py, pr))
    nose = (cx + 1.1 * shift, 0.56, 0.035 + 0.015 * v[4], 0.06)
    mouth = (cx + 0.9 * shift, 0.70, 0.09 + 0.03 * v[5], 0.028)
    tone = 0.62 + 0.25 * v[6]
    warmth = 0.08 * v[7]
    skin = (tone + 0.12 + warmth, tone - 0.02, tone - 0.14 - warmth)
    return _Geometry((cx, cy, ax_vis, ay), tuple(eyes), tuple(pupils), nose, mouth, skin)


def _inside(u, v, e) -> np.ndarray:
    cx, cy, ax, ay = e
    return ((u - cx) / ax) ** 2 + ((v - cy) / ay) ** 2 <= 1.0


def _background(seed: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.15, 0.85, size=3)
    img = np.broadcast_to(base[:, None, None], (3,) + u.shape).copy()
    for _ in range(4):
        kx, ky = rng.uniform(-3.0, 3.0, size=2) * math.pi
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.04, 0.12, size=3)
        img += amp[:, None, None] * np.sin(kx * u + ky * v + phase)[None]
    return img


def _label_map(g: _Geometry, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    lab = np.full(u.shape, 4, dtype=np.int64)
    lab[_inside(u, v, g.face)] = 0
    lab[_inside(u, v, g.nose)] = 2
    lab[_inside(u, v, g.mouth)] = 3
    for e in g.eyes:
        lab[_inside(u, v, e)] = 1
    return lab


def _grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, indexing="xy")


def render_face(params: FaceParams, size: int = 32) -> LabeledFace:
    """Rasterize one face; the image is anti-aliased by 4x supersampling."""
    if size < 16:
        raise ContractError(f"size must be >= 16, got {size}")
    params.validate()
    g = _geometry(params)
    n = size * SUPERSAMPLE
    u, v = _grid(n)
    img = _background(params.background_seed, u, v)
    lab = _label_map(g, u, v)

    light = params.lighting
    shade = 1.0 + 0.15 * (u - 0.5) * math.sin(params.pose_yaw * 2)
    skin = np.asarray(g.skin_rgb)[:, None, None] * light * shade
    colors = {
        0: skin,
        2: skin * 0.78,
        3: np.asarray([0.72, 0.22, 0.26])[:, None, None] * light * np.ones_like(u),
        1: np.full((3,) + u.shape, 0.96) * min(light, 1.0),
    }
    for r, c in colors.items():
        m = lab == r
        img[:, m] = np.broadcast_to(c, (3,) + u.shape)[:, m]
    for px, py, pr in g.pupils:
        m = (((u - px) ** 2 + (v - py) ** 2) <= pr * pr) & (lab == 1)
        img[:, m] = 0.08

    img = np.clip(img, 0.0, 1.0)
    img = img.reshape(3, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(2, 4))

    uc, vc = _grid(size)
    lab_px = _label_map(g, uc, vc)
    masks = np.stack([lab_px == r for r in range(N_REGIONS)])
    boxes = []
    for ex, ey, rx, ry in g.eyes:
        boxes.append(((ex - rx) * size, (ey - ry) * size, (ex + rx) * size, (ey + ry) * size))
    return LabeledFace(
        image=torch.from_numpy((img * 2.0 - 1.0).astype(np.float32)),
        params=params,
        gt_masks=masks,
        gt_gaze=np.asarray(params.gaze, dtype=np.float64),
        eye_boxes=boxes,
    )


def random_gaze(rng: np.random.Generator, max_planar: float = 0.8) -> tuple[float, float, float]:
    """Unit gaze vector facing the camera with in-plane part at most ``max_planar``."""
    r = max_planar * math.sqrt(rng.uniform())
    th = rng.uniform(0, 2 * math.pi)
    gx, gy = r * math.cos(th), r * math.sin(th)
    return (gx, gy, math.sqrt(max(0.0, 1 - gx * gx - gy * gy)))


def random_params(rng: np.random.Generator, identity_vector) -> FaceParams:
    return FaceParams(
        identity_vector=tuple(float(x) for x in identity_vector),
        pose_yaw=float(rng.uniform(-0.5, 0.5)),
        gaze=random_gaze(rng),
        lighting=float(rng.uniform(0.75, 1.25)),
        background_seed=int(rng.integers(0, 2**31 - 1)),
    )


def random_identity(rng: np.random.Generator) -> tuple[float, ...]:
    return tuple(float(x) for x in rng.uniform(-1.0, 1.0, size=IDENTITY_DIM))


def make_dataset(n: int, n_identities: int, seed: int = 0, size: int = 32) -> list[LabeledFace]:
    """Draw ``n_identities`` identities, then ``n`` faces with random identity index.

    When ``n == n_identities`` every identity appears exactly once, which is
    what small overfit sets want.
    """
    if n_identities < 1 or n < n_identities:
        raise ContractError(f"need n >= n_identities >= 1, got n={n}, n_identities={n_identities}")
    rng = np.random.default_rng(seed)
    identities = [random_identity(rng) for _ in range(n_identities)]
    if n == n_identities:
        labels = np.arange(n)
    else:
        labels = rng.integers(0, n_identities, size=n)
    faces = []
    for k in labels:
        face = render_face(random_params(rng, identities[k]), size)
        face.identity_index = int(k)
        faces.append(face)
    return faces


def stack_images(faces) -> torch.Tensor:
    return torch.stack([f.image if isinstance(f, LabeledFace) else f for f in faces])


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[3, H, W] in [-1, 1] to HxWx3 uint8 via round((x + 1) * 127.5)."""
    arr = image.detach().to(torch.float64).cpu().numpy()
    arr = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def save_png(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path, size: int | None = None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0)


@dataclass
class FolderLoad:
    images: list
    files: list
    errors: list  # [(filename, message)]

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]


def load_image_folder(path, size: int) -> FolderLoad:
    """Load every ``*.png`` in ``path`` in lexicographic order.

    Unreadable files are skipped and reported in ``errors`` rather than
    aborting the whole load.
    """
    path = Path(path)
    out = FolderLoad([], [], [])
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(".png"):
            continue
        try:
            img = load_png(path / name, size)
        except Exception as exc:  # PIL raises a zoo of types on bad files
            log.warning("skipping %s: %s", name, exc)
            out.errors.append((name, str(exc)))
            continue
        out.images.append(img)
        out.files.append(name)
    return out


MANIFEST = "manifest.txt"


def export_dataset(faces, out_dir) -> Path:
    """Write ``face_XXXXX.png`` files plus a whitespace-separated manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# filename identity_index pose_yaw gaze_x gaze_y gaze_z lighting"]
    for i, f in enumerate(faces):
        name = f"face_{i:05d}.png"
        save_png(f.image, out_dir / name)
        gx, gy, gz = f.params.gaze
        lines.append(f"{name} {f.identity_index} {f.params.pose_yaw!r} {gx!r} {gy!r} {gz!r} {f.params.lighting!r}")
    (out_dir / MANIFEST).write_text("\n".join(lines) + "\n")
    return out_dir / MANIFEST


def read_manifest(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, ident, yaw, gx, gy, gz, light = line.split()
        rows.append(
            dict(
                filename=name,
                identity_index=int(ident),
                pose_yaw=float(yaw),
                gaze=(float(gx), float(gy), float(gz)),
                lighting=float(light),
            )
        )
    return rows
