"""Procedural face images with correlated, controllable attributes.

Two rendering styles share one attribute model: ``crisp`` draws flat-shaded
cartoon faces on an exactly-zero background, ``textured`` adds seeded
multi-scale noise fields over the face so its pixel statistics are richer.
Real images can be ingested instead through :func:`load_external_images`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

EXPRESSIONS = ("neutral", "smile", "frown")
GENDERS = ("A", "B")
AGES = ("young", "mid", "old")
ACCESSORIES = ("none", "glasses", "hat")
HAIR_COLORS = ("dark", "light", "red")
FACIAL_HAIR = (False, True)

MANIFEST_HEADER = ["index", "expression", "facial_hair", "gender", "age", "accessory", "hair_color", "seed"]

# Rows (as fractions of image height) that glasses may touch.
EYE_BAND = (0.34, 0.50)

_HAIR_RGB = {"dark": (-0.75, -0.7, -0.7), "light": (0.65, 0.5, 0.1), "red": (0.55, -0.3, -0.55)}


def default_correlation_table() -> dict[str, dict[str, list[float]]]:
    """Attribute probabilities: marginals under key ``"*"``, conditionals keyed by parent value.

    Facial-hair rows are ``[P(False), P(True)]``.
    """
    return {
        "gender": {"*": [0.5, 0.5]},
        "facial_hair": {"A": [0.2, 0.8], "B": [0.95, 0.05]},
        "age": {"*": [0.4, 0.35, 0.25]},
        "accessory": {"young": [0.6, 0.25, 0.15], "mid": [0.5, 0.35, 0.15], "old": [0.3, 0.5, 0.2]},
        "expression": {"*": [0.4, 0.4, 0.2]},
        "hair_color": {"*": [0.45, 0.35, 0.2]},
    }


_TABLE_LAYOUT = {
    "gender": (("*",), GENDERS),
    "facial_hair": (GENDERS, FACIAL_HAIR),
    "age": (("*",), AGES),
    "accessory": (AGES, ACCESSORIES),
    "expression": (("*",), EXPRESSIONS),
    "hair_color": (("*",), HAIR_COLORS),
}


@dataclass(frozen=True)
class FaceAttributes:
    expression: str = "neutral"
    facial_hair: bool = False
    gender_presentation: str = "A"
    age_band: str = "young"
    accessory: str = "none"
    hair_color: str = "dark"

    def __post_init__(self):
        checks = [
            ("expression", self.expression, EXPRESSIONS),
            ("facial_hair", self.facial_hair, FACIAL_HAIR),
            ("gender_presentation", self.gender_presentation, GENDERS),
            ("age_band", self.age_band, AGES),
            ("accessory", self.accessory, ACCESSORIES),
            ("hair_color", self.hair_color, HAIR_COLORS),
        ]
        for name, value, allowed in checks:
            if value not in allowed:
                raise ValueError(f"{name}={value!r} not in {allowed}")


@dataclass
class DatasetConfig:
    count: int = 512
    image_size: int = 32
    channels: int = 3
    correlation_table: dict = field(default_factory=default_correlation_table)
    seed: int = 0
    style: str = "crisp"

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.style not in ("crisp", "textured"):
            raise ValueError(f"unknown style {self.style!r}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        validate_correlation_table(self.correlation_table)

    def to_dict(self) -> dict:
        return asdict(self)


def validate_correlation_table(table: dict) -> None:
    for attr, (parents, values) in _TABLE_LAYOUT.items():
        if attr not in table:
            raise ValueError(f"correlation table missing {attr!r}")
        for parent in parents:
            key = str(parent)
            row = table[attr].get(key)
            if row is None:
                raise ValueError(f"correlation table {attr!r} missing row {key!r}")
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (len(values),):
                raise ValueError(f"{attr}[{key}] must have {len(values)} entries")
            if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
                raise ValueError(f"{attr}[{key}] is not a probability distribution: {row.tolist()}")


def image_seed(seed: int, index: int) -> int:
    """Per-image seed derived from (global seed, index); independent of build order."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def _draw(row: Iterable[float], u: float) -> int:
    cdf = np.cumsum(np.asarray(row, dtype=np.float64))
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def sample_attributes(cfg: DatasetConfig, rng: np.random.Generator) -> FaceAttributes:
    """Draw one attribute tuple along the gender -> facial hair, age -> accessory chain."""
    t = cfg.correlation_table
    validate_correlation_table(t)
    u = rng.random(6)
    gender = GENDERS[_draw(t["gender"]["*"], u[0])]
    hair = FACIAL_HAIR[_draw(t["facial_hair"][gender], u[1])]
    age = AGES[_draw(t["age"]["*"], u[2])]
    accessory = ACCESSORIES[_draw(t["accessory"][age], u[3])]
    expression = EXPRESSIONS[_draw(t["expression"]["*"], u[4])]
    hair_color = HAIR_COLORS[_draw(t["hair_color"]["*"], u[5])]
    return FaceAttributes(expression, hair, gender, age, accessory, hair_color)


# ---------------------------------------------------------------- rendering


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _paint(img: np.ndarray, mask: np.ndarray, rgb) -> None:
    for c in range(img.shape[0]):
        img[c][mask] = rgb[c]


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    pos = np.linspace(0, cells, size)
    i0 = np.minimum(pos.astype(int), cells - 1)
    f = pos - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def render_face(attrs: FaceAttributes, cfg: DatasetConfig, seed: int | None = None) -> np.ndarray:
    """Render ``attrs`` to a ``[C, H, W]`` float32 array with values in [-1, 1].

    Geometry jitter and texture are drawn from ``seed`` (default ``cfg.seed``)
    before any attribute is consulted, so two attribute tuples rendered with
    the same seed differ only where the attributes themselves draw.
    """
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    S = cfg.image_size
    jitter = rng.uniform(-1, 1, size=8)
    skin_shift = rng.uniform(-0.08, 0.08)
    texture_fields = None
    if cfg.style == "textured":
        texture_fields = [_smooth_noise(rng, S, cells) for cells in (2, 4, 8, 16)]
        grain = rng.standard_normal((3, S, S))

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) / S
    cy, cx = 0.56 + 0.02 * jitter[0], 0.5 + 0.02 * jitter[1]
    ry, rx = 0.34 + 0.015 * jitter[2], 0.27 + 0.015 * jitter[3]
    img = np.zeros((3, S, S))

    hair_rgb = np.array(_HAIR_RGB[attrs.hair_color])
    if attrs.age_band == "old":
        hair_rgb = 0.4 * hair_rgb + 0.6 * np.array([0.55, 0.55, 0.55])
    elif attrs.age_band == "mid":
        hair_rgb = 0.8 * hair_rgb + 0.2 * np.array([0.4, 0.4, 0.4])

    # long hair behind the face
    if attrs.gender_presentation == "B":
        _paint(img, _ellipse(yy, xx, cy + 0.05, cx, ry + 0.08, rx + 0.09) & (yy > cy - ry), hair_rgb)

    face = _ellipse(yy, xx, cy, cx, ry, rx)
    skin = np.array([0.55, 0.2, -0.05]) + skin_shift
    if attrs.gender_presentation == "B":
        skin = skin + np.array([0.05, 0.05, 0.05])
    _paint(img, face, skin)

    cap = _ellipse(yy, xx, cy - 0.12, cx, ry * 0.72, rx + 0.03) & (yy < cy - ry * 0.45)
    _paint(img, cap, hair_rgb)

    if attrs.age_band != "young":
        lines = (1,) if attrs.age_band == "mid" else (0, 1)
        for k in lines:
            row = cy - ry * 0.35 + k * 0.035
            mask = face & (np.abs(yy - row) < 0.012) & (np.abs(xx - cx) < rx * 0.5)
            _paint(img, mask, skin - 0.25)

    eye_y = cy - 0.12 + 0.01 * jitter[4]
    for side in (-1, 1):
        ex = cx + side * rx * 0.42
        _paint(img, _ellipse(yy, xx, eye_y, ex, 0.035, 0.045), (-0.85, -0.85, -0.8))

    mouth_y = cy + ry * 0.5 + 0.01 * jitter[5]
    dx = xx - cx
    bend = {"neutral": 0.0, "smile": 1.0, "frown": -1.0}[attrs.expression]
    curve = mouth_y - bend * 6.0 * dx**2 + bend * 0.02
    mouth = (np.abs(yy - curve) < 0.028) & (np.abs(dx) < rx * 0.45)
    _paint(img, mouth, (0.3, -0.6, -0.55))

    if attrs.facial_hair:
        beard = face & (yy > cy + ry * 0.25) & ~mouth
        _paint(img, beard, 0.6 * hair_rgb - 0.2)

    if attrs.accessory == "glasses":
        band = (yy >= EYE_BAND[0]) & (yy < EYE_BAND[1])
        for side in (-1, 1):
            ex = cx + side * rx * 0.42
            ring = _ellipse(yy, xx, eye_y, ex, 0.07, 0.08) & ~_ellipse(yy, xx, eye_y, ex, 0.045, 0.055)
            _paint(img, ring & band, (-0.9, -0.9, -0.9))
        bridge = (np.abs(yy - eye_y) < 0.015) & (np.abs(xx - cx) < rx * 0.2) & band
        _paint(img, bridge, (-0.9, -0.9, -0.9))
    elif attrs.accessory == "hat":
        brim = (np.abs(yy - (cy - ry * 0.8)) < 0.03) & (np.abs(xx - cx) < rx + 0.1)
        crown = (yy < cy - ry * 0.8) & (yy > cy - ry * 1.35) & (np.abs(xx - cx) < rx * 0.8)
        _paint(img, brim | crown, (-0.3, -0.35, 0.6))

    img *= 0.85
    if texture_fields is not None:
        fg = np.any(img != 0.0, axis=0)
        field_sum = sum(f * amp for f, amp in zip(texture_fields, (0.25, 0.18, 0.12, 0.08)))
        img = img + fg[None] * (field_sum[None] + 0.06 * grain)
    img = np.clip(img, -1.0, 1.0)

    if cfg.channels == 1:
        img = img.mean(axis=0, keepdims=True)
    return img[:, :S, :S].astype(np.float32)


# ---------------------------------------------------------------- datasets


@dataclass
class FaceDataset:
    """Images ``[N, C, H, W]`` in [-1, 1] plus one manifest row per image."""

    images: np.ndarray
    manifest: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def write_manifest(self, path: str | Path) -> None:
        write_manifest(self.manifest, path)


def _attrs_row(index: int, attrs: FaceAttributes, seed: int) -> dict:
    return {
        "index": index,
        "expression": attrs.expression,
        "facial_hair": int(attrs.facial_hair),
        "gender": attrs.gender_presentation,
        "age": attrs.age_band,
        "accessory": attrs.accessory,
        "hair_color": attrs.hair_color,
        "seed": seed,
    }


def build_dataset(cfg: DatasetConfig, manifest_path: str | Path | None = None) -> FaceDataset:
    images = np.zeros((cfg.count, cfg.channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    rows = []
    for i in range(cfg.count):
        s = image_seed(cfg.seed, i)
        attrs = sample_attributes(cfg, np.random.default_rng(s))
        images[i] = render_face(attrs, cfg, seed=s)
        rows.append(_attrs_row(i, attrs, s))
    ds = FaceDataset(images, rows)
    if manifest_path is not None:
        ds.write_manifest(manifest_path)
    return ds


def write_manifest(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_manifest(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["index"] = int(r["index"])
        r["facial_hair"] = int(r["facial_hair"])
        r["seed"] = int(r["seed"])
    return rows


# ---------------------------------------------------------------- PNG I/O


def save_png(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_external_images(directory: str | Path, image_size: int = 32, channels: int = 3) -> FaceDataset:
    """Load every decodable image in ``directory``: center-crop, nearest resize, scale to [-1, 1]."""
    from PIL import Image, UnidentifiedImageError

    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.is_file()) if directory.is_dir() else []
    images, rows = [], []
    for p in files:
        try:
            with Image.open(p) as im:
                im = im.convert("L" if channels == 1 else "RGB")
                w, h = im.size
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side))
                im = im.resize((image_size, image_size), Image.NEAREST)
                arr = np.asarray(im, dtype=np.float32)
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping unreadable image %s: %s", p, exc)
            continue
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        images.append(arr / 127.5 - 1.0)
        rows.append({"index": len(rows), "path": p.name})
    if not images:
        raise FileNotFoundError(f"no decodable images in {directory}")
    return FaceDataset(np.stack(images).astype(np.float32), rows)
