"""Datasets: synthetic identities, PNG folder ingestion, adversarial export."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "probe", "gallery")
MARKET_RE = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass
class ImageRecord:
    pixels: np.ndarray  # H x W x C uint8
    identity: int
    camera: int
    split: str = "gallery"
    source_path: str | None = None

    @property
    def name(self) -> str:
        return Path(self.source_path).name if self.source_path else f"{self.identity:04d}_c{self.camera}.png"


@dataclass
class Dataset:
    train: list[ImageRecord]
    probe: list[ImageRecord]
    gallery: list[ImageRecord]

    def split(self, name: str) -> list[ImageRecord]:
        return getattr(self, name)


@dataclass(frozen=True)
class Jitter:
    color_sigma: float = 12.0
    shift_max: int = 1
    noise_sigma: float = 2.0


@dataclass(frozen=True)
class SynthSpec:
    num_train_ids: int = 64
    num_test_ids: int = 32
    images_per_id_per_camera: int = 4
    num_cameras: int = 2
    image_size: tuple[int, int, int] = (32, 16, 3)
    jitter: Jitter = field(default_factory=Jitter)
    seed: int = 0
    # appearance is compressed toward mid-grey by this factor before pixel
    # noise; low contrast puts identity differences on the scale of a few
    # pixel levels, where a small fully connected net is as fragile to
    # eps=5 perturbations as deep re-ID backbones are on real photographs
    contrast: float = 0.12

    def __post_init__(self):
        if isinstance(self.jitter, dict):
            object.__setattr__(self, "jitter", Jitter(**self.jitter))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if self.num_train_ids < 1 or self.num_test_ids < 1 or self.images_per_id_per_camera < 1:
            raise ValueError("identity and image counts must be positive")
        if self.num_cameras < 2:
            raise ValueError("need at least 2 cameras")
        h, w, c = self.image_size
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if not 0 < self.contrast <= 1:
            raise ValueError(f"contrast must be in (0, 1], got {self.contrast}")
        if h < 8 or w < 8:
            raise ValueError(f"image {h}x{w} too small for the shape mask (need H, W >= 8)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def _identity_appearance(rng: np.random.Generator, h: int, w: int) -> dict:
    """Random base look: upper/lower/head colours, a stripe, and body proportions."""
    return {
        "upper": rng.uniform(0, 255, 3),
        "lower": rng.uniform(0, 255, 3),
        "head": rng.uniform(0, 255, 3),
        "stripe": rng.uniform(0, 255, 3),
        "stripe_row": rng.uniform(0.3, 0.5),
        "split": rng.uniform(0.45, 0.65),
        "width": rng.uniform(0.55, 0.9),
    }


def _render(app: dict, h: int, w: int) -> np.ndarray:
    """Render the silhouette on a neutral background as float RGB."""
    img = np.full((h, w, 3), 110.0)
    rows = (np.arange(h) + 0.5) / h
    cols = (np.arange(w) + 0.5) / w
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    half = app["width"] / 2
    body = np.abs(cc - 0.5) <= half
    head_h = 0.18
    head = ((rr - head_h / 2) / (head_h / 2)) ** 2 + ((cc - 0.5) / (half * 0.6)) ** 2 <= 1
    upper = body & (rr > head_h) & (rr <= app["split"])
    lower = body & (rr > app["split"]) & (np.abs(cc - 0.5) <= half * 0.8)
    stripe = upper & (np.abs(rr - app["stripe_row"]) < 0.04)
    img[head] = app["head"]
    img[upper] = app["upper"]
    img[stripe] = app["stripe"]
    img[lower] = app["lower"]
    return img


def synth_generate(spec: SynthSpec = SynthSpec()) -> Dataset:
    """Deterministic synthetic re-ID dataset.

    Training and test identities are disjoint.  For each test identity the
    first image from every camera goes to the probe split; the rest go to
    the gallery.  Cameras are numbered from 1.
    """
    h, w, c = spec.image_size
    rng = np.random.default_rng(spec.seed)
    cam_gain = 1 + rng.uniform(-0.15, 0.15, (spec.num_cameras, 3))
    cam_gain[0] = 1
    cam_bias = rng.uniform(-15, 15, spec.num_cameras)
    cam_bias[0] = 0
    jit = spec.jitter

    def make(ident: int, cam: int, app: dict) -> np.ndarray:
        img = _render(app, h, w)
        img = img * cam_gain[cam] + cam_bias[cam]
        img = img + rng.normal(0, jit.color_sigma, 3)
        img = 128 + spec.contrast * (img - 128)
        if jit.shift_max:
            dy, dx = rng.integers(-jit.shift_max, jit.shift_max + 1, 2)
            img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
        img = img + rng.normal(0, jit.noise_sigma, img.shape)
        if c == 1:
            img = img.mean(axis=-1, keepdims=True)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    train, probe, gallery = [], [], []
    total = spec.num_train_ids + spec.num_test_ids
    for ident in range(total):
        app = _identity_appearance(rng, h, w)
        is_test = ident >= spec.num_train_ids
        for cam in range(spec.num_cameras):
            for k in range(spec.images_per_id_per_camera):
                px = make(ident, cam, app)
                name = f"{ident:04d}_c{cam + 1}s1_{k:06d}_00.png"
                if not is_test:
                    split = "train"
                elif k == 0:
                    split = "probe"
                else:
                    split = "gallery"
                rec = ImageRecord(px, ident, cam + 1, split, name)
                {"train": train, "probe": probe, "gallery": gallery}[split].append(rec)
    return Dataset(train, probe, gallery)


# -- folders -------------------------------------------------------------------

def parse_market_name(name: str) -> tuple[int, int]:
    m = MARKET_RE.match(Path(name).name)
    if not m:
        raise ValueError(f"cannot parse identity/camera from file name {name!r}")
    return int(m.group(1)), int(m.group(2))


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.dtype != np.uint8:
        raise ValueError(f"{path}: expected 8-bit image, got {arr.dtype}")
    return arr


def write_png(path, pixels: np.ndarray):
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise ValueError("write_png expects uint8 pixels")
    Image.fromarray(arr[:, :, 0] if arr.shape[-1] == 1 else arr).save(path, format="PNG")


def load_image_folder(path, naming: str = "market_style", split: str = "gallery") -> list[ImageRecord]:
    """Load every PNG under ``path`` (sorted by relative path)."""
    root = Path(path)
    if naming not in ("market_style", "flat"):
        raise ValueError(f"unknown naming {naming!r}")
    files = sorted(root.rglob("*.png")) if root.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no images found in {root}")
    records = []
    shape = None
    for f in files:
        if naming == "market_style":
            ident, cam = parse_market_name(f.name)
        else:
            try:
                ident = int(f.parent.name)
            except ValueError:
                raise ValueError(f"{f}: parent directory {f.parent.name!r} is not an identity number") from None
            cam = 0
        px = read_png(f)
        if shape is None:
            shape = px.shape
        elif px.shape != shape:
            raise ValueError(f"mixed image sizes: {f} is {px.shape}, expected {shape}")
        records.append(ImageRecord(px, ident, cam, split, str(f.relative_to(root))))
    return records


def save_dataset(ds: Dataset, out_dir, extra: dict | None = None) -> Path:
    """Write ``train/``, ``probe/``, ``gallery/`` PNG folders plus a split manifest."""
    out = Path(out_dir)
    manifest = {}
    for split in SPLITS:
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        names = []
        for rec in ds.split(split):
            write_png(d / rec.name, rec.pixels)
            names.append(rec.name)
        manifest[split] = names
    if extra:
        manifest.update(extra)
    (out / "splits.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path, naming: str = "market_style") -> Dataset:
    root = Path(path)
    splits = {s: load_image_folder(root / s, naming, s) for s in SPLITS}
    train_ids = {r.identity for r in splits["train"]}
    test_ids = {r.identity for r in splits["probe"] + splits["gallery"]}
    if train_ids & test_ids:
        raise ValueError(f"train and test identities overlap: {sorted(train_ids & test_ids)[:10]}")
    return Dataset(**splits)


# -- adversarial export --------------------------------------------------------

def quantize(pixels: np.ndarray, original: np.ndarray | None = None, epsilon: float | None = None) -> np.ndarray:
    """Round to 8-bit.  With ``original`` and ``epsilon``, clamp into the integer
    epsilon-ball first (plain rounding can overshoot a fractional epsilon)."""
    q = np.rint(np.asarray(pixels, np.float64))
    if original is not None:
        o = np.asarray(original, np.float64)
        q = np.clip(q, np.ceil(o - epsilon), np.floor(o + epsilon))
    return np.clip(q, 0, 255).astype(np.uint8)


def export_adversarial_gallery(examples: Iterable, out_dir, config_json: dict | None = None) -> Path:
    """Quantise adversarial images to PNG and write ``manifest.jsonl``.

    Each example needs ``original`` (ImageRecord), ``adversarial`` (float
    pixels), ``config`` (with ``epsilon`` and ``hash()``), ``loss_before``
    and ``loss_after``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        orig = ex.original
        eps = ex.config.epsilon
        raw = np.abs(np.asarray(ex.adversarial, np.float64) - orig.pixels).max(initial=0)
        if raw > eps + 1e-3:
            raise RuntimeError(f"{orig.name}: perturbation {raw:g} exceeds epsilon {eps}")
        q = quantize(ex.adversarial, orig.pixels, eps)
        diff = np.abs(q.astype(np.int16) - orig.pixels.astype(np.int16)).max(initial=0)
        if diff > eps + 1e-6:
            raise RuntimeError(f"{orig.name}: quantised perturbation {diff} exceeds epsilon {eps}")
        fname = orig.name
        write_png(out / fname, q)
        lines.append(json.dumps({
            "source": orig.source_path or orig.name,
            "identity": int(orig.identity),
            "camera": int(orig.camera),
            "attack_hash": ex.config.hash(),
            "loss_before": float(ex.loss_before),
            "loss_after": float(ex.loss_after),
            "file": fname,
        }, sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    if config_json is not None:
        (out / "attack_config.json").write_text(json.dumps(config_json, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
