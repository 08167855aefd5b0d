"""Procedural synthetic-person dataset: a layered 2-D figure whose visual
attributes are the ground-truth labels, plus the two corruption operators
(bottom occlusion by another subject's upper body, 4x downsampling) and the
on-disk manifest layout.

Attribute placement is deliberately region-bound: hat and hair live in the
head-shoulder area, shirt tone / stripes / bag in the upper body, skirt,
legwear tone and shoes in the lower body.
"""

import json
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

OCCLUSION_DOWN = "occlusion down"

DEFAULT_PRIORS = {
    "hat": 0.45,
    "long_hair": 0.5,
    "light_shirt": 0.5,
    "striped_shirt": 0.35,
    "bag": 0.4,
    "skirt": 0.45,
    "dark_legwear": 0.5,
    "bright_shoes": 0.4,
}

SPLITS = ("train", "train_clean", "test_clean", "test_occluded", "test_lowres")

_SKIN_TONES = np.array([
    [0.95, 0.80, 0.68],
    [0.87, 0.68, 0.53],
    [0.72, 0.52, 0.38],
    [0.48, 0.33, 0.24],
])

_HAIR_TONES = np.array([
    [0.08, 0.06, 0.05],
    [0.25, 0.15, 0.08],
    [0.45, 0.30, 0.15],
    [0.80, 0.65, 0.35],
])


@dataclass(frozen=True)
class Corruption:
    kind: str = "none"  # none | occluded | lowres
    rate: float | None = None
    factor: int | None = None

    def to_dict(self):
        d = {"kind": self.kind}
        if self.rate is not None:
            d["rate"] = self.rate
        if self.factor is not None:
            d["factor"] = self.factor
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("rate"), d.get("factor"))


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # float32 (3, H, W) in [0, 1]
    labels: np.ndarray  # uint8 (A,)
    corruption: Corruption = Corruption()


@dataclass
class AttributeSchema:
    names: list[str]
    ratios: np.ndarray  # float64 (A,)
    occlusion_down_index: int

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.names.count(OCCLUSION_DOWN) != 1:
            raise ValueError(f"schema needs exactly one {OCCLUSION_DOWN!r} attribute")
        if len(self.names) != len(self.ratios):
            raise ValueError("names and ratios lengths differ")
        if not ((self.ratios > 0) & (self.ratios < 1)).all():
            raise ValueError("attribute ratios must lie strictly in (0, 1)")

    def __len__(self):
        return len(self.names)

    def to_dict(self):
        return {"names": list(self.names),
                "ratios": [float(r) for r in self.ratios],
                "occlusion_down_index": self.occlusion_down_index}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["names"]), np.array(d["ratios"]), d["occlusion_down_index"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def sample_attribute_bits(rng, priors):
    """Draw one Bernoulli bit per content attribute, in prior order."""
    return {name: int(rng.random() < p) for name, p in priors.items()}


def render_person(seed, config, sample_id=None):
    """Deterministically render one synthetic person at the configured size.

    The image is quantized to 8-bit before being returned so the in-memory
    sample is exactly what a PNG round trip reproduces.
    """
    h, w = config.image.height, config.image.width
    if h % config.image.blocks:
        raise ConfigError(
            f"image height {h} not divisible into {config.image.blocks} part blocks")
    rng = np.random.default_rng(np.random.PCG64(seed))
    priors = config.dataset.priors
    bits = sample_attribute_bits(rng, priors)

    img = np.empty((h, w, 3), dtype=np.float64)
    # background: muted color with a vertical gradient and one distractor band
    bg = _hsv_to_rgb(rng.random(), rng.uniform(0.05, 0.3), rng.uniform(0.3, 0.75))
    img[:] = bg
    img += np.linspace(-0.05, 0.05, h)[:, None, None]
    band_x = rng.integers(0, w)
    band_w = rng.integers(2, max(3, w // 6))
    img[:, band_x:band_x + band_w] += rng.uniform(-0.12, 0.12)

    cx = w / 2 + rng.uniform(-w / 16, w / 16)
    scale = rng.uniform(0.85, 1.0)
    ys, xs = np.mgrid[0:h, 0:w]

    def rows(a, b):
        return slice(int(a * h), int(b * h))

    def cols(half_width):
        lo = int(max(0, cx - half_width * w))
        hi = int(min(w, cx + half_width * w))
        return slice(lo, hi)

    skin = _SKIN_TONES[rng.integers(len(_SKIN_TONES))]
    hair = _HAIR_TONES[rng.integers(len(_HAIR_TONES))]
    shirt_h, shirt_s = rng.random(), rng.uniform(0.5, 0.9)
    shirt_v = rng.uniform(0.7, 0.95) if bits["light_shirt"] else rng.uniform(0.12, 0.38)
    shirt = np.array(_hsv_to_rgb(shirt_h, shirt_s, shirt_v))
    leg_v = rng.uniform(0.06, 0.3) if bits["dark_legwear"] else rng.uniform(0.55, 0.85)
    legwear = np.array(_hsv_to_rgb(rng.random(), rng.uniform(0.1, 0.6), leg_v))

    # hair behind the face; long hair reaches the shoulders
    hair_bottom = 0.30 if bits["long_hair"] else 0.13
    img[rows(0.05, hair_bottom), cols(0.21 * scale)] = hair
    # face ellipse
    fy, fx = 0.14 * h, cx
    ry, rx = 0.075 * h * scale, 0.17 * w * scale
    face = ((ys - fy) / ry) ** 2 + ((xs - fx) / rx) ** 2 <= 1.0
    img[face] = skin
    if bits["hat"]:
        hat = np.array(_hsv_to_rgb(rng.random(), rng.uniform(0.6, 1.0),
                                   rng.uniform(0.35, 0.95)))
        img[rows(0.03, 0.09), cols(0.20 * scale)] = hat
        img[rows(0.09, 0.115), cols(0.27 * scale)] = hat  # brim

    # torso: trapezoid from shoulders to waist
    t_top, t_bot = 0.24, 0.54
    t_rows = np.arange(int(t_top * h), int(t_bot * h))
    frac = (t_rows - t_rows[0]) / max(1, len(t_rows) - 1)
    half = (0.23 - 0.06 * frac) * scale
    for r, hw in zip(t_rows, half):
        img[r, cols(hw)] = shirt
    if bits["striped_shirt"]:
        period = max(2, round(0.1 * h))  # survives 4x downsampling
        shift = 0.35 if shirt_v < 0.5 else -0.35
        for r, hw in zip(t_rows, half):
            if (r - t_rows[0]) % period < period // 2:
                img[r, cols(hw)] = np.clip(shirt + shift, 0, 1)

    if bits["bag"]:
        bag = np.array(_hsv_to_rgb(rng.random(), rng.uniform(0.7, 1.0),
                                   rng.uniform(0.4, 0.95)))
        side = 1 if rng.random() < 0.5 else -1
        blo = cx + side * 0.24 * w * scale
        bhi = blo + side * 0.14 * w
        lo, hi = sorted((int(blo), int(bhi)))
        img[rows(0.42, 0.58), max(0, lo):min(w, hi)] = bag

    # legs / skirt
    if bits["skirt"]:
        s_rows = np.arange(int(0.54 * h), int(0.78 * h))
        sfrac = (s_rows - s_rows[0]) / max(1, len(s_rows) - 1)
        for r, hw in zip(s_rows, (0.10 + 0.13 * sfrac) * scale):
            img[r, cols(hw)] = legwear
        for side in (-1, 1):
            lo = int(cx + side * 0.08 * w * scale - 0.03 * w)
            img[rows(0.78, 0.92), max(0, lo):min(w, lo + max(2, int(0.06 * w)))] = skin
    else:
        for side in (-1, 1):
            lo = int(cx + side * 0.09 * w * scale - 0.04 * w)
            img[rows(0.54, 0.92), max(0, lo):min(w, lo + max(2, int(0.08 * w)))] = legwear

    shoe_v = rng.uniform(0.82, 1.0) if bits["bright_shoes"] else rng.uniform(0.02, 0.16)
    shoe = np.array(_hsv_to_rgb(rng.random(), rng.uniform(0.0, 0.25), shoe_v))
    for side in (-1, 1):
        lo = int(cx + side * 0.09 * w * scale - 0.045 * w)
        img[rows(0.92, 0.975), max(0, lo):min(w, lo + max(2, int(0.09 * w)))] = shoe

    img += rng.normal(0.0, 0.008, size=img.shape)
    quantized = np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)

    labels = np.array([bits[n] for n in priors] + [0], dtype=np.uint8)
    return ImageSample(
        id=sample_id if sample_id is not None else f"seed{seed}",
        image=(quantized.astype(np.float32) / 255.0).transpose(2, 0, 1),
        labels=labels,
    )


def occlude(sample: ImageSample, donor: ImageSample, rate: float,
            occlusion_down_index: int = -1) -> ImageSample:
    """Replace the bottom floor(rate*H) rows of ``sample`` with the donor's
    top rows (its upper body) and set the occlusion-down label."""
    if not 0.5 <= rate <= 0.8:
        raise ValueError(f"occlusion rate {rate} outside [0.5, 0.8]")
    if sample.corruption.kind != "none":
        raise ValueError(f"sample {sample.id} is already corrupted "
                         f"({sample.corruption.kind})")
    if donor.corruption.kind != "none":
        raise ValueError(f"donor {donor.id} is corrupted ({donor.corruption.kind})")
    if donor.image.shape != sample.image.shape:
        raise ValueError("sample and donor shapes differ")
    if donor is sample or donor.id == sample.id:
        raise ValueError("donor must be a different subject")
    h = sample.image.shape[1]
    k = int(np.floor(rate * h))
    image = sample.image.copy()
    image[:, h - k:, :] = donor.image[:, :k, :]
    labels = sample.labels.copy()
    labels[occlusion_down_index] = 1
    return ImageSample(sample.id, image, labels, Corruption("occluded", rate=rate))


def downsample(sample: ImageSample, factor: int = 4) -> ImageSample:
    """Area-average downsampling by an integer factor."""
    if sample.corruption.kind != "none":
        raise ValueError(f"sample {sample.id} is already corrupted "
                         f"({sample.corruption.kind})")
    _, h, w = sample.image.shape
    if h % factor or w % factor:
        raise ValueError(f"dims ({h}, {w}) not divisible by factor {factor}")
    small = sample.image.reshape(3, h // factor, factor, w // factor, factor)
    small = small.mean(axis=(2, 4), dtype=np.float64).astype(np.float32)
    return ImageSample(sample.id, small, sample.labels.copy(),
                       Corruption("lowres", factor=factor))


def bilinear_upsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear interpolation with half-pixel-centered sampling (the output
    pixel i samples the source at (i + 0.5)/factor - 0.5). Constant images
    stay constant and factor 1 is the identity."""
    if factor < 1:
        raise ValueError(f"factor {factor} must be >= 1")
    if factor == 1:
        return image.copy()
    _, h, w = image.shape
    out_y = (np.arange(h * factor) + 0.5) / factor - 0.5
    out_x = (np.arange(w * factor) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(out_y).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(out_x).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(out_y - y0, 0.0, 1.0).astype(np.float32)[None, :, None]
    wx = np.clip(out_x - x0, 0.0, 1.0).astype(np.float32)[None, None, :]
    rows0 = image[:, y0, :]
    rows1 = image[:, y1, :]
    top = rows0[:, :, x0] * (1 - wx) + rows0[:, :, x1] * wx
    bottom = rows1[:, :, x0] * (1 - wx) + rows1[:, :, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def upsample_sample(sample: ImageSample, factor: int) -> ImageSample:
    return ImageSample(sample.id, bilinear_upsample(sample.image, factor),
                       sample.labels.copy(), sample.corruption)


@dataclass
class Record:
    id: str
    path: str
    labels: np.ndarray
    corruption: Corruption
    split: str

    def to_json(self):
        return json.dumps({
            "id": self.id,
            "path": self.path,
            "labels": [int(b) for b in self.labels],
            "corruption": self.corruption.to_dict(),
            "split": self.split,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(d["id"], d["path"], np.array(d["labels"], dtype=np.uint8),
                   Corruption.from_dict(d["corruption"]), d["split"])


def save_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_image(dataset_dir, record: Record) -> np.ndarray:
    with Image.open(Path(dataset_dir) / record.path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_manifest(path) -> list[Record]:
    with open(path) as f:
        return [Record.from_json(line) for line in f if line.strip()]


def write_manifest(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def _per_sample_seed(config_seed, tag, index):
    return int(np.random.SeedSequence((config_seed, tag, index)).generate_state(1)[0])


def build_dataset(config, out_dir, overwrite=False):
    """Render the full dataset, write images plus manifests, and compute the
    attribute schema from the train split.

    Splits written: ``train`` (classifier mix, a configured fraction stored
    occluded), ``train_clean`` (every train subject, uncorrupted; corruption
    targets for enhancement training), ``test_clean``, ``test_occluded``,
    ``test_lowres``, plus ``test_merged.jsonl`` as the union of occluded and
    low-res test records.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(
                f"output dir {out} exists and is not empty (pass overwrite)")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)

    ds = config.dataset
    n_train, n_test = ds.train, ds.test
    priors = ds.priors
    content_names = list(priors)
    all_names = content_names + [OCCLUSION_DOWN]
    occ_idx = len(all_names) - 1

    rng = np.random.default_rng(
        np.random.PCG64(np.random.SeedSequence((config.seed, 0xD5))))

    train = [render_person(_per_sample_seed(config.seed, 1, i), config,
                           sample_id=f"train_{i:05d}")
             for i in range(n_train)]
    test = [render_person(_per_sample_seed(config.seed, 2, i), config,
                          sample_id=f"test_{i:05d}")
            for i in range(n_test)]

    n_occ = int(round(ds.occluded_train_fraction * n_train))
    occ_set = set(rng.permutation(n_train)[:n_occ].tolist())

    def pick_donor(pool, i):
        j = int(rng.integers(len(pool) - 1))
        return pool[j if j < i else j + 1]

    records = []

    def emit(sample, split, suffix=""):
        sid = sample.id + suffix
        rel = f"images/{sid}.png"
        save_png(sample.image, out / rel)
        records.append(Record(sid, rel, sample.labels.copy(),
                              sample.corruption, split))

    for i, s in enumerate(train):
        if i in occ_set:
            occluded = occlude(s, pick_donor(train, i), float(rng.uniform(0.5, 0.8)),
                               occlusion_down_index=occ_idx)
            emit(occluded, "train")
        else:
            emit(s, "train")
    for i, s in enumerate(train):
        emit(replace(s, id=s.id + "_src"), "train_clean")
    for s in test:
        emit(s, "test_clean")
    for i, s in enumerate(test):
        occluded = occlude(s, pick_donor(test, i), float(rng.uniform(0.5, 0.8)),
                           occlusion_down_index=occ_idx)
        emit(replace(occluded, id=occluded.id + "_occ"), "test_occluded")
    for s in test:
        low = downsample(s, ds.lowres_factor)
        emit(replace(low, id=low.id + "_low"), "test_lowres")

    # schema ratios come from the classifier's train split, then attributes
    # with too few positives (or no negatives) are dropped everywhere
    train_records = [r for r in records if r.split == "train"]
    label_matrix = np.stack([r.labels for r in train_records]).astype(np.float64)
    ratios = label_matrix.mean(axis=0)
    keep = [i for i, r in enumerate(ratios)
            if ds.min_ratio < r < 1.0 or all_names[i] == OCCLUSION_DOWN]
    if occ_idx in keep and not ds.min_ratio < ratios[occ_idx] < 1.0:
        raise ValueError(
            f"occlusion-down train ratio {ratios[occ_idx]:.4f} outside "
            f"({ds.min_ratio}, 1); adjust occluded_train_fraction")
    kept_names = [all_names[i] for i in keep]
    schema = AttributeSchema(kept_names, ratios[keep],
                             kept_names.index(OCCLUSION_DOWN))
    if len(keep) != len(all_names):
        for r in records:
            r.labels = r.labels[keep]

    records.sort(key=lambda r: (SPLITS.index(r.split), r.id))
    write_manifest(records, out / "manifest.jsonl")
    for split in SPLITS:
        write_manifest([r for r in records if r.split == split],
                       out / f"{split}.jsonl")
    merged = [r for r in records if r.split in ("test_occluded", "test_lowres")]
    write_manifest(merged, out / "test_merged.jsonl")
    schema.save(out / "schema.json")
    return out / "manifest.jsonl", schema
