"""Procedural street scenes, incremental label masking and dataset I/O."""
import hashlib
import json
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError

UNKNOWN = 0
IGNORE = 255

SKY, ROAD, BUILDING, POLE, CAR, PERSON = 1, 2, 3, 4, 5, 6
CLASS_NAMES = {0: "unknown", SKY: "sky", ROAD: "road", BUILDING: "building",
               POLE: "pole", CAR: "car", PERSON: "person"}
REAL_CLASSES = (SKY, ROAD, BUILDING, POLE, CAR, PERSON)

# seed layout: one block of SEED_STRIDE seeds per (split, step)
SEED_STRIDE = 10_000
SEED_RUN = 1_000_000


@dataclass(frozen=True)
class ClassSchedule:
    sets: tuple  # tuple of tuples of real class ids, one per step
    class_names: dict = field(default_factory=lambda: dict(CLASS_NAMES))

    def __post_init__(self):
        seen = set()
        for ids in self.sets:
            for c in ids:
                if c in (UNKNOWN, IGNORE):
                    raise ConfigError(f"class id {c} is reserved")
                if c in seen:
                    raise ConfigError(f"class {c} appears in more than one step")
                seen.add(c)

    def __len__(self):
        return len(self.sets)

    def new_classes(self, t):
        return tuple(self.sets[t])

    def past_classes(self, t):
        return tuple(c for s in self.sets[:t] for c in s)

    def seen_classes(self, t):
        return tuple(c for s in self.sets[:t + 1] for c in s)

    def all_classes(self):
        return self.seen_classes(len(self.sets) - 1)

    def digest(self):
        blob = json.dumps([list(s) for s in self.sets]).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:4], "little")


DEFAULT_SCHEDULE = ClassSchedule(((SKY, ROAD), (BUILDING, POLE), (CAR, PERSON)))


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: dict  # class id -> (r, g, b) in [0, 1]
    texture_amp: float
    texture_scale: float
    layout_seed_offset: int = 0
    noise_sigma: float = 0.01

    def __post_init__(self):
        missing = [c for c in REAL_CLASSES if c not in self.palette]
        if missing:
            raise ConfigError(f"domain {self.name!r} has no palette entry for classes {missing}")

    def to_dict(self):
        return {"name": self.name, "palette": {str(k): list(v) for k, v in self.palette.items()},
                "texture_amp": self.texture_amp, "texture_scale": self.texture_scale,
                "layout_seed_offset": self.layout_seed_offset, "noise_sigma": self.noise_sigma}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], {int(k): tuple(v) for k, v in d["palette"].items()},
                   float(d["texture_amp"]), float(d["texture_scale"]),
                   int(d.get("layout_seed_offset", 0)), float(d.get("noise_sigma", 0.01)))


def _palette(gain, tint, base=None):
    base = base or {
        SKY: (0.55, 0.75, 0.95), ROAD: (0.35, 0.35, 0.38), BUILDING: (0.70, 0.55, 0.45),
        POLE: (0.85, 0.80, 0.30), CAR: (0.80, 0.15, 0.15), PERSON: (0.20, 0.70, 0.30),
    }
    return {c: tuple(float(np.clip(v * gain + o, 0.0, 1.0)) for v, o in zip(rgb, tint))
            for c, rgb in base.items()}


DEFAULT_DOMAINS = (
    DomainSpec("dayville", _palette(1.0, (0.0, 0.0, 0.0)), 0.05, 16.0, 0),
    DomainSpec("duskton", _palette(0.75, (0.12, 0.02, -0.05)), 0.06, 12.0, 7919),
    DomainSpec("nightburg", _palette(0.5, (-0.05, 0.0, 0.12)), 0.04, 8.0, 15485),
)
EXTERNAL_DOMAIN = DomainSpec("foggyport", _palette(0.6, (0.25, 0.25, 0.25)), 0.03, 20.0, 32452)

BUILTIN_DOMAINS = {d.name: d for d in DEFAULT_DOMAINS + (EXTERNAL_DOMAIN,)}


def _smooth_noise(rng, h, w, scale):
    """Bilinearly upsampled coarse Gaussian grid; values roughly in [-1, 1]."""
    gh = int(np.ceil(h / scale)) + 2
    gw = int(np.ceil(w / scale)) + 2
    grid = rng.standard_normal((gh, gw))
    ys = np.arange(h) / scale
    xs = np.arange(w) / scale
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _ellipse(labels, cy, cx, ry, rx, cls):
    h, w = labels.shape
    yy, xx = np.ogrid[:h, :w]
    mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    labels[mask] = cls


def generate_layout(rng, h, w):
    labels = np.full((h, w), SKY, dtype=np.uint8)
    sky_frac = rng.uniform(0.25, 0.40)
    road_frac = rng.uniform(0.30, 0.45)
    sky_rows = int(round(sky_frac * h))
    road_top = h - int(round(road_frac * h))
    labels[road_top:, :] = ROAD
    for _ in range(rng.integers(1, 4)):
        bw = int(rng.integers(w // 8, w // 3 + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        top = int(rng.integers(sky_rows, max(sky_rows + 1, road_top - 2)))
        labels[top:road_top, x0:x0 + bw] = BUILDING
    for _ in range(rng.integers(0, 3)):
        pw = max(1, w // 32)
        x0 = int(rng.integers(0, w - pw + 1))
        top = int(rng.integers(sky_rows, road_top))
        bottom = min(h, road_top + int(rng.integers(1, max(2, h // 16))))
        labels[top:bottom, x0:x0 + pw] = POLE
    road_h = h - road_top
    for _ in range(rng.integers(0, 4)):
        cy = road_top + rng.uniform(0.3, 0.8) * road_h
        _ellipse(labels, cy, rng.uniform(0, w), h / 16, w / 8, CAR)
    for _ in range(rng.integers(0, 3)):
        cy = road_top + rng.uniform(-0.1, 0.3) * road_h
        _ellipse(labels, cy, rng.uniform(0, w), h / 10, w / 40 + 1, PERSON)
    return labels


def _check_dims(h, w):
    for n in (h, w):
        if n < 32 or (n & (n - 1)) != 0:
            raise DimensionError(f"image dimensions must be powers of two >= 32, got {h}x{w}")


def generate_scene(domain, rng_seed, h=64, w=64):
    """Return ``(image, full_labels)`` for one deterministic synthetic scene."""
    _check_dims(h, w)
    rng = np.random.default_rng([int(rng_seed), int(domain.layout_seed_offset)])
    labels = generate_layout(rng, h, w)
    lut = np.zeros((256, 3))
    for c, rgb in domain.palette.items():
        lut[c] = rgb
    image = lut[labels]
    if domain.texture_amp > 0:
        image = image + domain.texture_amp * _smooth_noise(rng, h, w, domain.texture_scale)[..., None]
    if domain.noise_sigma > 0:
        image = image + rng.normal(0.0, domain.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def mask_labels(full_labels, class_set):
    """Keep pixels of ``class_set``; everything else becomes unknown (0)."""
    full_labels = np.asarray(full_labels)
    keep = np.isin(full_labels, np.asarray(list(class_set), dtype=full_labels.dtype))
    return np.where(keep, full_labels, UNKNOWN).astype(np.uint8)


@dataclass
class LabeledSample:
    image: np.ndarray
    full_labels: np.ndarray
    step_labels: np.ndarray


# --- PPM / PGM -------------------------------------------------------------

def _read_token(buf, pos):
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(f"truncated header at byte offset {start}")
    return buf[start:pos], pos


def _parse_netpbm(buf, magic, channels):
    if buf[:2] != magic:
        raise FormatError(f"expected {magic.decode()} file, got {buf[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"non-integer header field {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError(f"bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte before raster
    need = w * h * channels
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"raster truncated: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def quantize(image):
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_ppm(path, image):
    q = quantize(image)
    h, w, _ = q.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def write_pgm(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(labels.tobytes())


def read_ppm(path, opener=open):
    with opener(path, "rb") as fh:
        return _parse_netpbm(fh.read(), b"P6", 3).astype(np.float32) / 255.0


def read_pgm(path, opener=open):
    with opener(path, "rb") as fh:
        return _parse_netpbm(fh.read(), b"P5", 1).copy()


def write_sample(path, sample):
    """Write ``<path>.ppm``, ``<path>.full.pgm`` and ``<path>.step.pgm``."""
    write_ppm(path + ".ppm", sample.image)
    write_pgm(path + ".full.pgm", sample.full_labels)
    write_pgm(path + ".step.pgm", sample.step_labels)


def read_sample(path, opener=open):
    return LabeledSample(read_ppm(path + ".ppm", opener),
                         read_pgm(path + ".full.pgm", opener),
                         read_pgm(path + ".step.pgm", opener))


class AccessLog:
    """Records every sample-file open together with the protocol step active at the time."""

    def __init__(self):
        self.step = None
        self.records = []
        self._lock = threading.Lock()

    def open(self, path, mode="rb"):
        with self._lock:
            self.records.append((self.step, os.fspath(path)))
        return open(path, mode)


# --- step datasets ---------------------------------------------------------

def train_seeds(seed, t, n):
    if n > SEED_STRIDE:
        raise ConfigError(f"at most {SEED_STRIDE} samples per split")
    base = seed * SEED_RUN + (2 * t) * SEED_STRIDE
    return list(range(base, base + n))


def eval_seeds(seed, k, n):
    if n > SEED_STRIDE:
        raise ConfigError(f"at most {SEED_STRIDE} samples per split")
    base = seed * SEED_RUN + (2 * k + 1) * SEED_STRIDE
    return list(range(base, base + n))


@dataclass
class Dataset:
    samples: list
    manifest: dict

    def __len__(self):
        return len(self.samples)

    def images(self):
        return [s.image for s in self.samples]


def make_split(domain, seeds, class_set, h, w):
    out = []
    for s in seeds:
        img, full = generate_scene(domain, s, h, w)
        step = full if class_set is None else mask_labels(full, class_set)
        out.append(LabeledSample(img, full, step))
    return out


def build_step_dataset(schedule, domain_sequence, t, n_train, n_eval, seed, h=64, w=64):
    """Training split of step ``t`` plus full-label eval splits for domains 0..t."""
    if len(schedule) != len(domain_sequence):
        raise ConfigError(f"schedule has {len(schedule)} steps but domain_sequence has "
                          f"{len(domain_sequence)}")
    if not 0 <= t < len(schedule):
        raise ConfigError(f"step {t} outside 0..{len(schedule) - 1}")
    class_set = schedule.new_classes(t)
    tr_seeds = train_seeds(seed, t, n_train)
    train = Dataset(make_split(domain_sequence[t], tr_seeds, class_set, h, w),
                    manifest_dict(t, domain_sequence[t].name, class_set, tr_seeds, [], h, w))
    evals = {}
    for k in range(t + 1):
        ev_seeds = eval_seeds(seed, k, n_eval)
        evals[domain_sequence[k].name] = Dataset(
            make_split(domain_sequence[k], ev_seeds, None, h, w),
            manifest_dict(k, domain_sequence[k].name, list(schedule.all_classes()), [], ev_seeds, h, w))
    manifest = manifest_dict(t, domain_sequence[t].name, class_set, tr_seeds,
                             {name: d.manifest["eval_seeds"] for name, d in evals.items()}, h, w)
    return train, evals, manifest


def manifest_dict(step, domain, class_set, train, evals, h, w):
    return {"step": int(step), "domain": domain, "class_set": [int(c) for c in class_set],
            "train_seeds": list(train), "eval_seeds": evals, "h": int(h), "w": int(w)}


def write_dataset(dirpath, dataset):
    os.makedirs(dirpath, exist_ok=True)
    for i, sample in enumerate(dataset.samples):
        write_sample(os.path.join(dirpath, f"{i:05d}"), sample)
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(dataset.manifest, fh, indent=1, sort_keys=True)


def read_dataset(dirpath, opener=open):
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    stems = sorted(f[:-4] for f in os.listdir(dirpath) if f.endswith(".ppm"))
    return Dataset([read_sample(os.path.join(dirpath, s), opener) for s in stems], manifest)


def dataset_hash(dataset):
    h = hashlib.sha256()
    for s in dataset.samples:
        h.update(quantize(s.image).tobytes())
        h.update(np.asarray(s.step_labels, dtype=np.uint8).tobytes())
    return h.hexdigest()
