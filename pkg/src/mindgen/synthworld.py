"""Synthetic (EEG, image, caption) triplet generator and dataset format.

Every triplet derives from a single SceneSpec (class / color / background /
pose), so ground truth is known exactly and downstream metrics can be
oracle-checked. The on-disk format (raw float32 EEG, 8-bit PNG images, one
JSON manifest) also accommodates real recorded data.
"""

import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .seeding import derive_seed, np_rng

# ---------------------------------------------------------------------------
# vocabularies

CLASS_NAMES = ("circle", "square", "triangle", "diamond", "plus", "ring", "cross", "bar")
COLOR_NAMES = ("red", "green", "blue", "yellow")
BACKGROUND_NAMES = ("night", "snow", "sunset", "tiles")

# foreground fills, RGB in [-1, 1]
COLOR_RGB = {
    "red": (0.85, -0.65, -0.65),
    "green": (-0.65, 0.80, -0.55),
    "blue": (-0.60, -0.55, 0.90),
    "yellow": (0.90, 0.80, -0.70),
}

CAPTION_DETAILS = ("object_only", "with_color", "with_background", "full")

DEFAULT_EEG_CHANNELS = 128
DEFAULT_EEG_TIMESTEPS = 512
DEFAULT_SAMPLE_RATE_HZ = 128.0
DEFAULT_IMAGE_SIZE = 32
MAX_CAPTION_TOKENS = 8
PAD_TOKEN_ID = 0


@dataclass(frozen=True)
class Vocabulary:
    """Sizes of the class/color/background vocabularies (K, C, G)."""

    num_classes: int = 8
    num_colors: int = 4
    num_backgrounds: int = 4

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if not 1 <= self.num_colors <= len(COLOR_NAMES):
            raise ValueError(f"num_colors must be in [1, {len(COLOR_NAMES)}]")
        if not 1 <= self.num_backgrounds <= len(BACKGROUND_NAMES):
            raise ValueError(f"num_backgrounds must be in [1, {len(BACKGROUND_NAMES)}]")

    def class_word(self, i):
        return CLASS_NAMES[i]

    def color_word(self, i):
        return COLOR_NAMES[i]

    def background_word(self, i):
        return BACKGROUND_NAMES[i]


@dataclass(frozen=True)
class SceneSpec:
    """Ground-truth scene attributes from which EEG, image, and caption derive."""

    class_id: int
    color_id: int
    background_id: int
    pose_seed: int

    def validate(self, vocab: Vocabulary):
        if not 0 <= self.class_id < vocab.num_classes:
            raise ValueError(f"class_id {self.class_id} outside [0, {vocab.num_classes})")
        if not 0 <= self.color_id < vocab.num_colors:
            raise ValueError(f"color_id {self.color_id} outside [0, {vocab.num_colors})")
        if not 0 <= self.background_id < vocab.num_backgrounds:
            raise ValueError(
                f"background_id {self.background_id} outside [0, {vocab.num_backgrounds})"
            )

    def to_dict(self):
        return {
            "class_id": self.class_id,
            "color_id": self.color_id,
            "background_id": self.background_id,
            "pose_seed": self.pose_seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["class_id"]), int(d["color_id"]), int(d["background_id"]),
                   int(d["pose_seed"]))


@dataclass
class EEGRecord:
    """Multichannel time series, shape [channels, timesteps], float32."""

    samples: np.ndarray
    subject_id: int
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D [channels, timesteps], got {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise ValueError("EEG samples contain non-finite values")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def timesteps(self):
        return self.samples.shape[1]


@dataclass
class TextCaption:
    """Caption string plus its fixed-length token sequence."""

    text: str
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)


# ---------------------------------------------------------------------------
# rendering

def _background_pixels(background_id, size):
    img = np.zeros((size, size, 3), dtype=np.float32)
    name = BACKGROUND_NAMES[background_id]
    if name == "night":
        img[:] = (-0.85, -0.85, -0.78)
    elif name == "snow":
        img[:] = (0.82, 0.84, 0.90)
    elif name == "sunset":
        top = np.array((0.75, 0.15, -0.35), dtype=np.float32)
        bottom = np.array((-0.15, -0.55, -0.75), dtype=np.float32)
        frac = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None, None]
        img[:] = top * (1 - frac) + bottom * frac
    elif name == "tiles":
        tile = max(2, size // 8)
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        checker = ((yy // tile + xx // tile) % 2).astype(np.float32)[:, :, None]
        img[:] = (
            np.array((-0.35, -0.30, -0.25), dtype=np.float32) * (1 - checker)
            + np.array((0.25, 0.28, 0.30), dtype=np.float32) * checker
        )
    return img


@lru_cache(maxsize=16)
def background_image(background_id, size=DEFAULT_IMAGE_SIZE):
    img = _background_pixels(background_id, size)
    img.setflags(write=False)
    return img


def _shape_mask(class_id, size, dx, dy, scale):
    cx = (size - 1) / 2.0 + dx
    cy = (size - 1) / 2.0 + dy
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    x = xx - cx
    y = yy - cy
    R = 10.0 * scale * size / 32.0
    name = CLASS_NAMES[class_id]
    r = np.sqrt(x * x + y * y)
    if name == "circle":
        return r <= R
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.88 * R
    if name == "triangle":
        # upward triangle: apex at (0, -R), base at y = 0.75 R
        top, base, half = -R, 0.75 * R, 0.98 * R
        frac = (y - top) / (base - top)
        return (y >= top) & (y <= base) & (np.abs(x) <= half * frac)
    if name == "diamond":
        return np.abs(x) + np.abs(y) <= 1.2 * R
    if name == "plus":
        arm = 0.34 * R
        return ((np.abs(x) <= arm) & (np.abs(y) <= R)) | ((np.abs(y) <= arm) & (np.abs(x) <= R))
    if name == "ring":
        return (r <= R) & (r >= 0.55 * R)
    if name == "cross":
        u = (x + y) / math.sqrt(2.0)
        v = (x - y) / math.sqrt(2.0)
        arm = 0.34 * R
        return ((np.abs(u) <= arm) & (np.abs(v) <= R)) | ((np.abs(v) <= arm) & (np.abs(u) <= R))
    if name == "bar":
        return (np.abs(y) <= 0.32 * R) & (np.abs(x) <= 1.15 * R)
    raise ValueError(f"unknown class id {class_id}")


def _pose_params(pose_seed):
    rng = np_rng(derive_seed(0x9053, "pose", pose_seed))
    dx, dy = rng.uniform(-2.5, 2.5, size=2)
    scale = rng.uniform(0.85, 1.12)
    return dx, dy, scale


def render_scene(scene: SceneSpec, size=DEFAULT_IMAGE_SIZE):
    """Render a scene to ([H, W, 3] float32 in [-1, 1], foreground bool mask)."""
    dx, dy, scale = _pose_params(scene.pose_seed)
    mask = _shape_mask(scene.class_id, size, dx, dy, scale)
    img = background_image(scene.background_id, size).copy()
    color = np.array(COLOR_RGB[COLOR_NAMES[scene.color_id]], dtype=np.float32)
    img[mask] = color
    return img, mask


def render_image(scene: SceneSpec, size=DEFAULT_IMAGE_SIZE):
    """Deterministic render of a SceneSpec; silhouette encodes the class,
    fill color the color id, backdrop the background id."""
    return render_scene(scene, size)[0]


def foreground_mask(scene: SceneSpec, size=DEFAULT_IMAGE_SIZE):
    return render_scene(scene, size)[1]


def dominant_foreground_color(pixels, mask):
    """Nearest palette color to the mean RGB over a foreground mask."""
    if mask.sum() == 0:
        return -1
    mean_rgb = pixels[mask].mean(axis=0)
    palette = np.array([COLOR_RGB[n] for n in COLOR_NAMES], dtype=np.float32)
    return int(np.argmin(((palette - mean_rgb) ** 2).sum(axis=1)))


def judge_foreground_color(pixels, min_foreground=8, background_tol=0.5):
    """Estimate the dominant foreground color of an arbitrary image.

    Pixels close to any known background pattern count as background; the
    rest vote with their mean RGB. Returns a color id, or -1 if almost no
    pixel stands out from the backgrounds.
    """
    size = pixels.shape[0]
    dists = []
    for b in range(len(BACKGROUND_NAMES)):
        pat = background_image(b, size)
        dists.append(np.sqrt(((pixels - pat) ** 2).sum(axis=2)))
    d_min = np.min(np.stack(dists), axis=0)
    fg = d_min > background_tol
    if fg.sum() < min_foreground:
        return -1
    return dominant_foreground_color(pixels, fg)


# ---------------------------------------------------------------------------
# captions

class Tokenizer:
    """Deterministic whitespace tokenizer over the closed caption vocabulary."""

    def __init__(self, vocab: Vocabulary, max_len=MAX_CAPTION_TOKENS):
        self.max_len = max_len
        words = ["<pad>", "a", "on"]
        words += [CLASS_NAMES[i] for i in range(vocab.num_classes)]
        words += [COLOR_NAMES[i] for i in range(vocab.num_colors)]
        words += [BACKGROUND_NAMES[i] for i in range(vocab.num_backgrounds)]
        self.words = words
        self.word_to_id = {w: i for i, w in enumerate(words)}
        self.pad_id = PAD_TOKEN_ID

    @property
    def vocab_size(self):
        return len(self.words)

    def encode(self, text: str) -> np.ndarray:
        parts = text.split()
        if len(parts) > self.max_len:
            raise ValueError(f"caption longer than {self.max_len} tokens: {text!r}")
        ids = []
        for w in parts:
            if w not in self.word_to_id:
                raise ValueError(f"word not in vocabulary: {w!r}")
            ids.append(self.word_to_id[w])
        ids += [self.pad_id] * (self.max_len - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, tokens) -> str:
        return " ".join(self.words[int(t)] for t in tokens if int(t) != self.pad_id)

    def caption(self, text: str) -> TextCaption:
        return TextCaption(text=text, tokens=self.encode(text))


def caption_text(scene: SceneSpec, detail: str, vocab: Vocabulary) -> str:
    if detail not in CAPTION_DETAILS:
        raise ValueError(f"detail must be one of {CAPTION_DETAILS}, got {detail!r}")
    cls = vocab.class_word(scene.class_id)
    col = vocab.color_word(scene.color_id)
    bg = vocab.background_word(scene.background_id)
    if detail == "object_only":
        return f"a {cls}"
    if detail == "with_color":
        return f"a {col} {cls}"
    if detail == "with_background":
        return f"a {cls} on {bg}"
    return f"a {col} {cls} on {bg}"


def caption(scene: SceneSpec, detail: str, vocab: Vocabulary,
            tokenizer: Tokenizer | None = None) -> TextCaption:
    """Template caption for a scene at the requested detail level."""
    tokenizer = tokenizer or Tokenizer(vocab)
    return tokenizer.caption(caption_text(scene, detail, vocab))


# ---------------------------------------------------------------------------
# synthetic EEG

_SIGNATURE_COMPONENTS = 5


@lru_cache(maxsize=64)
def class_signature(class_id, channels, timesteps, sample_rate_hz):
    """Noise-free per-class EEG component: a bank of sinusoids with
    class-specific frequencies/phases and channel weights, unit RMS."""
    rng = np_rng(derive_seed(0xC1A5, "signature", class_id, channels, timesteps))
    t = np.arange(timesteps, dtype=np.float64) / sample_rate_hz
    sig = np.zeros((channels, timesteps), dtype=np.float64)
    for _ in range(_SIGNATURE_COMPONENTS):
        freq = rng.uniform(2.0, 30.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        weights = rng.normal(0.0, 1.0, size=channels)
        sig += np.outer(weights, np.sin(2.0 * math.pi * freq * t + phase))
    sig /= np.sqrt((sig ** 2).mean())
    sig = sig.astype(np.float32)
    sig.setflags(write=False)
    return sig


@lru_cache(maxsize=64)
def subject_mixing(subject_id, channels):
    """Fixed per-subject linear distortion applied to the class signature."""
    rng = np_rng(derive_seed(0x5EED, "subject", subject_id, channels))
    mix = np.eye(channels) + 0.15 * rng.normal(0.0, 1.0 / math.sqrt(channels),
                                               size=(channels, channels))
    mix = mix.astype(np.float32)
    mix.setflags(write=False)
    return mix


def synth_eeg(scene: SceneSpec, subject_id: int, noise_seed: int, snr_db: float,
              channels=DEFAULT_EEG_CHANNELS, timesteps=DEFAULT_EEG_TIMESTEPS,
              sample_rate_hz=DEFAULT_SAMPLE_RATE_HZ) -> EEGRecord:
    """Class signature + subject mixing + Gaussian noise at the given SNR.

    snr_db = +inf disables noise entirely.
    """
    if math.isnan(snr_db):
        raise ValueError("snr_db must not be NaN")
    sig = subject_mixing(subject_id, channels) @ class_signature(
        scene.class_id, channels, timesteps, sample_rate_hz)
    if math.isinf(snr_db):
        samples = sig.copy()
    else:
        rms = float(np.sqrt((sig ** 2).mean()))
        noise_std = rms * 10.0 ** (-snr_db / 20.0)
        rng = np_rng(derive_seed(0x0153, "eeg-noise", noise_seed))
        samples = sig + noise_std * rng.standard_normal(sig.shape).astype(np.float32)
    return EEGRecord(samples=samples, subject_id=subject_id, sample_rate_hz=sample_rate_hz)


# ---------------------------------------------------------------------------
# on-disk format

def save_eeg(record: EEGRecord, path):
    """Raw little-endian float32, row-major [channels][timesteps], no header."""
    arr = np.ascontiguousarray(record.samples, dtype="<f4")
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def load_eeg(path, channels, timesteps, subject_id=0,
             sample_rate_hz=DEFAULT_SAMPLE_RATE_HZ) -> EEGRecord:
    expected = 4 * channels * timesteps
    data = Path(path).read_bytes()
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for [{channels}x{timesteps}], "
                         f"got {len(data)}")
    samples = np.frombuffer(data, dtype="<f4").reshape(channels, timesteps).copy()
    return EEGRecord(samples=samples, subject_id=subject_id, sample_rate_hz=sample_rate_hz)


def save_image_png(pixels, path):
    """8-bit RGB PNG; input float [H, W, 3] in [-1, 1]."""
    u8 = np.clip((pixels + 1.0) * 0.5 * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return (u8 / 255.0) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# dataset building

@dataclass
class DatasetConfig:
    num_classes: int = 8
    num_colors: int = 4
    num_backgrounds: int = 4
    per_class: int = 60
    subjects: int = 1
    split_ratios: tuple = (5 / 6, 1 / 12, 1 / 12)  # train / val / test
    seed: int = 0
    channels: int = DEFAULT_EEG_CHANNELS
    timesteps: int = DEFAULT_EEG_TIMESTEPS
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    snr_db: float = 10.0
    image_size: int = DEFAULT_IMAGE_SIZE
    caption_detail: str = "full"

    @property
    def vocab(self):
        return Vocabulary(self.num_classes, self.num_colors, self.num_backgrounds)

    def to_dict(self):
        d = dict(self.__dict__)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)


@dataclass
class DatasetRecord:
    eeg_path: str
    image_path: str
    caption: str
    scene: SceneSpec
    subject_id: int
    split: str

    def to_dict(self):
        return {
            "eeg_path": self.eeg_path,
            "image_path": self.image_path,
            "caption": self.caption,
            "scene": self.scene.to_dict(),
            "subject_id": self.subject_id,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["eeg_path"], d["image_path"], d["caption"],
                   SceneSpec.from_dict(d["scene"]), int(d["subject_id"]), d["split"])


@dataclass
class DatasetManifest:
    vocab: Vocabulary
    eeg_shape: tuple
    records: list
    root: Path = field(default_factory=Path)
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ

    def indices_for_split(self, split):
        return [i for i, r in enumerate(self.records) if r.split == split]

    def resolve(self, rel_path):
        return self.root / rel_path

    def to_json_dict(self):
        return {
            "vocab": {"k": self.vocab.num_classes, "c": self.vocab.num_colors,
                      "g": self.vocab.num_backgrounds},
            "eeg_shape": list(self.eeg_shape),
            "sample_rate_hz": self.sample_rate_hz,
            "records": [r.to_dict() for r in self.records],
        }


@dataclass
class TripletBatch:
    """Aligned batch: EEG [B, C, T], images [B, H, W, 3], captions, scenes."""

    eeg: np.ndarray
    images: np.ndarray
    captions: list
    scenes: list
    subject_ids: list

    def __len__(self):
        return self.eeg.shape[0]

    @property
    def class_ids(self):
        return np.array([s.class_id for s in self.scenes], dtype=np.int64)


def _split_counts(n, ratios):
    """Largest-remainder apportionment of n items into len(ratios) splits."""
    raw = [n * r for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    rem = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:rem]:
        counts[i] += 1
    return counts


SPLIT_NAMES = ("train", "val", "test")


def build_dataset(config: DatasetConfig, out_dir) -> DatasetManifest:
    """Generate the corpus and write EEG binaries, PNGs, and manifest.json."""
    out_dir = Path(out_dir)
    vocab = config.vocab
    tokenizer = Tokenizer(vocab)
    try:
        (out_dir / "eeg").mkdir(parents=True, exist_ok=True)
        (out_dir / "img").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"cannot create dataset directories under {out_dir}: {e}") from e

    rng = np_rng(derive_seed(config.seed, "dataset"))
    records = []
    index = 0
    for class_id in range(config.num_classes):
        counts = _split_counts(config.per_class, config.split_ratios)
        splits = [SPLIT_NAMES[s] for s, c in enumerate(counts) for _ in range(c)]
        perm = rng.permutation(config.per_class)
        splits = [splits[int(p)] for p in perm]
        for j in range(config.per_class):
            scene = SceneSpec(
                class_id=class_id,
                color_id=int(rng.integers(config.num_colors)),
                background_id=int(rng.integers(config.num_backgrounds)),
                pose_seed=int(rng.integers(2 ** 63)),
            )
            scene.validate(vocab)
            subject_id = int(rng.integers(config.subjects))
            noise_seed = derive_seed(config.seed, "noise", index)
            record = synth_eeg(scene, subject_id, noise_seed, config.snr_db,
                               channels=config.channels, timesteps=config.timesteps,
                               sample_rate_hz=config.sample_rate_hz)
            eeg_rel = f"eeg/{index:05d}.f32"
            img_rel = f"img/{index:05d}.png"
            try:
                save_eeg(record, out_dir / eeg_rel)
                save_image_png(render_image(scene, config.image_size), out_dir / img_rel)
            except OSError as e:
                raise RuntimeError(f"dataset write failed at {out_dir / eeg_rel}: {e}") from e
            records.append(DatasetRecord(
                eeg_path=eeg_rel, image_path=img_rel,
                caption=caption_text(scene, config.caption_detail, vocab),
                scene=scene, subject_id=subject_id, split=splits[j],
            ))
            index += 1
    # captions must tokenize within the fixed length
    for r in records:
        tokenizer.encode(r.caption)

    manifest = DatasetManifest(
        vocab=vocab, eeg_shape=(config.channels, config.timesteps),
        records=records, root=out_dir, sample_rate_hz=config.sample_rate_hz,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w") as f:
        json.dump(manifest.to_json_dict(), f, indent=1)


def load_manifest(path, validate=True) -> DatasetManifest:
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    vocab = Vocabulary(doc["vocab"]["k"], doc["vocab"]["c"], doc["vocab"]["g"])
    manifest = DatasetManifest(
        vocab=vocab,
        eeg_shape=tuple(doc["eeg_shape"]),
        records=[DatasetRecord.from_dict(r) for r in doc["records"]],
        root=path.parent,
        sample_rate_hz=float(doc.get("sample_rate_hz", DEFAULT_SAMPLE_RATE_HZ)),
    )
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest):
    channels, timesteps = manifest.eeg_shape
    expected_eeg_bytes = 4 * channels * timesteps
    seen_paths = set()
    for i, rec in enumerate(manifest.records):
        rec.scene.validate(manifest.vocab)
        if rec.split not in SPLIT_NAMES:
            raise ValueError(f"record {i}: unknown split {rec.split!r}")
        for p in (rec.eeg_path, rec.image_path):
            if p in seen_paths:
                raise ValueError(f"record {i}: duplicate path {p}")
            seen_paths.add(p)
        eeg_file = manifest.resolve(rec.eeg_path)
        if not eeg_file.exists():
            raise FileNotFoundError(f"record {i}: missing EEG file {eeg_file}")
        if eeg_file.stat().st_size != expected_eeg_bytes:
            raise ValueError(f"record {i}: {eeg_file} has {eeg_file.stat().st_size} bytes, "
                             f"expected {expected_eeg_bytes}")
        img_file = manifest.resolve(rec.image_path)
        if not img_file.exists():
            raise FileNotFoundError(f"record {i}: missing image file {img_file}")


def load_triplet_batch(manifest: DatasetManifest, indices) -> TripletBatch:
    """Load records in the requested order (not manifest order)."""
    channels, timesteps = manifest.eeg_shape
    tokenizer = Tokenizer(manifest.vocab)
    eeg, images, captions, scenes, subjects = [], [], [], [], []
    for idx in indices:
        if not 0 <= idx < len(manifest.records):
            raise IndexError(f"record index {idx} out of range [0, {len(manifest.records)})")
        rec = manifest.records[idx]
        try:
            eeg_rec = load_eeg(manifest.resolve(rec.eeg_path), channels, timesteps,
                               subject_id=rec.subject_id,
                               sample_rate_hz=manifest.sample_rate_hz)
            img = load_image_png(manifest.resolve(rec.image_path))
        except (OSError, ValueError) as e:
            raise RuntimeError(f"failed to load record {idx} ({rec.eeg_path}): {e}") from e
        eeg.append(eeg_rec.samples)
        images.append(img.astype(np.float32))
        captions.append(tokenizer.caption(rec.caption))
        scenes.append(rec.scene)
        subjects.append(rec.subject_id)
    return TripletBatch(
        eeg=np.stack(eeg) if eeg else np.zeros((0, channels, timesteps), np.float32),
        images=np.stack(images) if images else np.zeros((0, 0, 0, 3), np.float32),
        captions=captions, scenes=scenes, subject_ids=subjects,
    )
