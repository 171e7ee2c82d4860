"""Image ingestion and dataset plumbing.

PNM (P2/P3/P5/P6) decoding and encoding, bilinear resizing to the
64 px model resolution, per-channel normalization, light augmentation,
deterministic stratified train/test splitting, and batching.

Sample images are kept in [0, 1]; normalization is applied by whoever
feeds the model (trainer, predictor) so raw pixels stay inspectable.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigurationError,
    EmptyInputError,
    InputError,
    LabelError,
    PnmError,
)

TASK_DETECT = "detect"
TASK_CLASSIFY = "classify"

# label ids are positions in these tuples; "Yes" (tumor) is the
# positive detection class
DETECT_CLASSES = ("No", "Yes")
CLASSIFY_CLASSES = ("Meningioma Tumor", "Glioma Tumor", "Pituitary Tumor")


def classes_for_task(task: str):
    if task == TASK_DETECT:
        return DETECT_CLASSES
    if task == TASK_CLASSIFY:
        return CLASSIFY_CLASSES
    raise InputError(f"unknown task {task!r}")


def label_for(task: str, class_name: str) -> int:
    names = classes_for_task(task)
    if class_name not in names:
        raise LabelError(f"class {class_name!r} not valid for task {task!r}")
    return names.index(class_name)


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Sample:
    """One image with its label, pre-normalization (pixels in [0, 1])."""

    image: np.ndarray
    label: int
    source_path: str
    task: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InputError(f"sample image must be 3xHxW, got {list(self.image.shape)}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise InputError("sample pixels must lie in [0, 1]")
        n = len(classes_for_task(self.task))
        if not 0 <= self.label < n:
            raise LabelError(f"label {self.label} out of range for task {self.task!r}")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    task: str
    class_name: str


@dataclass
class DatasetManifest:
    """Listing of (path, task, class name) rows plus their location.

    Paths are stored as written and resolved relative to the manifest's
    own directory.
    """

    entries: list
    base_dir: str = "."

    def __post_init__(self):
        for e in self.entries:
            label_for(e.task, e.class_name)  # validates both fields

    def class_counts(self) -> dict:
        counts = {}
        for e in self.entries:
            counts[e.class_name] = counts.get(e.class_name, 0) + 1
        return counts

    def resolve(self, entry: ManifestEntry) -> str:
        return os.path.join(self.base_dir, entry.path)


def load_manifest(path: str) -> DatasetManifest:
    """Read a `path,task,class` CSV (UTF-8, LF endings)."""
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "task", "class"]:
            raise InputError(f"manifest {path}: expected header path,task,class")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"manifest {path} line {line_no}: expected 3 fields")
            try:
                label_for(row[1], row[2])
            except (InputError, LabelError) as exc:
                raise InputError(f"manifest {path} line {line_no}: {exc}") from exc
            entries.append(ManifestEntry(row[0], row[1], row[2]))
    return DatasetManifest(entries, base_dir=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "task", "class"])
        for e in manifest.entries:
            writer.writerow([e.path, e.task, e.class_name])


@dataclass(frozen=True)
class PreprocessConfig:
    resample: str = "bilinear"
    image_mean: tuple = (0.5, 0.5, 0.5)
    image_std: tuple = (0.5, 0.5, 0.5)
    target_size: int = 64

    def __post_init__(self):
        if self.resample != "bilinear":
            raise ConfigurationError(f"unsupported resample mode {self.resample!r}")
        if any(s <= 0 for s in self.image_std):
            raise ConfigurationError("image_std entries must be positive")
        if self.target_size != 64:
            raise ConfigurationError("target_size is fixed at 64")


DEFAULT_PREPROCESS = PreprocessConfig()


@dataclass
class Batch:
    images: np.ndarray  # (b, 3, 64, 64), values in [0, 1]
    labels: tuple

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = tuple(int(l) for l in self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != len(self.labels):
            raise InputError("batch images and labels disagree")
        if self.images.shape[0] < 1:
            raise EmptyInputError("empty batch")

    def __len__(self):
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# PNM decoding / encoding

_WS = frozenset(b" \t\r\n\x0b\x0c")


class _PnmScanner:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def skip_space(self):
        blob = self.blob
        while self.pos < len(blob):
            c = blob[self.pos]
            if c in _WS:
                self.pos += 1
            elif c == ord("#"):
                while self.pos < len(blob) and blob[self.pos] != ord("\n"):
                    self.pos += 1
            else:
                break

    def token(self, what: str):
        self.skip_space()
        start = self.pos
        blob = self.blob
        while self.pos < len(blob) and blob[self.pos] not in _WS:
            self.pos += 1
        if self.pos == start:
            raise PnmError(f"missing {what}", offset=start)
        return start, blob[start : self.pos]

    def integer(self, what: str):
        start, tok = self.token(what)
        if not tok.isdigit():
            raise PnmError(f"{what} is not a decimal number: {tok[:8]!r}", offset=start)
        return start, int(tok)


def load_pnm(data: bytes) -> np.ndarray:
    """Decode P2/P3/P5/P6 bytes to a 3xHxW array scaled to [0, 1].

    Grayscale inputs are replicated across the 3 channels.  Only
    maxval <= 255 is supported; malformed input raises PnmError with
    the offending byte offset.
    """
    scan = _PnmScanner(bytes(data))
    try:
        at, magic = scan.token("magic number")
    except PnmError:
        raise PnmError("empty input", offset=0)
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic[:2]!r}", offset=at)
    _, width = scan.integer("width")
    _, height = scan.integer("height")
    if width < 1 or height < 1:
        raise PnmError(f"degenerate image extents {width}x{height}", offset=at)
    max_at, maxval = scan.integer("maxval")
    if maxval < 1 or maxval > 255:
        raise PnmError(f"maxval {maxval} outside [1, 255]", offset=max_at)

    channels = 3 if magic in (b"P3", b"P6") else 1
    needed = width * height * channels
    if magic in (b"P5", b"P6"):
        if scan.pos >= len(scan.blob) or scan.blob[scan.pos] not in _WS:
            raise PnmError("missing separator after maxval", offset=scan.pos)
        start = scan.pos + 1
        payload = scan.blob[start : start + needed]
        if len(payload) < needed:
            raise PnmError(
                f"truncated pixel data: {len(payload)} of {needed} bytes",
                offset=len(scan.blob),
            )
        values = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    else:
        values = np.empty(needed)
        for i in range(needed):
            at, v = scan.integer("pixel value")
            if v > maxval:
                raise PnmError(f"pixel value {v} exceeds maxval {maxval}", offset=at)
            values[i] = v

    if channels == 1:
        img = np.repeat(values.reshape(1, height, width), 3, axis=0)
    else:
        img = values.reshape(height, width, 3).transpose(2, 0, 1)
    return img / float(maxval)


def write_pnm(image: np.ndarray, fmt: str = "P6") -> bytes:
    """Encode a 3xHxW [0, 1] image; gray formats need equal channels."""
    if fmt not in ("P2", "P3", "P5", "P6"):
        raise InputError(f"unsupported PNM format {fmt!r}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputError(f"expected 3xHxW image, got {list(image.shape)}")
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    _, h, w = q.shape
    header = f"{fmt}\n{w} {h}\n255\n".encode("ascii")
    if fmt in ("P2", "P5"):
        if not (np.array_equal(q[0], q[1]) and np.array_equal(q[1], q[2])):
            raise InputError("gray output needs identical channels")
        plane = q[0]
        if fmt == "P5":
            return header + plane.tobytes()
        body = "\n".join(" ".join(str(v) for v in row) for row in plane)
        return header + body.encode("ascii") + b"\n"
    pixels = q.transpose(1, 2, 0)
    if fmt == "P6":
        return header + pixels.tobytes()
    body = "\n".join(" ".join(str(v) for v in row.reshape(-1)) for row in pixels)
    return header + body.encode("ascii") + b"\n"


# ---------------------------------------------------------------------------
# preprocessing


def _axis_positions(src: int, dst: int):
    # align-corners-false sampling: dst pixel centers mapped into the
    # source grid, edge values clamped
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    lo = np.floor(pos).astype(np.int64)
    t = pos - lo
    return np.clip(lo, 0, src - 1), np.clip(lo + 1, 0, src - 1), t


def resize_bilinear(image: np.ndarray, target_size) -> np.ndarray:
    """Separable bilinear resize of a 3xHxW image."""
    image = np.asarray(image, dtype=np.float64)
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    _, h, w = image.shape
    if h < 1 or w < 1 or th < 1 or tw < 1:
        raise EmptyInputError("resize requires positive extents")
    if (h, w) == (th, tw):
        return image.copy()
    lo0, lo1, t = _axis_positions(h, th)
    rows = image[:, lo0, :] * (1.0 - t)[None, :, None] + image[:, lo1, :] * t[None, :, None]
    lo0, lo1, t = _axis_positions(w, tw)
    return rows[:, :, lo0] * (1.0 - t)[None, None, :] + rows[:, :, lo1] * t[None, None, :]


def _channel_shape(image: np.ndarray, values) -> np.ndarray:
    # works for one 3xHxW image or a bx3xHxW batch
    shape = (3, 1, 1) if image.ndim == 3 else (1, 3, 1, 1)
    return np.asarray(values, dtype=np.float64).reshape(shape)


def normalize(image: np.ndarray, config: PreprocessConfig = DEFAULT_PREPROCESS) -> np.ndarray:
    """Per channel: (value - image_mean) / image_std."""
    image = np.asarray(image, dtype=np.float64)
    mean = _channel_shape(image, config.image_mean)
    std = _channel_shape(image, config.image_std)
    return (image - mean) / std


def denormalize(image: np.ndarray, config: PreprocessConfig = DEFAULT_PREPROCESS) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    mean = _channel_shape(image, config.image_mean)
    std = _channel_shape(image, config.image_std)
    return image * std + mean


def augment(sample: Sample, rng) -> Sample:
    """Horizontal flip (p=0.5), uniform right-angle rotation, then a
    4 px reflective pad followed by a center crop back to the input
    extents.  The label never changes; both rng draws always happen so
    output depends only on the rng state."""
    img = sample.image
    flip = rng.random() < 0.5
    quarter_turns = int(rng.integers(4))
    if flip:
        img = img[:, :, ::-1]
    img = np.rot90(img, quarter_turns, axes=(1, 2))
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (4, 4), (4, 4)), mode="reflect")
    top = (padded.shape[1] - h) // 2
    left = (padded.shape[2] - w) // 2
    img = padded[:, top : top + h, left : left + w]
    return Sample(np.ascontiguousarray(img), sample.label, sample.source_path, sample.task)


def split_train_test(manifest: DatasetManifest, seed: int):
    """Stratified 90/10 split, floor(0.9 n) per class to train.

    Deterministic for a given seed; classes are shuffled independently
    in sorted class-name order.
    """
    if not manifest.entries:
        raise EmptyInputError("cannot split an empty manifest")
    rng = np.random.default_rng(seed)
    groups = {}
    for e in manifest.entries:
        groups.setdefault(e.class_name, []).append(e)
    train, test = [], []
    for name in sorted(groups):
        entries = groups[name]
        order = rng.permutation(len(entries))
        cut = (9 * len(entries)) // 10
        train.extend(entries[i] for i in order[:cut])
        test.extend(entries[i] for i in order[cut:])
    return train, test


def make_batches(samples, batch_size: int = 32, rng=None):
    """Chunk samples into Batches, shuffling first when rng is given.

    All batches have batch_size items except possibly the last.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(len(samples)))
    if rng is not None:
        order = list(rng.permutation(len(samples)))
    batches = []
    for at in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[at : at + batch_size]]
        images = np.stack([s.image for s in chunk])
        batches.append(Batch(images, tuple(s.label for s in chunk)))
    return batches


# ---------------------------------------------------------------------------
# dataset assembly


def load_sample(manifest: DatasetManifest, entry: ManifestEntry,
                config: PreprocessConfig = DEFAULT_PREPROCESS) -> Sample:
    path = manifest.resolve(entry)
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        image = load_pnm(raw)
    except PnmError as exc:
        raise PnmError(f"{path}: {exc}", offset=exc.offset) from exc
    image = np.clip(resize_bilinear(image, config.target_size), 0.0, 1.0)
    return Sample(image, label_for(entry.task, entry.class_name), entry.path, entry.task)


def load_dataset(manifest: DatasetManifest, entries=None,
                 config: PreprocessConfig = DEFAULT_PREPROCESS):
    """Load (a subset of) a manifest into preprocessed Samples."""
    if entries is None:
        entries = manifest.entries
    return [load_sample(manifest, e, config) for e in entries]


def augment_dataset(samples, copies: int, seed: int):
    """Originals plus `copies` augmented variants of each sample.

    Each variant gets its own rng stream derived from (seed, sample
    index, copy index), so workers could process samples in parallel
    without sharing rng state.
    """
    out = list(samples)
    for copy in range(copies):
        for idx, sample in enumerate(samples):
            rng = np.random.default_rng([seed, copy, idx])
            out.append(augment(sample, rng))
    return out
