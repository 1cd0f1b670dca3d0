"""
ROI data pipeline: image discovery, manifest matching, label encoding,
deterministic preprocessing, augmentation, patient-level splitting and a
synthetic stand-in dataset.
"""
import hashlib
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from errors import DataError, ManifestConsistencyError, SampleError, SplitConsistencyError, SplitFileError, StorageError
from logger import logger
from models import ManifestRecord

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff")
MANIFEST_COLUMNS = ["patient_id", "abnormality_id", "image_path", "pathology"]
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


# ============================================================================
# DISCOVERY AND MANIFEST
# ============================================================================

@dataclass
class ImageScan:
    files: List[Path]
    irregular: List[Tuple[Path, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.files)


def scan_images(root) -> ImageScan:
    """
    Recursively collect readable raster images under `root`

    Zero-byte and undecodable files are logged and left out of the result.
    """
    root = Path(root)
    if not root.is_dir():
        raise StorageError(f"image root {root} does not exist")

    candidates = sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    scan = ImageScan(files=[])
    for path in candidates:
        if path.stat().st_size == 0:
            reason = "zero-byte file"
        else:
            try:
                with Image.open(path) as im:
                    im.verify()
                scan.files.append(path)
                continue
            except (OSError, SyntaxError, ValueError) as exc:
                reason = f"unreadable: {exc}"
        scan.irregular.append((path, reason))
        logger.warning(f"Skipping irregular image {path}: {reason}")

    logger.info(f"Found {scan.count} images under {root} ({len(scan.irregular)} irregular)")
    return scan


def read_manifest(path, fmt: str = "manifest") -> pd.DataFrame:
    """Load a manifest CSV; `fmt="cbis"` reads a CBIS-DDSM description table through `adapt_cbis_csv`"""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise StorageError(f"cannot read manifest {path}: {exc}") from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if fmt == "cbis":
        frame = adapt_cbis_csv(frame)
    elif fmt != "manifest":
        raise DataError(f"unknown manifest format {fmt!r}")
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"manifest {path} lacks columns {missing}")
    return frame[MANIFEST_COLUMNS]


def write_manifest(records: Sequence[ManifestRecord], path) -> Path:
    path = Path(path)
    frame = pd.DataFrame([r.model_dump(include=set(MANIFEST_COLUMNS)) for r in records], columns=MANIFEST_COLUMNS)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write manifest {path}: {exc}") from exc
    return path


def adapt_cbis_csv(frame: pd.DataFrame, suffix: Optional[str] = ".jpg") -> pd.DataFrame:
    """
    Map a CBIS-DDSM description CSV onto the manifest columns.

    ROI crops are referenced through `cropped image file path`; the DICOM
    suffix is swapped for `suffix` since images are expected pre-converted.
    """
    required = ["patient_id", "abnormality id", "pathology", "cropped image file path"]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"CBIS-DDSM table lacks columns {missing}")
    paths = frame["cropped image file path"].astype(str).str.strip()
    if suffix:
        paths = paths.str.replace(r"\.dcm$", suffix, regex=True)
    return pd.DataFrame({
        "patient_id": frame["patient_id"].astype(str).str.strip(),
        "abnormality_id": frame["abnormality id"].astype(str).str.strip(),
        "image_path": paths,
        "pathology": frame["pathology"].astype(str).str.strip(),
    })


def encode_label(pathology: str) -> int:
    key = str(pathology).strip().upper()
    if key == "MALIGNANT":
        return 1
    if key in ("BENIGN", "BENIGN_WITHOUT_CALLBACK"):
        return 0
    raise DataError(f"unknown pathology {pathology!r}")


def manifest_records(rows: pd.DataFrame) -> List[ManifestRecord]:
    """Records straight from manifest rows, without checking the files"""
    return [
        ManifestRecord(
            patient_id=str(row.patient_id).strip(),
            abnormality_id=str(row.abnormality_id).strip(),
            image_path=Path(str(row.image_path).strip()).as_posix(),
            pathology=str(row.pathology).strip().upper(),
            label=encode_label(row.pathology),
        )
        for row in rows.itertuples(index=False)
    ]


@dataclass
class ManifestMatch:
    records: List[ManifestRecord]
    exclusions: Dict[str, int]

    @property
    def excluded_count(self) -> int:
        return sum(self.exclusions.values())


def match_manifest(rows: pd.DataFrame, files: Sequence[Path], root) -> ManifestMatch:
    """
    Inner join manifest rows and discovered files on the root-relative path

    Exclusions are counted per reason: `no_file` (row without image),
    `no_row` (image without row) and `ambiguous` (several distinct rows for
    one image that agree on the label).
    """
    root = Path(root)
    on_disk = {Path(f).relative_to(root).as_posix() for f in files}

    grouped: Dict[str, List[Tuple[str, str, str]]] = defaultdict(list)
    for row in rows.itertuples(index=False):
        key = Path(str(row.image_path).strip()).as_posix()
        grouped[key].append((str(row.patient_id).strip(), str(row.abnormality_id).strip(), str(row.pathology).strip()))

    exclusions = {"no_file": 0, "no_row": 0, "ambiguous": 0}
    records: List[ManifestRecord] = []
    for key in sorted(grouped):
        entries = list(dict.fromkeys(grouped[key]))
        labels = {encode_label(pathology) for _, _, pathology in entries}
        if len(labels) > 1:
            raise ManifestConsistencyError(f"{key} is listed with conflicting pathologies")
        if key not in on_disk:
            exclusions["no_file"] += len(entries)
            continue
        if len(entries) > 1:
            exclusions["ambiguous"] += len(entries)
            continue
        patient_id, abnormality_id, pathology = entries[0]
        records.append(ManifestRecord(
            patient_id=patient_id, abnormality_id=abnormality_id, image_path=key,
            pathology=pathology.upper(), label=labels.pop(),
        ))
    exclusions["no_row"] = len(on_disk - set(grouped))

    logger.info(f"Matched {len(records)} manifest rows; excluded {exclusions}")
    return ManifestMatch(records=records, exclusions=exclusions)


def class_distribution(records: Sequence[ManifestRecord], minority_floor: float = 0.1) -> pd.DataFrame:
    """Counts and fractions per label; warns on a missing or very small class"""
    counts = Counter(r.label for r in records)
    total = max(len(records), 1)
    table = pd.DataFrame({
        "label": [0, 1],
        "count": [counts.get(0, 0), counts.get(1, 0)],
    })
    table["fraction"] = table["count"] / total
    for label, count, fraction in zip(table["label"], table["count"], table["fraction"]):
        if count == 0:
            logger.warning(f"Class {label} has no samples")
        elif fraction < minority_floor:
            logger.warning(f"Class {label} is a small minority ({fraction:.1%})")
    return table


# ============================================================================
# PREPROCESSING
# ============================================================================

def load_image(path) -> np.ndarray:
    """Decode an 8-bit image into a [3, H, W] float32 array in [0, 1]"""
    try:
        with Image.open(path) as im:
            gray = im if im.mode == "L" else im.convert("L")
            pixels = np.asarray(gray, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise SampleError(f"cannot decode {path}: {exc}") from exc
    scaled = pixels.astype(np.float32) / np.float32(255.0)
    return np.repeat(scaled[None], 3, axis=0)


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2) * t - (a + 3)) * t * t + 1
    far = ((a * t - 5 * a) * t + 8 * a) * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int, a: float = -0.5) -> np.ndarray:
    """[out, in] interpolation matrix with pixel-center alignment and edge clamping"""
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    base = np.floor(src).astype(np.int64)
    for offset in range(-1, 3):
        idx = base + offset
        w = cubic_kernel(src - idx, a)
        np.add.at(weights, (np.arange(out_size), np.clip(idx, 0, in_size - 1)), w)
    return weights / weights.sum(axis=1, keepdims=True)


def resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if img.ndim != 3:
        raise DataError(f"expected [C, H, W] image, got shape {img.shape}")
    _, h, w = img.shape
    if h < 4 or w < 4:
        raise DataError(f"source {h}x{w} too small for bicubic resize")
    if height < 1 or width < 1:
        raise DataError(f"invalid target size {height}x{width}")
    rows = resize_weights(h, height)
    cols = resize_weights(w, width)
    out = np.einsum("oh,chw,pw->cop", rows, img.astype(np.float64), cols)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize(img: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(-1, 1, 1)
    if np.any(std <= 0):
        raise DataError(f"std must be positive per channel, got {std.ravel().tolist()}")
    return ((img - mean) / std).astype(np.float32)


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate every channel about the center; bilinear, zero outside"""
    return ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, mode="constant", cval=0.0)


def sample_augmentation(rng: np.random.Generator, max_angle: float = 10.0) -> Tuple[bool, float]:
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-max_angle, max_angle))
    return flip, angle


def apply_augmentation(img: np.ndarray, flip: bool, angle: float) -> np.ndarray:
    out = img[:, :, ::-1] if flip else img
    if angle != 0.0:
        out = rotate_image(out, angle)
    return np.ascontiguousarray(out)


def augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal mirror (p=0.5) and rotation in [-10, 10] degrees"""
    flip, angle = sample_augmentation(rng)
    return apply_augmentation(img, flip, angle)


# ============================================================================
# PATIENT-LEVEL SPLIT
# ============================================================================

HEADER_PATTERN = re.compile(r"^#\s*seed=(-?\d+)\s+fractions=([0-9.eE+-]+),([0-9.eE+-]+),([0-9.eE+-]+)\s*$")


def _format_fraction(value: float) -> str:
    text = f"{value:.2f}"
    return text if float(text) == value else repr(value)


@dataclass
class SplitAssignment:
    assignment: Dict[str, str]
    seed: int
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS

    def patients(self, split: str) -> List[str]:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def indices(self, records: Sequence[ManifestRecord], split: str) -> List[int]:
        """Positions of the records whose patient belongs to `split`"""
        missing = {r.patient_id for r in records} - set(self.assignment)
        if missing:
            raise SplitConsistencyError(f"{len(missing)} patients are not in the split, e.g. {sorted(missing)[0]}")
        return [i for i, r in enumerate(records) if self.assignment[r.patient_id] == split]

    def to_text(self) -> str:
        fractions = ",".join(_format_fraction(f) for f in self.fractions)
        lines = [f"# seed={self.seed} fractions={fractions}"]
        lines += [f"{patient}\t{self.assignment[patient]}" for patient in sorted(self.assignment)]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def patient_labels(records: Sequence[ManifestRecord]) -> Dict[str, int]:
    """Majority label per patient; ties count as malignant"""
    votes: Dict[str, List[int]] = defaultdict(list)
    for record in records:
        votes[record.patient_id].append(record.label)
    return {p: int(2 * sum(v) >= len(v)) for p, v in votes.items()}


def stratified_split(records: Sequence[ManifestRecord], fractions=DEFAULT_FRACTIONS, seed: int = 0) -> SplitAssignment:
    """
    Greedy patient-level stratified split.

    Patients are labelled by majority class and visited in a seeded random
    order; each goes to the split whose per-class target (fraction x class
    size) is furthest from being met. Ties prefer train, then val, then test.
    """
    labels = patient_labels(records)
    patients = sorted(labels)
    if len(patients) < len(SPLITS):
        raise SplitConsistencyError(f"{len(patients)} patients cannot fill {len(SPLITS)} splits")

    totals = Counter(labels.values())
    targets = np.array([[f * totals.get(c, 0) for c in (0, 1)] for f in fractions], dtype=np.float64)
    assigned = np.zeros_like(targets)

    rng = np.random.default_rng(seed)
    assignment: Dict[str, str] = {}
    for position in rng.permutation(len(patients)):
        patient = patients[position]
        label = labels[patient]
        choice = int(np.argmax(targets[:, label] - assigned[:, label]))
        assigned[choice, label] += 1
        assignment[patient] = SPLITS[choice]

    split = SplitAssignment(assignment=assignment, seed=seed, fractions=tuple(fractions))
    logger.info(
        f"Split {len(patients)} patients (seed={seed}): "
        + ", ".join(f"{s}={len(split.patients(s))}" for s in SPLITS)
    )
    return split


def persist_split(split: SplitAssignment, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(split.to_text(), encoding="utf-8", newline="\n")
    except OSError as exc:
        raise StorageError(f"cannot write split file {path}: {exc}") from exc
    return path


def load_split(path) -> SplitAssignment:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read split file {path}: {exc}") from exc

    if not lines:
        raise SplitFileError("empty split file", line=1)
    header = HEADER_PATTERN.match(lines[0].strip())
    if not header:
        raise SplitFileError("expected '# seed=<int> fractions=<f>,<f>,<f>'", line=1)
    seed = int(header.group(1))
    fractions = tuple(float(header.group(i)) for i in (2, 3, 4))

    assignment: Dict[str, str] = {}
    for number, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.rstrip("\r").split("\t")
        if len(parts) != 2 or not parts[0]:
            raise SplitFileError(f"expected 'patient_id<TAB>split', got {raw!r}", line=number)
        patient, name = parts
        if name not in SPLITS:
            raise SplitFileError(f"unknown split {name!r}", line=number)
        if patient in assignment:
            raise SplitFileError(f"patient {patient} listed twice", line=number)
        assignment[patient] = name
    return SplitAssignment(assignment=assignment, seed=seed, fractions=fractions)


def check_split(split: SplitAssignment, records: Sequence[ManifestRecord]) -> None:
    """Every record's patient is assigned and no patient spans two splits"""
    split.indices(records, "train")
    seen: Dict[str, str] = {}
    for record in records:
        name = split.assignment[record.patient_id]
        if seen.setdefault(record.patient_id, name) != name:
            raise SplitConsistencyError(f"patient {record.patient_id} appears in two splits")


# ============================================================================
# SYNTHETIC DATASET
# ============================================================================

# intensity gap, border perturbation, texture std, then centre jitter and radius range relative to the side
DIFFICULTY = {
    "easy": (0.50, 0.10, 0.06, 1 / 32, (0.22, 0.25)),
    "medium": (0.20, 0.10, 0.04, 1 / 16, (0.20, 0.26)),
    "hard": (0.06, 0.06, 0.02, 1 / 16, (0.18, 0.28)),
}


@dataclass
class SynthSet:
    records: List[ManifestRecord]
    images: List[np.ndarray]


def _synth_image(rng: np.random.Generator, size: int, label: int, difficulty: str) -> np.ndarray:
    gap, star, texture, jitter, (r_lo, r_hi) = DIFFICULTY[difficulty]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size / 2 + rng.uniform(-size * jitter, size * jitter, 2)
    radius = size * rng.uniform(r_lo, r_hi)
    theta = np.arctan2(yy - cy, xx - cx)
    dist = np.hypot(yy - cy, xx - cx)

    if label:
        lobes = rng.integers(5, 9)
        border = radius * (1 + star * np.cos(lobes * theta + rng.uniform(0, 2 * np.pi)))
    else:
        border = radius * np.ones_like(theta)
    mask = 1.0 / (1.0 + np.exp(-(border - dist) / max(size / 64, 0.5)))

    background = 0.15 + 0.03 * rng.standard_normal((size, size))
    level = 0.35 + gap * label
    blob = level + (0.03 + texture * label) * rng.standard_normal((size, size))
    image = np.clip(background * (1 - mask) + blob * mask, 0.0, 1.0)
    return np.round(image * 255).astype(np.uint8)


def synth_dataset(n: int, image_size: int = 64, seed: int = 0, difficulty: str = "easy") -> SynthSet:
    """
    Grayscale ROI stand-ins: class 1 blobs are brighter with star-shaped
    borders and rougher texture, class 0 blobs are smooth discs.
    Patients own 1-3 consecutive images; labels are balanced to within one.
    """
    if n < 4:
        raise DataError(f"synthetic dataset needs n >= 4, got {n}")
    if difficulty not in DIFFICULTY:
        raise DataError(f"unknown difficulty {difficulty!r}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    records: List[ManifestRecord] = []
    images: List[np.ndarray] = []
    index, patient = 0, 0
    while index < n:
        count = min(int(rng.integers(1, 4)), n - index)
        patient_id = f"P{patient:05d}"
        for roi in range(1, count + 1):
            label = int(labels[index])
            images.append(_synth_image(rng, image_size, label, difficulty))
            records.append(ManifestRecord(
                patient_id=patient_id,
                abnormality_id=str(roi),
                image_path=f"images/{patient_id}_{roi}.png",
                pathology="MALIGNANT" if label else "BENIGN",
                label=label,
            ))
            index += 1
        patient += 1
    return SynthSet(records=records, images=images)


def write_synth_dataset(synth: SynthSet, out_dir) -> Path:
    """PNG files plus `manifest.csv`; returns the manifest path"""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for record, image in zip(synth.records, synth.images):
            Image.fromarray(image).save(out_dir / record.image_path, format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write synthetic dataset to {out_dir}: {exc}") from exc
    manifest = write_manifest(synth.records, out_dir / "manifest.csv")
    logger.info(f"Wrote {len(synth.records)} synthetic images to {out_dir}")
    return manifest


# ============================================================================
# DATASET AND BATCHING
# ============================================================================

class RoiDataset:
    """
    Preprocessed samples addressed by record index.

    Resized, unaugmented images are cached as a single luma plane and
    repeated to three channels on load. Datasets over the same images may
    share one cache. Augmentation (training split only) draws from a
    generator seeded by (seed, epoch, index), so the result does not depend
    on worker scheduling.
    """

    def __init__(
        self,
        records: Sequence[ManifestRecord],
        image_root,
        image_size: int,
        mean=IMAGENET_MEAN,
        std=IMAGENET_STD,
        augment: bool = False,
        seed: int = 0,
        cache: Optional[Dict[Tuple[str, int], np.ndarray]] = None,
    ):
        self.records = list(records)
        self.image_root = Path(image_root)
        self.image_size = image_size
        self.mean = mean
        self.std = std
        self.augment = augment
        self.seed = seed
        self.cache: Dict[Tuple[str, int], np.ndarray] = {} if cache is None else cache
        self.skipped: set = set()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.float32)

    def _resized(self, index: int) -> np.ndarray:
        """[1, S, S] luma plane in [0, 1]"""
        path = self.image_root / self.records[index].image_path
        key = (str(path), self.image_size)
        cached = self.cache.get(key)
        if cached is None:
            plane = load_image(path)[:1].copy()
            if plane.shape[1:] != (self.image_size, self.image_size):
                plane = resize_bicubic(plane, self.image_size, self.image_size)
            plane.flags.writeable = False
            self.cache[key] = cached = plane
        return cached

    def load(self, index: int, epoch: int = 0) -> np.ndarray:
        plane = self._resized(index)
        if self.augment:
            plane = augment(plane, np.random.default_rng([self.seed, epoch, index]))
        return normalize(np.repeat(plane, 3, axis=0), self.mean, self.std)

    def try_load(self, index: int, epoch: int = 0) -> Optional[np.ndarray]:
        try:
            return self.load(index, epoch)
        except SampleError as exc:
            if index not in self.skipped:
                logger.warning(f"Skipping sample {self.records[index].image_path}: {exc}")
                self.skipped.add(index)
            return None


def iter_batches(
    dataset: RoiDataset,
    indices: Sequence[int],
    batch_size: int,
    epoch: int = 0,
    workers: int = 1,
) -> Iterator[Tuple[np.ndarray, np.ndarray, List[int]]]:
    """
    Yield (images [B, 3, S, S], labels [B], record indices) in `indices` order.

    Loading may use a thread pool; results are consumed in submission order
    so the batch sequence equals the single-worker one. Corrupt samples are
    dropped from their batch.
    """
    labels = dataset.labels
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, len(indices), batch_size):
            chunk = list(indices[start:start + batch_size])
            if pool is not None:
                loaded = list(pool.map(lambda i: dataset.try_load(i, epoch), chunk))
            else:
                loaded = [dataset.try_load(i, epoch) for i in chunk]
            kept = [(i, img) for i, img in zip(chunk, loaded) if img is not None]
            if not kept:
                continue
            batch_indices = [i for i, _ in kept]
            yield np.stack([img for _, img in kept]), labels[batch_indices], batch_indices
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
