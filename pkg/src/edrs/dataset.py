"""
Lesion patch datasets: synthetic nodule generator, PGM loader, rotation
augmentation and patient-level fold assignment
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import DatasetError
from .models import BENIGN, MALIGNANT, AugmentConfig, FoldSplit, PatchRecord, divides_360
from .seeding import derive_rng

logger = structlog.get_logger(__name__)

PATCH_SIZE = 32
INDEX_FILE = "index.csv"
INDEX_COLUMNS = ["filename", "patient_id", "lesion_id", "label"]


@dataclass(frozen=True)
class PatchDataset:
    """Immutable, array-backed view over a list of patch records"""

    images: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,)
    patient_ids: np.ndarray
    lesion_ids: np.ndarray
    rotations: np.ndarray
    augmented: np.ndarray

    def __post_init__(self):
        for array in (self.images, self.labels, self.patient_ids, self.lesion_ids, self.rotations, self.augmented):
            array.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_records(cls, records: Sequence[PatchRecord]) -> "PatchDataset":
        if records:
            images = np.stack([r.image for r in records])
        else:
            images = np.zeros((0, PATCH_SIZE, PATCH_SIZE))
        return cls(
            images=images,
            labels=np.array([r.label for r in records], dtype=np.int64),
            patient_ids=np.array([r.patient_id for r in records], dtype=object),
            lesion_ids=np.array([r.lesion_id for r in records], dtype=object),
            rotations=np.array([r.rotation_deg for r in records], dtype=np.float64),
            augmented=np.array([r.is_augmented for r in records], dtype=bool),
        )

    def subset(self, index: np.ndarray) -> "PatchDataset":
        index = np.asarray(index)
        return PatchDataset(
            self.images[index],
            self.labels[index],
            self.patient_ids[index],
            self.lesion_ids[index],
            self.rotations[index],
            self.augmented[index],
        )

    def for_patients(self, patients: Iterable[str]) -> "PatchDataset":
        wanted = set(patients)
        return self.subset(np.array([p in wanted for p in self.patient_ids], dtype=bool))


def _render_lesion(rng: np.random.Generator, malignant: bool, size: int = PATCH_SIZE) -> np.ndarray:
    """
    Malignant: elongated blob with a spiculated rim and a textured interior.
    Benign: near-isotropic smooth blob. Brightness, size and position come
    from the same ranges for both classes, so the patch centre alone does not
    separate them.
    """
    centre = (size - 1) / 2.0 + rng.uniform(-1.5, 1.5, size=2)
    radius = rng.uniform(6.0, 9.0)
    peak = rng.uniform(0.5, 0.85)
    background = rng.uniform(0.05, 0.2)
    theta = rng.uniform(0.0, math.pi)
    noise_field = rng.standard_normal((size, size))
    pixel_noise = rng.normal(0.0, 0.03, size=(size, size))

    if malignant:
        elongation = rng.uniform(1.3, 1.8)
        spikes = int(rng.integers(5, 10))
        spike_amp = rng.uniform(0.25, 0.45)
        phase = rng.uniform(0.0, 2 * math.pi)
        softness, texture_amp = 0.6, 0.25
    else:
        elongation = rng.uniform(1.0, 1.1)
        spikes, spike_amp, phase = 0, 0.0, 0.0
        softness, texture_amp = 1.2, 0.05

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - centre[0], xx - centre[1]
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    a, b = radius * math.sqrt(elongation), radius / math.sqrt(elongation)
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    phi = np.arctan2(v, u)
    rim = 1.0 + spike_amp * np.abs(np.cos(spikes * phi / 2.0 + phase)) ** 6
    profile = 1.0 / (1.0 + np.exp((r / rim - 1.0) * radius / softness))

    texture = ndimage.gaussian_filter(noise_field, sigma=1.0)
    texture /= texture.std() or 1.0
    image = background + (peak - background) * profile * (1.0 + texture_amp * texture) + pixel_noise
    return np.clip(image, 0.0, 1.0)


def generate_synthetic(
    n_patients: int,
    lesions_per_patient: int,
    seed: int,
    malignant_fraction: float = 0.5,
) -> List[PatchRecord]:
    """Deterministic synthetic lesion set, one base (unrotated) record per lesion"""
    if n_patients < 1 or lesions_per_patient < 1:
        raise DatasetError("need at least one patient and one lesion per patient")
    total = n_patients * lesions_per_patient
    n_malignant = int(round(malignant_fraction * total))
    labels = np.zeros(total, dtype=np.int64)
    labels[:n_malignant] = MALIGNANT
    labels = derive_rng(seed, purpose="labels").permutation(labels)

    records = []
    for p in range(n_patients):
        for lesion in range(lesions_per_patient):
            label = int(labels[p * lesions_per_patient + lesion])
            rng = derive_rng(seed, fold=p, generation=lesion, purpose="data")
            records.append(
                PatchRecord(
                    image=_render_lesion(rng, malignant=label == MALIGNANT),
                    label=label,
                    patient_id=f"p{p + 1:03d}",
                    lesion_id=f"l{lesion + 1}",
                )
            )
    logger.info("generated synthetic lesions", patients=n_patients, lesions=total, malignant=n_malignant, seed=seed)
    return records


def _background_level(image: np.ndarray) -> float:
    border = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    return float(np.median(border))


def rotate_patch(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Bilinear rotation about the patch centre; uncovered pixels take the border level"""
    if angle_deg % 360 == 0:
        return np.array(image, dtype=np.float64)
    rotated = ndimage.rotate(
        np.asarray(image, dtype=np.float64),
        angle_deg,
        reshape=False,
        order=1,
        mode="constant",
        cval=_background_level(image),
    )
    return np.clip(rotated, 0.0, 1.0)


def rotation_angles(step_deg: float) -> List[float]:
    if not divides_360(step_deg):
        raise DatasetError(f"rotation step {step_deg} does not divide 360")
    return [k * step_deg for k in range(int(round(360.0 / step_deg)))]


def augment(records: Sequence[PatchRecord], cfg: Optional[AugmentConfig] = None) -> List[PatchRecord]:
    """
    Class-conditional rotation enrichment: every lesion is rotated through a
    full turn in steps of `malignant_step_deg` or `benign_step_deg`, 0 deg
    included.
    """
    cfg = cfg or AugmentConfig()
    angles = {MALIGNANT: rotation_angles(cfg.malignant_step_deg), BENIGN: rotation_angles(cfg.benign_step_deg)}
    already = [f"{r.patient_id}/{r.lesion_id}" for r in records if r.is_augmented]
    if already:
        raise DatasetError("augment expects base records", [f"{name} is already augmented" for name in already])
    out = []
    for record in records:
        for angle in angles[record.label]:
            out.append(
                PatchRecord(
                    image=rotate_patch(record.image, angle),
                    label=record.label,
                    patient_id=record.patient_id,
                    lesion_id=record.lesion_id,
                    rotation_deg=float(angle),
                    is_augmented=angle != 0,
                )
            )
    logger.info("augmented lesions", base=len(records), augmented=len(out))
    return out


def split_folds(records: Sequence[PatchRecord], n_folds: int, seed: int) -> FoldSplit:
    """Shuffle patients, then deal them into n_folds near-equal contiguous chunks"""
    patients = sorted({r.patient_id for r in records})
    if len(patients) < n_folds:
        raise DatasetError(f"{len(patients)} patients cannot fill {n_folds} folds")
    order = derive_rng(seed, purpose="folds").permutation(len(patients))
    assignment = {}
    for fold, chunk in enumerate(np.array_split(order, n_folds)):
        for index in chunk:
            assignment[patients[index]] = fold
    split = FoldSplit(n_folds=n_folds, assignment=assignment)
    logger.info("assigned folds", patients=len(patients), folds=n_folds, sizes=split.fold_sizes())
    return split


def read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "L":
            raise DatasetError(f"{path.name}: expected an 8-bit grayscale image, got mode {img.mode}")
        raw = np.asarray(img, dtype=np.float64)
    image = raw / 255.0
    if image.shape != (PATCH_SIZE, PATCH_SIZE):
        factors = (PATCH_SIZE / image.shape[0], PATCH_SIZE / image.shape[1])
        image = ndimage.zoom(image, factors, order=1, grid_mode=True, mode="nearest")
        image = image[:PATCH_SIZE, :PATCH_SIZE]
    return np.clip(image, 0.0, 1.0)


def load_patches(directory: Union[str, Path]) -> List[PatchRecord]:
    """
    Read `index.csv` (filename, patient_id, lesion_id, label) and the 8-bit
    PGM patches it names. Every problem is collected first, then the load
    aborts with all of them.
    """
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    if not index_path.is_file():
        raise DatasetError(f"no {INDEX_FILE} in {directory}")
    index = pd.read_csv(index_path, dtype=str, keep_default_na=False)
    missing_columns = [c for c in INDEX_COLUMNS if c not in index.columns]
    if missing_columns:
        raise DatasetError(f"{index_path} lacks columns {missing_columns}")

    problems, records = [], []
    listed = set(index["filename"])
    for stray in sorted(p.name for p in directory.glob("*.pgm") if p.name not in listed):
        problems.append(f"{stray}: no index entry")
    for row in index.itertuples(index=False):
        if row.label.strip() not in ("0", "1"):
            problems.append(f"{row.filename}: label {row.label!r} not in {{0, 1}}")
            continue
        path = directory / row.filename
        if not path.is_file():
            problems.append(f"{row.filename}: file not found")
            continue
        try:
            image = read_pgm(path)
        except DatasetError as e:
            problems.append(str(e))
            continue
        except (OSError, UnidentifiedImageError, ValueError) as e:
            problems.append(f"{row.filename}: unreadable image ({e})")
            continue
        records.append(PatchRecord(image=image, label=int(row.label), patient_id=row.patient_id, lesion_id=row.lesion_id))

    if problems:
        for problem in problems:
            logger.error(f"Patch load problem: {problem}")
        raise DatasetError(f"{len(problems)} problem(s) loading {directory}", problems)
    logger.info("loaded patches", directory=str(directory), records=len(records))
    return records


def patch_filename(record: PatchRecord) -> str:
    return f"{record.patient_id}_{record.lesion_id}_{record.label}.pgm"


def write_patches(records: Sequence[PatchRecord], directory: Union[str, Path]) -> Path:
    """Write base records as 8-bit PGM files plus the index load_patches reads"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for record in records:
        name = patch_filename(record)
        pixels = np.round(record.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(directory / name, format="PPM")
        rows.append({"filename": name, "patient_id": record.patient_id, "lesion_id": record.lesion_id, "label": record.label})
    pd.DataFrame(rows, columns=INDEX_COLUMNS).to_csv(directory / INDEX_FILE, index=False)
    logger.info("wrote patches", directory=str(directory), records=len(rows))
    return directory


def write_manifest(records: Sequence[PatchRecord], split: FoldSplit, path: Union[str, Path]) -> Path:
    """Dataset manifest: one row per record with its provenance and fold"""
    path = Path(path)
    frame = pd.DataFrame(
        {
            "patient_id": [r.patient_id for r in records],
            "lesion_id": [r.lesion_id for r in records],
            "label": [r.label for r in records],
            "rotation_deg": [r.rotation_deg for r in records],
            "is_augmented": [r.is_augmented for r in records],
            "fold": [split.assignment[r.patient_id] for r in records],
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path
