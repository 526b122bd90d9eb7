"""
Procedural scene generator with exact depth, segmentation, edge and caption
modalities, plus degraded LR counterparts and the MMDS dataset container.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from PIL import Image
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from src.errors import ContractError, DomainError, FormatError, ShapeError
from src.tensor_io import read_mmt1, write_mmt1

logger = logging.getLogger(__name__)

HR_RES = 32
SCALE = 4
L_TEXT = 16
MAX_SHAPES = 4
SEG_CLASSES = MAX_SHAPES + 1
MODALITIES = ("depth", "seg", "edge")

SHAPE_KINDS = ("circle", "square", "triangle")
COLOR_NAMES = ("black", "white", "red", "green", "blue", "yellow", "cyan", "magenta")
PALETTE = np.array([
    [0, 0, 0], [1, 1, 1], [1, 0, 0], [0, 1, 0],
    [0, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1],
], dtype=np.float32)
POSITION_WORDS = (
    "top-left", "top", "top-right",
    "left", "center", "right",
    "bottom-left", "bottom", "bottom-right",
)
COUNT_WORDS = ("one", "two", "three", "four")
PAD, EMPTY = "<pad>", "<empty>"
VOCAB = COUNT_WORDS + COLOR_NAMES + SHAPE_KINDS + POSITION_WORDS + (PAD, EMPTY)
TOKEN_ID = {word: i for i, word in enumerate(VOCAB)}
PAD_ID = TOKEN_ID[PAD]
EMPTY_ID = TOKEN_ID[EMPTY]

# Background channels stay inside this band so every palette color differs
# from the background by at least 0.35 per channel.
BACKGROUND_RANGE = (0.35, 0.65)
RADIUS_RANGE = (0.08, 0.3)
BLUR_RANGE = (0.4, 1.2)
NOISE_RANGE = (0.0, 0.05)

DATASET_MAGIC = b"MMDS"
_DEGRADE_STREAM = 1


@dataclass(frozen=True)
class Shape:
    kind: str
    color: int
    center: Tuple[float, float]
    radius: float
    depth_rank: int


@dataclass(frozen=True)
class Scene:
    background_top: Tuple[float, float, float]
    background_bottom: Tuple[float, float, float]
    shapes: Tuple[Shape, ...]

    def to_vector(self) -> np.ndarray:
        """Flat float64 serialization used by the dataset container."""
        values = list(self.background_top) + list(self.background_bottom) + [len(self.shapes)]
        for shape in self.shapes:
            values += [SHAPE_KINDS.index(shape.kind), shape.color, shape.center[0],
                       shape.center[1], shape.radius, shape.depth_rank]
        return np.asarray(values, dtype=np.float64)

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "Scene":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size < 7:
            raise FormatError(f"Scene vector too short ({vector.size} values)")
        count = int(vector[6])
        if vector.size != 7 + 6 * count:
            raise FormatError(f"Scene vector has {vector.size} values for {count} shapes")
        shapes = []
        for i in range(count):
            kind, color, cx, cy, radius, rank = vector[7 + 6 * i: 13 + 6 * i]
            shapes.append(Shape(SHAPE_KINDS[int(kind)], int(color), (float(cx), float(cy)),
                                float(radius), int(rank)))
        return cls(tuple(float(v) for v in vector[0:3]), tuple(float(v) for v in vector[3:6]), tuple(shapes))


@dataclass
class ModalityMap:
    """depth: float in [0,1] (1 = nearest); seg: class ids (0 = background); edge: binary."""

    kind: str
    grid: np.ndarray


@dataclass
class CaptionTokens:
    ids: np.ndarray

    def words(self) -> List[str]:
        return [VOCAB[i] for i in self.ids]


@dataclass
class SamplePair:
    hr: np.ndarray
    lr: np.ndarray
    modalities: Dict[str, ModalityMap]
    caption: CaptionTokens
    scene: Scene
    seed: int


# ---------------------------------------------------------------------------
# Scene generation and rendering
# ---------------------------------------------------------------------------

def generate_scene(seed: int) -> Scene:
    """
    Draws a random scene; deterministic in `seed`.

    Shapes get distinct palette colors and a random permutation of depth
    ranks; centers are drawn so every shape lies inside the unit square.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, MAX_SHAPES + 1))
    colors = rng.choice(len(PALETTE), size=count, replace=False)
    kinds = rng.integers(0, len(SHAPE_KINDS), size=count)
    ranks = rng.permutation(count)
    top = tuple(float(v) for v in rng.uniform(*BACKGROUND_RANGE, size=3))
    bottom = tuple(float(v) for v in rng.uniform(*BACKGROUND_RANGE, size=3))

    shapes = []
    for i in range(count):
        radius = float(rng.uniform(*RADIUS_RANGE))
        cx, cy = (float(np.clip(v, radius, 1.0 - radius)) for v in rng.uniform(radius, 1.0 - radius, size=2))
        shapes.append(Shape(SHAPE_KINDS[kinds[i]], int(colors[i]), (cx, cy), radius, int(ranks[i])))
    return Scene(top, bottom, tuple(shapes))


def shape_mask(shape: Shape, resolution: int) -> np.ndarray:
    """Pixels (sampled at their centers) covered by `shape`."""
    coords = (np.arange(resolution) + 0.5) / resolution
    y, x = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = shape.center
    dx, dy = x - cx, y - cy
    r = shape.radius
    if shape.kind == "circle":
        return dx * dx + dy * dy <= r * r
    if shape.kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape.kind == "triangle":
        # apex up, base at cy + r
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    raise ContractError(f"Unknown shape kind '{shape.kind}'")


def segment_boundary(seg: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor of a different segmentation id."""
    edge = np.zeros(seg.shape, dtype=bool)
    vertical = seg[1:, :] != seg[:-1, :]
    horizontal = seg[:, 1:] != seg[:, :-1]
    edge[1:, :] |= vertical
    edge[:-1, :] |= vertical
    edge[:, 1:] |= horizontal
    edge[:, :-1] |= horizontal
    return edge


def render(scene: Scene, resolution: int = HR_RES) -> Tuple[np.ndarray, Dict[str, ModalityMap]]:
    """
    Paints the scene far-to-near and derives its exact modality maps.

    Args:
        scene: Scene to draw.
        resolution: Output side length (>= 8).

    Returns:
        (image H x W x 3 in [0, 1], {"depth", "seg", "edge"} maps)
    """
    if resolution < 8:
        raise DomainError(f"render: resolution must be >= 8, got {resolution}")
    t = ((np.arange(resolution) + 0.5) / resolution)[:, None, None]
    top = np.asarray(scene.background_top, dtype=np.float32)
    bottom = np.asarray(scene.background_bottom, dtype=np.float32)
    image = np.broadcast_to(top * (1 - t) + bottom * t, (resolution, resolution, 3)).astype(np.float32)
    seg = np.zeros((resolution, resolution), dtype=np.int64)
    depth = np.zeros((resolution, resolution), dtype=np.float32)

    total = len(scene.shapes)
    for shape in sorted(scene.shapes, key=lambda s: s.depth_rank, reverse=True):
        mask = shape_mask(shape, resolution)
        image[mask] = PALETTE[shape.color]
        seg[mask] = shape.depth_rank + 1
        depth[mask] = 1.0 - shape.depth_rank / total

    maps = {
        "depth": ModalityMap("depth", depth),
        "seg": ModalityMap("seg", seg),
        "edge": ModalityMap("edge", segment_boundary(seg)),
    }
    return image, maps


def caption(scene: Optional[Scene]) -> CaptionTokens:
    """
    Symbolic caption: count word, then (color, kind, position) per shape
    nearest-first, PAD-filled to L_TEXT. `None` gives the all-EMPTY caption.
    """
    if scene is None:
        return empty_caption()
    words = [COUNT_WORDS[len(scene.shapes) - 1]]
    for shape in sorted(scene.shapes, key=lambda s: s.depth_rank):
        col = min(int(shape.center[0] * 3), 2)
        row = min(int(shape.center[1] * 3), 2)
        words += [COLOR_NAMES[shape.color], shape.kind, POSITION_WORDS[row * 3 + col]]
    words += [PAD] * (L_TEXT - len(words))
    return CaptionTokens(np.array([TOKEN_ID[w] for w in words], dtype=np.int64))


def empty_caption() -> CaptionTokens:
    return CaptionTokens(np.full(L_TEXT, EMPTY_ID, dtype=np.int64))


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------

def degradation_params(seed: int) -> Tuple[float, float]:
    """(blur sigma, noise sigma) drawn for `seed`."""
    rng = np.random.default_rng((seed, _DEGRADE_STREAM))
    return float(rng.uniform(*BLUR_RANGE)), float(rng.uniform(*NOISE_RANGE))


def degrade(hr: np.ndarray, seed: int, scale: int = SCALE, noise_sigma: Optional[float] = None) -> np.ndarray:
    """
    Blur, box-decimate by `scale`, add Gaussian noise, clamp to [0, 1].

    Args:
        hr: H x W x 3 image in [0, 1].
        seed: Degradation seed.
        scale: Decimation factor.
        noise_sigma: Overrides the drawn noise level (0 gives the noise-free path).

    Returns:
        (H / scale) x (W / scale) x 3 float32 image.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 3 or hr.shape[2] != 3 or hr.shape[0] % scale or hr.shape[1] % scale:
        raise ShapeError(f"degrade: expected H x W x 3 with sides divisible by {scale}, got {hr.shape}")
    rng = np.random.default_rng((seed, _DEGRADE_STREAM))
    blur_sigma = rng.uniform(*BLUR_RANGE)
    drawn_noise = rng.uniform(*NOISE_RANGE)
    sigma_n = drawn_noise if noise_sigma is None else noise_sigma

    blurred = gaussian_filter(hr, sigma=(blur_sigma, blur_sigma, 0.0), mode="reflect")
    h, w = hr.shape[0] // scale, hr.shape[1] // scale
    lr = blurred.reshape(h, scale, w, scale, 3).mean(axis=(1, 3))
    noise = rng.normal(0.0, 1.0, size=lr.shape)
    return np.clip(lr + sigma_n * noise, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def make_sample(seed: int, resolution: int = HR_RES, scale: int = SCALE) -> SamplePair:
    scene = generate_scene(seed)
    hr, maps = render(scene, resolution)
    return SamplePair(hr=hr, lr=degrade(hr, seed, scale), modalities=maps,
                      caption=caption(scene), scene=scene, seed=int(seed))


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed used by dataset generation."""
    return int(base_seed) * 1_000_000 + int(index)


def generate_samples(n: int, seed: int, resolution: int = HR_RES, scale: int = SCALE,
                     n_jobs: int = 1, progress: bool = False) -> List[SamplePair]:
    """Generates `n` samples; order depends only on (n, seed)."""
    if n < 1:
        raise ContractError(f"generate_samples: n must be >= 1, got {n}")
    seeds = [sample_seed(seed, i) for i in range(n)]
    if n_jobs == 1:
        iterator = tqdm(seeds, desc="Generating scenes", disable=not progress)
        return [make_sample(s, resolution, scale) for s in iterator]
    return Parallel(n_jobs=n_jobs)(delayed(make_sample)(s, resolution, scale) for s in seeds)


def modality_mask_for(sample: SamplePair) -> np.ndarray:
    """
    Presence flags (depth, seg, edge, caption); a modality carrying no
    information (no foreground, no edge pixel) is marked absent.
    """
    maps = sample.modalities
    flags = np.array([
        bool(np.any(maps["depth"].grid > 0)) if "depth" in maps else False,
        bool(np.any(maps["seg"].grid > 0)) if "seg" in maps else False,
        bool(np.any(maps["edge"].grid)) if "edge" in maps else False,
        bool(np.any(sample.caption.ids != EMPTY_ID)),
    ])
    if not flags.all():
        missing = [name for name, ok in zip(MODALITIES + ("caption",), flags) if not ok]
        logger.warning(f"Sample {sample.seed}: replacing uninformative modalities {missing} with the empty token")
    return flags


def lr_modalities(lr: np.ndarray, scale: int = SCALE) -> Dict[str, ModalityMap]:
    """
    Modalities recoverable from the LR image alone: an edge map from the
    upsampled image. Depth and segmentation are not available on this path.
    """
    from src.metrics import extract_edges
    from src.tensor_core import Tensor, upsample_bilinear

    upsampled = upsample_bilinear(Tensor(np.asarray(lr, dtype=np.float32)), scale).numpy()
    return {"edge": ModalityMap("edge", extract_edges(upsampled))}


# ---------------------------------------------------------------------------
# MMDS container
# ---------------------------------------------------------------------------

def _write_sample(f, sample: SamplePair) -> None:
    seed = int(sample.seed)
    write_mmt1(f, sample.hr.astype(np.float32))
    write_mmt1(f, sample.lr.astype(np.float32))
    write_mmt1(f, sample.modalities["depth"].grid.astype(np.float32))
    write_mmt1(f, sample.modalities["seg"].grid.astype(np.float32))
    write_mmt1(f, sample.modalities["edge"].grid.astype(np.float32))
    write_mmt1(f, sample.caption.ids.astype(np.float32))
    write_mmt1(f, sample.scene.to_vector())
    write_mmt1(f, np.array([seed >> 32, seed & 0xFFFFFFFF], dtype=np.float64))


def _read_sample(f) -> SamplePair:
    hr, lr, depth, seg, edge, ids, scene_vec, seed_parts = (read_mmt1(f) for _ in range(8))
    seed = (int(seed_parts[0]) << 32) | int(seed_parts[1])
    return SamplePair(
        hr=hr, lr=lr,
        modalities={
            "depth": ModalityMap("depth", depth),
            "seg": ModalityMap("seg", seg.astype(np.int64)),
            "edge": ModalityMap("edge", edge.astype(bool)),
        },
        caption=CaptionTokens(ids.astype(np.int64)),
        scene=Scene.from_vector(scene_vec),
        seed=seed,
    )


def write_samples(samples: Sequence[SamplePair], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", len(samples)))
        for sample in samples:
            _write_sample(f, sample)
    logger.info(f"Wrote {len(samples)} samples to {path}")
    return path


def write_dataset(n: int, seed: int, path: Union[str, Path], resolution: int = HR_RES,
                  scale: int = SCALE, n_jobs: int = 1, progress: bool = False) -> Path:
    """Generates `n` samples from `seed` and writes them as an MMDS file."""
    return write_samples(generate_samples(n, seed, resolution, scale, n_jobs, progress), path)


def _read_header(f, path) -> int:
    header = f.read(8)
    if len(header) != 8:
        raise FormatError(f"Truncated dataset header in {path}")
    if header[:4] != DATASET_MAGIC:
        raise FormatError(f"Bad dataset magic {header[:4]!r} in {path}, expected {DATASET_MAGIC!r}")
    return struct.unpack("<I", header[4:])[0]


def index_dataset(path: Union[str, Path]) -> List[int]:
    """Byte offset of every sample, in storage order."""
    offsets = []
    with open(path, "rb") as f:
        count = _read_header(f, path)
        for _ in range(count):
            offsets.append(f.tell())
            _read_sample(f)
    return offsets


def read_dataset(path: Union[str, Path], limit: Optional[int] = None) -> List[SamplePair]:
    """Reads an MMDS file (optionally only its first `limit` samples)."""
    with open(path, "rb") as f:
        count = _read_header(f, path)
        if limit is not None:
            count = min(count, limit)
        return [_read_sample(f) for _ in range(count)]


def read_sample(path: Union[str, Path], index: int) -> SamplePair:
    offsets = index_dataset(path)
    if not 0 <= index < len(offsets):
        raise ContractError(f"Sample index {index} outside [0, {len(offsets)}) for {path}")
    with open(path, "rb") as f:
        f.seek(offsets[index])
        return _read_sample(f)


# ---------------------------------------------------------------------------
# Image export
# ---------------------------------------------------------------------------

def to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_ppm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Writes an H x W x 3 image in [0, 1] as binary PPM (P6)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    return path


def save_pgm(path: Union[str, Path], modality: ModalityMap) -> Path:
    """Writes a modality map as binary PGM (P5); segmentation ids are spread over 0..255."""
    grid = modality.grid.astype(np.float64)
    if modality.kind == "seg":
        grid = grid / MAX_SHAPES
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(grid)).save(path, format="PPM")
    return path


def load_ppm(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float32) / 255.0
