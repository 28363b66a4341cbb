"""
Micrograph Dataset Schema - samples, manifest entries and the dataset manifest.

Architecture:
- MicrographSample is the in-memory raster record (numpy arrays)
- ManifestEntry / DatasetManifest describe the files on disk (JSON)
- Class 0 is always the matrix (background phase); 1..n_cl are constituents
"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


# ============================================================================
# ENUMS AND CONSTANTS
# ============================================================================

MATRIX_CLASS = 0
NOT_SEGMENTED = -1

CLASS_NAMES: Tuple[str, ...] = (
    "matrix",
    "martensite",
    "tempered_martensite",
    "bainite",
    "pearlite",
)

# RGB legend for color-coded maps
CLASS_COLORS: Dict[int, Tuple[int, int, int]] = {
    MATRIX_CLASS: (0, 0, 0),
    1: (255, 0, 0),      # martensite: red
    2: (0, 255, 0),      # tempered martensite: green
    3: (0, 0, 255),      # bainite: blue
    4: (255, 255, 0),    # pearlite: yellow
    NOT_SEGMENTED: (255, 255, 255),
}

Split = Literal["train", "test"]


def class_names(n_cl: int) -> List[str]:
    """Names for classes 0..n_cl (matrix first)."""
    names = list(CLASS_NAMES[: n_cl + 1])
    names += [f"class_{i}" for i in range(len(names), n_cl + 1)]
    return names


# ============================================================================
# IN-MEMORY SAMPLE
# ============================================================================

@dataclass(frozen=True)
class MicrographSample:
    """
    Grayscale image with its per-pixel label map and binary constituent mask.

    Invariants:
        image, label_map and mask share dimensions
        label_map nonzero implies mask foreground
    """
    name: str
    image: np.ndarray  # (H, W) uint8
    label_map: np.ndarray  # (H, W) uint8, 0 = matrix
    mask: np.ndarray  # (H, W) bool
    sample_class: Optional[int] = None

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"sample '{self.name}': image must be 2-D, got shape {self.image.shape}")
        if self.label_map.shape != self.image.shape or self.mask.shape != self.image.shape:
            raise ValueError(
                f"sample '{self.name}': raster shapes differ "
                f"(image {self.image.shape}, label_map {self.label_map.shape}, mask {self.mask.shape})"
            )
        if np.any((self.label_map != MATRIX_CLASS) & ~self.mask.astype(bool)):
            raise ValueError(f"sample '{self.name}': labeled pixels outside the mask")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape


# ============================================================================
# MANIFEST
# ============================================================================

class ManifestEntry(BaseModel):
    """One sample on disk; paths are relative to the manifest's directory."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., description="Sample identifier, e.g. 'train_000'")
    image: str = Field(..., description="8-bit grayscale PNG/PGM")
    label_map: str = Field(..., description="8-bit PNG, pixel value = class index")
    mask: str = Field(..., description="8-bit PNG, nonzero = constituent")
    split: Split
    sample_class: Optional[int] = Field(default=None, ge=0, description="Dominant constituent class")
    object_count: Optional[int] = Field(default=None, ge=0)


class DatasetManifest(BaseModel):
    """
    Dataset index written next to the rasters.

    Examples:
        manifest = DatasetManifest.load(Path("data/manifest.json"))
        for entry in manifest.split("test"):
            sample = load_sample(manifest.root / entry.image, ...)
    """

    model_config = ConfigDict(extra="forbid")

    n_classes: int = Field(default=4, ge=1, description="Constituent classes (matrix excluded)")
    class_names: List[str] = Field(default_factory=lambda: class_names(4))
    entries: List[ManifestEntry] = Field(default_factory=list)
    class_object_totals: Dict[str, int] = Field(
        default_factory=dict,
        description="Placed objects per constituent class name",
    )
    root: Optional[str] = Field(default=None, exclude=True, description="Directory the manifest was loaded from")

    @model_validator(mode="after")
    def _check(self):
        names = [entry.name for entry in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("manifest entry names must be unique")
        if len(self.class_names) != self.n_classes + 1:
            raise ValueError(f"class_names needs {self.n_classes + 1} names (matrix first)")
        return self

    def split(self, split: Split) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    def resolve(self, relative: str) -> Path:
        base = Path(self.root) if self.root else Path(".")
        return base / relative

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            manifest = cls.model_validate(json.load(f))
        manifest.root = str(path.parent)
        return manifest

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"
        path.write_text(text, encoding="utf-8")
        return path
