"""Procedural multi-domain scene benchmark.

Scenes are label maps built from bands and blobs. A :class:`DomainStyle`
paints a label map with a palette, a sinusoidal texture, Gaussian noise and
an illumination gain, so two styles of one scene always share their labels.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

IGNORE = 255
LAYOUTS = ("bands", "blobs", "mixed")
TEXTURE_AMPLITUDE = 0.12
MANIFEST_NAME = "manifest.tsv"


class DatasetError(ValueError):
    """Invalid scene spec, domain style, dataset file or manifest."""


def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    layout_id: str = "bands"
    num_classes: int = 5
    height: int = 64
    width: int = 64

    def validate(self, patch_size: int = 8) -> None:
        if self.layout_id not in LAYOUTS:
            raise DatasetError(f"layout_id must be one of {LAYOUTS}, got {self.layout_id!r}")
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes >= IGNORE:
            raise DatasetError(f"num_classes must be < {IGNORE}, got {self.num_classes}")
        for name in ("height", "width"):
            value = getattr(self, name)
            if value < 16:
                raise DatasetError(f"{name} must be >= 16, got {value}")
            if value % patch_size:
                raise DatasetError(f"{name}={value} is not divisible by patch size {patch_size}")


@dataclass(frozen=True)
class DomainStyle:
    domain_id: str
    palette: tuple[tuple[float, float, float], ...]
    texture_freq: float = 0.0
    noise_sigma: float = 0.0
    illumination_gain: float = 1.0

    def validate(self, num_classes: int | None = None) -> None:
        if not self.domain_id or any(c in self.domain_id for c in "\t\n/"):
            raise DatasetError(f"domain_id must be a non-empty name without tabs or slashes, got {self.domain_id!r}")
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.ndim != 2 or pal.shape[1] != 3:
            raise DatasetError(f"palette must be a list of RGB triples, got shape {pal.shape}")
        if num_classes is not None and len(pal) != num_classes:
            raise DatasetError(f"palette has {len(pal)} entries but the scene has {num_classes} classes")
        if not np.all(np.isfinite(pal)) or pal.min() < 0 or pal.max() > 1:
            raise DatasetError("palette entries must lie in [0, 1]")
        for i in range(len(pal)):
            for j in range(i + 1, len(pal)):
                if np.abs(pal[i] - pal[j]).max() < 0.05:
                    raise DatasetError(f"palette entries {i} and {j} are closer than 0.05 (L-inf)")
        if not (np.isfinite(self.texture_freq) and self.texture_freq >= 0):
            raise DatasetError(f"texture_freq must be a non-negative real, got {self.texture_freq}")
        if not 0.0 <= self.noise_sigma <= 0.3:
            raise DatasetError(f"noise_sigma must lie in [0, 0.3], got {self.noise_sigma}")
        if not 0.3 <= self.illumination_gain <= 1.7:
            raise DatasetError(f"illumination_gain must lie in [0.3, 1.7], got {self.illumination_gain}")


@dataclass
class LabeledImage:
    image: torch.Tensor  # (3, H, W) float in [0, 1]
    label: torch.Tensor  # (H, W) int64
    domain_id: str

    def validate(self, num_classes: int) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DatasetError(f"image must have shape (3, H, W), got {tuple(self.image.shape)}")
        if self.label.shape != self.image.shape[1:]:
            raise DatasetError("label and image sizes differ")
        if not torch.isfinite(self.image).all():
            raise DatasetError("image contains non-finite values")
        bad = (self.label != IGNORE) & ((self.label < 0) | (self.label >= num_classes))
        if bad.any():
            raise DatasetError(f"label value {int(self.label[bad][0])} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# label maps


def _bands(rng: np.random.Generator, k: int, h: int, w: int) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    u = (u - u.min()) / max(u.max() - u.min(), 1e-9)
    n = int(rng.integers(k, 2 * k + 1))
    cuts = np.sort(rng.uniform(0.05, 0.95, n - 1))
    # neighbouring bands never share a class
    classes = [int(rng.integers(0, k))]
    for _ in range(n - 1):
        classes.append((classes[-1] + 1 + int(rng.integers(0, k - 1))) % k)
    classes = np.asarray(classes)
    return classes[np.searchsorted(cuts, u)].astype(np.int64)


def _blobs(rng: np.random.Generator, k: int, h: int, w: int) -> np.ndarray:
    n = 2 * k
    pts = rng.uniform(0, 1, (n, 2)) * np.array([h, w])
    classes = np.concatenate([rng.permutation(k), rng.integers(0, k, n - k)])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = (yy[None] - pts[:, 0, None, None]) ** 2 + (xx[None] - pts[:, 1, None, None]) ** 2
    return classes[np.argmin(d, axis=0)].astype(np.int64)


def _mixed(rng: np.random.Generator, k: int, h: int, w: int) -> np.ndarray:
    label = _bands(rng, k, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.08, 0.22) * min(h, w)
        label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = int(rng.integers(0, k))
    return label


_LAYOUT_FNS = {"bands": _bands, "blobs": _blobs, "mixed": _mixed}


def scene_labels(spec: SceneSpec) -> np.ndarray:
    spec.validate()
    rng = np.random.default_rng(stable_seed("layout", spec.seed))
    return _LAYOUT_FNS[spec.layout_id](rng, spec.num_classes, spec.height, spec.width)


def render_scene_in_domain(spec: SceneSpec, style: DomainStyle) -> LabeledImage:
    spec.validate()
    style.validate(spec.num_classes)
    label = scene_labels(spec)
    h, w = label.shape
    rng = np.random.default_rng(stable_seed("style", spec.seed, style.domain_id))
    image = np.asarray(style.palette, dtype=np.float64)[label].transpose(2, 0, 1)
    angle, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
    if style.texture_freq > 0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        u = (xx * np.cos(angle) + yy * np.sin(angle)) / w
        image = image + TEXTURE_AMPLITUDE * np.sin(2 * np.pi * style.texture_freq * u + phase)[None]
    noise = rng.standard_normal(image.shape)
    if style.noise_sigma > 0:
        image = image + style.noise_sigma * noise
    image = np.clip(image * style.illumination_gain, 0.0, 1.0)
    return LabeledImage(
        image=torch.from_numpy(image.astype(np.float32)),
        label=torch.from_numpy(label),
        domain_id=style.domain_id,
    )


# ---------------------------------------------------------------------------
# styles


def _hsv_palette(hues: Sequence[float], sat: float, val: float) -> tuple:
    return tuple(tuple(round(c, 6) for c in colorsys.hsv_to_rgb(h % 1.0, sat, val)) for h in hues)


def default_styles(num_classes: int = 5) -> tuple[DomainStyle, list[DomainStyle]]:
    """Source style plus three photometrically shifted target styles."""
    hues = [i / num_classes for i in range(num_classes)]
    source = DomainStyle("source", _hsv_palette(hues, 0.55, 0.75), texture_freq=2.0, noise_sigma=0.01)
    targets = [
        DomainStyle("dusk", _hsv_palette([h + 0.06 for h in hues], 0.45, 0.75),
                    texture_freq=3.0, noise_sigma=0.04, illumination_gain=0.55),
        DomainStyle("glare", _hsv_palette([h - 0.05 for h in hues], 0.35, 0.8),
                    texture_freq=6.0, noise_sigma=0.02, illumination_gain=1.35),
        DomainStyle("grain", _hsv_palette([h + 0.03 for h in hues], 0.7, 0.7),
                    texture_freq=9.0, noise_sigma=0.08, illumination_gain=0.9),
    ]
    return source, targets


@dataclass(frozen=True)
class SceneFamily:
    """Generator of scene specs: spec ``i`` of a split is a pure function of ``seed``."""

    seed: int = 0
    num_classes: int = 5
    height: int = 64
    width: int = 64
    layouts: tuple[str, ...] = LAYOUTS

    def spec(self, index: int, stream: str = "train") -> SceneSpec:
        s = stable_seed("scene", self.seed, stream, index)
        return SceneSpec(s, self.layouts[s % len(self.layouts)], self.num_classes, self.height, self.width)


# ---------------------------------------------------------------------------
# persistence


@dataclass
class SplitRecord:
    split: str
    domain_id: str
    image_path: str
    label_path: str


@dataclass
class DatasetManifest:
    root: Path
    num_classes: int
    spec_hash: str
    records: list[SplitRecord]
    domains: list[tuple[str, str]] = field(default_factory=list)  # declared (split, domain_id)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def splits(self) -> list[tuple[str, str]]:
        return list(self.domains)

    def records_for(self, split: str, domain_id: str | None = None) -> list[SplitRecord]:
        return [r for r in self.records
                if r.split == split and (domain_id is None or r.domain_id == domain_id)]

    def train_domain(self) -> str:
        ids = {r.domain_id for r in self.records if r.split == "train"}
        if len(ids) != 1:
            raise DatasetError(f"train split must hold exactly one domain, found {sorted(ids)}")
        return ids.pop()

    def val_domains(self) -> list[str]:
        return [d for s, d in self.domains if s == "val"]

    def read(self, record: SplitRecord) -> LabeledImage:
        item = read_labeled_image(self.root / record.image_path, self.root / record.label_path,
                                  record.domain_id)
        try:
            item.validate(self.num_classes)
        except DatasetError as exc:
            raise DatasetError(f"{record.label_path}: {exc}") from None
        return item

    def iter_split(self, split: str, domain_id: str | None = None,
                   shuffle_seed: int | None = None) -> Iterator[LabeledImage]:
        records = self.records_for(split, domain_id)
        if shuffle_seed is not None:
            random.Random(shuffle_seed).shuffle(records)
        for record in records:
            yield self.read(record)

    def load_split(self, split: str, domain_id: str | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack a whole split into ``(N, 3, H, W)`` images and ``(N, H, W)`` labels."""
        items = list(self.iter_split(split, domain_id))
        if not items:
            raise DatasetError(f"split {split!r} domain {domain_id!r} has no records")
        return torch.stack([i.image for i in items]), torch.stack([i.label for i in items])


def write_labeled_image(item: LabeledImage, image_path: Path, label_path: Path) -> None:
    img = (item.image.clamp(0, 1).numpy().transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(image_path)
    Image.fromarray(item.label.numpy().astype(np.uint8), mode="L").save(label_path)


def read_labeled_image(image_path: Path, label_path: Path, domain_id: str) -> LabeledImage:
    for p in (image_path, label_path):
        if not Path(p).is_file():
            raise FileNotFoundError(f"missing dataset file: {p}")
    with Image.open(image_path) as im:
        img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    with Image.open(label_path) as im:
        if im.mode != "L":
            raise DatasetError(f"{label_path}: label PNG must be single-channel, got mode {im.mode}")
        lab = np.asarray(im, dtype=np.int64)
    return LabeledImage(torch.from_numpy(img.transpose(2, 0, 1).copy()), torch.from_numpy(lab.copy()), domain_id)


def _spec_hash(family: SceneFamily, source: DomainStyle, targets: Sequence[DomainStyle],
               counts: tuple[int, int], extra: Sequence[str] = ()) -> str:
    payload = {"family": asdict(family), "source": asdict(source),
               "targets": [asdict(t) for t in targets], "counts": list(counts)}
    if extra:
        payload["extra_val"] = list(extra)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _header(num_classes: int, spec_hash: str, domains: Sequence[tuple[str, str]]) -> str:
    declared = ",".join(f"{s}:{d}" for s, d in domains)
    return f"#K={num_classes}\tspec_hash={spec_hash}\tdomains={declared}"


def write_manifest(manifest: DatasetManifest) -> Path:
    lines = [_header(manifest.num_classes, manifest.spec_hash, manifest.domains)]
    lines += [f"{r.split}\t{r.domain_id}\t{r.image_path}\t{r.label_path}" for r in manifest.records]
    manifest.path.write_text("\n".join(lines) + "\n")
    return manifest.path


def generate_dataset(family: SceneFamily, source_style: DomainStyle, target_styles: Sequence[DomainStyle],
                     counts: tuple[int, int] = (64, 16), out_dir: str | Path = "data",
                     extra_val: Sequence[tuple[str, callable]] = ()) -> DatasetManifest:
    """Render the train split in ``source_style`` and one val split per target style.

    ``counts`` is ``(n_train, n_val)``. ``extra_val`` holds ``(domain_id, fn)``
    pairs where ``fn(LabeledImage, index) -> LabeledImage`` derives an extra
    val split from source-style val scenes (used for corruption domains).
    """
    n_train, n_val = counts
    if n_train <= 0 or n_val <= 0:
        raise DatasetError(f"counts must be positive, got {counts}")
    styles = [source_style, *target_styles]
    ids = [s.domain_id for s in styles] + [d for d, _ in extra_val]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"duplicate domain_id in {ids}")
    for s in styles:
        s.validate(family.num_classes)

    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc

    records: list[SplitRecord] = []

    def emit(split: str, domain: str, index: int, item: LabeledImage) -> None:
        stem = f"{split}_{domain}_{index:05d}.png"
        write_labeled_image(item, root / "images" / stem, root / "labels" / stem)
        records.append(SplitRecord(split, domain, f"images/{stem}", f"labels/{stem}"))

    for i in range(n_train):
        emit("train", source_style.domain_id, i, render_scene_in_domain(family.spec(i, "train"), source_style))
    for style in target_styles:
        for i in range(n_val):
            emit("val", style.domain_id, i, render_scene_in_domain(family.spec(i, "val"), style))
    for domain, fn in extra_val:
        for i in range(n_val):
            base = render_scene_in_domain(family.spec(i, "val"), source_style)
            emit("val", domain, i, fn(base, i))

    domains = [("train", source_style.domain_id)] + [("val", d) for d in ids[1:]]
    manifest = DatasetManifest(root, family.num_classes,
                               _spec_hash(family, source_style, target_styles, counts, [d for d, _ in extra_val]),
                               records, domains)
    write_manifest(manifest)
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file (or the manifest inside a dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DatasetError(f"{path}: missing header line")
    header = dict(part.split("=", 1) for part in lines[0][1:].split("\t") if "=" in part)
    try:
        num_classes = int(header["K"])
        spec_hash = header["spec_hash"]
    except (KeyError, ValueError):
        raise DatasetError(f"{path}: header must carry K and spec_hash") from None
    domains = [tuple(d.split(":", 1)) for d in header.get("domains", "").split(",") if d]
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{path}:{n}: expected 4 tab-separated fields")
        records.append(SplitRecord(*parts))
    if not domains:
        seen = dict.fromkeys((r.split, r.domain_id) for r in records)
        domains = list(seen)
    root = path.parent
    for r in records:
        for rel in (r.image_path, r.label_path):
            if not (root / rel).is_file():
                raise FileNotFoundError(f"manifest {path} references missing file {rel}")
    manifest = DatasetManifest(root, num_classes, spec_hash, records, domains)
    manifest.train_domain()
    return manifest


def manifest_hash(path: str | Path) -> str:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return hashlib.sha256(path.read_bytes()).hexdigest()
