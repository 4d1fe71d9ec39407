"""Seeded geometric scenes standing in for radiology images.

A scene is a single-channel volume ``(D, H, W)`` with a handful of named
anatomy-like ellipsoids and 0-4 abnormality blobs placed inside the lungs.
2D scenes are ``D = 1`` with a 32x32 plane; 3D scenes use ``D in {4, 8, 16}``
with a 16x16 plane. Every scene also carries a templated two-section report
whose vocabulary is closed, so text metrics stay meaningful at toy scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, VoxelMask

ANATOMY = {
    # name: (center (h, w), radii (h, w), intensity)
    "left lung": ((0.42, 0.26), (0.26, 0.12), 0.30),
    "right lung": ((0.42, 0.74), (0.26, 0.12), 0.30),
    "heart": ((0.62, 0.50), (0.14, 0.10), 0.60),
    "trachea": ((0.18, 0.50), (0.12, 0.05), 0.45),
    "liver": ((0.86, 0.74), (0.08, 0.16), 0.50),
}
ALWAYS_PRESENT = ("left lung", "right lung")
ABNORMALITY = {
    # name: (radius, intensity, shape)
    "nodule": (0.09, 1.00, "ball"),
    "mass": (0.13, 0.85, "ball"),
    "opacity": (0.11, 0.70, "cube"),
}
DEPTHS_3D = (4, 8, 16)
PLANE_2D = 32
PLANE_3D = 16
NUMBER_WORDS = {1: "one", 2: "two", 3: "three", 4: "four"}


@dataclass
class Scene:
    scene_id: str
    image: np.ndarray  # (D, H, W) float64
    anatomy: dict[str, VoxelMask]
    abnormalities: dict[str, list[VoxelMask]]
    modality: str
    plane: str | None
    findings: str = ""
    impression: str = ""
    caption: str = ""

    @property
    def depth(self) -> int:
        return self.image.shape[0]

    @property
    def is_2d(self) -> bool:
        return self.depth == 1

    def boxes(self, name: str) -> list[Box]:
        """Tight normalized boxes; rank 2 for 2D scenes (height, width)."""
        out = []
        for m in self.abnormalities.get(name, []):
            b = m.bounding_box()
            out.append(Box(b.min_corner[1:], b.max_corner[1:]) if self.is_2d else b)
        return out

    def present_targets(self) -> list[str]:
        return list(self.anatomy) + list(self.abnormalities)

    def absent_targets(self) -> list[str]:
        return [n for n in list(ANATOMY) + list(ABNORMALITY) if n not in self.anatomy and n not in self.abnormalities]


def _grid(depth: int, size: int):
    zs = (np.arange(depth) + 0.5) / depth
    ys = (np.arange(size) + 0.5) / size
    return np.meshgrid(zs, ys, ys, indexing="ij")


def _ellipsoid(z, y, x, center, radii):
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def make_scene(rng: np.random.Generator, scene_id: str, depth: int | None = None, frac_2d: float = 0.5) -> Scene:
    if depth is None:
        depth = 1 if rng.random() < frac_2d else int(rng.choice(DEPTHS_3D))
    size = PLANE_2D if depth == 1 else PLANE_3D
    z, y, x = _grid(depth, size)
    image = np.zeros((depth, size, size))
    anatomy: dict[str, VoxelMask] = {}
    for name, ((cy, cx), (ry, rx), intensity) in ANATOMY.items():
        if name not in ALWAYS_PRESENT and rng.random() < 0.3:
            continue
        c = (0.5, cy + rng.uniform(-0.03, 0.03), cx + rng.uniform(-0.03, 0.03))
        r = (0.45 if depth > 1 else 10.0, ry * rng.uniform(0.9, 1.1), rx * rng.uniform(0.9, 1.1))
        region = _ellipsoid(z, y, x, c, r)
        image[region] = intensity
        anatomy[name] = VoxelMask.from_array(region)

    abnormalities: dict[str, list[VoxelMask]] = {}
    occupied = np.zeros_like(image, dtype=bool)
    n_blobs = int(rng.integers(0, 5))
    for _ in range(n_blobs):
        kind = str(rng.choice(list(ABNORMALITY)))
        radius, intensity, shape = ABNORMALITY[kind]
        for _attempt in range(20):
            lung = str(rng.choice(ALWAYS_PRESENT))
            (cy, cx), (ry, rx), _ = ANATOMY[lung]
            c = (
                rng.uniform(0.3, 0.7) if depth > 1 else 0.5,
                cy + rng.uniform(-0.5, 0.5) * ry,
                cx + rng.uniform(-0.4, 0.4) * rx,
            )
            rz = max(radius, 0.6 / depth) if depth > 1 else 10.0
            if shape == "ball":
                region = _ellipsoid(z, y, x, c, (rz, radius, radius))
            else:
                region = (np.abs(z - c[0]) <= rz) & (np.abs(y - c[1]) <= radius) & (np.abs(x - c[2]) <= radius)
            if not region.any():
                iz, iy, ix = (min(int(v * n), n - 1) for v, n in zip(c, (depth, size, size)))
                region[iz, iy, ix] = True
            grown = _dilate(region)
            if not (grown & occupied).any():
                break
        else:
            continue
        occupied |= region
        image[region] = intensity
        abnormalities.setdefault(kind, []).append(VoxelMask.from_array(region))

    plane = None
    if depth == 1:
        plane = "frontal" if rng.random() < 0.7 else "lateral"
        col = slice(0, 3) if plane == "frontal" else slice(size - 3, size)
        image[:, 0:3, col] = 0.9
    image += rng.normal(0.0, 0.02, image.shape)
    scene = Scene(scene_id, image, anatomy, abnormalities, "x-ray" if depth == 1 else "ct", plane)
    scene.findings, scene.impression = write_report(scene, rng)
    scene.caption = write_caption(scene)
    return scene


def _dilate(region: np.ndarray) -> np.ndarray:
    out = region.copy()
    for axis in range(3):
        if region.shape[axis] > 1:
            out |= np.roll(region, 1, axis) | np.roll(region, -1, axis)
    return out


def _lung_side(scene: Scene, mask: VoxelMask) -> str:
    left = scene.anatomy["left lung"].data
    right = scene.anatomy["right lung"].data
    return "left" if (mask.data & left).sum() >= (mask.data & right).sum() else "right"


def _plural(kind: str) -> str:
    return {"mass": "masses", "opacity": "opacities"}.get(kind, kind + "s")


def write_report(scene: Scene, rng: np.random.Generator) -> tuple[str, str]:
    findings: list[str] = []
    impression: list[str] = []
    for kind, masks in scene.abnormalities.items():
        if len(masks) == 1:
            side = _lung_side(scene, masks[0])
            article = "An" if kind[0] in "aeiou" else "A"
            findings.append(f"{article} {kind} is seen in the {side} lung.")
            impression.append(f"{kind.capitalize()} in the {side} lung.")
        else:
            findings.append(f"{NUMBER_WORDS[len(masks)].capitalize()} {_plural(kind)} are seen in the lungs.")
            impression.append(f"Multiple {_plural(kind)}.")
    absent = [k for k in ABNORMALITY if k not in scene.abnormalities]
    for kind in absent:
        if rng.random() < 0.5:
            findings.append(f"No {kind} is seen.")
    if "heart" in scene.anatomy:
        findings.append("The heart is normal in size.")
    if "trachea" in scene.anatomy:
        findings.append("The trachea is midline.")
    if "liver" in scene.anatomy and rng.random() < 0.5:
        findings.append("The liver is partially imaged.")
    if rng.random() < 0.3:
        findings.append("The aorta is tortuous.")
    if not scene.abnormalities:
        findings.insert(0, "The left lung and right lung are clear.")
        impression.append("No acute abnormality.")
    return " ".join(findings), " ".join(impression)


def write_caption(scene: Scene) -> str:
    kind = "chest x-ray" if scene.is_2d else "chest ct"
    n = sum(len(v) for v in scene.abnormalities.values())
    if n == 0:
        return f"A {kind} with no abnormality."
    return f"A {kind} with {NUMBER_WORDS[n]} {'lesion' if n == 1 else 'lesions'}."


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def scene_for_index(seed: int, index: int, frac_2d: float = 0.5) -> Scene:
    return make_scene(scene_rng(seed, index), f"scene-{index:04d}", frac_2d=frac_2d)


class SceneBank:
    """Lazily materialized scenes addressed by ``scene-NNNN`` refs."""

    def __init__(self, seed: int, frac_2d: float = 0.5):
        self.seed = seed
        self.frac_2d = frac_2d
        self._cache: dict[str, Scene] = {}

    def __getitem__(self, ref: str) -> Scene:
        if ref not in self._cache:
            if not ref.startswith("scene-"):
                raise KeyError(ref)
            self._cache[ref] = scene_for_index(self.seed, int(ref.split("-")[1]), self.frac_2d)
        return self._cache[ref]
