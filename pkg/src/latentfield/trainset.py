"""Basis shapes and deterministic corpora of deformed variants.

Four prismatic basis shapes (triangle, square, hexagon, tessellated cylinder)
are varied by lattice deformation recipes into a corpus of meshes, each
normalized into the unit sphere and paired with a signed-distance sample file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriMesh, write_obj
from .meshops import normalize_to_unit_sphere, sample_sdf, write_sdf_samples
from .splinekit import RECIPE_NAMES, apply_chain, bounding_lattice, ffd_apply

BASE_KINDS = ("triangle", "square", "hexagon", "cylinder")

_FACET_COUNT = {"triangle": 3, "square": 4, "hexagon": 6}
_ANGLE_OFFSET = {"triangle": math.pi / 2, "square": math.pi / 4, "hexagon": 0.0, "cylinder": 0.0}


def make_basis_shape(kind: str, height: float = 1.6, radius: float = 0.7, facets: int = 32) -> TriMesh:
    """Closed prism over a regular n-gon cross-section, outward oriented.

    ``radius`` is the circumradius of the cross-section polygon; the cylinder
    is tessellated with ``facets`` sides.  Caps are fanned from the first ring
    vertex, so a triangle prism has exactly 8 faces.
    """
    if kind not in BASE_KINDS:
        raise ValueError(f"unknown basis shape {kind!r}; choose from {BASE_KINDS}")
    if height <= 0 or radius <= 0:
        raise ValueError("height and radius must be positive")
    n = _FACET_COUNT.get(kind, facets)
    if n < 3:
        raise ValueError("need at least 3 facets")

    theta = _ANGLE_OFFSET[kind] + 2 * math.pi * np.arange(n) / n
    ring = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    bottom = np.hstack([ring, np.full((n, 1), -height / 2)])
    top = np.hstack([ring, np.full((n, 1), height / 2)])
    verts = np.vstack([bottom, top])

    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris.append([i, j, n + j])
        tris.append([i, n + j, n + i])
    for i in range(1, n - 1):
        tris.append([0, i + 1, i])          # bottom cap, normal -z
        tris.append([n, n + i, n + i + 1])  # top cap, normal +z
    return TriMesh(verts, np.array(tris, dtype=np.int64))


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Geodesic sphere by midpoint subdivision of an icosahedron."""
    phi = (1 + math.sqrt(5)) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    tris = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(m)
            return cache[key]

        nxt = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = nxt
    return TriMesh(radius * np.array(verts), np.array(tris, dtype=np.int64))


def box_mesh(half_extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box with outward orientation (12 triangles)."""
    h = np.asarray(half_extents, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
    )
    verts = c + corners * h
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x- and x+
        (0, 4, 5, 1), (2, 3, 7, 6),  # y- and y+
        (0, 2, 6, 4), (1, 5, 7, 3),  # z- and z+
    ]
    tris = []
    for a, b, cc, d in quads:
        tris += [[a, b, cc], [a, cc, d]]
    return TriMesh(verts, np.array(tris, dtype=np.int64))


# --- corpus records and manifest ---------------------------------------------


@dataclass(frozen=True)
class ShapeRecord:
    id: str
    base: str
    recipe_chain: tuple[tuple[str, float], ...]
    mesh_path: str
    sdf_path: str


@dataclass
class CorpusManifest:
    records: list[ShapeRecord]
    seed: int
    samples_per_shape: int
    base_dir: Path | None = field(default=None, compare=False)

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel) if self.base_dir else Path(rel)

    def record(self, shape_id: str) -> ShapeRecord:
        for rec in self.records:
            if rec.id == shape_id:
                return rec
        raise KeyError(f"no record with id {shape_id!r}")


def _chain_str(chain) -> str:
    if not chain:
        return "-"
    return ",".join(f"{name}:{mag:.17g}" for name, mag in chain)


def _parse_chain(text: str):
    if text == "-":
        return ()
    out = []
    for part in text.split(","):
        name, _, mag = part.partition(":")
        out.append((name, float(mag)))
    return tuple(out)


def write_manifest(manifest: CorpusManifest, path) -> None:
    """One record per line: ``id TAB base TAB chain TAB mesh_path TAB sdf_path``."""
    lines = [
        f"# seed = {manifest.seed}",
        f"# samples_per_shape = {manifest.samples_per_shape}",
    ]
    for r in manifest.records:
        lines.append("\t".join([r.id, r.base, _chain_str(r.recipe_chain), r.mesh_path, r.sdf_path]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    seed = 0
    samples = 0
    records = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            key = key.strip()
            if key == "seed":
                seed = int(value)
            elif key == "samples_per_shape":
                samples = int(value)
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"malformed manifest line: {line!r}")
        records.append(
            ShapeRecord(fields[0], fields[1], _parse_chain(fields[2]), fields[3], fields[4])
        )
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids in manifest")
    return CorpusManifest(records, seed, samples, base_dir=path.parent)


# --- corpus generation --------------------------------------------------------

DEFAULT_MAGNITUDES: dict[str, tuple[float, ...]] = {
    "shrink_x": (0.5, 0.65, 0.8),
    "translate_top_x": (0.15, 0.3, 0.45),
    "translate_top_y": (0.15, 0.3, 0.45),
    "expand_middle": (0.2, 0.4, 0.6),
    "expand_top": (0.2, 0.4, 0.6),
    "twist_top": (0.4, 0.8, 1.2),
}


@dataclass
class CorpusConfig:
    bases: tuple[str, ...] = BASE_KINDS
    recipes: tuple[str, ...] = RECIPE_NAMES
    magnitudes: dict[str, tuple[float, ...]] = field(
        default_factory=lambda: dict(DEFAULT_MAGNITUDES)
    )
    chained: int = 0
    samples_per_shape: int = 20000
    seed: int = 0
    height: float = 1.6
    radius: float = 0.7
    facets: int = 32

    def expected_count(self) -> int:
        singles = sum(len(self.magnitudes[r]) for r in self.recipes)
        return len(self.bases) * (1 + singles) + self.chained


def _record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_corpus(config: CorpusConfig, out_dir) -> CorpusManifest:
    """Build meshes and SDF sample files for every corpus record.

    Enumerates every base undeformed and under each single (recipe, magnitude)
    combination, then appends ``config.chained`` randomly drawn two-recipe
    chains.  Fully deterministic for a fixed seed; the manifest is written
    last, ordered by id.
    """
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise FileNotFoundError(f"parent directory {out_dir.parent} does not exist")
    (out_dir / "meshes").mkdir(parents=True, exist_ok=True)
    (out_dir / "sdf").mkdir(parents=True, exist_ok=True)

    chains_per_base: dict[str, list[tuple[tuple[str, float], ...]]] = {b: [] for b in config.bases}
    for base in config.bases:
        chains_per_base[base].append(())
        for recipe in config.recipes:
            for mag in config.magnitudes[recipe]:
                chains_per_base[base].append(((recipe, float(mag)),))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0DE]))
    for _ in range(config.chained):
        base = config.bases[rng.integers(len(config.bases))]
        r1, r2 = rng.choice(len(config.recipes), size=2, replace=False)
        chain = tuple(
            (config.recipes[r], float(config.magnitudes[config.recipes[r]][
                rng.integers(len(config.magnitudes[config.recipes[r]]))
            ]))
            for r in (int(r1), int(r2))
        )
        chains_per_base[base].append(chain)

    records: list[ShapeRecord] = []
    index = 0
    for base in config.bases:
        base_mesh = make_basis_shape(base, config.height, config.radius, config.facets)
        lattice = bounding_lattice(base_mesh)
        for seq, chain in enumerate(chains_per_base[base]):
            shape_id = f"{base}-{seq:03d}"
            deformed = ffd_apply(lattice, apply_chain(chain, lattice), base_mesh)
            normalized, _, _ = normalize_to_unit_sphere(deformed)
            samples = sample_sdf(
                normalized,
                config.samples_per_shape,
                seed=_record_seed(config.seed, index),
                shape_id=shape_id,
            )
            mesh_rel = f"meshes/{shape_id}.obj"
            sdf_rel = f"sdf/{shape_id}.sdf"
            write_obj(normalized, out_dir / mesh_rel)
            write_sdf_samples(samples, out_dir / sdf_rel)
            records.append(ShapeRecord(shape_id, base, chain, mesh_rel, sdf_rel))
            index += 1

    records.sort(key=lambda r: r.id)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids generated")
    manifest = CorpusManifest(records, config.seed, config.samples_per_shape, base_dir=out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
