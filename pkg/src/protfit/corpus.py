"""Synthetic desk-scale corpora.

Backbones are smooth random coils; residue types are a deterministic
function of local geometry (the chain bend angle at each position,
quantized into six classes), so masked-type prediction is learnable from
structure alone and the marginal type distribution is far from uniform.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import Protein, format_mutation, MutationSet, serialize_structure

# bend-angle bin edges (radians) chosen so random coils populate all six
# classes; types are spread over the alphabet to avoid adjacent codes
BEND_EDGES = np.array([1.55, 1.85, 2.10, 2.35, 2.60])
MOTIF_TYPES = np.array([0, 3, 6, 9, 12, 15])


def random_coil(n_res: int, rng, step: float = 3.8, wobble: float = 0.9) -> np.ndarray:
    """Random-walk backbone with fixed bond length and smooth turns."""
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    dirs = [direction]
    for _ in range(n_res - 1):
        direction = direction + wobble * rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        dirs.append(direction)
    return np.cumsum(step * np.array(dirs), axis=0)


def bend_angles(coords: np.ndarray) -> np.ndarray:
    """Angle at each interior residue between the bonds to its chain
    neighbors; chain ends copy their neighbor's angle."""
    v1 = coords[:-2] - coords[1:-1]
    v2 = coords[2:] - coords[1:-1]
    cos = (v1 * v2).sum(axis=1) / (
        np.linalg.norm(v1, axis=1) * np.linalg.norm(v2, axis=1))
    inner = np.arccos(np.clip(cos, -1.0, 1.0))
    return np.concatenate([[inner[0]], inner, [inner[-1]]])


def motif_sequence(coords: np.ndarray) -> np.ndarray:
    """The deterministic geometry-to-type rule used by the motif corpus."""
    return MOTIF_TYPES[np.searchsorted(BEND_EDGES, bend_angles(coords))]


def make_motif_protein(name: str, n_res: int, rng) -> Protein:
    coords = random_coil(n_res, rng)
    return Protein(id=name, sequence=motif_sequence(coords), ca_coords=coords)


def make_motif_corpus(out_dir, n_proteins: int = 20, n_res: int = 40,
                      seed: int = 0) -> list:
    """Write a motif corpus as structure tsv files; returns the proteins."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    proteins = []
    for i in range(n_proteins):
        protein = make_motif_protein(f"motif{i:03d}", n_res, rng)
        (out_dir / f"{protein.id}.tsv").write_text(serialize_structure(protein))
        proteins.append(protein)
    return proteins


def make_synthetic_variants(protein: Protein, n_variants: int, rng,
                            max_depth: int = 2) -> list:
    """Unique random substitution strings (mixed single and multi-site)."""
    variants = []
    seen = set()
    while len(variants) < n_variants:
        depth = int(rng.integers(1, max_depth + 1))
        positions = sorted(rng.choice(protein.n_residues, size=depth,
                                      replace=False).tolist())
        sites = []
        for pos in positions:
            wt = int(protein.sequence[pos])
            mt = int(rng.integers(0, 19))
            if mt >= wt:
                mt += 1
            sites.append((pos, wt, mt))
        text = format_mutation(MutationSet(tuple(sites)),
                               offset=protein.chain_offset)
        if text not in seen:
            seen.add(text)
            variants.append(text)
    return variants
