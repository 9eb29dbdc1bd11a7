"""Zero-shot variant scoring.

A variant's score is the joint-masked log-odds sum over its sites:
one forward pass with every mutated position masked (and, in surface
mode, the cloud excised around those positions) yields per-site rows,
and the score adds log p(mutant) - log p(wild type) across sites.
Sites on low-confidence residues (pLDDT below the threshold) fall back
to an ingested baseline scorer; by default a variant touching any
low-confidence site falls back as a whole, since mixing per-site terms
from two models would mix incompatible scales. Per-site gating is
available behind a flag.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import build_radius_graph
from .gvp import FitnessModel
from .io import (AssayTable, MutationSet, Protein, ResidueEmbeddings,
                 format_mutation, parse_mutation)
from .surface import SurfacePointCloud, excise_near_residue

DEFAULT_PLDDT_THRESHOLD = 70.0
DEFAULT_EXCISE_M = 20


@dataclass(frozen=True)
class VariantScore:
    mutant: str
    score: float
    provenance: tuple   # per-site "model" / "baseline" tags

    @property
    def summary(self) -> str:
        if all(tag == "baseline" for tag in self.provenance) and self.provenance:
            return "baseline"
        if any(tag == "baseline" for tag in self.provenance):
            return "mixed"
        return "model"


def score_variant(model: FitnessModel, protein: Protein, mset: MutationSet,
                  embeddings: ResidueEmbeddings = None,
                  cloud: SurfacePointCloud = None, mode: str = None,
                  structure_graph=None) -> float:
    """Joint-masked log-odds score; exactly 0 for the wild type (empty
    site set). The cloud, when given, must already be excised at the
    mutated sites."""
    if not mset.sites:
        return 0.0
    positions = mset.positions
    log_probs = model.forward_logits(
        protein, positions, mode=mode, embeddings=embeddings, cloud=cloud,
        structure_graph=structure_graph).data
    score = 0.0
    for row, (_, wt, mt) in zip(log_probs, mset.sites):
        score += float(row[mt]) - float(row[wt])
    return score


def _baseline_lookup(baseline: dict, key: str, what: str) -> float:
    if baseline is None:
        raise DataError(
            f"baseline scores required for {what} (site below the pLDDT "
            f"threshold) but none were supplied")
    if key not in baseline:
        raise DataError(f"baseline scores missing entry for {key!r}")
    return float(baseline[key])


def score_assay(model: FitnessModel, protein: Protein, assay: AssayTable, *,
                base_cloud: SurfacePointCloud = None,
                embeddings_provider=None,
                baseline: dict = None,
                plddt_threshold: float = DEFAULT_PLDDT_THRESHOLD,
                per_site_gating: bool = False,
                excise_m: int = DEFAULT_EXCISE_M,
                offset: int = None,
                mode: str = None) -> list:
    """Score every assay variant, routing low-pLDDT sites to the baseline.

    ``embeddings_provider`` is a callable mapping a MutationSet to
    ResidueEmbeddings masked at its sites (file-mode models only).
    """
    mode = mode or model.config.mode
    needs_surface = mode in ("s3f", "surf_only")
    if needs_surface and base_cloud is None:
        raise DataError(f"mode {mode!r} requires a surface cloud")
    graph = None
    if mode in ("s2f", "s3f"):
        graph = build_radius_graph(protein.ca_coords, model.config.radius_cutoff,
                                   rbf=model.config.rbf)
    results = []
    for variant in assay.variants:
        mset = parse_mutation(variant.mutant, protein, offset)
        if not mset.sites:
            results.append(VariantScore(variant.mutant, 0.0, ()))
            continue
        positions = np.array(mset.positions)
        low = protein.plddt[positions] < plddt_threshold
        if not low.any():
            score = _model_score(model, protein, mset, embeddings_provider,
                                 base_cloud, needs_surface, excise_m, mode, graph)
            tags = ("model",) * len(mset)
        elif low.all() or not per_site_gating:
            score = _baseline_lookup(baseline, variant.mutant, variant.mutant)
            tags = ("baseline",) * len(mset)
        else:
            score, tags = _mixed_score(model, protein, mset, low,
                                       embeddings_provider, base_cloud,
                                       needs_surface, excise_m, mode, graph,
                                       baseline, offset)
        results.append(VariantScore(variant.mutant, score, tags))
    return results


def _excised(base_cloud, protein, positions, excise_m, needs_surface):
    if not needs_surface:
        return None
    reduced, _ = excise_near_residue(base_cloud, protein.ca_coords[positions],
                                     excise_m)
    return reduced


def _model_score(model, protein, mset, embeddings_provider, base_cloud,
                 needs_surface, excise_m, mode, graph) -> float:
    cloud = _excised(base_cloud, protein, np.array(mset.positions), excise_m,
                     needs_surface)
    embeddings = None if embeddings_provider is None else embeddings_provider(mset)
    return score_variant(model, protein, mset, embeddings=embeddings,
                         cloud=cloud, mode=mode, structure_graph=graph)


def _mixed_score(model, protein, mset, low, embeddings_provider, base_cloud,
                 needs_surface, excise_m, mode, graph, baseline, offset):
    """Per-site gating: model log-odds terms for confident sites extracted
    from the joint forward pass (all sites masked, exactly as in inference),
    plus per-site baseline values for the rest."""
    positions = np.array(mset.positions)
    cloud = _excised(base_cloud, protein, positions, excise_m, needs_surface)
    embeddings = None if embeddings_provider is None else embeddings_provider(mset)
    log_probs = model.forward_logits(
        protein, mset.positions, mode=mode, embeddings=embeddings,
        cloud=cloud, structure_graph=graph).data
    score = 0.0
    tags = []
    for row, (pos, wt, mt), is_low in zip(log_probs, mset.sites, low):
        if is_low:
            site_key = format_mutation(MutationSet(((pos, wt, mt),)),
                                       offset=protein.chain_offset if offset is None else offset)
            score += _baseline_lookup(baseline, site_key, site_key)
            tags.append("baseline")
        else:
            score += float(row[mt]) - float(row[wt])
            tags.append("model")
    return score, tuple(tags)


# ---------------------------------------------------------------------------
# ensembling
# ---------------------------------------------------------------------------

def ensemble_zscores(scores_a, scores_b) -> np.ndarray:
    """Standardize each list over the assay (population std) and sum."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("score lists must be equal-length vectors")
    if len(a) < 2:
        raise DataError("need at least 2 variants to ensemble")
    out = np.empty_like(a)
    total = np.zeros_like(a)
    for x in (a, b):
        std = x.std()
        if std < 1e-300:
            raise DataError("zero standard deviation in a score list")
        total = total + (x - x.mean()) / std
    out[:] = total
    return out


# ---------------------------------------------------------------------------
# score CSVs
# ---------------------------------------------------------------------------

def write_scores_csv(path, scores: list, header_lines=(), ensembled=None) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        columns = ["mutant", "score", "provenance"]
        if ensembled is not None:
            columns.append("ensembled")
        writer.writerow(columns)
        for i, vs in enumerate(scores):
            row = [vs.mutant, repr(vs.score), vs.summary]
            if ensembled is not None:
                row.append(repr(float(ensembled[i])))
            writer.writerow(row)


def read_scores_csv(path) -> dict:
    """Read a scores CSV (ours or a bare mutant,score file) into an
    ordered mutant -> score map."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"scores file not found: {path}")
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = {}
    for i, row in enumerate(csv.DictReader(lines), start=2):
        if "mutant" not in row or "score" not in row:
            raise DataError(f"{path}: expected mutant and score columns")
        key = row["mutant"].strip()
        if key in out:
            raise DataError(f"{path} row {i}: duplicate mutant {key!r}")
        try:
            out[key] = float(row["score"])
        except (TypeError, ValueError):
            raise DataError(f"{path} row {i}: unparseable score") from None
    return out
