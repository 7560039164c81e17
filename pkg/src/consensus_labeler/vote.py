"""Label alignment against the k-means anchor, unanimity voting, purity.

The k-means labeling is the standard; the other two clusterings are each
relabeled by the permutation that maximizes sample overlap with it (optimal
assignment on the contingency table, solved exactly). A sample survives the
vote only when all three aligned labels agree.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .engines import ClusterAssignment
from .ingest import Manifest

PURITY_THRESHOLD = 0.8


@dataclass
class ContingencyTable:
    counts: np.ndarray  # k x k non-negative ints; rows reference, cols other
    row_algorithm: str
    col_algorithm: str


@dataclass
class LabelAlignment:
    mapping: np.ndarray  # permutation of [0, k): mapping[other_label] -> reference label
    matched_count: int

    def validate(self) -> None:
        k = self.mapping.shape[0]
        if sorted(self.mapping.tolist()) != list(range(k)):
            raise ValidationError("mapping is not a bijection on [0, k)")


@dataclass
class VoteResult:
    sample_ids: list[str]
    kept_mask: np.ndarray  # bool per sample
    consensus: np.ndarray  # int64 per sample; valid where kept

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    @property
    def kept(self) -> list[tuple[str, int]]:
        return [
            (self.sample_ids[i], int(self.consensus[i]))
            for i in np.flatnonzero(self.kept_mask)
        ]

    @property
    def discarded(self) -> list[str]:
        return [self.sample_ids[i] for i in np.flatnonzero(~self.kept_mask)]

    @property
    def discard_rate(self) -> float:
        return int((~self.kept_mask).sum()) / self.n

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kept_mask)

    def members_by_cluster(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        idx = self.kept_indices()
        for c in np.unique(self.consensus[idx]):
            out[int(c)] = idx[self.consensus[idx] == c]
        return out


@dataclass
class ClusterPurity:
    cluster_id: int
    size: int
    dominant_label: str
    dominant_fraction: float


@dataclass
class PurityReport:
    clusters: list[ClusterPurity]
    threshold: float = PURITY_THRESHOLD
    flagged: list[int] = field(default_factory=list)


def contingency(reference: ClusterAssignment, other: ClusterAssignment) -> ContingencyTable:
    """counts[i][j] = number of samples with reference label i and other label j."""
    if reference.n != other.n:
        raise ValidationError(f"length mismatch: {reference.n} vs {other.n}")
    if reference.k != other.k:
        raise ValidationError(f"k mismatch: {reference.k} vs {other.k}")
    k = reference.k
    flat = reference.labels * k + other.labels
    counts = np.bincount(flat, minlength=k * k).reshape(k, k)
    return ContingencyTable(
        counts=counts, row_algorithm=reference.algorithm, col_algorithm=other.algorithm
    )


def align_labels(table: ContingencyTable) -> LabelAlignment:
    """Permutation of the column labels maximizing the matched sample count.

    Solved exactly as an optimal assignment problem; absent cluster ids
    contribute zero rows/columns and map to whatever id is left over.
    """
    counts = table.counts
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValidationError(f"contingency table must be square, got {counts.shape}")
    rows, cols = linear_sum_assignment(counts, maximize=True)
    mapping = np.empty(counts.shape[0], dtype=np.int64)
    mapping[cols] = rows
    matched = int(counts[rows, cols].sum())
    alignment = LabelAlignment(mapping=mapping, matched_count=matched)
    alignment.validate()
    return alignment


def apply_alignment(
    assignment: ClusterAssignment, alignment: LabelAlignment
) -> ClusterAssignment:
    """Relabel through the mapping; the partition itself is untouched."""
    if alignment.mapping.shape[0] != assignment.k:
        raise ValidationError(
            f"k mismatch: mapping covers {alignment.mapping.shape[0]}, assignment k={assignment.k}"
        )
    return ClusterAssignment(
        algorithm=assignment.algorithm,
        k=assignment.k,
        labels=alignment.mapping[assignment.labels],
        objective=assignment.objective,
        matched_count=alignment.matched_count,
    )


def vote(
    kmeans_a: ClusterAssignment,
    agg_aligned: ClusterAssignment,
    birch_aligned: ClusterAssignment,
    sample_ids: list[str] | None = None,
) -> VoteResult:
    """Unanimity vote: keep a sample iff all three aligned labels agree."""
    assignments = (kmeans_a, agg_aligned, birch_aligned)
    n, k = kmeans_a.n, kmeans_a.k
    for a in assignments[1:]:
        if a.n != n:
            raise ValidationError(f"length mismatch: {a.algorithm} has {a.n}, anchor {n}")
        if a.k != k:
            raise ValidationError(f"k mismatch: {a.algorithm} has {a.k}, anchor {k}")
        if a.matched_count is None:
            warnings.warn(
                f"{a.algorithm} assignment carries no alignment metadata; "
                "voting on unaligned labels is almost certainly wrong",
                stacklevel=2,
            )
    if sample_ids is None:
        sample_ids = [str(i) for i in range(n)]
    if len(sample_ids) != n:
        raise ValidationError("sample_ids length mismatch")
    kept = (kmeans_a.labels == agg_aligned.labels) & (kmeans_a.labels == birch_aligned.labels)
    return VoteResult(
        sample_ids=list(sample_ids), kept_mask=kept, consensus=kmeans_a.labels.copy()
    )


def purity(
    result: VoteResult,
    kmeans_a: ClusterAssignment,
    manifest: Manifest,
    threshold: float = PURITY_THRESHOLD,
) -> PurityReport:
    """Dominant truth label and its fraction per consensus cluster.

    Evaluation-only: this is the one place outside downstream-eval where
    ground-truth labels are read. Clusters below the threshold are flagged.
    """
    if result.n != len(manifest) or kmeans_a.n != result.n:
        raise ValidationError("vote result, anchor and manifest sizes disagree")
    truth = manifest.truth_labels()
    kept_idx = result.kept_indices()
    if not any(truth[i] is not None for i in kept_idx):
        raise ValidationError("no truth labels present on kept samples")
    clusters: list[ClusterPurity] = []
    flagged: list[int] = []
    for c, members in sorted(result.members_by_cluster().items()):
        if (kmeans_a.labels[members] != c).any():
            raise ValidationError(f"consensus cluster {c} disagrees with anchor labels")
        tally: dict[str, int] = {}
        for i in members:
            label = truth[i]
            if label is None:
                continue
            tally[label] = tally.get(label, 0) + 1
        if not tally:
            continue
        dominant = min(tally, key=lambda lab: (-tally[lab], lab))
        fraction = tally[dominant] / int(members.shape[0])
        clusters.append(
            ClusterPurity(
                cluster_id=c,
                size=int(members.shape[0]),
                dominant_label=dominant,
                dominant_fraction=fraction,
            )
        )
        if fraction < threshold:
            flagged.append(c)
    return PurityReport(clusters=clusters, threshold=threshold, flagged=flagged)


def save_assignment_csv(
    assignment: ClusterAssignment, sample_ids: list[str], path: str | Path
) -> None:
    if len(sample_ids) != assignment.n:
        raise ValidationError("sample_ids length mismatch")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "algorithm", "cluster"])
        for sid, label in zip(sample_ids, assignment.labels):
            writer.writerow([sid, assignment.algorithm, int(label)])


def save_vote_csvs(result: VoteResult, kept_path: str | Path, discarded_path: str | Path) -> None:
    with open(kept_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "consensus_cluster"])
        for sid, cluster in result.kept:
            writer.writerow([sid, cluster])
    with open(discarded_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"])
        for sid in result.discarded:
            writer.writerow([sid])


def save_purity_report(report: PurityReport, txt_path: str | Path, csv_path: str | Path) -> None:
    lines = [f"purity threshold: {report.threshold}"]
    for c in report.clusters:
        flag = "  FLAGGED" if c.cluster_id in report.flagged else ""
        lines.append(
            f"cluster {c.cluster_id}: size={c.size} dominant={c.dominant_label} "
            f"fraction={c.dominant_fraction:.4f}{flag}"
        )
    lines.append(f"flagged clusters: {len(report.flagged)} of {len(report.clusters)}")
    Path(txt_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cluster_id", "size", "dominant_label", "dominant_fraction", "flagged"])
        for c in report.clusters:
            writer.writerow(
                [c.cluster_id, c.size, c.dominant_label, f"{c.dominant_fraction:.6f}",
                 int(c.cluster_id in report.flagged)]
            )
