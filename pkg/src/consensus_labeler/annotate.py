"""Cluster review cards, annotation sessions, label propagation, export.

One human action labels one consensus cluster; propagation then stamps that
label onto every kept member. Sessions persist to a directory after every
mutation (atomic write-rename) with an append-only event log, so a crashed
review resumes losslessly and the log replays to the same assignments.
"""

from __future__ import annotations

import json
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    SessionFinalizedError,
    UnknownClusterError,
    UnknownLabelError,
    UnlabeledClustersError,
    ValidationError,
)
from .engines import pca_fit, pca_transform
from .ingest import Manifest, _atomic_write_bytes
from .vote import VoteResult

SESSION_FILE = "session.json"
EVENTS_FILE = "events.jsonl"
CARDS_FILE = "cards.json"
VOTE_FILE = "vote.json"
MANIFEST_FILE = "manifest.jsonl"
DATASET_FILE = "dataset.jsonl"

SKIPPED = None  # assignment value for an explicitly skipped cluster


@dataclass
class ClusterCard:
    cluster_id: int
    size: int
    representatives: list[str]
    thumbnail_paths: list[str | None]
    points: list[tuple[float, float]]  # 2-D scatter fallback for image-less runs
    members: list[str]


@dataclass
class AnnotationSession:
    session_id: str
    label_space: list[str]
    cluster_ids: list[int]
    assignments: dict[int, str | None] = field(default_factory=dict)
    status: str = "open"  # open | finalized

    def progress(self) -> tuple[int, int]:
        return len(self.assignments), len(self.cluster_ids)

    def unlabeled(self) -> list[int]:
        return [c for c in self.cluster_ids if c not in self.assignments]


@dataclass
class PropagatedRecord:
    id: str
    label: str
    cluster_id: int
    source: str = "voted"


@dataclass
class PropagatedDataset:
    records: list[PropagatedRecord]
    leftover: list[str]


def build_cluster_cards(
    result: VoteResult, x: np.ndarray, manifest: Manifest, r: int = 9
) -> list[ClusterCard]:
    """One card per non-empty consensus cluster.

    Representatives are the r kept members nearest the cluster centroid in
    the refined space (ties broken by sample id). When the manifest has no
    image paths the card carries 2-D PCA coordinates instead, so a UI can
    plot the cluster rather than show thumbnails.
    """
    if not result.kept_mask.any():
        raise ValidationError("kept set is empty; nothing to review")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != result.n:
        raise ValidationError("embedding rows do not match vote result")
    kept_idx = result.kept_indices()
    pca = pca_fit(x[kept_idx], q=2) if x.shape[1] >= 2 and kept_idx.size >= 2 else None
    by_image = {s.id: s.image_path for s in manifest.samples}
    cards: list[ClusterCard] = []
    for c, members in sorted(result.members_by_cluster().items()):
        centroid = x[members].mean(axis=0)
        dists = np.linalg.norm(x[members] - centroid, axis=1)
        order = sorted(range(len(members)), key=lambda i: (dists[i], result.sample_ids[members[i]]))
        reps = [result.sample_ids[members[i]] for i in order[:r]]
        rep_rows = x[[members[i] for i in order[:r]]]
        points = (
            [(float(a), float(b)) for a, b in pca_transform(pca, rep_rows)]
            if pca is not None
            else [(0.0, 0.0)] * len(reps)
        )
        cards.append(
            ClusterCard(
                cluster_id=c,
                size=int(members.shape[0]),
                representatives=reps,
                thumbnail_paths=[by_image.get(sid) for sid in reps],
                points=points,
                members=[result.sample_ids[i] for i in members],
            )
        )
    return cards


def open_session(cards: list[ClusterCard], label_space: list[str]) -> AnnotationSession:
    if not label_space:
        raise ValidationError("label space must be non-empty")
    if len(set(label_space)) != len(label_space):
        raise ValidationError("label space contains duplicates")
    return AnnotationSession(
        session_id=uuid.uuid4().hex,
        label_space=list(label_space),
        cluster_ids=[c.cluster_id for c in cards],
    )


def assign_label(
    session: AnnotationSession, cluster_id: int, label: str | None
) -> AnnotationSession:
    """Record (or overwrite) one cluster's label; None marks the cluster skipped."""
    if session.status == "finalized":
        raise SessionFinalizedError()
    if cluster_id not in session.cluster_ids:
        raise UnknownClusterError(cluster_id)
    if label is not None and label not in session.label_space:
        raise UnknownLabelError(label, session.label_space)
    session.assignments[cluster_id] = label
    return session


def build_propagation(session: AnnotationSession, result: VoteResult) -> PropagatedDataset:
    """Pure propagation: kept members of labeled clusters become records,
    everything else (vote-discarded or in skipped clusters) is leftover."""
    records: list[PropagatedRecord] = []
    leftover: list[str] = []
    for i, sid in enumerate(result.sample_ids):
        if not result.kept_mask[i]:
            leftover.append(sid)
            continue
        cluster = int(result.consensus[i])
        label = session.assignments.get(cluster)
        if label is None:
            leftover.append(sid)
        else:
            records.append(PropagatedRecord(id=sid, label=label, cluster_id=cluster))
    return PropagatedDataset(records=records, leftover=leftover)


def finalize(session: AnnotationSession, result: VoteResult) -> PropagatedDataset:
    """Propagate labels and freeze the session. Every cluster must be labeled
    or explicitly skipped; the error lists any that are not."""
    if session.status == "finalized":
        raise SessionFinalizedError()
    missing = session.unlabeled()
    if missing:
        raise UnlabeledClustersError(missing)
    dataset = build_propagation(session, result)
    session.status = "finalized"
    return dataset


def export_dataset(dataset: PropagatedDataset, manifest: Manifest, path: str | Path) -> None:
    """One JSON record per line (id, label, cluster, source); leftover ids go
    to a sibling ``<stem>.leftover.txt``. Deterministic bytes for equality checks."""
    path = Path(path)
    known = {s.id for s in manifest.samples}
    for rec in dataset.records:
        if rec.id not in known:
            raise ValidationError(f"record id {rec.id!r} not in manifest")
    lines = [
        json.dumps(
            {"id": r.id, "label": r.label, "cluster": r.cluster_id, "source": r.source},
            sort_keys=True,
        )
        for r in dataset.records
    ]
    _atomic_write_bytes(path, ("\n".join(lines) + ("\n" if lines else "")).encode("utf-8"))
    leftover_path = leftover_path_for(path)
    _atomic_write_bytes(
        leftover_path,
        ("\n".join(dataset.leftover) + ("\n" if dataset.leftover else "")).encode("utf-8"),
    )


def leftover_path_for(dataset_path: str | Path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.stem + ".leftover.txt")


def import_dataset(path: str | Path) -> PropagatedDataset:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record: {exc}") from exc
            records.append(
                PropagatedRecord(
                    id=str(rec["id"]),
                    label=str(rec["label"]),
                    cluster_id=int(rec["cluster"]),
                    source=str(rec.get("source", "voted")),
                )
            )
    leftover_path = leftover_path_for(path)
    leftover = []
    if leftover_path.exists():
        leftover = [ln for ln in leftover_path.read_text(encoding="utf-8").splitlines() if ln]
    return PropagatedDataset(records=records, leftover=leftover)


def dominant_truth_labels(result: VoteResult, manifest: Manifest) -> dict[int, str]:
    """Per consensus cluster, the most common ground-truth label among its
    kept members (ties to the lexicographically smallest label).

    This is the scripted stand-in for the human annotator used by the
    ablation and protocol harnesses; it requires a truth-labeled manifest.
    """
    truth = manifest.truth_labels()
    out: dict[int, str] = {}
    for c, members in result.members_by_cluster().items():
        tally: dict[str, int] = {}
        for i in members:
            if truth[i] is not None:
                tally[truth[i]] = tally.get(truth[i], 0) + 1
        if not tally:
            raise ValidationError(f"cluster {c} has no truth labels to derive from")
        out[c] = min(tally, key=lambda lab: (-tally[lab], lab))
    return out


# --- session persistence -----------------------------------------------------


def session_to_dict(session: AnnotationSession) -> dict:
    return {
        "session_id": session.session_id,
        "label_space": session.label_space,
        "cluster_ids": session.cluster_ids,
        "assignments": {
            str(c): label for c, label in sorted(session.assignments.items())
        },
        "status": session.status,
    }


def session_from_dict(data: dict) -> AnnotationSession:
    return AnnotationSession(
        session_id=data["session_id"],
        label_space=list(data["label_space"]),
        cluster_ids=[int(c) for c in data["cluster_ids"]],
        assignments={int(c): label for c, label in data.get("assignments", {}).items()},
        status=data.get("status", "open"),
    )


def save_session(session: AnnotationSession, directory: str | Path) -> None:
    directory = Path(directory)
    payload = json.dumps(session_to_dict(session), indent=2, sort_keys=True)
    _atomic_write_bytes(directory / SESSION_FILE, payload.encode("utf-8"))


def load_session(directory: str | Path) -> AnnotationSession:
    data = json.loads((Path(directory) / SESSION_FILE).read_text(encoding="utf-8"))
    return session_from_dict(data)


def append_event(directory: str | Path, cluster_id: int | None, action: str,
                 label: str | None = None) -> None:
    event = {"ts": time.time(), "cluster": cluster_id, "action": action}
    if action == "assign":
        event["label"] = label
    line = json.dumps(event, sort_keys=True) + "\n"
    with open(Path(directory) / EVENTS_FILE, "a", encoding="utf-8") as fh:
        fh.write(line)


def read_events(directory: str | Path) -> list[dict]:
    path = Path(directory) / EVENTS_FILE
    if not path.exists():
        return []
    events = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                events.append(json.loads(line))
    return events


def replay_events(events: list[dict], fresh: AnnotationSession) -> AnnotationSession:
    """Re-apply an event log to a fresh session; reproduces the assignments map."""
    for event in events:
        if event["action"] == "assign":
            assign_label(fresh, int(event["cluster"]), event.get("label"))
        elif event["action"] == "finalize":
            fresh.status = "finalized"
    return fresh


def save_cards(cards: list[ClusterCard], directory: str | Path) -> None:
    payload = [
        {
            "cluster_id": c.cluster_id,
            "size": c.size,
            "representatives": c.representatives,
            "thumbnail_paths": c.thumbnail_paths,
            "points": c.points,
            "members": c.members,
        }
        for c in cards
    ]
    _atomic_write_bytes(
        Path(directory) / CARDS_FILE, json.dumps(payload, indent=2).encode("utf-8")
    )


def load_cards(directory: str | Path) -> list[ClusterCard]:
    payload = json.loads((Path(directory) / CARDS_FILE).read_text(encoding="utf-8"))
    return [
        ClusterCard(
            cluster_id=int(c["cluster_id"]),
            size=int(c["size"]),
            representatives=list(c["representatives"]),
            thumbnail_paths=list(c["thumbnail_paths"]),
            points=[(float(a), float(b)) for a, b in c["points"]],
            members=list(c["members"]),
        )
        for c in payload
    ]


def save_vote(result: VoteResult, directory: str | Path) -> None:
    payload = {
        "sample_ids": result.sample_ids,
        "kept_mask": result.kept_mask.astype(int).tolist(),
        "consensus": result.consensus.tolist(),
    }
    _atomic_write_bytes(
        Path(directory) / VOTE_FILE, json.dumps(payload).encode("utf-8")
    )


def load_vote(directory: str | Path) -> VoteResult:
    payload = json.loads((Path(directory) / VOTE_FILE).read_text(encoding="utf-8"))
    return VoteResult(
        sample_ids=list(payload["sample_ids"]),
        kept_mask=np.asarray(payload["kept_mask"], dtype=bool),
        consensus=np.asarray(payload["consensus"], dtype=np.int64),
    )
