"""Stage orchestration: ingest -> refine -> cluster x3 -> align -> vote -> cards.

Every command is reproducible: (inputs, config, seed) fully determine the
artifacts bitwise. The workspace is append-structured; re-running a stage
rewrites its own artifacts with identical bytes and never touches earlier
ones. The three clustering engines run concurrently on the same immutable
refined matrix.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import annotate as ann
from .classify import EvalReport, evaluate, predict, train_classifier
from .engines import ClusterAssignment, KMeansModel, agglomerative, birch, kmeans, pca_fit, pca_transform
from .errors import ValidationError
from .ingest import (
    EmbeddingMatrix,
    Manifest,
    PairedEmbeddings,
    load_embeddings,
    load_manifest,
    pair_views,
    save_embeddings,
    unify_dimension,
    UNIFIED_DIM,
)
from .refine import (
    ProjectionHead,
    RefineConfig,
    RefinedEmbeddings,
    refine,
    save_head,
    save_loss_curve,
    train_heads,
)
from .vote import (
    VoteResult,
    align_labels,
    apply_alignment,
    contingency,
    purity,
    save_assignment_csv,
    save_purity_report,
    save_vote_csvs,
    vote,
)


@dataclass
class PipelineParams:
    k: int = 50
    seed: int = 0
    temperature: float = 0.1
    learning_rate: float = 0.001
    epochs: int = 200
    hidden_dim: int = 512
    out_dim: int = 128
    branch_select: str = "view_a"
    kmeans_n_init: int = 10
    kmeans_max_iter: int = 300
    birch_threshold: float = 0.5
    branching_factor: int = 50
    representatives: int = 9

    def validate(self) -> None:
        if self.k < 2:
            raise ValidationError("k must be at least 2")
        self.refine_config().validate()

    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            temperature=self.temperature,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=derive_seed(self.seed, "refine"),
            branch_select=self.branch_select,
            hidden_dim=self.hidden_dim,
            out_dim=self.out_dim,
        )


@dataclass
class PipelineConfig:
    manifest_path: str
    embeddings_a_path: str
    embeddings_b_path: str
    workspace: str
    params: PipelineParams = field(default_factory=PipelineParams)

    def to_dict(self) -> dict:
        return {
            "manifest_path": self.manifest_path,
            "embeddings_a_path": self.embeddings_a_path,
            "embeddings_b_path": self.embeddings_b_path,
            "workspace": self.workspace,
            "params": asdict(self.params),
        }


@dataclass
class ClusterVote:
    assignments: dict[str, ClusterAssignment]  # aligned, keyed kmeans/agg/birch
    kmeans_model: KMeansModel
    result: VoteResult


@dataclass
class PipelineOutputs:
    manifest: Manifest
    pair: PairedEmbeddings
    heads: tuple[ProjectionHead, ProjectionHead]
    loss_curve: list[float]
    refined: RefinedEmbeddings
    cluster_vote: ClusterVote
    cards: list[ann.ClusterCard]
    params: PipelineParams

    @property
    def vote_result(self) -> VoteResult:
        return self.cluster_vote.result


@dataclass
class RunRecord:
    config_hash: str
    seed: int
    discard_rate: float
    kept_count: int
    cluster_count: int
    timings: dict[str, float]
    artifacts: dict[str, str]


def derive_seed(base: int, *tags: str) -> int:
    """Stable per-stage seed derivation from the run seed."""
    digest = hashlib.blake2b(
        ("/".join([str(base), *tags])).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") % (2**32)


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def cluster_and_vote(
    x: np.ndarray, params: PipelineParams, sample_ids: list[str]
) -> ClusterVote:
    """Run the three engines concurrently, align to the k-means anchor, vote."""
    with ThreadPoolExecutor(max_workers=3) as pool:
        f_kmeans = pool.submit(
            kmeans,
            x,
            params.k,
            derive_seed(params.seed, "kmeans"),
            params.kmeans_n_init,
            params.kmeans_max_iter,
        )
        f_agg = pool.submit(agglomerative, x, params.k)
        f_birch = pool.submit(
            birch, x, params.k, params.birch_threshold, params.branching_factor
        )
        km_assign, km_model = f_kmeans.result()
        agg_assign = f_agg.result()
        birch_assign, _ = f_birch.result()
    agg_aligned = apply_alignment(agg_assign, align_labels(contingency(km_assign, agg_assign)))
    birch_aligned = apply_alignment(
        birch_assign, align_labels(contingency(km_assign, birch_assign))
    )
    result = vote(km_assign, agg_aligned, birch_aligned, sample_ids)
    return ClusterVote(
        assignments={"kmeans": km_assign, "agg": agg_aligned, "birch": birch_aligned},
        kmeans_model=km_model,
        result=result,
    )


def run_core(
    manifest: Manifest,
    emb_a: EmbeddingMatrix,
    emb_b: EmbeddingMatrix,
    params: PipelineParams,
) -> PipelineOutputs:
    """The in-memory pipeline, stopping before human annotation."""
    params.validate()
    unified_a = unify_dimension(emb_a, UNIFIED_DIM, derive_seed(params.seed, "unify", "a"))
    unified_b = unify_dimension(emb_b, UNIFIED_DIM, derive_seed(params.seed, "unify", "b"))
    pair = pair_views(unified_a, unified_b, manifest)
    cfg = params.refine_config()
    head_a, head_b, curve = train_heads(pair, cfg)
    refined = refine((head_a, head_b), pair, params.branch_select, cfg, curve[-1])
    cv = cluster_and_vote(refined.values, params, manifest.ids())
    cards = ann.build_cluster_cards(
        cv.result, refined.values, manifest, params.representatives
    )
    return PipelineOutputs(
        manifest=manifest,
        pair=pair,
        heads=(head_a, head_b),
        loss_curve=curve,
        refined=refined,
        cluster_vote=cv,
        cards=cards,
        params=params,
    )


def run_pipeline(config: PipelineConfig) -> RunRecord:
    """Execute the full pipeline from files and persist every artifact."""
    ws = Path(config.workspace)
    for path in (config.manifest_path, config.embeddings_a_path, config.embeddings_b_path):
        if not Path(path).exists():
            raise ValidationError(f"input file missing: {path}")
    ws.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    artifacts: dict[str, str] = {}

    t0 = time.perf_counter()
    manifest = load_manifest(config.manifest_path)
    emb_a = load_embeddings(config.embeddings_a_path, expected_n=len(manifest))
    emb_b = load_embeddings(config.embeddings_b_path, expected_n=len(manifest))
    timings["ingest"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    outputs = run_core(manifest, emb_a, emb_b, config.params)
    timings["pipeline"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    (ws / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )
    save_embeddings(outputs.pair.view_a, ws / "unified_a.decm")
    save_embeddings(outputs.pair.view_b, ws / "unified_b.decm")
    save_head(outputs.heads[0], ws / "heads_a.dech")
    save_head(outputs.heads[1], ws / "heads_b.dech")
    save_loss_curve(outputs.loss_curve, ws / "loss_curve.csv")
    save_embeddings(
        EmbeddingMatrix(
            encoder_name=f"refined:{outputs.refined.branch}", values=outputs.refined.values
        ),
        ws / "refined.decm",
    )
    ids = manifest.ids()
    for name, assignment in outputs.cluster_vote.assignments.items():
        save_assignment_csv(assignment, ids, ws / f"assignment_{name}.csv")
        if assignment.matched_count is not None:
            (ws / f"alignment_{name}.json").write_text(
                json.dumps({"matched_count": assignment.matched_count}), encoding="utf-8"
            )
    save_vote_csvs(outputs.vote_result, ws / "kept.csv", ws / "discarded.csv")
    if manifest.has_truth_labels():
        report = purity(outputs.vote_result, outputs.cluster_vote.assignments["kmeans"], manifest)
        save_purity_report(report, ws / "purity.txt", ws / "purity.csv")
        artifacts["purity"] = str(ws / "purity.txt")
    session_dir = ws / "annotation"
    session_dir.mkdir(exist_ok=True)
    ann.save_cards(outputs.cards, session_dir)
    ann.save_vote(outputs.vote_result, session_dir)
    shutil.copyfile(config.manifest_path, session_dir / ann.MANIFEST_FILE)
    timings["persist"] = time.perf_counter() - t0

    artifacts.update(
        {
            "kept": str(ws / "kept.csv"),
            "discarded": str(ws / "discarded.csv"),
            "refined": str(ws / "refined.decm"),
            "cards": str(session_dir / ann.CARDS_FILE),
            "annotation_dir": str(session_dir),
        }
    )
    record = RunRecord(
        config_hash=config_hash(config),
        seed=config.params.seed,
        discard_rate=outputs.vote_result.discard_rate,
        kept_count=len(outputs.vote_result.kept),
        cluster_count=len(outputs.cards),
        timings=timings,
        artifacts=artifacts,
    )
    (ws / "run.json").write_text(json.dumps(asdict(record), indent=2), encoding="utf-8")
    return record


def dominant_label_accuracy(
    labels: np.ndarray,
    truth: list[str | None],
    eval_idx: np.ndarray,
    mapping_idx: np.ndarray,
) -> float:
    """Accuracy of labeling each cluster by its dominant truth label.

    The cluster -> label map is derived from ``mapping_idx`` rows and scored
    on ``eval_idx`` rows; clusters never seen in the mapping rows score as
    wrong.
    """
    tallies: dict[int, dict[str, int]] = {}
    for i in mapping_idx:
        if truth[i] is None:
            continue
        tallies.setdefault(int(labels[i]), {})
        t = tallies[int(labels[i])]
        t[truth[i]] = t.get(truth[i], 0) + 1
    mapping = {
        c: min(t, key=lambda lab: (-t[lab], lab)) for c, t in tallies.items() if t
    }
    if eval_idx.size == 0:
        return 0.0
    hits = sum(
        1 for i in eval_idx if mapping.get(int(labels[i])) == truth[i]
    )
    return hits / int(eval_idx.size)


@dataclass
class AblationTable:
    axis: str
    columns: list[str]
    accuracy: list[float]
    discard_rate: list[float]

    def rows(self) -> list[tuple[str, list[float]]]:
        return [("accuracy", self.accuracy), ("discard_rate", self.discard_rate)]

    def render(self) -> str:
        width = max(len(c) for c in self.columns + ["discard_rate"]) + 2
        header = " " * width + "".join(f"{c:>{width}}" for c in self.columns)
        lines = [header]
        for name, values in self.rows():
            cells = "".join(f"{v:>{width}.4f}" for v in values)
            lines.append(f"{name:<{width}}" + cells)
        return "\n".join(lines) + "\n"


def ablate_encoding(
    manifest: Manifest,
    emb_a: EmbeddingMatrix,
    emb_b: EmbeddingMatrix,
    params: PipelineParams,
) -> AblationTable:
    """Kept-set accuracy and discard rate for raw vs each refined branch.

    "Raw" is the unified-but-unrefined view_a matrix; the pipeline never
    sees pixels, so a pixel baseline requires supplying pixel-level
    embeddings as the inputs themselves.
    """
    if not manifest.has_truth_labels():
        raise ValidationError("encoding ablation requires truth labels")
    params.validate()
    unified_a = unify_dimension(emb_a, UNIFIED_DIM, derive_seed(params.seed, "unify", "a"))
    unified_b = unify_dimension(emb_b, UNIFIED_DIM, derive_seed(params.seed, "unify", "b"))
    pair = pair_views(unified_a, unified_b, manifest)
    cfg = params.refine_config()
    head_a, head_b, _ = train_heads(pair, cfg)
    variants: list[tuple[str, np.ndarray]] = [("raw", unified_a.values)]
    for branch in ("view_a", "view_b", "concat"):
        variants.append((branch, refine((head_a, head_b), pair, branch, cfg).values))
    truth = manifest.truth_labels()
    ids = manifest.ids()
    accuracy, discard = [], []
    for _, matrix in variants:
        cv = cluster_and_vote(matrix, params, ids)
        kept_idx = cv.result.kept_indices()
        accuracy.append(
            dominant_label_accuracy(cv.result.consensus, truth, kept_idx, kept_idx)
        )
        discard.append(cv.result.discard_rate)
    return AblationTable(
        axis="encoding",
        columns=[name for name, _ in variants],
        accuracy=accuracy,
        discard_rate=discard,
    )


def ablate_voting(outputs: PipelineOutputs) -> AblationTable:
    """Each single aligned engine vs the 3-way vote, on the vote's kept set.

    Engine cluster -> label maps come from that engine's full clustering (how
    it would label everything, discard 0); the vote's map comes from its own
    kept members. All four are scored on the same kept samples.
    """
    manifest = outputs.manifest
    if not manifest.has_truth_labels():
        raise ValidationError("voting ablation requires truth labels")
    truth = manifest.truth_labels()
    result = outputs.vote_result
    kept_idx = result.kept_indices()
    all_idx = np.arange(result.n)
    columns, accuracy, discard = [], [], []
    for name in ("kmeans", "agg", "birch"):
        assignment = outputs.cluster_vote.assignments[name]
        columns.append(name)
        accuracy.append(
            dominant_label_accuracy(assignment.labels, truth, kept_idx, all_idx)
        )
        discard.append(0.0)
    columns.append("vote")
    accuracy.append(dominant_label_accuracy(result.consensus, truth, kept_idx, kept_idx))
    discard.append(result.discard_rate)
    return AblationTable(axis="voting", columns=columns, accuracy=accuracy, discard_rate=discard)


@dataclass
class ProtocolReport:
    mode: str
    within: EvalReport
    cross: EvalReport | None
    accuracy_gap: float | None


def _training_set(
    outputs: PipelineOutputs, propagation: ann.PropagatedDataset
) -> tuple[np.ndarray, list[str]]:
    index = outputs.manifest.index_of()
    rows = [index[r.id] for r in propagation.records]
    labels = [r.label for r in propagation.records]
    return outputs.refined.values[rows], labels


def _leftover_truth(
    outputs: PipelineOutputs, propagation: ann.PropagatedDataset
) -> tuple[np.ndarray, list[str]]:
    index = outputs.manifest.index_of()
    truth = outputs.manifest.truth_labels()
    rows, labels = [], []
    for sid in propagation.leftover:
        i = index[sid]
        if truth[i] is None:
            raise ValidationError(f"leftover sample {sid!r} has no truth label")
        rows.append(i)
        labels.append(truth[i])
    return np.asarray(rows, dtype=np.int64), labels


def run_protocol(
    primary: PipelineOutputs,
    primary_prop: ann.PropagatedDataset,
    mode: str = "within",
    other: PipelineOutputs | None = None,
    other_prop: ann.PropagatedDataset | None = None,
    classifier_seed: int = 0,
    epochs: int = 200,
    batch_size: int = 16,
    learning_rate: float = 0.001,
) -> ProtocolReport:
    """Train-on-kept / test-on-leftover, within one collection or across two.

    ``within``: a classifier trained on the primary collection's kept records
    is scored on that collection's leftover. ``cross`` additionally trains a
    second classifier on the *other* collection's kept records (using the
    other collection's own refinement heads as its feature extractor, applied
    to the primary's unified views at test time) and scores it on the same
    leftover; the accuracy gap is within minus cross.
    """
    if mode not in ("within", "cross"):
        raise ValidationError("mode must be 'within' or 'cross'")
    test_rows, test_truth = _leftover_truth(primary, primary_prop)
    train_x, train_labels = _training_set(primary, primary_prop)
    label_names = sorted(set(train_labels) | set(test_truth))
    model, _ = train_classifier(
        train_x,
        train_labels,
        label_names=sorted(set(train_labels)),
        learning_rate=learning_rate,
        epochs=epochs,
        batch_size=batch_size,
        seed=classifier_seed,
    )
    predicted, _ = predict(model, primary.refined.values[test_rows])
    within_report = evaluate(predicted, test_truth, label_names)
    if mode == "within":
        return ProtocolReport(mode=mode, within=within_report, cross=None, accuracy_gap=None)
    if other is None or other_prop is None:
        raise ValidationError("cross mode requires the other collection's outputs")
    cross_x, cross_labels = _training_set(other, other_prop)
    cross_model, _ = train_classifier(
        cross_x,
        cross_labels,
        label_names=sorted(set(cross_labels)),
        learning_rate=learning_rate,
        epochs=epochs,
        batch_size=batch_size,
        seed=classifier_seed,
    )
    # The other collection's feature extractor, applied to the primary's raw views.
    transported = refine(
        other.heads, primary.pair, other.params.branch_select, other.params.refine_config()
    )
    cross_pred, _ = predict(cross_model, transported.values[test_rows])
    cross_report = evaluate(cross_pred, test_truth, label_names)
    return ProtocolReport(
        mode=mode,
        within=within_report,
        cross=cross_report,
        accuracy_gap=within_report.accuracy - cross_report.accuracy,
    )


def auto_propagate(outputs: PipelineOutputs) -> ann.PropagatedDataset:
    """Scripted annotation pass: label each cluster by its dominant truth label.

    Stands in for the human reviewer wherever ground truth exists (ablation,
    protocol, acceptance); real runs use the annotation service instead.
    """
    manifest = outputs.manifest
    if manifest.label_space is None:
        raise ValidationError("auto propagation requires a truth-labeled manifest")
    session = ann.open_session(outputs.cards, manifest.label_space)
    dominant = ann.dominant_truth_labels(outputs.vote_result, manifest)
    for card in outputs.cards:
        ann.assign_label(session, card.cluster_id, dominant[card.cluster_id])
    return ann.finalize(session, outputs.vote_result)


def export_scatter(
    matrix: np.ndarray,
    manifest: Manifest,
    path: str | Path,
) -> None:
    """2-D PCA scatter CSV: sample_id,pc1,pc2[,truth_label]."""
    model = pca_fit(np.asarray(matrix, dtype=np.float64), q=2)
    coords = pca_transform(model, matrix)
    has_truth = manifest.has_truth_labels()
    lines = ["sample_id,pc1,pc2,truth_label" if has_truth else "sample_id,pc1,pc2"]
    for i, s in enumerate(manifest.samples):
        base = f"{s.id},{coords[i, 0]!r},{coords[i, 1]!r}"
        lines.append(base + (f",{s.truth_label}" if has_truth else ""))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def viz_workspace(workspace: str | Path) -> list[Path]:
    """PCA scatter exports for the unified and refined matrices of a run."""
    ws = Path(workspace)
    manifest_path = ws / "annotation" / ann.MANIFEST_FILE
    if not manifest_path.exists():
        raise ValidationError(f"no completed run in workspace {ws}")
    manifest = load_manifest(manifest_path)
    out = []
    for stem in ("unified_a", "unified_b", "refined"):
        source = ws / f"{stem}.decm"
        if not source.exists():
            raise ValidationError(f"missing stage output: {source}")
        matrix = load_embeddings(source, expected_n=len(manifest))
        target = ws / f"scatter_{stem}.csv"
        export_scatter(matrix.values, manifest, target)
        out.append(target)
    return out
