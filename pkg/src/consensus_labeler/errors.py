"""Exception hierarchy shared across the pipeline.

Exit-code mapping (see cli.main): ValidationError -> 1, PipelineError and
other runtime failures -> 2, OSError -> 3.
"""


class ValidationError(ValueError):
    """Bad inputs: malformed files, violated preconditions, inconsistent shapes."""


class PipelineError(RuntimeError):
    """Runtime failure inside a stage (divergence, degenerate numerics, ...)."""


class AnnotationError(Exception):
    """Base for annotation-session failures; subclasses map onto HTTP statuses."""


class UnknownClusterError(AnnotationError):
    def __init__(self, cluster_id):
        super().__init__(f"unknown cluster {cluster_id}")
        self.cluster_id = cluster_id


class UnknownLabelError(AnnotationError):
    def __init__(self, label, label_space):
        super().__init__(f"label {label!r} not in label space {list(label_space)}")
        self.label = label


class SessionFinalizedError(AnnotationError):
    def __init__(self):
        super().__init__("session is finalized and rejects mutation")


class UnlabeledClustersError(AnnotationError):
    def __init__(self, cluster_ids):
        ids = sorted(cluster_ids)
        super().__init__(f"clusters still unlabeled: {ids}")
        self.cluster_ids = ids
