"""Camera-trap image triage: detection, ensembles, evaluation, and review."""

from .catalog import (
    Annotation,
    BoundingBox,
    Burst,
    BurstPolicy,
    CameraTrapImage,
    Catalog,
    group_bursts,
    ingest_manifest,
    parse_box_annotations,
)
from .curation import (
    ClassTaxonomy,
    SplitAssignment,
    burst_split,
    camera_holdout_split,
    crop_to_box,
    remap_taxonomy,
    sample_background_boxes,
)
from .ensemble import (
    PipelineConfig,
    Vote,
    VoteResult,
    aggregate_image_label,
    hierarchical_vote,
    plurality_vote,
    run_pipeline,
)
from .evaluation import (
    ConfusionMatrix,
    EvaluationReport,
    estimate_review_savings,
    evaluate,
    run_experiment,
)
from .stages import (
    BackendDescriptor,
    ClassScores,
    Mask,
    RegionProposal,
    classify,
    composite_mask,
    detect_regions,
)

__version__ = "0.1.0"
