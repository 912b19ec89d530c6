"""maskrepair: repair imperfect 3D segmentation masks with an
appearance-conditioned implicit occupancy field.

The library covers the full workflow: volume containers and sampling,
synthetic annotation corruption, auto-decoded occupancy-field training with
exact numpy gradients, volume/surface evaluation metrics, mesh export, and
an end-to-end experiment pipeline.
"""

from .distort import DistortionConfig, add_cut_cubes, salt_pepper, synthesize_distortion
from .errors import (
    BandUnreachableError,
    FormatError,
    InvalidResolutionError,
    InvalidWindowError,
    MaskRepairError,
    NoForegroundError,
    NumericError,
    PhaseError,
    ShapeMismatchError,
    TrainingAborted,
    UnknownCaseError,
)
from .mesh import TriangleMesh, marching_cubes, write_off, write_stl
from .metrics import MetricReport, MetricSummary, aggregate, dsc, nsd
from .model import (
    ArchitectureConfig,
    backward,
    decode_features,
    init_model,
    loss,
    query,
)
from .morphology import (
    boundary_mask,
    connected_components,
    count_components,
    dilate,
    edt,
    erode,
    morphological_close,
)
from .phantoms import make_phantom, make_phantoms
from .pipeline import (
    CaseManifest,
    ExperimentConfig,
    baseline_smooth,
    distort_dataset,
    evaluate_manifest,
    export_mesh,
    load_manifest,
    predict_probabilities,
    repair,
    repair_dataset,
    run_experiment,
    save_manifest,
    sweep_baseline,
    train_from_manifest,
)
from .train import (
    AdamState,
    Checkpoint,
    PointBatch,
    TrainConfig,
    TrainingCase,
    adam_step,
    load_checkpoint,
    sample_epoch_batch,
    save_checkpoint,
    train,
)
from .volume import (
    GridKind,
    VolumeGrid,
    center_crop,
    jitter,
    load_nvol,
    mask_grid,
    meshgrid,
    nearest_label,
    save_nvol,
    trilinear_sample,
    window_normalize,
)

__version__ = "0.1.0"
