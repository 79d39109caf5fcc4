"""Boundary state pair search and retraining for lane-keeping controllers.

A vehicle state is a pose and speed on a closed track; a boundary state pair
is two close, valid states where a driving model keeps the lane from one and
loses it from the other. The package finds such pairs for a ladder of models,
measures how extreme they are, and retrains the best models on
autopilot-labeled recoveries from their own failure states.
"""

from .boundary import (
    AngularRange,
    ClosenessBudget,
    NoValidState,
    StatePair,
    ValidityLimits,
    intersect_angular_ranges,
    is_close,
    is_valid_state,
    mutate_orientation,
    mutate_pair,
    mutate_position,
    mutate_state,
    mutate_velocity,
    sample_valid_state,
    state_distance,
)
from .controllers import (
    AutopilotFailed,
    Dataset,
    Hyperparams,
    InsufficientData,
    LabeledSample,
    LearnedModel,
    PIDAutopilot,
    SingularSystem,
    collect_reference_trace,
    dataset_from_csv,
    dataset_to_csv,
    fit_model,
    fit_on_split,
    fit_ridge,
    load_model,
    predict_steer,
    save_model,
    split_indices,
    train_ladder,
    tune_autopilot,
)
from .dynamics import (
    LOOKAHEAD_OFFSETS,
    EpisodeResult,
    ModelFailure,
    Observation,
    SimConfig,
    TraceRow,
    VehicleState,
    drive_nominal,
    extract_features,
    nominal_start,
    read_trace_csv,
    run_episode,
    step_vehicle,
    target_speed,
    write_trace_csv,
)
from .geometry import (
    BudgetExhausted,
    DegenerateTriple,
    MismatchedLength,
    Track,
    TrackFeatures,
    closest_waypoint,
    compute_track_features,
    count_turns,
    generate_evaluation_track,
    heading_of,
    heading_vector,
    load_track,
    make_training_track,
    mirror_track,
    relative_orientation,
    resample_closed,
    save_track,
    signed_xte,
    track_curvature,
    track_distance,
    track_from_dict,
    track_to_dict,
    wrap180,
    wrap360,
    xte,
)
from .metrics import (
    EmptyArchive,
    EmptySample,
    MannKendallResult,
    MannWhitneyResult,
    RadiusReport,
    RecoverabilityReport,
    TooShort,
    mann_kendall_s,
    mann_whitney_u,
    radius,
    recoverability,
    success_rate,
    vargha_delaney_a12,
)
from .pipeline import (
    EmptyDataset,
    RunConfig,
    StageFailed,
    apply_env_overrides,
    build_boundary_dataset,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    merge_and_split,
    micro_config,
    paper_config,
    quickstart_config,
    retrain_model,
    run_experiment,
    save_config,
)
from .render import render_track_svg, save_svg
from .search import (
    ArchiveEntry,
    SearchConfig,
    SearchReport,
    archive_from_list,
    archive_insert,
    archive_to_list,
    baseline_search,
    binary_search_boundary,
    genbo_search,
    is_duplicate,
    load_archive,
    replicate_pair,
    save_archive,
)

__version__ = "0.1.0"
