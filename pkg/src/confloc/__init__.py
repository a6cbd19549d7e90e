"""Acoustic source localization with manifold GPs and conformal intervals."""

from .conformal import (
    DEFAULT_GAMMA,
    LocalizationResult,
    NonconformityProfile,
    PValue,
    build_profile,
    jackknife_plus_interval,
    localize_with_pi,
    p_value,
    predict_interval,
)
from .features import (
    AggregatedRtf,
    BandSelection,
    StftConfig,
    aggregate,
    estimate_rtf,
    features_from_recording,
    select_band,
    split,
    stft,
)
from .gpr import (
    LooTable,
    MmgpModel,
    PosteriorSummary,
    fit,
    gpr_baseline_interval,
    load_model,
    loo_table,
    posterior,
    save_model,
)
from .intervals import PredictionInterval
from .kernel import (
    KernelConfig,
    ReferenceSet,
    combined_kernel_matrix,
    manifold_kernel,
    node_kernel,
    select_scales,
)
from .room import (
    ArrayLayout,
    Dataset,
    GridSpec,
    MicNode,
    MultichannelRecording,
    Roi,
    RoomSpec,
    Scene,
    build_dataset,
    generate_rir,
    generate_rirs,
    simulate_recording,
)
from .signals import SignalSpec, load_wav, make_signal, save_recording_wav

__version__ = "0.1.0"
