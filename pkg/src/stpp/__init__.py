"""Attention-based spatio-temporal point processes for congestion events."""
from .estimators import APPEstimator, CongestionDetector, HawkesMLE
from .events import (
    CongestionEvent,
    CountSeries,
    EventSequence,
    IncidentEvent,
    detect_congestion,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .intensity import (
    ModelConfig,
    ModelParams,
    compensator,
    conditional_density,
    init_params,
    intensity,
    log_likelihood,
    predict_next,
)
from .network import (
    NetworkLocation,
    SegmentWeights,
    SpatialIndex,
    TailupParams,
    TrafficNetwork,
    build_network,
    flow_connected,
    load_network,
    load_weights,
    stream_distance,
    tailup_correlation,
    validate_weights,
)
from .online import OnlineSelection, observe, online_intensity
from .train import TrainConfig, evaluate, fit, fit_hawkes_mle

__all__ = [
    "CongestionEvent",
    "CountSeries",
    "EventSequence",
    "IncidentEvent",
    "detect_congestion",
    "load_dataset",
    "save_dataset",
    "split_dataset",
    "ModelConfig",
    "ModelParams",
    "compensator",
    "conditional_density",
    "init_params",
    "intensity",
    "log_likelihood",
    "predict_next",
    "NetworkLocation",
    "SegmentWeights",
    "SpatialIndex",
    "TailupParams",
    "TrafficNetwork",
    "build_network",
    "flow_connected",
    "load_network",
    "load_weights",
    "stream_distance",
    "tailup_correlation",
    "validate_weights",
    "APPEstimator",
    "CongestionDetector",
    "HawkesMLE",
    "OnlineSelection",
    "observe",
    "online_intensity",
    "TrainConfig",
    "evaluate",
    "fit",
    "fit_hawkes_mle",
]

__version__ = "0.1.0"
