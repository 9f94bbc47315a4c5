"""Event-camera stream processing.

Converts an asynchronous DVS event stream into crisp binary event images
(BEIs) via normal-flow lifetime augmentation, segments BEIs into
superevents, and scores boundary adherence against edge-map ground truth.
"""

from evbei.events import SAE, Event, EventStream, load_event_stream, parse_event_line, save_event_stream
from evbei.flow import (
    FlowParams,
    NormalFlow,
    PlaneParams,
    QuantileReservoir,
    fit_plane_constrained,
    flow_from_plane,
    noise_accept,
    select_support,
)
from evbei.lifetime import LifetimeRecord, LifetimeStore, augment, insert_and_reset, lifetime_from_flow
from evbei.bei import (
    BEI,
    RenderScheduler,
    estimate_event_rate,
    estimate_scene_complexity,
    impulse_filter,
    render_bei,
    rendering_interval,
)
from evbei.pipeline import FlowPipeline, PipelineParams
from evbei.superevents import ClusterConfig, SupereventLabelMap, extract_boundaries, segment_bei
from evbei.evaluate import PRResult, align_frame, boundary_pr, canny, edge_thickness
from evbei.synth import SyntheticSceneConfig, synth_generate

__version__ = "0.1.0"
