"""Two-dimensional NLOS reconstruction through a time-aggregated complex field.

The pipeline collapses a confocal transient measurement over time into a
complex field ``phi(x; s)``, inverts a separable chirp convolution to get the
modulated albedo ``psi(x; s) = a exp(-i d^2 / 4 s^2)``, and reads albedo and
depth from two values of ``s``.
"""
from ._backend import ACTIVE_NAME as backend_name
from ._backend import COMPILED_AVAILABLE, available_backends
from .aggregation import (
    BinSliceStream,
    aggregate_events,
    aggregate_events_multi,
    aggregate_stream,
    aggregate_stream_multi,
    aggregate_time,
    aggregate_time_multi,
    event_weights,
    fdh_omega,
    time_weights,
)
from .core import (
    AggregatedField,
    DataError,
    ModulatedAlbedo,
    ParameterError,
    PhotonEventList,
    QFError,
    Reconstruction,
    SamplingReport,
    SceneSurfels,
    StreamError,
    Surfel,
    TransientHistogram,
    WallGrid,
    check_chirp_sampling,
)
from .deconvolution import DeconvOptions, deconvolve_direct, deconvolve_fft
from .extraction import (
    DepthOptions,
    RangeWarning,
    default_ds,
    extract_albedo,
    extract_depth,
    unambiguous_depth,
    wiener_post_filter,
)
from .forward import (
    ClipReport,
    RenderOptions,
    SyntheticEventSource,
    load_scene,
    render_events,
    render_histogram,
    render_phi_analytic,
    render_psi_analytic,
)
from .ledger import MemoryLedger
from .pipeline import (
    PipelineOptions,
    PipelineResult,
    reconstruct_events,
    reconstruct_fields,
    reconstruct_histogram,
    reconstruct_stream,
)

__version__ = "0.1.0"
