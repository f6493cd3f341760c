"""Monte-Carlo simulator and analytics for a spectro-temporally multiplexed
atomic-frequency-comb memory storing heralded telecom photons."""

__version__ = "0.1.0"

from .channel_memory import (  # noqa: E402
    AfcProfile,
    AtomEnsemble,
    ChannelPlan,
    HoleDecayParams,
    StorageLaw,
    dephasing_amplitude,
    effective_d0,
    hole_decay,
    plan_channels,
    recall_efficiency,
    route_photon,
    storage_time,
)
from .coincidence import (  # noqa: E402
    CoincidenceTally,
    G2Estimate,
    G2Matrix,
    UndefinedEstimateError,
    find_coincidences,
    g2_from_tally,
    g2_matrix,
    threefold,
)
from .analytics import (  # noqa: E402
    CrosstalkMatrix,
    EfficiencyBudget,
    crosstalk_g2,
    fit_double_exponential,
    fit_exponential,
    fit_inverse,
    fit_quadratic_linear,
    g2_vs_snr,
    invert_crosstalk,
    predict_probabilities,
)
from .detection import DetectorParams, TimeTag, apply_loss, detect  # noqa: E402
from .pair_source import PhotonEvent, SourceParams, channel_wavelengths, generate_train, singles_vs_power  # noqa: E402
