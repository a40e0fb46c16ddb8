"""Linear stimulus-reconstruction auditory attention decoding."""

__version__ = "0.1.0"

from .signal import (  # noqa: E402
    MultichannelSignal,
    design_butterworth_bandpass,
    filtfilt,
    preprocess,
    resample_rational,
    zscore_per_trial,
)
from .envelope import (  # noqa: E402
    Envelope,
    GammatoneBankSpec,
    audio_to_envelope,
    gammatone_filterbank,
    powerlaw_envelope,
    preprocess_envelope,
)
from .decoder import (  # noqa: E402
    AttentionLabels,
    DecoderModel,
    build_lag_matrix,
    ledoit_wolf_intensity,
    reconstruct,
    select_attended,
    solve_decoder,
)
from .decision import (  # noqa: E402
    DecisionWindowConfig,
    decide_window,
    pearson,
    significance_threshold,
    windowed_decisions,
)
from .dataset import (  # noqa: E402
    Condition,
    Dataset,
    SyntheticConfig,
    Trial,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .evaluation import (  # noqa: E402
    DecoderConfig,
    Protocol,
    cross_dataset,
    mismatched_envelopes,
    plan_folds,
    run_protocol,
)
