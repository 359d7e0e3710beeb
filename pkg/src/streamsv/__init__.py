"""Multi-stream speaker-verification toolkit.

Parallel band-limited encoder streams over log mel-filterbank energies,
trained jointly with a combined classification + metric objective, scored
with EER / minDCF / DET evaluation. Everything runs on numpy in double
precision with hand-written gradients.
"""

from .audio import (
    Manifest,
    SpeakerProfile,
    Waveform,
    build_synth_corpus,
    load_manifest,
    read_wav,
    sample_segment,
    synth_utterance,
    take_segment,
    write_manifest,
    write_wav,
)
from .errors import StreamSVError
from .evaluation import (
    DetCurve,
    EvalResult,
    Trial,
    TrialList,
    TrialScoreSet,
    compute_det,
    compute_eer,
    compute_min_dcf,
    emit_report,
    evaluate_trials,
    load_trial_list,
    score_trial,
    write_trial_list,
)
from .features import (
    FeatureMatrix,
    FilterBank,
    FrontendConfig,
    build_filterbank,
    hz_to_mel,
    log_mfbe,
    mel_to_hz,
    read_feature_file,
    write_feature_file,
)
from .losses import (
    LossOutput,
    MetricBatch,
    aam_softmax,
    am_softmax,
    angular_prototypical,
    combined_loss,
    softmax_ce,
)
from .model import (
    DEFAULT_STREAMS,
    LearningCurve,
    MultiStreamModel,
    StreamConfig,
    TrainConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .nn import (
    Conv2d,
    Encoder,
    Linear,
    Parameter,
    ParameterSet,
    ReLU,
    TemporalMeanPool,
    grad_check,
)
from .optim import AdamState, LrSchedule, adam_step, early_stop, lr_at_epoch, sgd_step

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Conv2d",
    "DEFAULT_STREAMS",
    "DetCurve",
    "Encoder",
    "EvalResult",
    "FeatureMatrix",
    "FilterBank",
    "FrontendConfig",
    "LearningCurve",
    "Linear",
    "LossOutput",
    "LrSchedule",
    "Manifest",
    "MetricBatch",
    "MultiStreamModel",
    "Parameter",
    "ParameterSet",
    "ReLU",
    "SpeakerProfile",
    "StreamConfig",
    "StreamSVError",
    "TemporalMeanPool",
    "TrainConfig",
    "Trial",
    "TrialList",
    "TrialScoreSet",
    "Waveform",
    "aam_softmax",
    "adam_step",
    "am_softmax",
    "angular_prototypical",
    "build_filterbank",
    "build_model",
    "build_synth_corpus",
    "combined_loss",
    "compute_det",
    "compute_eer",
    "compute_min_dcf",
    "early_stop",
    "emit_report",
    "evaluate_trials",
    "grad_check",
    "hz_to_mel",
    "load_checkpoint",
    "load_manifest",
    "load_trial_list",
    "log_mfbe",
    "lr_at_epoch",
    "mel_to_hz",
    "read_feature_file",
    "read_wav",
    "sample_segment",
    "save_checkpoint",
    "score_trial",
    "sgd_step",
    "softmax_ce",
    "synth_utterance",
    "take_segment",
    "train",
    "write_feature_file",
    "write_manifest",
    "write_trial_list",
    "write_wav",
]
