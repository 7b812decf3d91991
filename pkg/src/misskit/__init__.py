"""Missing-modality RGBT tracking toolkit.

Numpy implementations of a shared-specific two-stream tracker, invertible
feature prompters for missing modalities, a missing-pattern simulator and
the MPR/MSR/NPR evaluation protocol.
"""

__version__ = "0.1.0"

from .backbone import RGBTTracker, TrackerConfig
from .compensation import compensate
from .config import RunConfig
from .metrics import evaluate_dataset, evaluate_sequence
from .prompter import InvertiblePrompter, PrompterConfig
from .simulate import MissingSchedule, SequenceMeta, build_missing_dataset, generate_schedule
from .tracking import inference_step, track_sequence

__all__ = [
    "RGBTTracker", "TrackerConfig", "InvertiblePrompter", "PrompterConfig", "RunConfig",
    "MissingSchedule", "SequenceMeta", "build_missing_dataset", "generate_schedule",
    "evaluate_dataset", "evaluate_sequence", "compensate", "inference_step", "track_sequence",
]
