from famh.ingest.batching import (
    BatchPlan,
    RecordingStore,
    assemble_batch,
    iter_batches,
    plan_pretrain_epoch,
)
from famh.ingest.recording import (
    ACTIVITY_CLASSES,
    LabelTrack,
    RawRecording,
    Recording30,
    intervals_to_track,
    load_labels_csv,
    load_recording_bin,
    load_recording_csv,
    save_labels_csv,
    save_recording_bin,
    save_recording_csv,
    track_to_intervals,
)
from famh.ingest.synthetic import (
    ClassSignature,
    SyntheticConfig,
    desk_config,
    generate_synthetic,
    activity_classes_config,
)
from famh.ingest.windowing import (
    Window,
    WindowGeometry,
    map_labels,
    patchify,
    unpatchify,
    window_finetune,
    window_pretrain,
)

__all__ = [
    "BatchPlan",
    "ClassSignature",
    "LabelTrack",
    "ACTIVITY_CLASSES",
    "RawRecording",
    "Recording30",
    "RecordingStore",
    "SyntheticConfig",
    "Window",
    "WindowGeometry",
    "assemble_batch",
    "desk_config",
    "generate_synthetic",
    "intervals_to_track",
    "iter_batches",
    "load_labels_csv",
    "load_recording_bin",
    "load_recording_csv",
    "map_labels",
    "activity_classes_config",
    "patchify",
    "plan_pretrain_epoch",
    "save_labels_csv",
    "save_recording_bin",
    "save_recording_csv",
    "track_to_intervals",
    "unpatchify",
    "window_finetune",
    "window_pretrain",
]
