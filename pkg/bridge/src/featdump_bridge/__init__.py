"""Feature-dump bridge: pre-trained speech encoders to SSLF files."""

from .bridge import (
    AudioError,
    BridgeConfig,
    BridgeError,
    CheckpointMismatch,
    dump_corpus,
    extract_stack,
    load_checkpoint,
    write_sslf,
)

__all__ = [
    "AudioError", "BridgeConfig", "BridgeError", "CheckpointMismatch",
    "dump_corpus", "extract_stack", "load_checkpoint", "write_sslf",
]
