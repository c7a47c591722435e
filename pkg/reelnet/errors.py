"""
Exception types for ReelNet.

Library code raises these; only cli.py turns them into exit codes.
"""


class ReelNetError(Exception):
    """Base class for all ReelNet errors."""

    code = 'reelnet_error'


class ConfigError(ReelNetError, ValueError):
    code = 'invalid_config'


class ShapeError(ReelNetError, ValueError):
    code = 'shape_mismatch'


class SessionError(ReelNetError, KeyError):
    code = 'unknown_session'

    def __str__(self) -> str:
        # KeyError quotes its message; keep it plain
        return str(self.args[0]) if self.args else ''


class DatasetError(ReelNetError, ValueError):
    code = 'invalid_dataset'


class ManifestError(DatasetError):
    code = 'invalid_manifest'


class TrainingDiverged(ReelNetError, ArithmeticError):
    code = 'diverged'


class CorruptMaskError(ReelNetError, ValueError):
    code = 'corrupt_mask'


class CheckpointError(ReelNetError, IOError):
    code = 'checkpoint_error'


class ChecksumError(CheckpointError):
    code = 'checksum_failure'


class TruncatedCheckpointError(CheckpointError):
    code = 'truncated_checkpoint'


class VersionMismatchError(CheckpointError):
    code = 'version_mismatch'


class ResumeMismatchError(CheckpointError):
    code = 'resume_mismatch'
