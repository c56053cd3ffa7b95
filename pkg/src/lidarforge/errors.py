"""Exception types shared across the package."""


class LidarForgeError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(LidarForgeError):
    """Invalid configuration, sensor spec, or rule set (CLI exit code 2)."""


class MeshFormatError(LidarForgeError):
    """Unreadable or malformed mesh file.

    Carries the file path and, when known, the offending line (text formats)
    or byte offset (binary formats).
    """

    def __init__(self, message, path=None, line=None, offset=None):
        parts = []
        if path is not None:
            parts.append(str(path))
        if line is not None:
            parts.append(f"line {line}")
        if offset is not None:
            parts.append(f"byte {offset}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset


class LpcFormatError(LidarForgeError):
    """Corrupt .lpc point cloud file; reports the byte offset of the defect."""

    def __init__(self, message, path=None, offset=None):
        parts = []
        if path is not None:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"byte {offset}")
        prefix = ": ".join(parts)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.offset = offset


class PlacementError(LidarForgeError):
    """Scene randomization exhausted its rejection budget."""


class RegistrationError(LidarForgeError):
    """ICP alignment failed (too few points or correspondences)."""
