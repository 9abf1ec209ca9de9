"""Error hierarchy with stable process exit codes.

Mirrors the downstream toolkit's convention: 2 for validation problems,
3 for runtime capture failures, 4 for I/O problems.
"""

from __future__ import annotations


class ExporterError(Exception):
    exit_code = 1


class InvalidManifest(ExporterError):
    """Manifest file is malformed or violates its invariants."""

    exit_code = 2


class UnmappedLayer(ExporterError):
    """A mapping entry does not resolve to a 2-D weight in the model."""

    exit_code = 2


class DtypeUnsupported(ExporterError):
    """A weight's dtype cannot be exported under the manifest's policy."""

    exit_code = 2


class SampleSourceEmpty(ExporterError):
    """The sample source has no (or too few) usable token positions."""

    exit_code = 2


class HookFailure(ExporterError):
    """A forward hook never fired or captured something unusable."""

    exit_code = 3


class ExportIoError(ExporterError):
    """Underlying file read or write failed."""

    exit_code = 4
