"""
STAND Exceptions
One hierarchy for every error the library and CLI raise
"""


class StandError(Exception):
    """Base class for all STAND errors"""


class InputError(StandError, ValueError):
    """Invalid tokens, contexts, paths or drafts passed to an operation"""


class ConfigError(StandError):
    """Invalid run configuration or missing input files"""


class FormatError(StandError):
    """Unknown file format/version or incompatible persisted data"""


class ProtocolError(StandError):
    """Malformed response from a remote logit server"""


class TransportError(StandError):
    """Remote logit server unreachable after retries"""


class DraftContractError(StandError):
    """A drafted token carries zero draft probability"""
