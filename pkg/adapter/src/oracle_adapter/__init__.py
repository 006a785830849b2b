"""Oracle server for the bdmae-oracle/1 wire protocol.

Serves hard-label classification and masked-image restoration over stdio
or TCP, backed by echo stand-ins or real pretrained models.
"""

from .backends import BackendError, EchoBackend
from .protocol import PROTO_VERSION
from .selfcheck import run_selfcheck
from .server import OracleService, ServerConfig, serve

__all__ = [
    "BackendError",
    "EchoBackend",
    "OracleService",
    "PROTO_VERSION",
    "ServerConfig",
    "run_selfcheck",
    "serve",
]

__version__ = "0.1.0"
