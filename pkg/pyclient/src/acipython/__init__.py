"""Thin Python SDK for the matrix gateway: connect, push arrays, run, fetch.

Depends only on the documented wire protocol; see the gateway repository's
PROTOCOL.md for the byte-level contract.
"""

from .protocol import GatewayFault, ProtocolError
from .session import AlchemistSession, MatrixHandle

__version__ = "0.1.0"
