"""Self-contained matrix gateway: distributed dense matrices over TCP workers.

Clients open sessions against a driver endpoint, get allocated a group of
worker endpoints, push matrices into Elemental-style layouts, run library
functions (truncated SVD, multiply, a toy simulator) on the resulting
handles, and fetch results back. ``alchemistd`` serves; ``alchemist-bench``
measures transfer behaviour across layouts and buffer sizes.
"""

from .bench import BenchConfig, BenchRecord, run_bench, summarize
from .client import (
    BlockedSource,
    ClientSession,
    RowPartitionedSource,
    connect,
    from_address_file,
)
from .layout import (
    ALL_PAIRS,
    CIRC_CIRC,
    MC_MR,
    MR_MC,
    STAR_VC,
    STAR_VR,
    VC_STAR,
    VR_STAR,
    DistPair,
    DistScheme,
    LocalCoord,
    ProcessGrid,
    TransferPlan,
    global_of,
    local_of,
    local_shape,
    make_grid,
    owner,
    plan_transfer,
)
from .server import Gateway, start
from .wire import (
    BlockMessage,
    Command,
    ElemType,
    Frame,
    HandleRef,
    MatrixHandle,
    chunk_block,
    decode_frame,
    decode_task,
    encode_frame,
    encode_task,
)

__version__ = "0.1.0"
