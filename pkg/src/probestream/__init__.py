"""Streaming of dynamic light-probe volumes from a server to thin clients.

The package splits into the probe data model (`volume`), bit-exact layout
transforms (`packing`), a lossless temporal frame codec (`codec`), per-client
probe selection (`selection`), the server and client endpoints (`server`,
`client`), a reliable channelised transport over a simulated network
(`transport`), and the experiment harness (`harness`).
"""

from probestream.volume import (
    AtlasKind,
    ProbeAtlas,
    ProbeVolume,
    oct_decode,
    oct_encode,
    raw_bits,
    throughput_bps,
)

__all__ = [
    "AtlasKind",
    "ProbeAtlas",
    "ProbeVolume",
    "oct_decode",
    "oct_encode",
    "raw_bits",
    "throughput_bps",
]

__version__ = "0.1.0"
