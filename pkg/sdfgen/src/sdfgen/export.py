"""Binary weight export in the portable "SDF2" format.

Layout (little endian): magic "SDF2", u16 version=1, u8 activation id,
u8 layer count, (layers+1) u32 dims, then per layer float32 row-major
weights followed by float32 biases, then u32 shape count, u8 latent dim,
and the float32 per-shape reference latents.
"""

from __future__ import annotations

import struct

import numpy as np

from .training import TrainResult

FORMAT_VERSION = 1


def weights_to_bytes(result: TrainResult) -> bytes:
    cfg = result.config
    dims = cfg.layer_dims
    blob = b"SDF2"
    blob += struct.pack("<H", FORMAT_VERSION)
    blob += struct.pack("<B", cfg.activation_id)
    blob += struct.pack("<B", len(dims) - 1)
    blob += struct.pack(f"<{len(dims)}I", *dims)
    for layer in result.net.layers:
        w = layer.weight.detach().numpy().astype("<f4")
        b = layer.bias.detach().numpy().astype("<f4")
        blob += w.tobytes()
        blob += b.tobytes()
    latents = np.asarray(result.latents, dtype="<f4")
    blob += struct.pack("<I", latents.shape[0])
    blob += struct.pack("<B", cfg.d_z)
    blob += latents.tobytes()
    return blob


def export_weights(result: TrainResult, path) -> None:
    with open(path, "wb") as f:
        f.write(weights_to_bytes(result))
