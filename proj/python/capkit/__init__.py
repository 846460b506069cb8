"""Python bindings for the CAP toolkit.

Images are float64 numpy arrays shaped (3, H, W) with values in [0, 1].
"""

from ._core import (
    Config,
    RunRecord,
    config_schema,
    consistency_loss,
    forward_noise,
    gram_matrix,
    identity_similarity,
    protect_images,
    read_image,
    replay,
    run,
    synth_dataset,
    write_png,
    __version__,
)

__all__ = [
    "Config",
    "RunRecord",
    "config_schema",
    "consistency_loss",
    "forward_noise",
    "gram_matrix",
    "identity_similarity",
    "protect_images",
    "read_image",
    "replay",
    "run",
    "synth_dataset",
    "write_png",
    "__version__",
]
