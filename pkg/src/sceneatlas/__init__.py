"""Multi-view scene decomposition into editable 2D atlases.

A scene's views are jointly explained by a coordinate mapping field and a
hash-encoded color field over two atlas squares (foreground with alpha,
background). Editing the rasterized atlases once re-renders every view, and
a tool-routing chat layer drives those edits from natural-language requests.
"""

from .errors import SceneAtlasError
from .fields import AtlasField, MappingField, composite, map_point, render_view
from .hash_grid import HashGrid, HashGridConfig
from .scene_io import (
    SceneDirectory,
    SynthSpec,
    ViewSet,
    load_checkpoint,
    load_scene,
    save_checkpoint,
    synth_scene,
)
from .training import TrainConfig, fit, total_loss

__version__ = "0.1.0"

__all__ = [
    "AtlasField",
    "HashGrid",
    "HashGridConfig",
    "MappingField",
    "SceneAtlasError",
    "SceneDirectory",
    "SynthSpec",
    "TrainConfig",
    "ViewSet",
    "composite",
    "fit",
    "load_checkpoint",
    "load_scene",
    "map_point",
    "render_view",
    "save_checkpoint",
    "synth_scene",
    "total_loss",
    "__version__",
]
