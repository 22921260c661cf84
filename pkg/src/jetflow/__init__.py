"""jetflow: a desk-scale normalizing-flow + autoregressive-transformer image model.

The pieces compose as: pixels -> :class:`~jetflow.flow.Flow` -> factoring
(:mod:`jetflow.factoring`) -> soft tokens modelled by :class:`~jetflow.backbone.Backbone`
with a Gaussian-mixture head (:mod:`jetflow.gmm`). :class:`~jetflow.model.JetFormer`
owns all of them and computes the exact likelihood; :mod:`jetflow.engine` trains,
evaluates and samples.
"""

from .config import RunConfig
from .data import DatasetFile, SynthShapesSpec, synth_shapes
from .engine import Trainer, evaluate_bpd, load_model, sample_images
from .model import JetFormer

__all__ = ["RunConfig", "DatasetFile", "SynthShapesSpec", "synth_shapes", "Trainer", "evaluate_bpd",
           "load_model", "sample_images", "JetFormer"]
__version__ = "0.1.0"
