"""Multi-modal MR survival-class prediction at synthetic-data scale.

The package layers a small reverse-mode autodiff engine (``tensor``)
under sketch-based bilinear pooling (``sketch``), volume preprocessing
(``preprocess``), the fusion network (``model``), and a cross-validation
harness (``harness``); ``data`` and ``cli`` provide the on-disk formats
and the command-line surface.
"""

__version__ = "0.1.0"

from .preprocess import OSClass, Volume3D, SubjectRecord, SupplementalFeatures  # noqa: F401
from .tensor import Tensor, Tape  # noqa: F401
from .sketch import SketchPlan, make_plan  # noqa: F401
from .model import BranchConfig, ModelConfig, ModelParams  # noqa: F401
from .harness import TrainConfig, run_cv  # noqa: F401
