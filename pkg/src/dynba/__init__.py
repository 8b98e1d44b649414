"""Bundle adjustment with decoupled static/dynamic point tracks, plus dense depth refinement."""

__version__ = "0.1.0"

from .ba import BAConfig, SceneEstimate, run_sliding, solve_window  # noqa: E402
from .geometry import CameraIntrinsics, Pose, Sim3Transform, umeyama_sim3  # noqa: E402
from .refine import RefineConfig, refine  # noqa: E402
from .synth import SceneConfig, generate  # noqa: E402
from .tracks import TrackTensor, decouple  # noqa: E402

__all__ = ["BAConfig", "SceneEstimate", "run_sliding", "solve_window", "CameraIntrinsics", "Pose",
           "Sim3Transform", "umeyama_sim3", "RefineConfig", "refine", "SceneConfig", "generate",
           "TrackTensor", "decouple", "__version__"]
