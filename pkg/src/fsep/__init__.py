"""Few-shot episodic training of prototypical networks on a small numpy autodiff core."""

__version__ = "0.1.0"

from .data import Dataset, augment_rotations, load_image_folder, split, synth_gaussians  # noqa: E402
from .embed import EmbedderSpec, convnet4, init_params, mlp  # noqa: E402
from .episodes import Rng, count_task_classes, count_task_examples_per_class, sample_episode  # noqa: E402
from .evalreport import EvalReport, evaluate  # noqa: E402
from .spectrum import top_eigenvalues  # noqa: E402
from .train import TrainConfig, pretrain_then_finetune, train  # noqa: E402

__all__ = [
    "Dataset",
    "EmbedderSpec",
    "EvalReport",
    "Rng",
    "TrainConfig",
    "augment_rotations",
    "convnet4",
    "count_task_classes",
    "count_task_examples_per_class",
    "evaluate",
    "init_params",
    "load_image_folder",
    "mlp",
    "pretrain_then_finetune",
    "sample_episode",
    "split",
    "synth_gaussians",
    "top_eigenvalues",
    "train",
]
