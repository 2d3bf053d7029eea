"""Zero-shot teacher/student knowledge transfer at desk scale.

A pretrained teacher is distilled into a smaller student without any
training data: an adversarial generator proposes pseudo-inputs where the
two networks disagree, and the student is trained to agree on them. The
package also ships a decision-boundary belief probe (transition curves and
the mean transition error metric), reference baselines, and a small
float64 autodiff engine that everything runs on.
"""

import importlib

__all__ = [
    "autodiff", "baselines", "checkpoint", "config", "data", "engine",
    "losses", "nets", "optim", "plots", "probe", "report",
]


def __getattr__(name):
    if name in __all__:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
