"""Name -> learner class lookup."""

from __future__ import annotations

from .base import Learner, LearnerConfigError, LearnerSettings
from .coil import Coil
from .expansion import DER, Foster, Memo
from .finetune import Finetune
from .icarl import ICaRL
from .prompts import L2P, CodaPrompt, DualPrompt
from .prototype import Adam, SimpleCIL

LEARNERS: dict[str, type[Learner]] = {
    "finetune": Finetune,
    "icarl": ICaRL,
    "coil": Coil,
    "der": DER,
    "foster": Foster,
    "memo": Memo,
    "simplecil": SimpleCIL,
    "l2p": L2P,
    "dualprompt": DualPrompt,
    "coda-prompt": CodaPrompt,
    "adam": Adam,
}


class UnknownLearnerError(LearnerConfigError):
    pass


def get_learner(model_name: str, settings: LearnerSettings) -> Learner:
    """Build an empty learner; names are matched case-insensitively."""
    key = str(model_name).strip().lower()
    if key not in LEARNERS:
        raise UnknownLearnerError(f"unknown model_name {model_name!r}; valid names: "
                                  f"{', '.join(LEARNERS)}")
    return LEARNERS[key](settings)
