from .base import (Batch, Learner, LearnerConfigError, LearnerSettings, LearnerStateError,
                   LinearHead, TrainConfig)
from .coil import Coil
from .expansion import DER, Foster, Memo
from .factory import LEARNERS, UnknownLearnerError, get_learner
from .finetune import Finetune
from .icarl import ICaRL, icarl_loss, ncm_classify
from .ot import ConvergenceError, coil_transfer, sinkhorn, transport_cost
from .prompts import L2P, CodaPrompt, CodaState, DualPrompt, coda_prompt, dualprompt_forward, l2p_select
from .prototype import Adam, FitError, PrototypeHead, SimpleCIL, simplecil_fit

__all__ = [
    "Adam", "Batch", "Coil", "CodaPrompt", "CodaState", "ConvergenceError", "DER", "DualPrompt",
    "Finetune", "FitError", "Foster", "ICaRL", "L2P", "LEARNERS", "Learner", "LearnerConfigError",
    "LearnerSettings", "LearnerStateError", "LinearHead", "Memo", "PrototypeHead", "SimpleCIL",
    "TrainConfig", "UnknownLearnerError", "coda_prompt", "coil_transfer", "dualprompt_forward",
    "get_learner", "icarl_loss", "l2p_select", "ncm_classify", "simplecil_fit", "sinkhorn",
    "transport_cost",
]
