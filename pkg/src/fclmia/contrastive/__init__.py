from .checkpoint import ckpt_name, list_checkpoints, load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, encode, init_params
from .moco import (
    MoCoState,
    enqueue,
    fill_queue,
    info_nce,
    info_nce_loss,
    init_state,
    local_train,
    momentum_update,
    per_sample_loss,
    sample_losses,
    symmetric_loss,
)
from .params import ParamVector
