"""driftlab: a desk-scale fine-tuning laboratory for studying distribution
shift and catastrophic forgetting, with input-logits self-distillation."""

from .autograd import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    gradcheck,
    no_grad,
)
from .model import (
    FeatureCapture,
    ModelConfig,
    TransformerWeights,
    forward,
    greedy_decode,
    project_logits,
)
from .lora import LoraAdapter, LoraConfig, LoraSet, lora_forward, merge, orthogonal_penalty
from .losses import (
    LossBreakdown,
    SpanMasks,
    feature_alignment_loss,
    kl_input_alignment,
    nll_loss,
    total_loss,
)
from .reference import ReferenceModel
from .tasks import (
    Corpus,
    TaskSpec,
    Tokenizer,
    TrainExample,
    encode_batch,
    gen_general,
    gen_rag,
)
from .trainer import TrainConfig, cosine_lr, adamw_step, finetune, pretrain
from .evaluation import MetricsRecord, eval_accuracy, measure_shift

__version__ = "0.1.0"
