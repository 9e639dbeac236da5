"""Deep masking generative network for single-image layer separation, at desk scale."""

from .autodiff import NumericFault, ShapeError, Tape, Tensor
from .metrics import psnr, ssim
from .net import ModelConfig, Wiring, dmgn_forward, init_params, wiring_for
from .synth import SynthesisConfig, corpus_read, corpus_write, generate_corpus
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
