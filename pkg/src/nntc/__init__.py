"""Variable-rate neural image codec for small images.

Trainable residual autoencoders with a stochastic binary bottleneck,
a bit-exact progressive bitstream, and an SSIM evaluation harness.
"""

from .autodiff import ConvSpec, Tensor, backward, finite_diff_check
from .binarizer import BinarizerLayer, NoiseSource, binarize_inference, binarize_stochastic
from .cells import ConvLstmCell, DeconvLstmCell, FcLstmCell, LstmState, reset_state
from .codec import (Bitstream, BitstreamHeader, QualityTarget, decode_image,
                    decode_progressive, deserialize, encode_dynamic, encode_image,
                    encode_with_budget, serialize)
from .metrics import RdPoint, SsimReport, psnr, rd_curve, ssim_image, ssim_patch
from .models import (ModelConfig, ResidualChainModel, StageOutput, build_model,
                     decode_only, reconstruct, run_chain)
from .training import (AdamState, Dataset, DatasetSpec, TrainConfig, adam_update,
                       extract_patches, ingest_images, load_checkpoint,
                       model_fingerprint, save_checkpoint, scale_to_network,
                       stitch_patches, train_loop, train_step, unscale_from_network)

__version__ = "0.1.0"
