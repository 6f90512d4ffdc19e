"""Guided optical flow learning at desk scale.

Pipeline: generate synthetic frame pairs with exact ground truth, estimate
proxy flow with a classical pyramidal estimator, train a small
contractive/expanding flow network against the proxies with a multi-scale
endpoint-error loss, then fine-tune with an added photometric
reconstruction loss. Everything runs on a from-scratch reverse-mode
autodiff engine over numpy arrays.
"""

from .autodiff import AdamState, GradCheckResult, ShapeError, Tensor, adam_step, backward, gradcheck
from .dataset import (DatasetManifest, ManifestEntry, SamplePair, augment, downsample_flow,
                      generate_synthetic, iterate_batches, load_manifest)
from .flow_io import (FlowField, FormatError, Image, flow_to_color, load_flo, load_image,
                      read_flo, read_image, save_flo, save_image, write_flo, write_image)
from .losses import LossWeights, charbonnier, epe_loss, epe_metric, multiscale_loss, reconstruction_loss
from .model import (ModelConfig, ModelParams, clone_params, forward, init_model, load_checkpoint,
                    parameter_count, predict_full, save_checkpoint)
from .proxy import HSConfig, generate_proxy, horn_schunck_level, hs_energy, pyramid_flow
from .trainer import TrainConfig, TrainReport, evaluate, finetune, lr_schedule, train_guided
from .warping import SampleGrid, bilinear_gather, bilinear_sample, inverse_warp

__version__ = "0.1.0"
