"""Edge-conditioned diffusion codec.

Compresses images through a VAE latent, transmits the quantized code
with adaptive entropy coding, and reconstructs at the receiver with an
edge-guided diffusion denoiser; lost latent regions are concealed by
mask-clamped inpainting instead of retransmission.
"""

from .bitstream import (Bitstream, QuantizedLatent, bits_per_pixel, dequantize,
                        entropy_decode, entropy_encode, pack, quantize, unpack)
from .channel import apply_loss, attach_mask, extract_mask, random_loss_mask
from .complement import complement_latent, reconstruct
from .config import PipelineConfig, config_hash, load_config
from .diffusion import (CdsTrainConfig, DiffusionParams, NoiseSchedule,
                        denoise_from, diffusion_loss, forward_diffuse,
                        match_timestep, train_cds)
from .edge_net import EenParams, EenTrainConfig, een_losses, estimate_edges, train_een
from .errors import (ConfigError, CorruptStreamError, DegenerateInputError,
                     FormatError, ShapeError, TrainingError)
from .imaging import canny_edges, load_image, load_mask, save_image, save_mask
from .metrics import (MetricsRecord, center_disk_mask, masked_metrics, psnr,
                      run_rd_sweep, ssim, ssim_map)
from .vae import VaeParams, VaeTrainConfig, train_vae, vae_decode, vae_encode

__version__ = "0.1.0"
