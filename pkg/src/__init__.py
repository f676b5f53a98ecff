"""
Truth-Maximized Diffusion Classifier - Source Code Package

Core library behind the experiment pipeline.

Modules:
    - tensor_core: float64 tensors, compute tape, validated primitives, RNG streams
    - models: denoiser, discriminative MLP, LoRA-capable affine layers
    - diffusion: noise schedule, forward noising, diffusion loss, training, sampling
    - classifier: Monte Carlo diffusion classifier and staged label elimination
    - attacks: FGSM, PGD, restart PGD, transfer and direct attack datasets
    - baseline: discriminative baselines and adversarial training
    - tm_trainer: Truth Maximization fine-tuning and checkpoint selection
    - data, training, checkpoint: datasets, optimizer helpers, TMDC checkpoints
"""

__version__ = "0.1.0"
