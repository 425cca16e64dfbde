"""EEG-conditioned image generation at desk scale.

Two training stages: (1) contrastive alignment of an EEG encoder into a
frozen image-text embedding space, (2) FiLM-adapter injection of EEG
embeddings into a small text-conditional diffusion model, sampled with
classifier-free guidance and DDIM.
"""

__version__ = "0.1.0"
