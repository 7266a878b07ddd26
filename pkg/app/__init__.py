"""Feature-guided conditional diffusion for sinogram-to-image reconstruction."""
