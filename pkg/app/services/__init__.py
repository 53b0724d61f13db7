"""Services wrapping core computations into response models."""
