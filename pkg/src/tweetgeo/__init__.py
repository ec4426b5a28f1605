"""Few-shot social post geolocation with contrastive and matching objectives."""

__version__ = "0.1.0"
