"""Neural-collapse lab: small bias-free MLPs, cosine NC metrics and proximity bounds."""

__version__ = "0.1.0"
