"""Child/adult speaker classification from egocentric two-channel recordings."""

__version__ = "0.1.0"
