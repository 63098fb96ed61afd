"""Code-switching spoken language identification at desk scale."""

__version__ = "0.1.0"

LANGUAGES = ("en", "zh")
