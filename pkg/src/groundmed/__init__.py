"""Visual grounding for medical vision-language models at desk scale."""

__version__ = "0.1.0"
