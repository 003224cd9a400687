"""Layer-wise probing and layer-group fine-tuning lab for a toy vision-language model."""

__version__ = "0.1.0"  # Matches pyproject.toml version
